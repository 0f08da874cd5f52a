"""Swin-T encoder for single-channel spectrogram inputs.

Parameters live in an ``nn.Module``; ``param_tree`` exposes them as a flat
``{dotted.name: tensor}`` mapping, which is what the momentum update and the
checkpoint writer operate on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

ParamTree = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class SwinConfig:
    input_size: int = 256
    patch_size: int = 4
    in_chans: int = 1
    embed_dim: int = 96
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    heads: Tuple[int, ...] = (3, 6, 12, 24)
    window: int = 8
    mlp_ratio: float = 4.0
    drop_path_max: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must have the same length")
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h:
                raise ValueError(f"stage {i} width {self.embed_dim * 2**i} not divisible by {h} heads")
        for i, res in enumerate(self.stage_resolutions()):
            if res % min(self.window, res):
                raise ValueError(f"stage {i} grid {res} not divisible by window {self.window}")

    def stage_resolutions(self):
        res = self.input_size // self.patch_size
        return [res // 2**i for i in range(len(self.depths))]

    @property
    def num_features(self) -> int:
        return self.embed_dim * 2 ** (len(self.depths) - 1)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, window * window, C)."""
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // window, W // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def shifted_window_mask(H: int, W: int, window: int, shift: int) -> torch.Tensor:
    """Boolean (nW, N, N) mask, True where two tokens come from different pre-roll regions."""
    region = torch.zeros(1, H, W, 1)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            region[:, hs, ws, :] = cnt
            cnt += 1
    ids = window_partition(region, window).squeeze(-1)
    return ids[:, :, None] != ids[:, None, :]


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("relative_position_index", relative_position_index(window).view(-1), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, return_attn: bool = False):
        # x: (B * nW, N, C); mask: (nW, N, N) bool
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index].view(N, N, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.heads, N, N)
            attn = attn.masked_fill(mask[None, :, None], float("-inf"))
            attn = attn.view(Bw, self.heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        out = self.proj(out)
        if return_attn:
            return out, attn
        return out


def drop_path(x: torch.Tensor, rate: float, training: bool, generator: Optional[torch.Generator] = None):
    if rate <= 0.0 or not training:
        return x
    if rate >= 1.0:
        return torch.zeros_like(x)
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    u = torch.rand(shape, generator=generator, dtype=x.dtype, device=x.device)
    return x * (u < keep).to(x.dtype) / keep


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, resolution: int, heads: int, window: int, shift: int,
                 mlp_ratio: float, drop_path_rate: float):
        super().__init__()
        if resolution <= window:
            # a single window covers the grid; shifting would only add masking
            window, shift = resolution, 0
        self.window = window
        self.shift = shift
        self.resolution = resolution
        self.drop_path_rate = drop_path_rate
        self.generator: Optional[torch.Generator] = None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if shift:
            self.register_buffer("attn_mask", shifted_window_mask(resolution, resolution, window, shift),
                                 persistent=False)
        else:
            self.attn_mask = None

    def attention(self, x: torch.Tensor, return_attn: bool = False):
        """Windowed attention on a (B, H, W, C) grid, with the cyclic shift if configured."""
        B, H, W, C = x.shape
        if H % self.window or W % self.window:
            raise ValueError(f"grid {H}x{W} not divisible by window {self.window}")
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        res = self.attn(window_partition(x, self.window), mask=self.attn_mask, return_attn=return_attn)
        out, attn = res if return_attn else (res, None)
        out = window_reverse(out, self.window, H, W)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift, self.shift), dims=(1, 2))
        return (out, attn) if return_attn else out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + drop_path(self.attention(self.norm1(x)), self.drop_path_rate, self.training, self.generator)
        x = x + drop_path(self.mlp(self.norm2(x)), self.drop_path_rate, self.training, self.generator)
        return x


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"cannot merge odd grid {H}x{W}")
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5).flatten(3)
        return self.reduction(self.norm(x))


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.patch_size or x.shape[-2] % self.patch_size:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by patch {self.patch_size}")
        return self.norm(self.proj(x).permute(0, 2, 3, 1))


class SwinTransformer(nn.Module):
    """Hierarchical encoder returning the pooled ``num_features``-dim representation."""

    def __init__(self, cfg: SwinConfig = SwinConfig()):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_chans, cfg.embed_dim)
        rates = torch.linspace(0, cfg.drop_path_max, sum(cfg.depths)).tolist()
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        i = 0
        for s, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
            dim = cfg.embed_dim * 2**s
            res = cfg.stage_resolutions()[s]
            blocks = nn.ModuleList(
                SwinBlock(dim, res, heads, cfg.window, 0 if b % 2 == 0 else cfg.window // 2,
                          cfg.mlp_ratio, rates[i + b])
                for b in range(depth)
            )
            i += depth
            self.stages.append(blocks)
            if s < len(cfg.depths) - 1:
                self.merges.append(PatchMerging(dim))
        self.norm = nn.LayerNorm(cfg.num_features)

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def set_generator(self, generator: Optional[torch.Generator]) -> None:
        for blk in self.blocks():
            blk.generator = generator

    def forward_grid(self, x: torch.Tensor):
        """Token grids after patch embedding and after each stage."""
        if x.ndim == 3:
            x = x.unsqueeze(1)
        grids = []
        x = self.patch_embed(x)
        grids.append(x)
        for s, stage in enumerate(self.stages):
            for blk in stage:
                x = blk(x)
            grids.append(x)
            if s < len(self.merges):
                x = self.merges[s](x)
        return grids

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.forward_grid(x)[-1]
        return self.norm(x).mean(dim=(1, 2))


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Truncated-normal(0.02) weights, zero biases and position tables, unit norm scales."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or "relative_position_bias_table" in name:
                p.zero_()
            elif _is_norm_param(model, name):
                p.fill_(1.0)
            else:
                _trunc_normal_(p, 0.02, g)
    return model


def _trunc_normal_(t: torch.Tensor, std: float, g: torch.Generator) -> None:
    # resample anything outside +/- 2 std
    vals = torch.randn(t.shape, generator=g, dtype=torch.float64)
    bad = vals.abs() > 2
    while bad.any():
        vals[bad] = torch.randn(int(bad.sum()), generator=g, dtype=torch.float64)
        bad = vals.abs() > 2
    t.copy_(vals * std)


def _is_norm_param(model: nn.Module, name: str) -> bool:
    owner = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
    return isinstance(owner, nn.LayerNorm)


def no_decay(name: str) -> bool:
    """Parameters excluded from weight decay: biases, norm scales, position-bias tables."""
    return (name.endswith(".bias") or "norm" in name.rsplit(".", 1)[0].rsplit(".", 1)[-1]
            or "relative_position_bias_table" in name)


def param_tree(model: nn.Module) -> ParamTree:
    return {k: v for k, v in model.named_parameters()}


def param_schema(model: nn.Module) -> Dict[str, Tuple[int, ...]]:
    return {k: tuple(v.shape) for k, v in model.named_parameters()}


def expected_param_count(cfg: SwinConfig) -> int:
    """Closed-form parameter count, independent of module construction."""
    C, p = cfg.embed_dim, cfg.patch_size
    total = cfg.in_chans * p * p * C + C + 2 * C  # conv + bias + norm
    for s, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
        d = C * 2**s
        res = cfg.stage_resolutions()[s]
        w = min(cfg.window, res)
        hidden = int(d * cfg.mlp_ratio)
        per_block = (2 * d  # norm1
                     + (2 * w - 1) ** 2 * heads
                     + d * 3 * d + 3 * d
                     + d * d + d
                     + 2 * d  # norm2
                     + d * hidden + hidden + hidden * d + d)
        total += depth * per_block
        if s < len(cfg.depths) - 1:
            total += 2 * 4 * d + 4 * d * 2 * d
    total += 2 * cfg.num_features
    return total
