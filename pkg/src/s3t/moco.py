"""Momentum contrast: projection head, key queue, momentum update and InfoNCE."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ParamTree, SwinConfig, SwinTransformer, init_params, no_decay, param_tree
from .optim import AdamState, optimizer_step


class DegenerateEmbedding(ValueError):
    pass


@dataclass(frozen=True)
class MoCoConfig:
    queue_size: int = 65536
    momentum: float = 0.999
    temperature: float = 0.2
    proj_hidden: int = 768
    proj_dim: int = 128
    symmetric: bool = False

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int = 768, hidden: int = 768, out_dim: int = 128,
                 activation: str = "relu", bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, bias=bias)
        self.act = nn.ReLU() if activation == "relu" else nn.Identity()
        self.fc2 = nn.Linear(hidden, out_dim, bias=bias)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def l2_normalize(z: torch.Tensor) -> torch.Tensor:
    norm = z.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise DegenerateEmbedding("projection produced a zero vector; cannot normalize")
    return z / norm


def project(raw: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return l2_normalize(head(raw))


class Encoder(nn.Module):
    """Backbone followed by the projection head; ``forward`` returns unit embeddings."""

    def __init__(self, swin: SwinConfig, moco: MoCoConfig):
        super().__init__()
        self.backbone = SwinTransformer(swin)
        self.head = ProjectionHead(swin.num_features, moco.proj_hidden, moco.proj_dim)

    def forward(self, x):
        return project(self.backbone(x), self.head)


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, queue: torch.Tensor, temperature: float):
    """Per-sample InfoNCE with the positive at logit index 0.

    Returns ``(losses, logits)`` with shapes ``(B,)`` and ``(B, K + 1)``. The
    queue is detached; gradients reach only ``q`` and ``k_pos``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    squeeze = q.ndim == 1
    if squeeze:
        q, k_pos = q[None], k_pos[None]
    pos = (q * k_pos).sum(dim=-1, keepdim=True)
    neg = q @ queue.detach().t()
    logits = torch.cat([pos, neg], dim=1) / temperature
    losses = torch.logsumexp(logits, dim=1) - logits[:, 0]
    if squeeze:
        return losses[0], logits[0]
    return losses, logits


@torch.no_grad()
def momentum_update(key: ParamTree, query: ParamTree, m: float) -> ParamTree:
    """Return ``m * key + (1 - m) * query`` tensor by tensor."""
    if key.keys() != query.keys():
        raise ValueError("key and query parameter schemas differ")
    out = {}
    for name, k in key.items():
        qv = query[name]
        if k.shape != qv.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(k.shape)} vs {tuple(qv.shape)}")
        out[name] = m * k + (1.0 - m) * qv
    return out


@torch.no_grad()
def momentum_update_(key_model: nn.Module, query_model: nn.Module, m: float) -> None:
    key_p = param_tree(key_model)
    new = momentum_update({k: v.detach() for k, v in key_p.items()},
                          {k: v.detach() for k, v in param_tree(query_model).items()}, m)
    for name, p in key_p.items():
        p.copy_(new[name])


@dataclass
class MoCoState:
    query: Encoder
    key: Encoder
    queue: torch.Tensor
    queue_ptr: int = 0
    momentum: float = 0.999
    temperature: float = 0.2
    optimizer: AdamState = field(default_factory=AdamState)
    steps: int = 0
    keys_seen: int = 0
    symmetric: bool = False

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]

    def query_params(self) -> ParamTree:
        return param_tree(self.query)

    def key_params(self) -> ParamTree:
        return param_tree(self.key)


def random_unit_queue(K: int, dim: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    return F.normalize(torch.randn(K, dim, generator=generator, dtype=torch.float64), dim=1).to(dtype)


def init_state(swin: SwinConfig, moco: MoCoConfig, seed: int = 0, dtype=torch.float32) -> MoCoState:
    torch.manual_seed(seed)
    query = init_params(Encoder(swin, moco), seed).to(dtype)
    key = copy.deepcopy(query)
    for p in key.parameters():
        p.requires_grad_(False)
    key.eval()
    g = torch.Generator().manual_seed(seed + 1)
    queue = random_unit_queue(moco.queue_size, moco.proj_dim, g, dtype)
    return MoCoState(query, key, queue, 0, moco.momentum, moco.temperature,
                     AdamState.zeros_like(param_tree(query)), symmetric=moco.symmetric)


def enqueue_dequeue(state: MoCoState, keys: torch.Tensor) -> MoCoState:
    """Overwrite the oldest ``B`` rows with ``keys`` and advance the pointer."""
    K, B = state.queue_size, keys.shape[0]
    if K % B:
        raise ValueError(f"batch of {B} keys does not divide queue size {K}")
    state.queue[state.queue_ptr:state.queue_ptr + B] = keys.detach().to(state.queue.dtype)
    state.queue_ptr = (state.queue_ptr + B) % K
    state.keys_seen += B
    return state


@torch.no_grad()
def encode_keys(state: MoCoState, x: torch.Tensor, chunk: int = 8) -> torch.Tensor:
    state.key.eval()
    return torch.cat([state.key(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)])


def contrastive_losses(state: MoCoState, xq: torch.Tensor, keys: torch.Tensor):
    """Per-sample losses and logits for queries ``xq`` against precomputed ``keys``."""
    q = state.query(xq)
    return info_nce(q, keys, state.queue, state.temperature)


def pretrain_step(state: MoCoState, xq: torch.Tensor, xk: torch.Tensor, lr: float,
                  weight_decay: float = 0.05, generator: Optional[torch.Generator] = None,
                  microbatch: int = 8) -> Dict[str, float]:
    """One MoCo update: encode, InfoNCE, AdamW on the query encoder, momentum, enqueue.

    ``xq`` and ``xk`` are ``(B, 1, S, S)`` batches of query and key views. Gradients
    are accumulated over ``microbatch``-sized chunks; since the loss is a mean of
    independent per-sample terms this equals the full-batch gradient.
    """
    B = xq.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if state.queue_size % B:
        raise ValueError(f"batch size {B} does not divide queue size {state.queue_size}")
    warm = state.keys_seen < state.queue_size
    k_k = encode_keys(state, xk, microbatch)
    pairs = [(xq, k_k)]
    if state.symmetric:
        pairs.append((xk, encode_keys(state, xq, microbatch)))
    state.query.train()
    state.query.backbone.set_generator(generator)
    params = state.query_params()
    for p in params.values():
        p.grad = None
    total, pos_sum = 0.0, 0.0
    scale = 1.0 / (B * len(pairs))
    for x, keys in pairs:
        for i in range(0, B, microbatch):
            losses, logits = contrastive_losses(state, x[i:i + microbatch], keys[i:i + microbatch])
            (losses.sum() * scale).backward()
            total += float(losses.detach().sum())
            pos_sum += float(logits[:, 0].detach().sum())
    state.query.backbone.set_generator(None)
    grads = {k: p.grad for k, p in params.items()}
    optimizer_step({k: p.data for k, p in params.items()}, grads, state.optimizer, lr, weight_decay,
                   no_decay)
    for p in params.values():
        p.grad = None
    momentum_update_(state.key, state.query, state.momentum)
    enqueue_dequeue(state, k_k)
    state.steps += 1
    return {
        "loss": total * scale,
        "pos_logit_mean": pos_sum * scale,
        "lr": lr,
        "queue_saturation": min(1.0, state.keys_seen / state.queue_size),
        "warm": warm,
    }
