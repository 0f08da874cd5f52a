"""Shared tiny configurations and numeric oracles for the test suite."""
import math

import numpy as np
import torch

from s3t.audio import Spectrogram
from s3t.backbone import SwinConfig
from s3t.moco import MoCoConfig, init_state, info_nce

TINY_SWIN = SwinConfig(input_size=16, patch_size=4, embed_dim=8, depths=(1, 1), heads=(1, 2), window=2,
                       drop_path_max=0.0)
TINY_MOCO = MoCoConfig(queue_size=8, momentum=0.9, temperature=0.2, proj_hidden=32, proj_dim=4)


def tiny_state(seed=0, dtype=torch.float64, **moco):
    cfg = MoCoConfig(**{**TINY_MOCO.__dict__, **moco})
    return init_state(TINY_SWIN, cfg, seed, dtype)


def random_specs(n, F=84, T=40, seed=0):
    rng = np.random.default_rng(seed)
    return [Spectrogram(rng.random((F, T)).astype(np.float32), 1.0) for _ in range(n)]


def infonce_fd_check(seed=0, h=1e-6):
    """Worst relative error between autograd and central differences of the InfoNCE
    loss with respect to every query-encoder parameter of the tiny float64 model."""
    state = tiny_state(seed)
    with torch.no_grad():
        for p in state.query.parameters():
            p.add_(0.05 * torch.randn(p.shape, dtype=p.dtype, generator=torch.Generator().manual_seed(seed)))
    g = torch.Generator().manual_seed(seed + 7)
    xq = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64)
    keys = torch.nn.functional.normalize(torch.randn(2, 4, generator=g, dtype=torch.float64), dim=1)
    state.query.eval()

    def loss():
        return info_nce(state.query(xq), keys, state.queue, state.temperature)[0].mean()

    params = [p for p in state.query.parameters()]
    grads = torch.autograd.grad(loss(), params)
    worst = 0.0
    with torch.no_grad():
        for p, gr in zip(params, grads):
            flat, gflat = p.view(-1), gr.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - gflat[i].item()) / (1e-3 + abs(fd)))
    return worst, sum(p.numel() for p in params)


def ap_bruteforce(scores, labels):
    """Average precision by walking every distinct threshold from high to low."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    P = labels.sum()
    ap, prev_r = 0.0, 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= thr
        tp = (sel & labels).sum()
        r, prec = tp / P, tp / sel.sum()
        ap += (r - prev_r) * prec
        prev_r = r
    return ap


def auc_bruteforce(scores, labels):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    pos, neg = scores[labels], scores[~labels]
    total = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def ln_k_plus_1(K):
    return math.log(K + 1)
