"""Forward pass: identity matching over M user identities, then the transition chain.

Per-pair functions (``identity_score``, ``first_level_score``) are direct
transcriptions used as references; batch work goes through ``forward``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .core import EPS_NORM, ModelParams


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / max(float(np.linalg.norm(v)), EPS_NORM)


def normalize_rows(X: np.ndarray):
    """Row-normalize along the last axis; returns (X_hat, norms)."""
    norms = np.linalg.norm(X, axis=-1)
    return X / np.maximum(norms, EPS_NORM)[..., None], norms


def identity_score(u, v, m, params: ModelParams, mask: Optional[np.ndarray] = None, level: int = 0) -> float:
    """ReLU(h . (p_hat * q_hat)); ``mask`` is an inverted-dropout multiplier vector."""
    prod = normalize(params.P[m, u]) * normalize(params.Q[v])
    if mask is not None:
        prod = prod * mask
    return max(float(params.H[level] @ prod), 0.0)


def first_level_score(u, v, params: ModelParams, mask=None, level: int = 0):
    """(max over identities, argmax), ties resolved to the smallest identity."""
    scores = [identity_score(u, v, m, params, mask, level) for m in range(params.M)]
    best = int(np.argmax(scores))
    return scores[best], best


def chain_scores(u, params: ModelParams, mask=None) -> np.ndarray:
    """(K, V) per-level scores of user ``u``; ``mask`` is (V, d) or None."""
    V = params.Q.shape[0]
    out = np.zeros((params.K, V))
    for v in range(V):
        mv = None if mask is None else mask[v]
        if params.variant == "CP":
            for k in range(params.K):
                out[k, v] = first_level_score(u, v, params, mv, level=k)[0]
        else:
            out[0, v] = first_level_score(u, v, params, mv)[0]
    if params.variant != "CP":
        for k in range(params.K - 1):
            out[k + 1] = out[k] * params.T[k]
    return out


def max_normalized(scores: np.ndarray) -> np.ndarray:
    """Diagnostic: scale a user's score vector by its maximum (zero vector stays zero)."""
    top = scores.max(axis=-1, keepdims=True)
    return np.divide(scores, top, out=np.zeros_like(scores), where=top > 0)


@dataclass
class ForwardTrace:
    users: np.ndarray
    phat: np.ndarray  # (M, B, d)
    pnorm: np.ndarray  # (M, B)
    qhat: np.ndarray  # (V, d)
    qnorm: np.ndarray  # (V,)
    keep: Optional[np.ndarray]  # (B, V, d) uint8
    scale: float
    R1: np.ndarray  # (L, B, V) identity-matching output
    arg: np.ndarray  # (L, B, V)
    R: np.ndarray  # (K, B, V) per-level scores


def dropout_mask(rng, shape, rho: float):
    if rho <= 0:
        return None, 1.0
    keep = (rng.gen.random(shape) >= rho).astype(np.uint8)
    return keep, 1.0 / (1.0 - rho)


def forward(params: ModelParams, users, keep=None, scale=1.0, num_threads=1, backend=None) -> ForwardTrace:
    users = np.asarray(users, dtype=np.int64)
    phat, pnorm = normalize_rows(params.P[:, users])
    qhat, qnorm = normalize_rows(params.Q)
    phat = np.ascontiguousarray(phat)
    R1, arg = kernels.match_forward(phat, qhat, np.ascontiguousarray(params.H), keep, scale,
                                    num_threads, backend=backend)
    if params.variant == "CP":
        R = R1
    else:
        R = np.empty((params.K,) + R1.shape[1:])
        R[0] = R1[0]
        for k in range(params.K - 1):
            R[k + 1] = R[k] * params.T[k]
    return ForwardTrace(users, phat, pnorm, qhat, qnorm, keep, scale, R1, arg, R)


def score_users(params: ModelParams, users, num_threads=1, backend=None) -> np.ndarray:
    """Eval-mode target-level scores, (B, V)."""
    return forward(params, users, num_threads=num_threads, backend=backend).R[-1]


def score_all_items(u, params: ModelParams) -> np.ndarray:
    return score_users(params, [u])[0]
