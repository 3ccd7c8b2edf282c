"""Shared domain types, configuration and seeded randomness."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

EPS_T = 1e-6  # lower clamp for transition probabilities
EPS_NORM = 1e-12  # guard for zero-length embeddings
INIT_STD = 0.1
T_FALLBACK = 0.5
DEFAULT_CUTOFFS = (10, 50, 100, 200)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent hyperparameter configs."""


class DataError(ValueError):
    """Raised for malformed interaction data."""


class NumericError(RuntimeError):
    """Raised when training produces non-finite values."""


def default_lambda(K: int) -> tuple:
    if K == 3:
        return (1 / 6, 4 / 6, 1 / 6)
    return tuple([1.0 / K] * K)


@dataclass
class HyperParams:
    d: int = 64
    M: int = 4
    w: float = 0.1
    lambda_: Optional[tuple] = None
    lr: float = 0.05
    batch_size: int = 256
    dropout: float = 0.5
    epochs: int = 100
    seed: int = 0
    cutoffs: tuple = DEFAULT_CUTOFFS

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if not self.w > 0:
            raise ConfigError("w must be > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        self.cutoffs = tuple(int(n) for n in self.cutoffs)
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ConfigError("cutoffs must be a nonempty list of positive integers")
        if self.lambda_ is not None:
            lam = np.asarray(self.lambda_, dtype=float)
            if lam.ndim != 1 or lam.size == 0 or np.any(lam < 0) or lam.sum() <= 0:
                raise ConfigError("lambda must be a nonempty vector of non-negative weights")
            self.lambda_ = tuple(float(x) for x in lam / lam.sum())

    def lambdas(self, K: int) -> np.ndarray:
        """MTL weights for ``K`` levels, normalized to sum to one."""
        lam = self.lambda_ if self.lambda_ is not None else default_lambda(K)
        if len(lam) != K:
            raise ConfigError(f"lambda has {len(lam)} entries but the data has K={K} levels")
        lam = np.asarray(lam, dtype=float)
        return lam / lam.sum()

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            key = "lambda" if f.name == "lambda_" else f.name
            val = getattr(self, f.name)
            out[key] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "HyperParams":
        names = {("lambda" if f.name == "lambda_" else f.name): f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, val in raw.items():
            if key in ("lambda", "cutoffs") and val is not None:
                if not isinstance(val, (list, tuple)):
                    raise ConfigError(f"config key {key!r} must be a list")
                val = tuple(val)
            kwargs[names[key]] = val
        for key in ("d", "M", "batch_size", "epochs", "seed"):
            if key in kwargs and (isinstance(kwargs[key], bool) or not isinstance(kwargs[key], int)):
                raise ConfigError(f"config key {key!r} must be an integer")
        for key in ("w", "lr", "dropout"):
            if key in kwargs and not isinstance(kwargs[key], (int, float)):
                raise ConfigError(f"config key {key!r} must be a number")
        return cls(**kwargs)


def load_config(path) -> HyperParams:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat JSON object")
    return HyperParams.from_dict(raw)


class Rng:
    """Seeded generator wrapping numpy's PCG64.

    PCG64 streams are identical across platforms for a given seed. Child
    streams for independent experiments come from ``spawn``.
    """

    def __init__(self, seed: int = 0, _seq: Optional[np.random.SeedSequence] = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list:
        return [Rng(self.seed, s) for s in self._seq.spawn(n)]

    def child(self, key: int) -> "Rng":
        """Deterministic sub-stream identified by ``key``."""
        return Rng(self.seed, np.random.SeedSequence([self.seed, int(key)]))

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


class InteractionDataset:
    """Users x items x K ordered behavior levels of implicit feedback.

    ``levels[k]`` is a boolean CSR matrix, level 0 being the lowest behavior
    and ``levels[K-1]`` the target behavior.
    """

    def __init__(self, num_users: int, num_items: int, levels: Sequence[sparse.csr_matrix],
                 user_ids=None, item_ids=None):
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.levels = [sparse.csr_matrix(m, dtype=bool, shape=(self.num_users, self.num_items))
                       for m in levels]
        for m in self.levels:
            m.sum_duplicates()
            m.sort_indices()
        self.user_ids = list(range(self.num_users)) if user_ids is None else list(user_ids)
        self.item_ids = list(range(self.num_items)) if item_ids is None else list(item_ids)

    @property
    def K(self) -> int:
        return len(self.levels)

    @classmethod
    def from_pairs(cls, num_users: int, num_items: int, pairs_per_level, **kw) -> "InteractionDataset":
        mats = []
        for pairs in pairs_per_level:
            pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
            data = np.ones(len(pairs), dtype=bool)
            mats.append(sparse.csr_matrix((data, (pairs[:, 0], pairs[:, 1])),
                                          shape=(num_users, num_items), dtype=bool))
        return cls(num_users, num_items, mats, **kw)

    def pairs(self, k: int) -> np.ndarray:
        """(n, 2) array of (user, item) positives at level ``k`` (0-based), row-major order."""
        coo = self.levels[k].tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    def user_items(self, k: int, u: int) -> np.ndarray:
        m = self.levels[k]
        return m.indices[m.indptr[u]:m.indptr[u + 1]].astype(np.int64)

    def counts(self) -> list:
        return [int(m.nnz) for m in self.levels]

    def user_counts(self, k: int) -> np.ndarray:
        return np.diff(self.levels[k].indptr)

    def dense_labels(self, users: np.ndarray) -> np.ndarray:
        """Boolean (K, B, V) label block for a batch of users."""
        return np.stack([m[users].toarray() for m in self.levels])

    def copy_with_levels(self, levels) -> "InteractionDataset":
        return InteractionDataset(self.num_users, self.num_items, levels,
                                  user_ids=self.user_ids, item_ids=self.item_ids)


@dataclass
class ValidationReport:
    valid: bool
    level_counts: list
    bound_violations: list = field(default_factory=list)
    containment_violations: list = field(default_factory=list)


def validate_dataset(ds: InteractionDataset) -> ValidationReport:
    bounds, contain = [], []
    for k, m in enumerate(ds.levels):
        if m.shape != (ds.num_users, ds.num_items):
            bounds.append((k + 1, f"shape {m.shape} != ({ds.num_users}, {ds.num_items})"))
    for k in range(ds.K - 1):
        lo, hi = ds.levels[k], ds.levels[k + 1]
        extra = hi.astype(np.int8) - hi.multiply(lo).astype(np.int8)
        extra.eliminate_zeros()
        coo = extra.tocoo()
        for u, v in sorted(zip(coo.row.tolist(), coo.col.tolist())):
            contain.append((k + 2, u, v))
    if ds.K < 1:
        bounds.append((0, "dataset has no behavior levels"))
    return ValidationReport(valid=not bounds and not contain, level_counts=ds.counts(),
                            bound_violations=bounds, containment_violations=contain)


@dataclass
class ModelParams:
    """Embeddings and prediction parameters.

    ``P`` is (M, U, d), ``Q`` is (V, d). The chain model uses one prediction
    vector (``H`` of shape (1, d)) and transitions ``T`` of shape (K-1, V);
    the independent-heads variant uses ``H`` of shape (K, d) and no ``T``.
    """

    P: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    T: np.ndarray
    variant: str = "full"

    @property
    def h(self) -> np.ndarray:
        return self.H[0]

    @property
    def M(self) -> int:
        return self.P.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[0] if self.variant == "CP" else self.T.shape[0] + 1

    def blocks(self) -> dict:
        return {"P": self.P, "Q": self.Q, "H": self.H, "T": self.T}

    def copy(self) -> "ModelParams":
        return ModelParams(self.P.copy(), self.Q.copy(), self.H.copy(), self.T.copy(), self.variant)

    def check(self) -> None:
        for name, arr in self.blocks().items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite entries in parameter block {name}")
        if self.T.size and (self.T.min() < EPS_T or self.T.max() > 1.0):
            raise NumericError("transition probabilities left [eps_T, 1]")


def init_params(hp: HyperParams, ds: InteractionDataset, rng: Rng, variant: str = "full") -> ModelParams:
    from .data import estimate_transitions

    g = rng.gen
    M = 1 if variant == "IM" else hp.M
    P = g.normal(0.0, INIT_STD, size=(M, ds.num_users, hp.d))
    Q = g.normal(0.0, INIT_STD, size=(ds.num_items, hp.d))
    if variant == "CP":
        H = g.normal(0.0, INIT_STD, size=(ds.K, hp.d))
        T = np.zeros((0, ds.num_items))
    else:
        H = g.normal(0.0, INIT_STD, size=(1, hp.d))
        est = estimate_transitions(ds)
        T = np.where(est.defined, est.p_hat, T_FALLBACK)
        T = np.clip(T, EPS_T, 1.0)
    return ModelParams(P, Q, H, T, "CP" if variant == "CP" else "full")
