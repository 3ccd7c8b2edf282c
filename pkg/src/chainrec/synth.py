"""Synthetic multi-behavior data with planted user identities and item transitions."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .core import ConfigError, HyperParams, InteractionDataset, Rng
from .data import leave_one_out_split
from .evaluation import evaluate


@dataclass
class SynthConfig:
    """Generator knobs.

    Level-1 probability is ``clip(link_slope * s + link_intercept, 0, 1)`` with
    ``s = max_m <taste_m, item> + noise * N(0, 1)``. Each higher level keeps a
    level-k pair with the item's true transition probability, drawn
    uniformly from ``transition_ranges[k]`` once per item.
    """

    num_users: int = 200
    num_items: int = 100
    latent_dim: int = 8
    num_identities: int = 2
    link_slope: float = 1.5
    link_intercept: float = -0.3
    transition_ranges: list = field(default_factory=lambda: [[0.2, 0.9], [0.2, 0.9]])
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ConfigError("synthetic data needs at least one user and one item")
        if self.num_identities < 1 or self.latent_dim < 1:
            raise ConfigError("num_identities and latent_dim must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        for lo, hi in self.transition_ranges:
            if not 0 <= lo <= hi <= 1:
                raise ConfigError("transition ranges must satisfy 0 <= lo <= hi <= 1")

    @property
    def K(self) -> int:
        return len(self.transition_ranges) + 1

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {', '.join(unknown)}")
        return cls(**raw)


@dataclass
class GroundTruth:
    tastes: np.ndarray  # (U, M*, latent)
    items: np.ndarray  # (V, latent)
    transitions: np.ndarray  # (K-1, V)
    level1_prob: np.ndarray  # (U, V)

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}


def _unit(g, shape):
    x = g.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate(cfg: SynthConfig):
    """Returns (InteractionDataset, GroundTruth); containment holds by construction."""
    g = Rng(cfg.seed).gen
    U, V = cfg.num_users, cfg.num_items
    tastes = _unit(g, (U, cfg.num_identities, cfg.latent_dim))
    items = _unit(g, (V, cfg.latent_dim))
    trans = np.array([g.uniform(lo, hi, size=V) for lo, hi in cfg.transition_ranges]).reshape(-1, V)
    score = np.einsum("umd,vd->umv", tastes, items).max(axis=1)
    if cfg.noise > 0:
        score = score + cfg.noise * g.normal(size=score.shape)
    p1 = np.clip(cfg.link_slope * score + cfg.link_intercept, 0.0, 1.0)
    current = g.random((U, V)) < p1
    levels = [current]
    for k in range(cfg.K - 1):
        current = current & (g.random((U, V)) < trans[k][None, :])
        levels.append(current)
    ds = InteractionDataset.from_pairs(U, V, [np.argwhere(m) for m in levels])
    return ds, GroundTruth(tastes, items, trans, p1)


def write_synthetic(ds: InteractionDataset, truth: GroundTruth, out_dir, stem: str = "synth") -> tuple:
    from .data import write_interactions

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / f"{stem}.tsv"
    truth_path = out_dir / f"{stem}_truth.json"
    write_interactions(ds, data_path)
    truth_path.write_text(json.dumps(truth.to_json()))
    return data_path, truth_path


@dataclass
class SettingResult:
    label: str
    variant: str
    reports: list  # one EvalReport per seed
    spearman: list  # per seed, per level, learned-vs-true transition correlation (chain variants)
    seconds: float

    def metric(self, name: str, n: int) -> np.ndarray:
        table = "hr" if name == "HR" else "ndcg"
        return np.array([getattr(r, table)[n] for r in self.reports])

    def summary(self, cutoffs) -> dict:
        out = {}
        for name in ("HR", "NDCG"):
            for n in cutoffs:
                vals = self.metric(name, n)
                out[f"{name}@{n}"] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                                      "min": float(vals.min()), "max": float(vals.max())}
        return out


@dataclass
class RecoveryReport:
    cutoffs: tuple
    seeds: list
    settings: list
    dataset_counts: list
    holdout: str = "target"

    def by_label(self, label: str) -> SettingResult:
        for s in self.settings:
            if s.label == label:
                return s
        raise KeyError(label)

    def to_json(self) -> dict:
        return {"cutoffs": list(self.cutoffs), "seeds": self.seeds, "dataset_counts": self.dataset_counts,
                "holdout": self.holdout,
                "settings": [{"label": s.label, "variant": s.variant, "seconds": s.seconds,
                              "summary": s.summary(self.cutoffs),
                              "per_seed": [r.to_json() for r in s.reports],
                              "transition_spearman": s.spearman} for s in self.settings]}

    def to_csv(self) -> str:
        cols = ["setting"] + [f"{m}@{n}_{stat}" for m in ("HR", "NDCG") for n in self.cutoffs
                              for stat in ("mean", "std")]
        lines = [",".join(cols)]
        for s in self.settings:
            summ = s.summary(self.cutoffs)
            vals = [f"{summ[f'{m}@{n}'][stat]:.6f}" for m in ("HR", "NDCG") for n in self.cutoffs
                    for stat in ("mean", "std")]
            lines.append(",".join([s.label] + vals))
        return "\n".join(lines) + "\n"


MIN_SUPPORT_FOR_SPEARMAN = 100


def transition_spearman(learned_T: np.ndarray, truth: GroundTruth, train: InteractionDataset,
                        min_support: int = MIN_SUPPORT_FOR_SPEARMAN) -> list:
    out = []
    for k in range(learned_T.shape[0]):
        support = np.asarray(train.levels[k].sum(axis=0)).ravel()
        sel = support >= min_support
        if sel.sum() < 3:
            out.append(float("nan"))
            continue
        out.append(float(stats.spearmanr(learned_T[k, sel], truth.transitions[k, sel]).statistic))
    return out


def recovery_experiment(cfg: SynthConfig, settings, seeds=(0, 1, 2, 3, 4), cutoffs=(10, 50, 100, 200),
                        split_seed: Optional[int] = None, num_threads: int = 1,
                        holdout: str = "target") -> RecoveryReport:
    """Train each (label, HyperParams, variant) setting on one generated split for every seed."""
    from .training import train

    ds, truth = generate(cfg)
    split = leave_one_out_split(ds, Rng(cfg.seed if split_seed is None else split_seed).child(1), holdout)
    results = []
    for label, hp, variant in settings:
        reports, rhos = [], []
        t0 = time.perf_counter()
        for seed in seeds:
            res = train(split, hp.replace(seed=seed), Rng(seed), variant, num_threads=num_threads)
            reports.append(evaluate(res.params, split, cutoffs, num_threads=num_threads, label=label))
            if res.params.variant != "CP":
                rhos.append(transition_spearman(res.params.T, truth, split.train))
        results.append(SettingResult(label, variant, reports, rhos, time.perf_counter() - t0))
    return RecoveryReport(tuple(cutoffs), list(seeds), results, ds.counts(), holdout)
