"""Full-ranking leave-one-out evaluation and case-study exports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ModelParams
from .model import normalize_rows, score_users


@dataclass
class RankResult:
    user: int
    item: int
    rank: int
    num_candidates: int


def rank_from_scores(scores: np.ndarray, train_pos: np.ndarray, item: int) -> tuple:
    """1-based rank of ``item`` among items that are not train positives.

    Higher score ranks first; equal scores are ordered by ascending item index.
    """
    cand = np.ones(scores.shape[0], dtype=bool)
    cand[train_pos] = False
    cand[item] = True
    s = scores[item]
    idx = np.arange(scores.shape[0])
    ahead = cand & ((scores > s) | ((scores == s) & (idx < item)))
    return int(ahead.sum()) + 1, int(cand.sum())


def rank_user(u: int, params: ModelParams, train, test_item: int) -> RankResult:
    scores = score_users(params, [u])[0]
    rank, n = rank_from_scores(scores, train.user_items(train.K - 1, u), test_item)
    return RankResult(u, test_item, rank, n)


def _ranks(results) -> np.ndarray:
    ranks = np.asarray([r.rank if isinstance(r, RankResult) else r for r in results], dtype=float)
    if ranks.size == 0:
        raise ValueError("cannot compute metrics over an empty result set")
    return ranks


def hr_at_n(results, N: int) -> float:
    return float(np.mean(_ranks(results) <= N))


def ndcg_at_n(results, N: int) -> float:
    r = _ranks(results)
    return float(np.mean(np.where(r <= N, 1.0 / np.log2(r + 1.0), 0.0)))


@dataclass
class EvalReport:
    cutoffs: tuple
    hr: dict
    ndcg: dict
    num_users: int
    label: str = "all"
    extra: dict = field(default_factory=dict)

    def columns(self) -> list:
        return [f"HR@{n}" for n in self.cutoffs] + [f"NDCG@{n}" for n in self.cutoffs]

    def values(self) -> list:
        return [self.hr[n] for n in self.cutoffs] + [self.ndcg[n] for n in self.cutoffs]

    def to_json(self) -> dict:
        return {"label": self.label, "num_users": self.num_users, "cutoffs": list(self.cutoffs),
                "HR": {str(n): self.hr[n] for n in self.cutoffs},
                "NDCG": {str(n): self.ndcg[n] for n in self.cutoffs}, **self.extra}


def format_table(rows: list, columns: list, label_header: str = "model") -> str:
    """Aligned-column CSV: ``rows`` are (label, values) pairs."""
    header = [label_header] + columns
    body = [[lab] + [f"{v:.4f}" for v in vals] for lab, vals in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for r in [header] + body:
        lines.append(", ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir, stem: str = "eval") -> tuple:
    out_dir = Path(out_dir)
    jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    jpath.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    cpath.write_text(format_table([(report.label, report.values())], report.columns(), "subset"))
    return jpath, cpath


def rank_all(params: ModelParams, split, which: str = "test", users=None, batch_size: int = 256,
             num_threads: int = 1, backend=None) -> list:
    held = split.test_items if which == "test" else split.valid_items
    eligible = np.flatnonzero(held >= 0)
    if users is not None:
        eligible = np.asarray(sorted(set(eligible.tolist()) & set(int(u) for u in users)), dtype=np.int64)
    train = split.train
    out = []
    for start in range(0, len(eligible), batch_size):
        batch = eligible[start:start + batch_size]
        S = score_users(params, batch, num_threads=num_threads, backend=backend)
        for row, u in enumerate(batch):
            rank, n = rank_from_scores(S[row], train.user_items(train.K - 1, u), int(held[u]))
            out.append(RankResult(int(u), int(held[u]), rank, n))
    return out


def evaluate(params: ModelParams, split, cutoffs=(10, 50, 100, 200), subset=None, which: str = "test",
             label: Optional[str] = None, num_threads: int = 1, backend=None) -> EvalReport:
    results = rank_all(params, split, which, subset, num_threads=num_threads, backend=backend)
    cutoffs = tuple(cutoffs)
    if not results:
        nan = float("nan")
        return EvalReport(cutoffs, {n: nan for n in cutoffs}, {n: nan for n in cutoffs}, 0,
                          label or ("subset" if subset is not None else "all"))
    return EvalReport(cutoffs, {n: hr_at_n(results, n) for n in cutoffs},
                      {n: ndcg_at_n(results, n) for n in cutoffs}, len(results),
                      label or ("subset" if subset is not None else "all"))


def random_baseline_hr(results, N: int) -> float:
    """Expected HR@N of a uniformly random ranking of each user's candidates."""
    return float(np.mean([min(1.0, N / r.num_candidates) for r in results]))


@dataclass
class CaseStudy:
    similarity: np.ndarray  # (M, M)
    likelihood: np.ndarray  # (M, n_items)
    items: list
    single_positive_fraction: float  # share of items where exactly one identity scores > 0


def case_study(params: ModelParams, u: int, items) -> CaseStudy:
    if not 0 <= u < params.P.shape[1]:
        raise KeyError(f"unknown user index {u}")
    items = [int(v) for v in items]
    phat, _ = normalize_rows(params.P[:, u])
    sim = phat @ phat.T
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, [1.0 if n > 0 else 0.0 for n in np.linalg.norm(params.P[:, u], axis=1)])
    qhat, _ = normalize_rows(params.Q[items])
    lik = np.maximum((phat * params.H[0]) @ qhat.T, 0.0)
    frac = float(np.mean((lik > 0).sum(axis=0) == 1)) if items else float("nan")
    return CaseStudy(sim, lik, items, frac)


def case_study_export(params: ModelParams, u: int, items, out_dir, user_label=None, item_labels=None) -> tuple:
    """Write identity-similarity and per-identity likelihood matrices as CSV."""
    cs = case_study(params, u, items)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = user_label if user_label is not None else u
    names = [f"identity_{m + 1}" for m in range(params.M)]
    labels = item_labels if item_labels is not None else cs.items
    sim_path = out_dir / f"case_{tag}_similarity.csv"
    lik_path = out_dir / f"case_{tag}_likelihood.csv"
    for path, header, rows in (
        (sim_path, ["identity"] + names, cs.similarity),
        (lik_path, ["identity"] + [str(v) for v in labels], cs.likelihood),
    ):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for name, row in zip(names, rows):
            wr.writerow([name] + [repr(float(x)) for x in row])
        path.write_text(buf.getvalue())
    return sim_path, lik_path, cs
