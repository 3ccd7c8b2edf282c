"""Whole-data multi-task losses, analytic gradients, Adagrad and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import (EPS_NORM, EPS_T, HyperParams, InteractionDataset, ModelParams, NumericError, Rng,
                   init_params)
from .model import ForwardTrace, dropout_mask, forward, normalize_rows

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-8
CHECKPOINT_SCHEMA = "chainrec.checkpoint/1"
VARIANTS = ("full", "IM", "CP")


@dataclass
class LossBreakdown:
    regression: np.ndarray  # (K,) per-level L_r
    divergence: float
    lam: np.ndarray

    @property
    def total(self) -> float:
        return float(self.lam @ self.regression) + self.divergence


@dataclass
class GradientSet:
    users: np.ndarray
    P: np.ndarray  # (M, B, d) rows for ``users``
    Q: np.ndarray
    H: np.ndarray
    T: np.ndarray

    def dense_P(self, num_users: int) -> np.ndarray:
        out = np.zeros((self.P.shape[0], num_users, self.P.shape[2]))
        out[:, self.users] = self.P
        return out


def regression_losses(R: np.ndarray, Y: np.ndarray, w: float) -> np.ndarray:
    """Per-level weighted squared loss over every item of every batch user."""
    sq = np.where(Y, (1.0 - R) ** 2, w * R ** 2)
    return sq.sum(axis=(1, 2))


def regression_loss(R_k: np.ndarray, Y_k: np.ndarray, w: float) -> float:
    return float(regression_losses(R_k[None], Y_k[None], w)[0])


def _cosines(phat: np.ndarray) -> np.ndarray:
    return np.einsum("mbd,nbd->bmn", phat, phat)


def divergence_loss(P_batch: np.ndarray) -> float:
    """Mean over users and ordered identity pairs of max(0, cos)^2."""
    M, B = P_batch.shape[:2]
    if M < 2 or B == 0:
        return 0.0
    phat, _ = normalize_rows(P_batch)
    C = np.maximum(_cosines(phat), 0.0)
    off = ~np.eye(M, dtype=bool)
    return float((C[:, off] ** 2).sum() / (B * M * (M - 1)))


def _divergence_grad_phat(phat: np.ndarray) -> np.ndarray:
    M, B = phat.shape[:2]
    if M < 2:
        return np.zeros_like(phat)
    C = np.maximum(_cosines(phat), 0.0)
    C[:, np.arange(M), np.arange(M)] = 0.0
    # each unordered pair appears twice in the ordered sum
    return 4.0 / (B * M * (M - 1)) * np.einsum("bmn,nbd->mbd", C, phat)


def _normalize_backward(G: np.ndarray, xhat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    big = norms > EPS_NORM
    r = np.where(big, norms, EPS_NORM)[..., None]
    proj = np.where(big[..., None], xhat * (xhat * G).sum(axis=-1, keepdims=True), 0.0)
    return (G - proj) / r


def total_loss(params: ModelParams, users, Y: np.ndarray, lam, w: float, keep=None, scale=1.0,
               num_threads=1, backend=None):
    """Forward pass plus the weighted loss; returns (LossBreakdown, trace)."""
    trace = forward(params, users, keep, scale, num_threads, backend)
    lr = regression_losses(trace.R, Y, w)
    ld = divergence_loss(params.P[:, trace.users])
    return LossBreakdown(lr, ld, np.asarray(lam, dtype=float)), trace


def backward(params: ModelParams, trace: ForwardTrace, Y: np.ndarray, lam, w: float,
             backend=None) -> GradientSet:
    from . import kernels

    lam = np.asarray(lam, dtype=float)
    R = trace.R
    c = np.where(Y, 1.0, w)
    g = 2.0 * lam[:, None, None] * c * (R - Y)
    dT = np.zeros_like(params.T)
    if params.variant == "CP":
        dR1 = g
    else:
        dR = g.copy()
        for k in range(params.K - 1, 0, -1):
            dT[k - 1] = (dR[k] * R[k - 1]).sum(axis=0)
            dR[k - 1] += dR[k] * params.T[k - 1]
        dR1 = dR[:1]
    dR1 = np.ascontiguousarray(np.where(trace.R1 > 0, dR1, 0.0))
    Gp, Gq, GH = kernels.match_backward(trace.phat, trace.qhat, np.ascontiguousarray(params.H),
                                        trace.keep, trace.scale, trace.arg, dR1, backend=backend)
    Gp = Gp + _divergence_grad_phat(trace.phat)
    dP = _normalize_backward(Gp, trace.phat, trace.pnorm)
    dQ = _normalize_backward(Gq, trace.qhat, trace.qnorm)
    return GradientSet(trace.users, dP, dQ, GH, dT)


class AdagradState:
    def __init__(self, params: ModelParams):
        self.acc = {k: np.zeros_like(v) for k, v in params.blocks().items()}

    def state_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.acc.items()}

    def copy(self) -> "AdagradState":
        out = AdagradState.__new__(AdagradState)
        out.acc = {k: v.copy() for k, v in self.acc.items()}
        return out


def adagrad_step(params: ModelParams, grads: GradientSet, state: AdagradState, lr: float) -> ModelParams:
    """In-place Adagrad update; returns ``params`` for chaining."""
    u = grads.users
    acc = state.acc["P"]
    acc[:, u] += grads.P ** 2
    params.P[:, u] -= lr * grads.P / (np.sqrt(acc[:, u]) + ADAGRAD_EPS)
    for name in ("Q", "H", "T"):
        g = getattr(grads, name)
        a = state.acc[name]
        a += g ** 2
        getattr(params, name)[...] -= lr * g / (np.sqrt(a) + ADAGRAD_EPS)
    if params.T.size:
        np.clip(params.T, EPS_T, 1.0, out=params.T)
    return params


# ---------------------------------------------------------------- gradient check

FD_STEP = 1e-6
KINK_WINDOW = 1e-5
REL_FLOOR = 1e-4  # below this magnitude the relative error becomes an absolute one


@dataclass
class BlockCheck:
    max_rel_error: float
    checked: int
    excluded: int
    worst: list = field(default_factory=list)  # (rel_error, index, analytic, numeric)


@dataclass
class GradCheckReport:
    blocks: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(b.max_rel_error < self.tolerance for b in self.blocks.values())

    @property
    def failing_blocks(self) -> list:
        return [k for k, b in self.blocks.items() if b.max_rel_error >= self.tolerance]

    def summary(self) -> str:
        lines = []
        for name, b in self.blocks.items():
            flag = "ok" if b.max_rel_error < self.tolerance else "FAIL"
            lines.append(f"{name:>2}: max rel err {b.max_rel_error:.3e} "
                         f"({b.checked} checked, {b.excluded} near kinks) {flag}")
            if flag == "FAIL":
                for rel, idx, a, n in b.worst[:5]:
                    lines.append(f"      {idx}: analytic {a:.6e} numeric {n:.6e} rel {rel:.2e}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _activation_pattern(params: ModelParams, users) -> tuple:
    tr = forward(params, users, backend="python")
    phat, _ = normalize_rows(params.P[:, tr.users])
    return tr.arg, tr.R1 > 0, _cosines(phat) > 0


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(params: ModelParams, ds: InteractionDataset, users, lam, w: float,
                            tolerance: float = 1e-4, step: float = FD_STEP,
                            corrupt: Optional[Callable[[GradientSet], GradientSet]] = None,
                            backend=None) -> GradCheckReport:
    """Compare analytic gradients with central differences, dropout off."""
    users = np.asarray(users, dtype=np.int64)
    Y = ds.dense_labels(users)
    loss, trace = total_loss(params, users, Y, lam, w, backend=backend)
    grads = backward(params, trace, Y, lam, w, backend=backend)
    if corrupt is not None:
        grads = corrupt(grads)
    analytic = {"P": grads.dense_P(params.P.shape[1]), "Q": grads.Q, "H": grads.H, "T": grads.T}
    base = _activation_pattern(params, users)
    work = params.copy()
    blocks = {}
    for name in ("P", "Q", "H", "T"):
        arr = work.blocks()[name]
        if arr.size == 0:
            continue
        errs, excluded = [], 0
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            near_kink = False
            for delta in (KINK_WINDOW, -KINK_WINDOW):
                arr[idx] = orig + delta
                if not _same_pattern(base, _activation_pattern(work, users)):
                    near_kink = True
                    break
            if near_kink:
                arr[idx] = orig
                excluded += 1
                continue
            arr[idx] = orig + step
            lp = total_loss(work, users, Y, lam, w, backend=backend)[0].total
            arr[idx] = orig - step
            lm = total_loss(work, users, Y, lam, w, backend=backend)[0].total
            arr[idx] = orig
            num = (lp - lm) / (2 * step)
            a = float(analytic[name][idx])
            rel = abs(a - num) / max(abs(a), abs(num), REL_FLOOR)
            errs.append((rel, idx, a, num))
        errs.sort(key=lambda e: -e[0])
        blocks[name] = BlockCheck(errs[0][0] if errs else 0.0, len(errs), excluded, errs[:10])
    return GradCheckReport(blocks, tolerance)


# ---------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    val_hr10: float


@dataclass
class TrainResult:
    params: ModelParams  # best-validation parameters
    final_params: ModelParams
    history: list
    best_epoch: int
    state: AdagradState
    rng_state: dict
    hp: HyperParams
    variant: str


def resolve_variant(hp: HyperParams, variant: str) -> HyperParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return hp.replace(M=1) if variant == "IM" else hp


def train(split, hp: HyperParams, rng: Rng, variant: str = "full", num_threads: int = 1,
          backend=None, epochs: Optional[int] = None) -> TrainResult:
    """Mini-batch Adagrad over user batches with the whole-data loss."""
    from .evaluation import evaluate

    hp = resolve_variant(hp, variant)
    ds = split.train
    lam = hp.lambdas(ds.K)
    n_epochs = hp.epochs if epochs is None else epochs
    params = init_params(hp, ds, rng, variant)
    state = AdagradState(params)
    U = ds.num_users
    history = []
    best = (-1.0, 0, params.copy(), state.copy())
    has_valid = len(split.valid_users()) > 0
    for epoch in range(1, n_epochs + 1):
        order = rng.gen.permutation(U)
        lr_sum = np.zeros(ds.K)
        ld_sum = 0.0
        for start in range(0, U, hp.batch_size):
            batch = np.sort(order[start:start + hp.batch_size])
            Y = ds.dense_labels(batch)
            keep, scale = dropout_mask(rng, (len(batch), ds.num_items, hp.d), hp.dropout)
            loss, trace = total_loss(params, batch, Y, lam, hp.w, keep, scale, num_threads, backend)
            if not np.isfinite(loss.total):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                   f"L_r={loss.regression.tolist()} L_d={loss.divergence}")
            grads = backward(params, trace, Y, lam, hp.w, backend)
            adagrad_step(params, grads, state, hp.lr)
            params.check()
            lr_sum += loss.regression
            ld_sum += loss.divergence * len(batch) / U
        epoch_loss = LossBreakdown(lr_sum, ld_sum, lam)
        val = float("nan")
        if has_valid:
            val = evaluate(params, split, (10,), which="valid", num_threads=num_threads,
                           backend=backend).hr[10]
            if val > best[0]:
                best = (val, epoch, params.copy(), state.copy())
        history.append(EpochRecord(epoch, epoch_loss, val))
        log.info("epoch %d loss %.6f val HR@10 %.4f", epoch, epoch_loss.total, val)
    if not has_valid:
        best = (float("nan"), n_epochs, params.copy(), state.copy())
    return TrainResult(best[2], params, history, best[1], best[3], rng.get_state(), hp, variant)


def history_csv(history, K: int) -> str:
    cols = ["epoch", "L_total"] + [f"L_r{k + 1}" for k in range(K)] + ["L_d", "val_HR@10"]
    lines = [",".join(cols)]
    for rec in history:
        vals = [str(rec.epoch), repr(rec.loss.total)] + [repr(float(x)) for x in rec.loss.regression]
        vals += [repr(float(rec.loss.divergence)), repr(float(rec.val_hr10))]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- checkpoints

def checkpoint_doc(result: TrainResult, best: bool = True) -> dict:
    params = result.params if best else result.final_params
    epoch = result.best_epoch if best else (result.history[-1].epoch if result.history else 0)
    return {
        "schema": CHECKPOINT_SCHEMA,
        "variant": result.variant,
        "hyperparams": result.hp.to_dict(),
        "epoch": epoch,
        "P": params.P.tolist(),
        "Q": params.Q.tolist(),
        "h": params.H.tolist(),
        "T": params.T.tolist(),
        "adagrad": result.state.state_dict(),
        "rng_state": result.rng_state,
    }


def save_checkpoint(result: TrainResult, path, best: bool = True) -> None:
    Path(path).write_text(json.dumps(checkpoint_doc(result, best), sort_keys=True))


def load_checkpoint(path):
    """Returns (ModelParams, HyperParams, doc)."""
    from .core import ConfigError

    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"checkpoint schema {doc.get('schema')!r} is not {CHECKPOINT_SCHEMA!r}")
    M_rows = np.asarray(doc["P"], dtype=float)
    d = M_rows.shape[-1]
    T = np.asarray(doc["T"], dtype=float).reshape(-1, np.asarray(doc["Q"]).shape[0])
    params = ModelParams(M_rows, np.asarray(doc["Q"], dtype=float),
                         np.asarray(doc["h"], dtype=float).reshape(-1, d), T,
                         "CP" if doc["variant"] == "CP" else "full")
    return params, HyperParams.from_dict(doc["hyperparams"]), doc
