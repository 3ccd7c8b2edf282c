"""``chainrec`` command line: train, eval, ablate, sweep-identities, synth, case-study, gradcheck."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (ConfigError, DataError, HyperParams, InteractionDataset, ModelParams, NumericError, Rng,
                   load_config, validate_dataset)
from .data import drop_levels, leave_one_out_split, load_interactions, load_split, save_id_map, sparse_user_subset
from .evaluation import EvalReport, case_study_export, evaluate, format_table, write_report

log = logging.getLogger("chainrec")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECK_FAILED = 5

SPLIT_STREAM, TRAIN_STREAM = 1, 2


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Per-run output directory plus its manifest."""

    def __init__(self, out, command: str, seed: int, config: dict, data_path=None):
        self.started = _dt.datetime.now(_dt.timezone.utc)
        stamp = self.started.strftime("%Y%m%dT%H%M%S%f")
        self.dir = Path(out) / f"{stamp}_seed{seed}"
        self.dir.mkdir(parents=True, exist_ok=False)
        self.manifest = {
            "command": command,
            "version": f"chainrec-{__version__}",
            "seed": seed,
            "config": config,
            "dataset": str(data_path) if data_path else None,
            "dataset_sha256": _sha256(data_path) if data_path else None,
            "started": self.started.isoformat(),
            "outputs": [],
        }

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.manifest["outputs"].append(name)
        return p

    def finish(self, **extra) -> Path:
        self.manifest.update(extra)
        self.manifest["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(self.manifest, indent=1, sort_keys=True))
        return p


def _hp(args) -> HyperParams:
    hp = load_config(args.config) if args.config else HyperParams()
    if getattr(args, "seed", None) is not None:
        hp = hp.replace(seed=args.seed)
    return hp


def _dataset(path) -> InteractionDataset:
    ds = load_interactions(path)
    rep = validate_dataset(ds)
    if not rep.valid:
        raise DataError(f"dataset {path} failed validation: {rep.containment_violations[:5]} {rep.bound_violations[:5]}")
    return ds


def _split(ds, hp: HyperParams):
    return leave_one_out_split(ds, Rng(hp.seed).child(SPLIT_STREAM))


def _train(split, hp, variant, threads):
    from .training import train

    hp.lambdas(split.train.K)  # fail early on a lambda/K mismatch
    return train(split, hp, Rng(hp.seed).child(TRAIN_STREAM), variant, num_threads=threads)


def cmd_train(args) -> int:
    from .training import history_csv, save_checkpoint

    hp = _hp(args)
    ds = _dataset(args.data)
    run = Run(args.out, "train", hp.seed, hp.to_dict(), args.data)
    split = _split(ds, hp)
    split.save(run.path("split.json"))
    save_id_map(ds, run.path("idmap.json"))
    res = _train(split, hp, args.variant, args.threads)
    save_checkpoint(res, run.path("checkpoint.json"))
    run.path("history.csv").write_text(history_csv(res.history, ds.K))
    report = evaluate(res.params, split, hp.cutoffs, label="test", num_threads=args.threads)
    run.manifest["outputs"] += ["eval.json", "eval.csv"]
    write_report(report, run.dir)
    run.finish(best_epoch=res.best_epoch, variant=args.variant)
    print(format_table([(report.label, report.values())], report.columns()), end="")
    print(f"run directory: {run.dir}")
    return EXIT_OK


def parse_subset(spec: str, ds: InteractionDataset):
    """``purchases:LO-HI`` selects users by their target-level count before splitting."""
    try:
        kind, rng = spec.split(":")
        lo, hi = (int(x) for x in rng.split("-"))
    except ValueError:
        raise ConfigError(f"bad subset spec {spec!r}; expected e.g. purchases:5-8") from None
    if kind != "purchases":
        raise ConfigError(f"unknown subset kind {kind!r}")
    return sparse_user_subset(ds, lo, hi)


def _load_run(checkpoint, data, split_path=None):
    from .training import load_checkpoint

    try:
        params, hp, doc = load_checkpoint(checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {checkpoint}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint {checkpoint} is malformed: {exc}") from None
    ds = _dataset(data)
    if params.P.shape[1] != ds.num_users or params.Q.shape[0] != ds.num_items:
        raise ConfigError("checkpoint shape does not match the dataset")
    split_path = Path(split_path) if split_path else Path(checkpoint).with_name("split.json")
    split = load_split(ds, split_path) if split_path.exists() else _split(ds, hp)
    return params, hp, ds, split


def cmd_eval(args) -> int:
    params, hp, ds, split = _load_run(args.checkpoint, args.data, args.split)
    cutoffs = tuple(int(x) for x in args.cutoffs.split(",")) if args.cutoffs else hp.cutoffs
    subset = parse_subset(args.subset, ds) if args.subset else None
    run = Run(args.out, "eval", hp.seed, hp.to_dict(), args.data)
    run.manifest["checkpoint"] = str(args.checkpoint)
    report = evaluate(params, split, cutoffs, subset=subset, label=args.subset or "all",
                      num_threads=args.threads)
    run.manifest["outputs"] += ["eval.json", "eval.csv"]
    write_report(report, run.dir)
    run.finish(subset=args.subset)
    print(format_table([(report.label, report.values())], report.columns(), "subset"), end="")
    print(f"run directory: {run.dir}")
    return EXIT_OK


ABLATION_ROWS = [
    # label, model variant, 1-based levels whose raw records are removed
    ("CV", "full", (1, 2)),  # target level only
    ("V", "full", (1,)),  # first level removed
    ("C", "full", (2,)),  # middle level removed
    ("IM", "IM", ()),  # one identity per user
    ("CP", "CP", ()),  # independent per-level heads instead of the chain
    ("full", "full", ()),
]


def ablation_lambda(hp: HyperParams, K: int, dropped) -> tuple:
    lam = hp.lambdas(K).copy()
    for k in dropped:
        lam[k - 1] = 0.0
    return tuple(lam / lam.sum())


def cmd_ablate(args) -> int:
    hp = _hp(args)
    ds = _dataset(args.data)
    run = Run(args.out, "ablate", hp.seed, hp.to_dict(), args.data)
    base_split = _split(ds, hp)
    rows, docs = [], {}
    for label, variant, dropped in ABLATION_ROWS:
        if dropped and ds.K < 3:
            print(f"skipping {label}: needs 3 behavior levels, data has K={ds.K}", file=sys.stderr)
            continue
        if dropped:
            from .data import apply_split

            split = apply_split(drop_levels(ds, dropped), base_split.test_items, base_split.valid_items,
                                    base_split.holdout)
            hp_row = hp.replace(lambda_=ablation_lambda(hp, ds.K, dropped))
        else:
            split, hp_row = base_split, hp
        res = _train(split, hp_row, variant, args.threads)
        rep = evaluate(res.params, split, hp.cutoffs, label=label, num_threads=args.threads)
        rows.append((label, rep.values()))
        docs[label] = rep.to_json()
        log.info("%s done", label)
    columns = [f"HR@{n}" for n in hp.cutoffs] + [f"NDCG@{n}" for n in hp.cutoffs]
    table = format_table(rows, columns)
    run.path("ablation.csv").write_text(table)
    run.path("ablation.json").write_text(json.dumps(docs, indent=1, sort_keys=True))
    run.finish()
    print(table, end="")
    print(f"run directory: {run.dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    hp = _hp(args)
    m_list = [int(x) for x in args.m_list.split(",")]
    if not m_list:
        raise ConfigError("M list must be nonempty")
    ds = _dataset(args.data)
    run = Run(args.out, "sweep-identities", hp.seed, hp.to_dict(), args.data)
    split = _split(ds, hp)
    lines = ["M,HR@100,train_seconds"]
    for m in m_list:
        t0 = time.perf_counter()
        res = _train(split, hp.replace(M=m), "full", args.threads)
        secs = time.perf_counter() - t0
        hr = evaluate(res.params, split, (100,), num_threads=args.threads).hr[100]
        lines.append(f"{m},{hr:.6f},{secs:.3f}")
        log.info("M=%d HR@100=%.4f (%.1fs)", m, hr, secs)
    run.path("sweep.csv").write_text("\n".join(lines) + "\n")
    run.finish(m_list=m_list)
    print("\n".join(lines))
    print(f"run directory: {run.dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate, recovery_experiment, write_synthetic

    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synth config {args.config}: {exc}") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig.from_dict(raw)
    run = Run(args.out, "synth", cfg.seed, raw)
    ds, truth = generate(cfg)
    run.manifest["outputs"] += ["synth.tsv", "synth_truth.json"]
    write_synthetic(ds, truth, run.dir)
    if args.recovery:
        hp = load_config(args.train_config) if args.train_config else HyperParams()
        m_star = cfg.num_identities
        settings = [("M=1", hp.replace(M=1), "full"), (f"M={m_star}", hp.replace(M=m_star), "full"),
                    (f"CP M={m_star}", hp.replace(M=m_star), "CP")]
        rep = recovery_experiment(cfg, settings, seeds=list(range(args.seeds)), cutoffs=hp.cutoffs,
                                  num_threads=args.threads, holdout=args.holdout)
        run.path("recovery.json").write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True))
        run.path("recovery.csv").write_text(rep.to_csv())
        print(rep.to_csv(), end="")
    run.finish()
    print(f"run directory: {run.dir}")
    return EXIT_OK


def cmd_case_study(args) -> int:
    params, hp, ds, split = _load_run(args.checkpoint, args.data, args.split)
    key = int(args.user)
    if key not in ds.user_ids:
        raise ConfigError(f"unknown user id {args.user}")
    u = ds.user_ids.index(key)
    items = split.train.user_items(split.train.K - 1, u)
    run = Run(args.out, "case-study", hp.seed, hp.to_dict(), args.data)
    sim, lik, cs = case_study_export(params, u, items, run.dir, user_label=key,
                                     item_labels=[ds.item_ids[v] for v in items])
    run.manifest["outputs"] += [sim.name, lik.name]
    run.finish(user=key, single_positive_identity_fraction=cs.single_positive_fraction)
    print(f"items with exactly one positive identity: {cs.single_positive_fraction:.3f}")
    print(f"run directory: {run.dir}")
    return EXIT_OK


def random_instance(rng: Rng, U=8, V=12, d=5, M=3, K=3, variant="full"):
    """Random dataset and parameters for gradient checking."""
    from .data import upward_close

    g = rng.gen
    top = g.integers(0, K + 1, size=(U, V))
    ds = upward_close(InteractionDataset.from_pairs(U, V, [np.argwhere(top == k + 1) for k in range(K)]))
    P = g.normal(size=(M, U, d))
    Q = g.normal(size=(V, d))
    if variant == "CP":
        H, T = g.normal(size=(K, d)), np.zeros((0, V))
    else:
        H, T = g.normal(size=(1, d)), g.uniform(0.1, 0.95, size=(K - 1, V))
    return ds, ModelParams(P, Q, H, T, "CP" if variant == "CP" else "full")


def cmd_gradcheck(args) -> int:
    from .training import finite_difference_check

    hp = _hp(args)
    run = Run(args.out, "gradcheck", hp.seed, hp.to_dict())
    rng = Rng(hp.seed)
    lines, ok = [], True
    for i, variant in enumerate(("full", "IM", "CP")):
        M = 1 if variant == "IM" else 3
        ds, params = random_instance(rng.child(i), M=M, variant=variant)
        lam = np.full(3, 1 / 3) if hp.lambda_ is None else hp.lambdas(3)
        rep = finite_difference_check(params, ds, np.arange(ds.num_users), lam, hp.w)
        ok &= rep.passed
        lines.append(f"[{variant}]\n{rep.summary()}")
    text = "\n".join(lines) + "\n"
    run.path("gradcheck.txt").write_text(text)
    run.finish(passed=bool(ok))
    print(text, end="")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chainrec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=True):
        if config:
            sp.add_argument("--config", help="flat JSON hyperparameter file")
        if data:
            sp.add_argument("--data", required=True, help="user<TAB>item<TAB>level interaction file")
        sp.add_argument("--out", required=True, help="parent directory for the run directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("train")
    common(sp)
    sp.add_argument("--variant", choices=["full", "IM", "CP"], default="full")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", help="split JSON (default: split.json beside the checkpoint)")
    sp.add_argument("--subset", help="e.g. purchases:5-8")
    sp.add_argument("--cutoffs", help="comma-separated N list (default: from the checkpoint config)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep-identities")
    common(sp)
    sp.add_argument("--m-list", default="1,2,3,4,5,6,7")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("synth")
    common(sp, data=False)
    sp.add_argument("--recovery", action="store_true", help="also run the M=1 / M=M* / CP comparison")
    sp.add_argument("--train-config", help="hyperparameters for the recovery runs")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--holdout", choices=["target", "all"], default="target",
                    help="levels the held-out pairs are removed from")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("case-study")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split")
    sp.add_argument("--user", required=True, help="original user id")
    sp.set_defaults(func=cmd_case_study)

    sp = sub.add_parser("gradcheck")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
