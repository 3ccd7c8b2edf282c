import json

import numpy as np
import pytest

from chainrec import cli
from chainrec.core import HyperParams
from chainrec.data import load_interactions, sparse_user_subset
from chainrec.synth import SynthConfig, generate, write_synthetic

SMALL = {"d": 4, "M": 2, "batch_size": 16, "epochs": 2, "seed": 3, "cutoffs": [5, 10]}


@pytest.fixture
def workspace(tmp_path):
    ds, truth = generate(SynthConfig(num_users=40, num_items=30, latent_dim=4, seed=1))
    data, _ = write_synthetic(ds, truth, tmp_path / "data")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    return tmp_path, data, cfg


def _only_run(out):
    runs = sorted(p for p in out.iterdir() if p.is_dir())
    assert len(runs) == 1
    return runs[0]


def _train(tmp, data, cfg, name="runs", *extra):
    out = tmp / name
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), *extra]) == 0
    return _only_run(out)


def test_train_writes_artifacts_and_manifest(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    assert run.name.endswith("_seed3")
    for name in ("split.json", "idmap.json", "checkpoint.json", "history.csv", "eval.json", "eval.csv",
                 "manifest.json"):
        assert (run / name).exists(), name
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 3 and man["config"]["d"] == 4 and len(man["dataset_sha256"]) == 64
    assert set(man["outputs"]) >= {"checkpoint.json", "eval.json", "history.csv"}
    assert len((run / "history.csv").read_text().splitlines()) == 3


def test_train_is_byte_reproducible(workspace):
    tmp, data, cfg = workspace
    a = _train(tmp, data, cfg, "a")
    b = _train(tmp, data, cfg, "b")
    for name in ("checkpoint.json", "history.csv", "eval.json", "eval.csv", "split.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_flag_overrides_config(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg, "runs", "--seed", "8")
    assert run.name.endswith("_seed8")
    assert json.loads((run / "checkpoint.json").read_text())["hyperparams"]["seed"] == 8


def test_missing_data_file(workspace, capsys):
    tmp, _, cfg = workspace
    missing = tmp / "absent.tsv"
    code = cli.main(["train", "--config", str(cfg), "--data", str(missing), "--out", str(tmp / "r")])
    assert code == cli.EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_bad_config_key(workspace, capsys):
    tmp, data, _ = workspace
    bad = tmp / "bad.json"
    bad.write_text(json.dumps({"d": 4, "momentum": 0.9}))
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp / "r")]) == cli.EXIT_CONFIG
    assert "momentum" in capsys.readouterr().err
    assert not (tmp / "r").exists()


def test_lambda_size_mismatch_is_config_error(workspace):
    tmp, data, _ = workspace
    bad = tmp / "bad.json"
    bad.write_text(json.dumps({**SMALL, "lambda": [0.5, 0.5]}))
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp / "r")]) == cli.EXIT_CONFIG


def test_invalid_data_line_is_data_error(workspace):
    tmp, _, cfg = workspace
    data = tmp / "broken.tsv"
    data.write_text("1\t2\t1\n1\tq\t1\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp / "r")]) == cli.EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_numeric_error(workspace, capsys):
    tmp, data, _ = workspace
    cfg = tmp / "hot.json"
    cfg.write_text(json.dumps({**SMALL, "lr": 1e308}))
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp / "r")]) == cli.EXIT_NUMERIC
    assert "numeric" in capsys.readouterr().err


def test_eval_subset_and_determinism(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    ck = run / "checkpoint.json"
    outs = []
    for name in ("e1", "e2"):
        args = ["eval", "--checkpoint", str(ck), "--data", str(data), "--out", str(tmp / name),
                "--subset", "purchases:2-6"]
        assert cli.main(args) == 0
        outs.append(_only_run(tmp / name))
    for f in ("eval.json", "eval.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    doc = json.loads((outs[0] / "eval.json").read_text())
    ds = load_interactions(data)
    split = json.loads((run / "split.json").read_text())
    chosen = sparse_user_subset(ds, 2, 6)
    with_test = chosen & {int(u) for u in split["test"]}
    assert doc["num_users"] == len(with_test)
    assert doc["label"] == "purchases:2-6"
    assert set(doc["HR"]) == {"5", "10"}


def test_eval_reproduces_training_report(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                     "--out", str(tmp / "e")]) == 0
    mine = json.loads((_only_run(tmp / "e") / "eval.json").read_text())
    theirs = json.loads((run / "eval.json").read_text())
    assert mine["HR"] == theirs["HR"] and mine["NDCG"] == theirs["NDCG"]


def test_eval_cutoffs_flag(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                     "--out", str(tmp / "e"), "--cutoffs", "1,3"]) == 0
    assert set(json.loads((_only_run(tmp / "e") / "eval.json").read_text())["HR"]) == {"1", "3"}


def test_eval_schema_mismatch(workspace, capsys):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    ck = run / "checkpoint.json"
    doc = json.loads(ck.read_text())
    doc["schema"] = "chainrec.checkpoint/0"
    ck.write_text(json.dumps(doc))
    assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(data), "--out", str(tmp / "e")]) == cli.EXIT_CONFIG
    assert "schema" in capsys.readouterr().err


def test_bad_subset_spec(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    code = cli.main(["eval", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                     "--out", str(tmp / "e"), "--subset", "views:1-2"])
    assert code == cli.EXIT_CONFIG


def test_ablate_table_shape(workspace):
    tmp, data, _ = workspace
    cfg = tmp / "abl.json"
    cfg.write_text(json.dumps({**SMALL, "epochs": 1}))
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(data), "--out", str(tmp / "a")]) == 0
    run = _only_run(tmp / "a")
    lines = (run / "ablation.csv").read_text().splitlines()
    assert [ln.split(",")[0].strip() for ln in lines[1:]] == ["CV", "V", "C", "IM", "CP", "full"]
    assert len(lines[0].split(",")) == 1 + 2 * len(SMALL["cutoffs"])
    default_cols = len(HyperParams().cutoffs) * 2
    assert default_cols == 8


def test_ablation_lambda_collapses():
    hp = HyperParams()
    np.testing.assert_allclose(cli.ablation_lambda(hp, 3, (1, 2)), (0, 0, 1))
    np.testing.assert_allclose(cli.ablation_lambda(hp, 3, (2,)), (0.5, 0, 0.5))


def test_ablate_skips_level_variants_when_two_levels(tmp_path, capsys):
    ds, truth = generate(SynthConfig(num_users=30, num_items=20, latent_dim=4, transition_ranges=[[0.3, 0.8]]))
    data, _ = write_synthetic(ds, truth, tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SMALL, "epochs": 1}))
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "a")]) == 0
    assert "skipping CV" in capsys.readouterr().err
    rows = (_only_run(tmp_path / "a") / "ablation.csv").read_text().splitlines()[1:]
    assert len(rows) == 3


def test_sweep_one_row_per_m(workspace):
    tmp, data, _ = workspace
    cfg = tmp / "s.json"
    cfg.write_text(json.dumps({**SMALL, "epochs": 1}))
    assert cli.main(["sweep-identities", "--config", str(cfg), "--data", str(data), "--out", str(tmp / "s"),
                     "--m-list", "1,2,3"]) == 0
    lines = (_only_run(tmp / "s") / "sweep.csv").read_text().splitlines()
    assert lines[0] == "M,HR@100,train_seconds"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2", "3"]


def test_synth_recovery(tmp_path):
    sc = tmp_path / "synth.json"
    sc.write_text(json.dumps({"num_users": 30, "num_items": 20, "latent_dim": 4}))
    tc = tmp_path / "train.json"
    tc.write_text(json.dumps({**SMALL, "epochs": 1}))
    assert cli.main(["synth", "--config", str(sc), "--out", str(tmp_path / "o"), "--recovery", "--train-config",
                     str(tc), "--seeds", "2", "--holdout", "all"]) == 0
    run = _only_run(tmp_path / "o")
    for name in ("synth.tsv", "synth_truth.json", "recovery.csv", "recovery.json", "manifest.json"):
        assert (run / name).exists()
    rows = [ln.split(",")[0] for ln in (run / "recovery.csv").read_text().splitlines()[1:]]
    assert rows == ["M=1", "M=2", "CP M=2"]
    assert json.loads((run / "recovery.json").read_text())["holdout"] == "all"


def test_synth_bad_key(tmp_path):
    sc = tmp_path / "synth.json"
    sc.write_text(json.dumps({"users": 30}))
    assert cli.main(["synth", "--config", str(sc), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_case_study_writes_matrices(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    ds = load_interactions(data)
    uid = ds.user_ids[0]
    assert cli.main(["case-study", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                     "--out", str(tmp / "c"), "--user", str(uid)]) == 0
    crun = _only_run(tmp / "c")
    sim = (crun / f"case_{uid}_similarity.csv").read_text().splitlines()
    assert len(sim) == 1 + SMALL["M"]
    assert (crun / f"case_{uid}_likelihood.csv").exists()
    assert "single_positive_identity_fraction" in json.loads((crun / "manifest.json").read_text())


def test_case_study_unknown_user(workspace):
    tmp, data, cfg = workspace
    run = _train(tmp, data, cfg)
    assert cli.main(["case-study", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data),
                     "--out", str(tmp / "c"), "--user", "999999"]) == cli.EXIT_CONFIG


def test_gradcheck_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    text = (_only_run(tmp_path / "g") / "gradcheck.txt").read_text()
    assert text.count("PASS") == 3

    from chainrec import training

    real = training.finite_difference_check

    def broken(*a, **kw):
        def corrupt(g):
            g.H = g.H + 1.0
            return g
        return real(*a, corrupt=corrupt, **kw)

    monkeypatch.setattr(training, "finite_difference_check", broken)
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g2")]) == cli.EXIT_CHECK_FAILED
