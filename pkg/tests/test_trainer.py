import filecmp
import math
from pathlib import Path

import numpy as np
import pytest

from decoupled_labels import autodiff as ad
from decoupled_labels import cli, kdl, pdl, trainer
from decoupled_labels import data as dm
from decoupled_labels.checkpoint import load_checkpoint
from decoupled_labels.config import ExperimentConfig, format_config, load_config, parse_config
from decoupled_labels.metrics import evaluate_scores


def tiny(**kw):
    base = dict(n_train=192, n_test=64, d=16, hidden=16, epochs=2, batch_size=32, warmup_epochs=1)
    base.update(kw)
    return ExperimentConfig(**base)


def bce_on(model, x, q, cfg, vocab):
    p = pdl.predict(model, x, vocab, cfg.pdl)
    p = np.clip(p, ad.EPS, 1 - ad.EPS)
    return float(-(q * np.log(p) + (1 - q) * np.log(1 - p)).mean())


# -- descent and ordering ----------------------------------------------------------

def test_baseline_bce_decreases_in_one_epoch():
    cfg = tiny(mode="baseline", n_train=100, epochs=1, batch_size=10)
    train_recs, test_recs, vocab = trainer.load_data(cfg)
    x, q = dm.as_arrays(train_recs, vocab.n_p)
    start = trainer.build_model(cfg, vocab, x.shape[1])
    res = trainer.train(cfg, data=(train_recs, test_recs, vocab))
    assert bce_on(res.model, x, q, cfg, vocab) < bce_on(start, x, q, cfg, vocab)


EXPECTED_STAGES = {
    "dll": [("L_t", ("D_a", "D_s", "A", "S")), ("L_PDL", ("D_a", "D_s", "N_a2s", "N_s2a")),
            ("L_cm", ("M",)), ("L_nt", ("D_a", "D_s", "A", "S"))],
    "pdl": [("L_t", ("D_a", "D_s", "A", "S")), ("L_PDL", ("D_a", "D_s", "N_a2s", "N_s2a"))],
    "kdl": [("L_t", ("E", "P")), ("L_cm", ("M",)), ("L_nt", ("E", "P"))],
    "baseline": [("L_t", ("E", "P"))],
}


@pytest.mark.parametrize("mode", list(EXPECTED_STAGES))
def test_update_order_per_iteration(mode):
    trace = []
    cfg = tiny(mode=mode, epochs=1, n_train=96)
    res = trainer.train(cfg, on_update=lambda stage, groups: trace.append((stage, tuple(groups))))
    n_iter = len(res.runlog.iterations)
    assert n_iter == 3
    assert trace == EXPECTED_STAGES[mode] * n_iter


def test_transfer_step_skipped_when_alpha_zero():
    trace = []
    trainer.train(tiny(mode="dll", epochs=1, n_train=64, alpha0=0.0, beta=0.0),
                  on_update=lambda stage, groups: trace.append(stage))
    assert "L_nt" not in trace and trace.count("L_cm") == 2


def test_adversarial_step_only_moves_decouplers_and_probes(monkeypatch):
    snapshots = []
    cfg = tiny(mode="pdl", epochs=1, n_train=32)
    holder = {}
    real_build = trainer.build_model

    def build(*a, **k):
        holder["m"] = real_build(*a, **k)
        return holder["m"]

    monkeypatch.setattr(trainer, "build_model", build)

    def record(stage, groups):
        snapshots.append((stage, {n: t.data.copy() for n, t in holder["m"].params.items()}))

    trainer.train(cfg, on_update=record)
    (s1, after_t), (s2, after_adv) = snapshots
    assert (s1, s2) == ("L_t", "L_PDL")
    for n in after_t:
        moved = not np.array_equal(after_t[n], after_adv[n])
        assert moved == (n.split(".")[0] in ("D_a", "D_s", "N_a2s", "N_s2a")), n


def test_alpha_and_gamma_trajectory_logged():
    cfg = tiny(mode="dll", epochs=3, n_train=64, warmup_epochs=1)
    res = trainer.train(cfg)
    for row in res.runlog.iterations:
        want = 0.1 if row["epoch"] < 1 else 0.1 + 1e-4 * row["iteration"]
        assert row["alpha"] == want
        assert abs(row["gamma"] - 0.99 ** row["epoch"]) <= 1e-12
    assert [r["iteration"] for r in res.runlog.iterations] == list(range(6))


def test_kdl_without_transfer_matches_baseline_model():
    a = trainer.train(tiny(mode="baseline"))
    b = trainer.train(tiny(mode="kdl", alpha0=0.0, beta=0.0))
    for n, t in a.model.params.items():
        np.testing.assert_array_equal(t.data, b.model.params[n].data)
    assert not np.array_equal(b.M.tensor.data, np.eye(b.vocab.n_p))


def test_non_finite_loss_aborts_with_breakdown(monkeypatch):
    real = kdl.target_loss
    monkeypatch.setattr(trainer.kdl, "target_loss", lambda p, q: ad.scale(real(p, q), float("nan")))
    with pytest.raises(FloatingPointError, match=r"iteration 0: .*L_t=nan"):
        trainer.train(tiny(mode="baseline"))


# -- evaluation --------------------------------------------------------------------

def test_evaluate_is_pure():
    res = trainer.train(tiny(mode="dll", epochs=1))
    before = {n: t.data.copy() for n, t in res.model.params.items()}
    r1 = trainer.evaluate(res.model, res.M, res.test, res.vocab, res.cfg)
    r2 = trainer.evaluate(res.model, res.M, res.test, res.vocab, res.cfg)
    assert r1.flat() == r2.flat()
    for n, t in res.model.params.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_zero_model_ranks_by_index():
    cfg = tiny(mode="pdl")
    _, test, vocab = trainer.load_data(cfg)
    model = pdl.PDLModel(cfg.d, cfg.hidden, vocab.n_a, vocab.n_s, zeros=True)
    rep = trainer.evaluate(model, None, test, vocab, cfg)
    truth = [set(r.labels) for r in test]
    for K in cfg.ks:
        hits = sum(len(t & set(range(K))) for t in truth)
        assert rep.recall[K] == hits / sum(len(t) for t in truth)


def test_mutual_learning_moves_M_toward_predictions():
    cfg = tiny(mode="dll", epochs=3, n_train=400)
    res = trainer.train(cfg)
    x, q = dm.as_arrays(res.test, res.vocab.n_p)
    p = pdl.predict(res.model, x, res.vocab, cfg.pdl)
    z = np.log(np.clip(p, ad.EPS, 1 - ad.EPS) / np.clip(1 - p, ad.EPS, 1))
    head, _ = trainer.head_tail(res.vocab, cfg)

    def gap(m):
        out = []
        for k in head:
            rows = q[:, k] > 0
            if not rows.any():
                continue
            emp = np.mean([kdl.mask_and_normalize(zi, k) for zi in z[rows]], axis=0)
            mk = kdl.mask_and_normalize(m[k], k)
            keep = np.arange(len(mk)) != k
            out.append(float(np.sum(mk[keep] * np.log(mk[keep] / emp[keep]))))
        return np.mean(out)

    assert gap(res.M.tensor.data) < gap(np.eye(res.vocab.n_p))


# -- checkpoints and determinism ------------------------------------------------------

def _files(root):
    return sorted(p.relative_to(root) for p in Path(root).rglob("*") if p.is_file())


def test_same_seed_gives_identical_outputs(tmp_path):
    for name in ("a", "b"):
        trainer.train(tiny(mode="dll", out=str(tmp_path / name)))
    files = _files(tmp_path / "a")
    assert files == _files(tmp_path / "b")
    assert {"runlog.csv", "metrics.csv", "per_class.csv"} <= {f.name for f in files}
    assert any(f.name == "arrays.bin" for f in files)
    for f in files:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False), f


def test_different_seed_differs(tmp_path):
    a = trainer.train(tiny(mode="pdl", seed=0))
    b = trainer.train(tiny(mode="pdl", seed=1))
    assert not np.array_equal(a.model.params["A.W"].data, b.model.params["A.W"].data)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny(mode="dll", out=str(tmp_path))
    res = trainer.train(cfg)
    ck = tmp_path / "checkpoint_epoch001"
    model, M, cfg2, vocab, header, arrays = trainer.restore(ck)
    for n, t in res.model.params.items():
        np.testing.assert_array_equal(model.params[n].data, t.data)
    np.testing.assert_array_equal(M.tensor.data, res.M.tensor.data)
    assert int(header["n_p"]) == vocab.n_p and cfg2.mode == "dll"
    assert vocab.same_structure(res.vocab)
    np.testing.assert_array_equal(vocab.train_frequency, res.vocab.train_frequency)
    assert trainer.evaluate(model, M, res.test, vocab, cfg2).flat() == res.runlog.epochs[-1][1].flat()


def test_resume_matches_uninterrupted_run(tmp_path):
    full = trainer.train(tiny(mode="dll", epochs=3, out=str(tmp_path / "full")))
    trainer.train(tiny(mode="dll", epochs=1, out=str(tmp_path / "part")))
    resumed = trainer.train(tiny(mode="dll", epochs=3, resume=str(tmp_path / "part" / "checkpoint_epoch000"),
                                 out=str(tmp_path / "resumed")))
    for n, t in full.model.params.items():
        np.testing.assert_array_equal(resumed.model.params[n].data, t.data)
    np.testing.assert_array_equal(resumed.M.tensor.data, full.M.tensor.data)
    assert resumed.runlog.iterations[0]["iteration"] == full.runlog.iterations[len(resumed.runlog.iterations) // 2]["iteration"]
    a, _, _, _ = load_checkpoint(tmp_path / "full" / "checkpoint_epoch002")
    b, _, _, _ = load_checkpoint(tmp_path / "resumed" / "checkpoint_epoch002")
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_corrupt_checkpoint_rejected(tmp_path):
    trainer.train(tiny(mode="baseline", epochs=1, out=str(tmp_path)))
    ck = tmp_path / "checkpoint_epoch000"
    (ck / "arrays.bin").write_bytes(b"\0" * 16)
    with pytest.raises(ValueError, match="runs past the end"):
        load_checkpoint(ck)


# -- config ------------------------------------------------------------------------------

def test_config_round_trip():
    cfg = tiny(mode="kdl", run_name="x", ks=(1, 3), beta=2e-4, data_seed=7)
    assert parse_config(format_config(cfg)) == cfg


def test_config_errors():
    with pytest.raises(ValueError, match=r"<config>:2: unknown key 'colour'"):
        parse_config("mode = dll\ncolour = red\n")
    with pytest.raises(ValueError, match=r"bad value"):
        parse_config("epochs = many\n")
    with pytest.raises(ValueError, match="mode must be"):
        parse_config("mode = both\n")


def test_compare_rows_and_vocab_check(tmp_path):
    cfgs = [tiny(mode="pdl", run_name="mc0", mc_steps=0, epochs=1), tiny(mode="pdl", run_name="mc1", epochs=1)]
    rows = trainer.compare(cfgs, seeds=[0, 1], out_path=tmp_path / "c.csv")
    assert [(r["run"], r["seed"]) for r in rows] == [("mc0", 0), ("mc0", 1), ("mc1", 0), ("mc1", 1)]
    assert {"mR@5", "R@5", "Mean", "mAP"} <= set(rows[0])
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 5
    with pytest.raises(ValueError, match="different predicate vocabulary"):
        trainer.compare([tiny(epochs=1), tiny(epochs=1, table_seed=3)])


# -- CLI ----------------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        "# tiny run\nmode = dll\nrun_name = cli\nn_train = 128\nn_test = 32\nd = 8\nhidden = 8\nepochs = 1\n"
    )
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    assert {"train.jsonl", "test.jsonl", "vocab.tsv"} <= {p.name for p in (tmp_path / "data").iterdir()}

    file_cfg = tmp_path / "file.cfg"
    file_cfg.write_text(cfg_path.read_text() + f"train_data = {tmp_path / 'data' / 'train.jsonl'}\n"
                        f"test_data = {tmp_path / 'data' / 'test.jsonl'}\nvocab = {tmp_path / 'data' / 'vocab.tsv'}\n")
    assert cli.main(["train", "--config", str(file_cfg), "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "mR@5" in out
    for name in ("metrics.csv", "per_class.csv", "runlog.csv", "checkpoint_epoch000"):
        assert (tmp_path / "run" / name).exists(), name

    # training on the JSONL files matches training on the generated data directly
    direct = trainer.train(load_config(cfg_path))
    from_files = trainer.restore(tmp_path / "run" / "checkpoint_epoch000")[0]
    for n, t in direct.model.params.items():
        np.testing.assert_array_equal(from_files.params[n].data, t.data)

    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint_epoch000"),
                     "--data", str(tmp_path / "data" / "test.jsonl"), "--out", str(tmp_path / "ev")]) == 0
    assert filecmp.cmp(tmp_path / "ev" / "metrics.csv", tmp_path / "run" / "metrics.csv", shallow=False)

    second = tmp_path / "b.cfg"
    second.write_text(cfg_path.read_text().replace("mode = dll", "mode = baseline").replace("cli", "base"))
    assert cli.main(["compare", "--configs", str(cfg_path), str(second), "--seeds", "0", "1",
                     "--out", str(tmp_path / "cmp")]) == 0
    lines = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("run,mode,seed")


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("mode = dll\nlearning_rate = 3\n")
    assert cli.main(["train", "--config", str(bad)]) == 1
    assert "unknown key 'learning_rate'" in capsys.readouterr().err
