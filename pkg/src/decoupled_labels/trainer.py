"""Training loop, evaluation and multi-run comparison."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import kdl, pdl
from .checkpoint import load_checkpoint, save_checkpoint
from .labels import load_vocabulary
from .metrics import evaluate_scores, write_metrics_csv, write_per_class_csv

log = logging.getLogger(__name__)

TARGET_GROUPS = ("D_a", "D_s", "A", "S")
ADVERSARIAL_GROUPS = ("D_a", "D_s", "N_a2s", "N_s2a")
LOSS_KEYS = ("L_PDL", "L_t", "L_cm", "L_nt", "total")


@dataclass
class RunLog:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["iteration", "epoch", *LOSS_KEYS, "alpha", "gamma"]
            w.writerow(cols)
            for row in self.iterations:
                w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in cols])


@dataclass
class TrainResult:
    model: object
    M: object
    runlog: RunLog
    vocab: object
    test: list
    cfg: object
    state: dict


def load_data(cfg):
    """(train, test, vocab) from JSONL files or from the synthetic generator."""
    if cfg.train_data:
        if not cfg.vocab:
            raise ValueError("train_data needs a vocab file")
        vocab = load_vocabulary(cfg.vocab)
        train = data_mod.load(cfg.train_data, vocab.n_p)
        test = data_mod.load(cfg.test_data, vocab.n_p) if cfg.test_data else []
        return train, test, vocab
    return data_mod.generate(cfg.synthetic)


def build_model(cfg, vocab, d):
    if cfg.mode in ("pdl", "dll"):
        return pdl.PDLModel(d, cfg.hidden, vocab.n_a, vocab.n_s, seed=cfg.seed)
    return kdl.JointModel(d, cfg.hidden, vocab.n_p, seed=cfg.seed)


def _scores(model, x, vocab, cfg):
    if model.kind == "pdl":
        return model.predicate_scores(x, vocab, cfg.pdl)
    return model.predicate_scores(x), None


def _checkpoint_arrays(model, M, opt, opt_m):
    arrays = {f"model/{n}": t.data for n, t in model.params.items()}
    if M is not None:
        arrays["M"] = M.tensor.data
    arrays.update({f"opt/{k}": v for k, v in opt.state().items()})
    if opt_m is not None:
        arrays.update({f"optM/{k}": v for k, v in opt_m.state().items()})
    return arrays


def restore(path):
    """Rebuild (model, M, cfg, vocab, header, arrays) from a checkpoint directory."""
    arrays, header, cfg, vocab = load_checkpoint(path)
    model = build_model(cfg, vocab, int(header["d"]))
    model.params.load_state({n[len("model/"):]: a for n, a in arrays.items() if n.startswith("model/")})
    M = None
    if "M" in arrays:
        if int(header["n_p"]) != arrays["M"].shape[0]:
            raise ValueError("checkpoint M does not match its n_p header")
        M = kdl.CorrelationMatrix(vocab.n_p)
        M.params.load_state({"M": arrays["M"]})
    return model, M, cfg, vocab, header, arrays


def train(cfg, data=None, on_update=None):
    """Train ``cfg.mode`` with the fixed per-iteration update order.

    ``on_update(stage, groups)`` is called after every optimizer step with
    the stage name and the parameter groups it touched.
    """
    train_recs, test_recs, vocab = data if data is not None else load_data(cfg)
    x_all, q_all = data_mod.as_arrays(train_recs, vocab.n_p)
    model = build_model(cfg, vocab, x_all.shape[1])
    use_kdl = cfg.mode in ("kdl", "dll")
    M = kdl.CorrelationMatrix(vocab.n_p) if use_kdl else None
    opt = ad.Optimizer(model.params, cfg.lr, cfg.optimizer)
    opt_m = ad.Optimizer(M.params, cfg.lr, cfg.optimizer) if use_kdl else None
    kcfg = cfg.kdl
    runlog = RunLog()
    it, start_epoch = 0, 0

    if cfg.resume:
        r_model, r_M, _, _, header, arrays = restore(cfg.resume)
        model.params.load_state(r_model.params.state())
        if M is not None:
            M.params.load_state(r_M.params.state())
        opt.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
        if opt_m is not None:
            opt_m.load_state({k[5:]: v for k, v in arrays.items() if k.startswith("optM/")})
        it, start_epoch = int(header["iteration"]), int(header["epoch"]) + 1

    out_dir = Path(cfg.out) if cfg.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    if model.kind == "pdl":
        target_names = model.params.names(*TARGET_GROUPS)
        adv_names = model.params.names(*ADVERSARIAL_GROUPS)
    else:
        target_names = model.params.names()

    def check(row):
        if not all(np.isfinite(row[k]) for k in LOSS_KEYS if k in row):
            raise FloatingPointError(
                f"non-finite loss at iteration {row['iteration']}: "
                + ", ".join(f"{k}={row[k]}" for k in LOSS_KEYS if k in row)
            )

    def step(loss, names, stage, groups, optimizer=opt, params=model.params):
        check(row)
        params.zero_grad()
        ad.backward(loss)
        optimizer.step(names)
        if on_update is not None:
            on_update(stage, groups)

    n = x_all.shape[0]
    for epoch in range(start_epoch, cfg.epochs):
        g = kdl.gamma(epoch, kcfg)
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, q = x_all[idx], q_all[idx]
            a = kdl.alpha(it, epoch, kcfg) if use_kdl else 0.0
            row = {"iteration": it, "epoch": epoch, "alpha": a, "gamma": g,
                   "L_PDL": 0.0, "L_t": 0.0, "L_cm": 0.0, "L_nt": 0.0}
            w_kdl = g if model.kind == "pdl" else 1.0

            p, _ = _scores(model, x, vocab, cfg)
            l_t = kdl.target_loss(p, q)
            row["L_t"] = l_t.item()
            step(ad.scale(l_t, w_kdl), target_names, "L_t", TARGET_GROUPS if model.kind == "pdl" else ("E", "P"))

            if model.kind == "pdl":
                out = model.forward(x)
                l_adv = pdl.adversarial_loss(model, out, cfg.pdl)
                row["L_PDL"] = l_adv.item()
                step(l_adv, adv_names, "L_PDL", ADVERSARIAL_GROUPS)

            if use_kdl:
                p, _ = _scores(model, x, vocab, cfg)
                l_cm = kdl.correlation_loss(M, p, q)
                row["L_cm"] = l_cm.item()
                step(ad.scale(l_cm, w_kdl), None, "L_cm", ("M",), optimizer=opt_m, params=M.params)
                l_nt = kdl.transfer_loss(M, p, q, vocab)
                row["L_nt"] = l_nt.item()
                if a > 0 and l_nt.requires_grad:
                    step(ad.scale(l_nt, w_kdl * a), target_names, "L_nt",
                         TARGET_GROUPS if model.kind == "pdl" else ("E", "P"))

            row["total"] = row["L_PDL"] + w_kdl * (row["L_t"] + row["L_cm"] + a * row["L_nt"])
            check(row)
            runlog.iterations.append(row)
            it += 1

        if test_recs:
            report = evaluate(model, M, test_recs, vocab, cfg)
            runlog.epochs.append((epoch, report))
            log.info("epoch %d  mR@5=%.4f  R@5=%.4f", epoch, report.mean_recall.get(5, float("nan")),
                     report.recall.get(5, float("nan")))
        if out_dir and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1):
            header = {
                "mode": cfg.mode, "model_kind": model.kind, "d": x_all.shape[1], "hidden": cfg.hidden,
                "n_a": vocab.n_a, "n_s": vocab.n_s, "n_p": vocab.n_p,
                "iteration": it, "epoch": epoch, "alpha": kdl.alpha(it, epoch, kcfg),
            }
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch:03d}", _checkpoint_arrays(model, M, opt, opt_m),
                            header, cfg.replace(out=None, resume=None), vocab)

    result = TrainResult(model, M, runlog, vocab, test_recs, cfg, {"iteration": it, "epoch": cfg.epochs - 1})
    if out_dir:
        runlog.write_csv(out_dir / "runlog.csv")
        _write_epoch_metrics(out_dir / "epoch_metrics.csv", cfg, runlog)
        if test_recs:
            evaluate(model, M, test_recs, vocab, cfg, out_dir=out_dir)
    return result


def _write_epoch_metrics(path, cfg, runlog):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "mode", "epoch", "metric", "K", "value"])
        for epoch, report in runlog.epochs:
            for metric, k, v in report.rows():
                w.writerow([cfg.run_name, cfg.mode, epoch, metric, k, repr(float(v))])


def head_tail(vocab, cfg):
    return data_mod.partition_by_counts(vocab.train_frequency, cfg.head_quantile)


def evaluate(model, M, test, vocab, cfg, out_dir=None):
    """Metrics of ``model`` on ``test``; writes metrics.csv and per_class.csv when ``out_dir`` is given.

    ``M`` is accepted for symmetry with training artifacts; inference never reads it.
    """
    x, q = data_mod.as_arrays(test, vocab.n_p)
    scores = pdl.predict(model, x, vocab, cfg.pdl)
    head, tail = head_tail(vocab, cfg)
    report = evaluate_scores(scores, q.astype(bool), cfg.ks, cfg.mean_ks, head, tail)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / "metrics.csv", [(cfg.run_name, cfg.mode, report)])
        write_per_class_csv(out_dir / "per_class.csv", [(cfg.run_name, cfg.mode, report)], vocab,
                            q.sum(axis=0))
    return report


def evaluate_checkpoint(path, data_path, out_dir=None):
    model, M, cfg, vocab, _, _ = restore(path)
    test = data_mod.load(data_path, vocab.n_p)
    return evaluate(model, M, test, vocab, cfg, out_dir)


def compare(cfgs, seeds=None, out_path=None):
    """Train every config (for each seed) and tabulate final test metrics.

    Returns the list of row dicts; writes them as CSV when ``out_path`` is set.
    """
    rows = []
    ref_vocab = None
    for cfg in cfgs:
        for seed in seeds if seeds is not None else [cfg.seed]:
            run_cfg = cfg.replace(seed=seed, out=None)
            res = train(run_cfg)
            if ref_vocab is None:
                ref_vocab = res.vocab
            elif not ref_vocab.same_structure(res.vocab):
                raise ValueError(f"run {run_cfg.run_name!r} uses a different predicate vocabulary")
            report = res.runlog.epochs[-1][1] if res.runlog.epochs else evaluate(
                res.model, res.M, res.test, res.vocab, run_cfg)
            row = {"run": run_cfg.run_name, "mode": run_cfg.mode, "seed": seed,
                   "mc_steps": run_cfg.mc_steps, "eta": run_cfg.eta, "beta": run_cfg.beta}
            row.update(report.flat())
            rows.append(row)
    if out_path is not None:
        cols = list(rows[0]) if rows else []
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows
