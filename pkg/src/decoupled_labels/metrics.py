"""Per-segment ranking metrics: R@K, mR@K, P@K, Mean and a label-ranking macro-AP.

``preds`` is either a score matrix [S, n_p] or a mapping from segment id to
a score vector; ``truths`` is a multi-hot matrix, a list of label
collections, or a mapping from segment id to label collections. Within a
segment, classes are ranked by descending score with ties going to the
lower class index.
"""
import csv
from dataclasses import dataclass, field
from collections.abc import Mapping

import numpy as np

from . import _kernels


def _align(preds, truths):
    if isinstance(truths, Mapping):
        ids = list(truths)
        if not isinstance(preds, Mapping):
            raise TypeError("keyed truths need keyed predictions")
        missing = [i for i in ids if i not in preds]
        if missing:
            raise ValueError(f"no prediction for segment(s) {missing[:5]}")
        scores = np.stack([np.asarray(preds[i], dtype=np.float64) for i in ids]) if ids else np.zeros((0, 0))
        truth_list = [truths[i] for i in ids]
    else:
        scores = np.asarray(list(preds.values()) if isinstance(preds, Mapping) else preds, dtype=np.float64)
        truth_list = truths
    scores = np.atleast_2d(scores)
    t = np.asarray(truth_list) if not isinstance(truth_list, np.ndarray) else truth_list
    if t.ndim == 2 and t.shape == scores.shape and t.dtype != object:
        truth = t.astype(bool)
    else:
        if len(truth_list) != scores.shape[0]:
            raise ValueError(f"{scores.shape[0]} predictions for {len(truth_list)} segments")
        truth = np.zeros(scores.shape, dtype=bool)
        for i, labels in enumerate(truth_list):
            truth[i, list(labels)] = True
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite prediction scores")
    return np.ascontiguousarray(scores), truth


def _check_k(K):
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")


def topk_hits(scores, truth, K):
    """Boolean [S, n_p]: true label that lands in its segment's top-K."""
    ranks = _kernels.class_ranks(scores)
    return truth & (ranks < K)


def per_class_recall(preds, truths, K):
    """Recall@K for every class; NaN for classes without ground truth."""
    _check_k(K)
    scores, truth = _align(preds, truths)
    hits = topk_hits(scores, truth, K).sum(axis=0)
    n = truth.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, hits / np.maximum(n, 1), np.nan)


def recall_at_k(preds, truths, K):
    _check_k(K)
    scores, truth = _align(preds, truths)
    n = truth.sum()
    if n == 0:
        raise ValueError("no ground-truth labels")
    return float(topk_hits(scores, truth, K).sum() / n)


def mean_recall_at_k(preds, truths, K, classes=None):
    """Unweighted mean of per-class recall over classes that have ground truth (optionally a subset)."""
    rec = per_class_recall(preds, truths, K)
    if classes is not None:
        rec = rec[np.asarray(classes, dtype=np.int64)]
    rec = rec[~np.isnan(rec)]
    if rec.size == 0:
        raise ValueError("no class has any ground truth")
    return float(rec.mean())


def precision_at_k(preds, truths, K):
    _check_k(K)
    scores, truth = _align(preds, truths)
    if scores.shape[0] == 0:
        raise ValueError("no segments")
    return float((topk_hits(scores, truth, K).sum(axis=1) / K).mean())


def mean_metric(r50, r100, mr50, mr100):
    return (r50 + r100 + mr50 + mr100) / 4.0


def per_class_ap(preds, truths):
    scores, truth = _align(preds, truths)
    return _kernels.column_average_precision(scores, truth)


def macro_ap(preds, truths):
    """Mean over classes with positives of the average precision of the class's score column."""
    ap = per_class_ap(preds, truths)
    ap = ap[~np.isnan(ap)]
    if ap.size == 0:
        raise ValueError("no class has any positive")
    return float(ap.mean())


@dataclass
class MetricsReport:
    ks: tuple
    recall: dict
    mean_recall: dict
    precision: dict
    mean: float
    macro_ap: float
    per_class_recall: dict
    head: list = field(default_factory=list)
    tail: list = field(default_factory=list)
    head_mean_recall: dict = field(default_factory=dict)
    tail_mean_recall: dict = field(default_factory=dict)

    def rows(self):
        """Long-format (metric, K, value) triples."""
        out = []
        for k in self.ks:
            out.append(("R", k, self.recall[k]))
            out.append(("mR", k, self.mean_recall[k]))
            out.append(("P", k, self.precision[k]))
            if k in self.head_mean_recall:
                out.append(("head_mR", k, self.head_mean_recall[k]))
            if k in self.tail_mean_recall:
                out.append(("tail_mR", k, self.tail_mean_recall[k]))
        out.append(("Mean", "", self.mean))
        out.append(("mAP", "", self.macro_ap))
        return out

    def flat(self):
        """One dict of column -> value, as used by the comparison table."""
        out = {}
        for metric, k, v in self.rows():
            out[f"{metric}@{k}" if k != "" else metric] = v
        return out


def _nanmean_subset(rec, classes):
    if not classes:
        return float("nan")
    sub = rec[np.asarray(classes, dtype=np.int64)]
    sub = sub[~np.isnan(sub)]
    return float(sub.mean()) if sub.size else float("nan")


def evaluate_scores(scores, truth, ks=(1, 5, 10), mean_ks=(5, 10), head=None, tail=None):
    """Compute every configured metric for a score matrix against a multi-hot truth matrix.

    ``mean_ks`` names the two cut-offs averaged into the Mean column.
    """
    scores, truth = _align(scores, truth)
    ks = tuple(int(k) for k in ks)
    needed = sorted(set(ks) | set(int(k) for k in mean_ks))
    n = truth.sum(axis=0)
    ranks = _kernels.class_ranks(scores)
    recall, mrecall, prec, pcr = {}, {}, {}, {}
    for k in needed:
        _check_k(k)
        hits = truth & (ranks < k)
        recall[k] = float(hits.sum() / truth.sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            rec = np.where(n > 0, hits.sum(axis=0) / np.maximum(n, 1), np.nan)
        pcr[k] = rec
        mrecall[k] = float(np.nanmean(rec))
        prec[k] = float((hits.sum(axis=1) / k).mean())
    k1, k2 = mean_ks
    report = MetricsReport(
        ks=ks,
        recall={k: recall[k] for k in ks},
        mean_recall={k: mrecall[k] for k in ks},
        precision={k: prec[k] for k in ks},
        mean=mean_metric(recall[k1], recall[k2], mrecall[k1], mrecall[k2]),
        macro_ap=float(np.nanmean(_kernels.column_average_precision(scores, truth))),
        per_class_recall={k: pcr[k] for k in ks},
        head=list(head or []),
        tail=list(tail or []),
    )
    if head is not None and tail is not None:
        for k in ks:
            report.head_mean_recall[k] = _nanmean_subset(pcr[k], head)
            report.tail_mean_recall[k] = _nanmean_subset(pcr[k], tail)
    return report


def write_metrics_csv(path, entries):
    """``entries``: iterable of (run, mode, MetricsReport)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "mode", "metric", "K", "value"])
        for run, mode, report in entries:
            for metric, k, v in report.rows():
                w.writerow([run, mode, metric, k, repr(float(v))])


def write_per_class_csv(path, entries, vocab, truth_counts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "mode", "class", "name", "group", "train_frequency", "test_count", "K", "recall"])
        for run, mode, report in entries:
            head = set(report.head)
            for k in report.ks:
                for c, r in enumerate(report.per_class_recall[k]):
                    group = "head" if c in head else "tail"
                    w.writerow([
                        run, mode, c, vocab.predicates[c].name, group,
                        int(vocab.train_frequency[c]), int(truth_counts[c]), k,
                        "" if np.isnan(r) else repr(float(r)),
                    ])
