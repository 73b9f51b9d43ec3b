"""Synthetic long-tailed, pattern-structured segments and JSONL feature files."""
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .labels import from_table

ACTIONAL_NAMES = [
    "sit", "jump", "stand", "walk", "run", "fly", "bite", "touch",
    "watch", "chase", "hold", "pull", "kick", "lie", "ride", "follow",
]
SPATIAL_NAMES = ["above", "below", "front", "behind", "left", "right", "inside", "next_to", "away", "toward"]


@dataclass(eq=False)
class SegmentRecord:
    id: str
    features: np.ndarray
    labels: tuple
    latent_a: Optional[tuple] = None
    latent_s: Optional[tuple] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = tuple(sorted(int(x) for x in self.labels))
        if not self.labels:
            raise ValueError(f"record {self.id!r} has no labels")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"record {self.id!r} has non-finite features")

    def __eq__(self, other):
        if not isinstance(other, SegmentRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.labels == other.labels
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


@dataclass
class SyntheticConfig:
    n_a: int = 8
    n_s: int = 6
    n_p: int = 30
    d: int = 64
    zipf_s: float = 1.5
    noise_sigma: float = 0.5
    n_train: int = 20000
    n_test: int = 4000
    seed: int = 0
    extra_prob: float = 0.01
    table_seed: int = 0
    table: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.extra_prob <= 1.0:
            raise ValueError("extra_prob must lie in [0, 1]")


def _pattern_names(pool, n, prefix):
    return list(pool[:n]) if n <= len(pool) else [f"{prefix}{i}" for i in range(n)]


def default_table(n_a, n_s, n_p, seed=0):
    """Predicate table listed in frequency-rank order (row 0 is the head class).

    A quarter of the actional patterns and a sixth of the spatial patterns
    (at least one each) only appear as single-pattern predicates; the rest
    combine into dual-pattern predicates.
    """
    n_sa = max(1, n_a // 4)
    n_ss = max(1, n_s // 6)
    a_dual, s_dual = n_a - n_sa, n_s - n_ss
    n_dual = n_p - n_sa - n_ss
    if a_dual < 1 or s_dual < 1 or not max(a_dual, s_dual) <= n_dual <= a_dual * s_dual:
        raise ValueError(f"cannot build a table with n_a={n_a}, n_s={n_s}, n_p={n_p}")
    rng = np.random.default_rng(seed)
    act = _pattern_names(ACTIONAL_NAMES, n_a, "a")
    spa = _pattern_names(SPATIAL_NAMES, n_s, "s")
    cover = {(i % a_dual, i % s_dual) for i in range(max(a_dual, s_dual))}
    rest = [c for c in np.ndindex(a_dual, s_dual) if c not in cover]
    extra = rng.permutation(len(rest))[: n_dual - len(cover)]
    cells = sorted(cover) + [rest[i] for i in sorted(extra)]
    rows = [(f"{act[a]}_{spa[s]}", act[a], spa[s]) for a, s in cells]
    rows += [(act[a_dual + i], act[a_dual + i], None) for i in range(n_sa)]
    rows += [(spa[s_dual + i], None, spa[s_dual + i]) for i in range(n_ss)]
    return [rows[i] for i in rng.permutation(len(rows))]


def zipf_probabilities(n, s):
    w = np.arange(1, n + 1, dtype=np.float64) ** (-s)
    return w / w.sum()


def mixing_matrices(cfg, vocab):
    """Fixed unit-norm pattern directions (W_a[d, n_a], W_s[d, n_s]) for a config."""
    rng = np.random.default_rng([cfg.seed, 0])
    w_a = rng.standard_normal((cfg.d, vocab.n_a))
    w_s = rng.standard_normal((cfg.d, vocab.n_s))
    return w_a / np.linalg.norm(w_a, axis=0), w_s / np.linalg.norm(w_s, axis=0)


def _check_ambiguity(vocab):
    groups = {}
    for p in vocab.predicates:
        groups.setdefault(p.patterns, []).append(p.name)
    clashes = [names for names in groups.values() if len(names) > 1]
    if clashes:
        raise ValueError(f"predicates with identical pattern sets cannot be told apart: {clashes}")


def labels_from_latents(z_a, z_s, vocab):
    """Multi-hot predicates whose whole pattern set is active."""
    z_a = np.atleast_2d(z_a).astype(bool)
    z_s = np.atleast_2d(z_s).astype(bool)
    out = np.ones((z_a.shape[0], vocab.n_p), dtype=bool)
    for j, p in enumerate(vocab.predicates):
        if p.actional is not None:
            out[:, j] &= z_a[:, p.actional]
        if p.spatial is not None:
            out[:, j] &= z_s[:, p.spatial]
    return out


def _sample_split(n, prefix, probs, vocab, w_a, w_s, cfg, rng):
    primary = rng.choice(vocab.n_p, size=n, p=probs)
    z_a = np.zeros((n, vocab.n_a), dtype=bool)
    z_s = np.zeros((n, vocab.n_s), dtype=bool)
    for j, p in enumerate(vocab.predicates):
        sel = primary == j
        if p.actional is not None:
            z_a[sel, p.actional] = True
        if p.spatial is not None:
            z_s[sel, p.spatial] = True
    z_a |= rng.random((n, vocab.n_a)) < cfg.extra_prob
    z_s |= rng.random((n, vocab.n_s)) < cfg.extra_prob
    feats = z_a @ w_a.T + z_s @ w_s.T + cfg.noise_sigma * rng.standard_normal((n, cfg.d))
    lab = labels_from_latents(z_a, z_s, vocab)
    return [
        SegmentRecord(
            f"{prefix}{i:06d}",
            feats[i],
            np.flatnonzero(lab[i]),
            tuple(np.flatnonzero(z_a[i])),
            tuple(np.flatnonzero(z_s[i])),
        )
        for i in range(n)
    ]


def generate(cfg):
    """Return ``(train, test, vocab)``; the vocabulary carries train-split label counts."""
    rows = cfg.table if cfg.table is not None else default_table(cfg.n_a, cfg.n_s, cfg.n_p, cfg.table_seed)
    vocab = from_table(rows)
    _check_ambiguity(vocab)
    w_a, w_s = mixing_matrices(cfg, vocab)
    probs = zipf_probabilities(vocab.n_p, cfg.zipf_s)
    rng = np.random.default_rng([cfg.seed, 1])
    train = _sample_split(cfg.n_train, "train", probs, vocab, w_a, w_s, cfg, rng)
    test = _sample_split(cfg.n_test, "test", probs, vocab, w_a, w_s, cfg, rng)
    return train, test, vocab.with_frequency(label_counts(train, vocab.n_p))


def independent_probe_set(cfg, vocab, n, seed=0):
    """Segments with one actional and one spatial pattern drawn independently and uniformly.

    Returns ``(features, actional_index, spatial_index)``. Used to measure
    how much spatial information survives in the actional feature.
    """
    w_a, w_s = mixing_matrices(cfg, vocab)
    rng = np.random.default_rng([cfg.seed, 2, seed])
    a = rng.integers(vocab.n_a, size=n)
    s = rng.integers(vocab.n_s, size=n)
    feats = w_a[:, a].T + w_s[:, s].T + cfg.noise_sigma * rng.standard_normal((n, cfg.d))
    return feats, a, s


def label_counts(records, n_p):
    counts = np.zeros(n_p, dtype=np.int64)
    for r in records:
        for k in r.labels:
            counts[k] += 1
    return counts


def as_arrays(records, n_p):
    """Stack records into (features[N, d], multi-hot labels[N, n_p])."""
    if not records:
        return np.zeros((0, 0)), np.zeros((0, n_p))
    x = np.stack([r.features for r in records])
    q = np.zeros((len(records), n_p))
    for i, r in enumerate(records):
        q[i, list(r.labels)] = 1.0
    return x, q


def save(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "features": r.features.tolist(), "labels": list(r.labels)}) + "\n")


def load(path, n_p=None):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = SegmentRecord(str(obj["id"]), obj["features"], obj["labels"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            if any(k < 0 for k in rec.labels) or (n_p is not None and rec.labels[-1] >= n_p):
                raise ValueError(f"{path}:{lineno}: label index out of range for {n_p} predicates")
            records.append(rec)
    return records


def head_tail_partition(records, vocab, quantile=0.5):
    """Split predicate indices into the most frequent classes holding ``quantile`` of the label mass and the rest."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    counts = label_counts(records, vocab.n_p)
    return partition_by_counts(counts, quantile)


def partition_by_counts(counts, quantile=0.5):
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    need = quantile * counts.sum() * (1 - 1e-12)
    head, acc = [], 0
    for j in order:
        if head and acc >= need:
            break
        head.append(int(j))
        acc += counts[j]
    tail = sorted(set(range(len(counts))) - set(head))
    return sorted(head), tail
