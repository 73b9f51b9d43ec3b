"""Predicate vocabulary, its actional/spatial decomposition and the maps between them."""
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Predicate:
    name: str
    actional: Optional[int]
    spatial: Optional[int]

    @property
    def patterns(self):
        out = set()
        if self.actional is not None:
            out.add(("a", self.actional))
        if self.spatial is not None:
            out.add(("s", self.spatial))
        return frozenset(out)


@dataclass(eq=False)
class PredicateVocabulary:
    predicates: list
    actional_patterns: list
    spatial_patterns: list
    train_frequency: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.train_frequency is None:
            self.train_frequency = np.zeros(len(self.predicates), dtype=np.int64)
        self.train_frequency = np.asarray(self.train_frequency, dtype=np.int64)

    @property
    def n_p(self):
        return len(self.predicates)

    @property
    def n_a(self):
        return len(self.actional_patterns)

    @property
    def n_s(self):
        return len(self.spatial_patterns)

    @property
    def names(self):
        return [p.name for p in self.predicates]

    def index(self, name):
        for i, p in enumerate(self.predicates):
            if p.name == name:
                return i
        raise KeyError(name)

    def with_frequency(self, freq):
        return PredicateVocabulary(
            list(self.predicates), list(self.actional_patterns), list(self.spatial_patterns), np.asarray(freq)
        )

    def same_structure(self, other):
        return (
            self.predicates == other.predicates
            and self.actional_patterns == other.actional_patterns
            and self.spatial_patterns == other.spatial_patterns
        )

    # -- fixed linear operators ----------------------------------------------

    @cached_property
    def predicate_matrices(self):
        """(Ca[n_a, n_p], Cs[n_s, n_p]) with ``p = p_a @ Ca + p_s @ Cs``."""
        ca = np.zeros((self.n_a, self.n_p))
        cs = np.zeros((self.n_s, self.n_p))
        for j, p in enumerate(self.predicates):
            w = 0.5 if (p.actional is not None and p.spatial is not None) else 1.0
            if p.actional is not None:
                ca[p.actional, j] = w
            if p.spatial is not None:
                cs[p.spatial, j] = w
        return ca, cs

    @cached_property
    def pattern_matrices(self):
        """(Ra[n_p, n_a], Rs[n_p, n_s]): column-normalised membership, so ``p @ Ra`` is a per-pattern mean."""
        ra = np.zeros((self.n_p, self.n_a))
        rs = np.zeros((self.n_p, self.n_s))
        for j, p in enumerate(self.predicates):
            if p.actional is not None:
                ra[j, p.actional] = 1.0
            if p.spatial is not None:
                rs[j, p.spatial] = 1.0
        ra /= np.maximum(ra.sum(axis=0, keepdims=True), 1.0)
        rs /= np.maximum(rs.sum(axis=0, keepdims=True), 1.0)
        return ra, rs

    @cached_property
    def headers(self):
        return np.array([_header(self, k) for k in range(self.n_p)], dtype=np.int64)


def validate(vocab):
    if vocab.n_p < 1:
        raise VocabularyError("vocabulary has no predicates")
    seen = set()
    used_a, used_s = set(), set()
    for j, p in enumerate(vocab.predicates):
        if p.name in seen:
            raise VocabularyError(f"duplicate predicate name {p.name!r}")
        seen.add(p.name)
        if p.actional is None and p.spatial is None:
            raise VocabularyError(f"predicate {p.name!r} has neither an actional nor a spatial pattern")
        if p.actional is not None:
            if not 0 <= p.actional < vocab.n_a:
                raise VocabularyError(f"predicate {p.name!r}: actional id {p.actional} out of range")
            used_a.add(p.actional)
        if p.spatial is not None:
            if not 0 <= p.spatial < vocab.n_s:
                raise VocabularyError(f"predicate {p.name!r}: spatial id {p.spatial} out of range")
            used_s.add(p.spatial)
    for kind, names, used in (("actional", vocab.actional_patterns, used_a), ("spatial", vocab.spatial_patterns, used_s)):
        if len(set(names)) != len(names):
            raise VocabularyError(f"duplicate {kind} pattern name")
        for i, n in enumerate(names):
            if i not in used:
                raise VocabularyError(f"{kind} pattern {n!r} is not used by any predicate")
    if vocab.train_frequency.shape != (vocab.n_p,):
        raise VocabularyError(f"train_frequency has shape {vocab.train_frequency.shape}, expected ({vocab.n_p},)")
    if np.any(vocab.train_frequency < 0):
        raise VocabularyError("negative train frequency")


def from_table(rows, freq=None):
    """Build a vocabulary from ``(name, actional_name | None, spatial_name | None)`` rows."""
    act, spa = [], []
    preds = []
    for name, a, s in rows:
        ai = si = None
        if a is not None:
            if a not in act:
                act.append(a)
            ai = act.index(a)
        if s is not None:
            if s not in spa:
                spa.append(s)
            si = spa.index(s)
        preds.append(Predicate(name, ai, si))
    vocab = PredicateVocabulary(preds, act, spa, freq)
    validate(vocab)
    return vocab


def load_vocabulary(path):
    rows, freq = [], []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 4:
            raise VocabularyError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        name, a, s, count = parts
        try:
            count = int(count)
        except ValueError:
            raise VocabularyError(f"{path}:{lineno}: train count {count!r} is not an integer") from None
        rows.append((name, None if a == "-" else a, None if s == "-" else s))
        freq.append(count)
    return from_table(rows, np.array(freq, dtype=np.int64))


def save_vocabulary(vocab, path):
    lines = ["# name\tactional\tspatial\ttrain_count"]
    for p, f in zip(vocab.predicates, vocab.train_frequency):
        a = vocab.actional_patterns[p.actional] if p.actional is not None else "-"
        s = vocab.spatial_patterns[p.spatial] if p.spatial is not None else "-"
        lines.append(f"{p.name}\t{a}\t{s}\t{int(f)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def map_to_predicates(p_a, p_s, vocab):
    """Couple pattern scores into predicate scores.

    Dual-pattern predicates take the mean of their two pattern scores,
    single-pattern predicates copy the one score they have. Works on a
    single vector or a batch of rows.
    """
    p_a = np.asarray(p_a, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_a.shape[-1] != vocab.n_a or p_s.shape[-1] != vocab.n_s:
        raise ValueError(
            f"expected {vocab.n_a} actional and {vocab.n_s} spatial scores, got {p_a.shape[-1]} and {p_s.shape[-1]}"
        )
    out = np.empty(p_a.shape[:-1] + (vocab.n_p,))
    for j, p in enumerate(vocab.predicates):
        if p.actional is not None and p.spatial is not None:
            out[..., j] = (p_a[..., p.actional] + p_s[..., p.spatial]) / 2.0
        elif p.actional is not None:
            out[..., j] = p_a[..., p.actional]
        else:
            out[..., j] = p_s[..., p.spatial]
    return out


def map_to_patterns(p, vocab):
    """Spread predicate scores back to patterns: each pattern gets the mean over its predicates."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != vocab.n_p:
        raise ValueError(f"expected {vocab.n_p} predicate scores, got {p.shape[-1]}")
    lead = p.shape[:-1]
    sa, na = np.zeros(lead + (vocab.n_a,)), np.zeros(vocab.n_a)
    ss, ns = np.zeros(lead + (vocab.n_s,)), np.zeros(vocab.n_s)
    for j, pred in enumerate(vocab.predicates):
        if pred.actional is not None:
            sa[..., pred.actional] += p[..., j]
            na[pred.actional] += 1
        if pred.spatial is not None:
            ss[..., pred.spatial] += p[..., j]
            ns[pred.spatial] += 1
    return sa / np.maximum(na, 1), ss / np.maximum(ns, 1)


def _header(vocab, k):
    mine = vocab.predicates[k].patterns
    best = None
    for h, p in enumerate(vocab.predicates):
        if h == k or not (mine & p.patterns):
            continue
        if best is None or vocab.train_frequency[h] > vocab.train_frequency[best]:
            best = h
    if best is None or vocab.train_frequency[best] <= vocab.train_frequency[k]:
        return -1
    return best


def header_for(k, vocab):
    """Most frequent predicate sharing a pattern with ``k``, or None if ``k`` already leads its groups."""
    if not 0 <= k < vocab.n_p:
        raise IndexError(f"predicate index {k} out of range [0, {vocab.n_p})")
    h = _header(vocab, k)
    return None if h < 0 else h
