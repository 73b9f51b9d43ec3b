"""Knowledge-level label decoupling.

Target knowledge is supervised with BCE. Non-target knowledge lives in a
learnable n_p x n_p correlation matrix ``M`` (identity at start): each
ground-truth class ``k`` pulls row ``M[k]`` toward the model's masked
prediction, and pulls the model's masked prediction toward row ``M[h]`` of
its header ``h``, the most frequent class sharing a pattern with ``k``.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .pdl import init_linear, init_mlp, linear, mlp


@dataclass
class KDLConfig:
    alpha0: float = 0.1
    beta: float = 1e-4
    warmup_epochs: int = 10
    gamma_base: float = 0.99

    def __post_init__(self):
        if self.alpha0 < 0 or self.beta < 0:
            raise ValueError("alpha0 and beta must be >= 0")
        if not 0.0 < self.gamma_base <= 1.0:
            raise ValueError(f"gamma_base must lie in (0, 1], got {self.gamma_base}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


class CorrelationMatrix:
    """Row scores of per-class non-target distributions, identity at init."""

    def __init__(self, n_p):
        self.params = ad.ParameterSet()
        self.params.add("M", np.eye(n_p))

    @property
    def tensor(self):
        return self.params["M"]

    @property
    def n_p(self):
        return self.params["M"].shape[0]

    def row(self, k):
        return self.params["M"].data[k]


class JointModel:
    """Undecoupled encoder (same shape as one disentangler) with an n_p-way head."""

    kind = "joint"

    def __init__(self, d, hidden, n_p, seed=0, zeros=False):
        self.d, self.hidden, self.n_p = d, hidden, n_p
        rng = np.random.default_rng(seed)
        self.params = ad.ParameterSet()
        init_mlp(self.params, "E", d, hidden, hidden, rng, zeros)
        init_linear(self.params, "P", hidden, n_p, rng, zeros)

    def predicate_scores(self, f_v):
        f_v = ad.as_tensor(f_v)
        if f_v.data.ndim != 2 or f_v.shape[1] != self.d:
            raise ValueError(f"expected features of shape [B, {self.d}], got {f_v.shape}")
        return ad.sigmoid(linear(self.params, "P", mlp(self.params, "E", f_v)))


def mask_and_normalize(v, k):
    """Distribution over all classes except ``k`` (softmax of the rest, zero at ``k``)."""
    v = np.asarray(v, dtype=np.float64)
    if not 0 <= k < v.shape[-1]:
        raise IndexError(f"mask index {k} out of range for {v.shape[-1]} classes")
    return ad.masked_softmax(v, k).data


def _multi_hot(q):
    q = np.asarray(q.data if isinstance(q, ad.Tensor) else q, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if np.any(q.sum(axis=1) < 1):
        raise ValueError("every sample needs at least one positive label")
    return q


def target_loss(p, q):
    _multi_hot(q)
    return ad.bce_loss(p, q)


def ground_truth_pairs(q):
    """(sample index, class index) for every positive entry of multi-hot ``q``."""
    b, k = np.nonzero(_multi_hot(q))
    return b.astype(np.int64), k.astype(np.int64)


def _as_batch(p):
    p = ad.as_tensor(p)
    return ad.reshape(p, (1, -1)) if p.data.ndim == 1 else p


def correlation_loss(M, p, q):
    """Batch L_cm: gradients reach only ``M``; ``p`` is blocked."""
    p = _as_batch(p)
    b, k = ground_truth_pairs(q)
    p_raw = ad.logit(ad.detach(p)).data
    kl = ad.masked_kl(ad.take_rows(M.tensor, k), p_raw[b], k)
    return ad.scale(ad.total(kl), 1.0 / p.shape[0])


def transfer_loss(M, p, q, vocab):
    """Batch L_nt: gradients reach only the model; ``M`` is blocked. Classes without a header add 0."""
    p = _as_batch(p)
    b, k = ground_truth_pairs(q)
    h = vocab.headers[k]
    keep = h >= 0
    b, k, h = b[keep], k[keep], h[keep]
    if b.size == 0:
        return ad.Tensor(0.0)
    p_raw = ad.logit(p)
    m_rows = ad.detach(M.tensor).data[h]
    kl = ad.masked_kl(ad.take_rows(p_raw, b), m_rows, k)
    return ad.scale(ad.total(kl), 1.0 / p.shape[0])


def correlation_update_loss(M, k, p):
    """Single-sample L_cm for ground-truth class ``k``."""
    q = np.zeros(M.n_p)
    if not 0 <= k < M.n_p:
        raise IndexError(f"class index {k} out of range")
    q[k] = 1.0
    return correlation_loss(M, p, q)


def knowledge_transfer_loss(M, k, p, vocab):
    """Single-sample L_nt for ground-truth class ``k``."""
    if not 0 <= k < M.n_p:
        raise IndexError(f"class index {k} out of range")
    q = np.zeros(M.n_p)
    q[k] = 1.0
    return transfer_loss(M, p, q, vocab)


def alpha(i, epoch, cfg):
    """Weight of the transfer loss: held at alpha0 during warm-up, then grows linearly in the global iteration."""
    if epoch < cfg.warmup_epochs:
        return cfg.alpha0
    return cfg.alpha0 + cfg.beta * i


def gamma(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.gamma_base**epoch


def kdl_total(M, p, q, vocab, cfg, i, epoch):
    a = alpha(i, epoch, cfg)
    l_t = target_loss(p, q)
    l_cm = correlation_loss(M, p, q)
    l_nt = transfer_loss(M, p, q, vocab)
    loss = ad.add(ad.add(l_t, l_cm), ad.scale(l_nt, a))
    return {"loss": loss, "alpha": a, "L_t": l_t, "L_cm": l_cm, "L_nt": l_nt}
