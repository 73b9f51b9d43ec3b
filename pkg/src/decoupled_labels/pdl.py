"""Pattern-level label decoupling.

The segment feature is split by two disentanglers into an actional and a
spatial feature, each classified into its own pattern set. Two probe
networks try to recover the opposite pattern from each feature; a gradient
reversal layer between disentangler and probe turns that into a min-max
game. Pattern scores are mutually calibrated through the predicate space
and coupled into predicate scores.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DISENTANGLERS = ("D_a", "D_s")
PROBES = ("N_a2s", "N_s2a")
HEADS = ("A", "S")


@dataclass
class PDLConfig:
    grl_lambda: float = 0.13
    eta: float = 1e-2
    mc_steps: int = 1

    def __post_init__(self):
        if self.grl_lambda < 0:
            raise ValueError(f"grl_lambda must be >= 0, got {self.grl_lambda}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.mc_steps < 0:
            raise ValueError(f"mc_steps must be >= 0, got {self.mc_steps}")


def init_linear(params, name, fan_in, fan_out, rng, zeros=False):
    bound = 1.0 / np.sqrt(fan_in)
    w = np.zeros((fan_in, fan_out)) if zeros else rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params.add(f"{name}.W", w)
    params.add(f"{name}.b", np.zeros(fan_out))


def init_mlp(params, name, d_in, hidden, d_out, rng, zeros=False):
    init_linear(params, f"{name}.0", d_in, hidden, rng, zeros)
    init_linear(params, f"{name}.1", hidden, d_out, rng, zeros)


def linear(params, name, x):
    return ad.affine(x, params[f"{name}.W"], params[f"{name}.b"])


def mlp(params, name, x):
    h = ad.relu(linear(params, f"{name}.0", x))
    return linear(params, f"{name}.1", h)


@dataclass
class PDLOutputs:
    f_a: ad.Tensor
    f_s: ad.Tensor
    raw_a: ad.Tensor
    raw_s: ad.Tensor
    p_a: ad.Tensor
    p_s: ad.Tensor


class PDLModel:
    """Disentanglers, probes and pattern heads sharing one ParameterSet."""

    kind = "pdl"

    def __init__(self, d, hidden, n_a, n_s, seed=0, zeros=False):
        self.d, self.hidden, self.n_a, self.n_s = d, hidden, n_a, n_s
        rng = np.random.default_rng(seed)
        self.params = ad.ParameterSet()
        init_mlp(self.params, "D_a", d, hidden, hidden, rng, zeros)
        init_mlp(self.params, "D_s", d, hidden, hidden, rng, zeros)
        init_mlp(self.params, "N_a2s", hidden, hidden, hidden, rng, zeros)
        init_mlp(self.params, "N_s2a", hidden, hidden, hidden, rng, zeros)
        init_linear(self.params, "A", hidden, n_a, rng, zeros)
        init_linear(self.params, "S", hidden, n_s, rng, zeros)

    def forward(self, f_v):
        f_v = ad.as_tensor(f_v)
        if f_v.data.ndim != 2 or f_v.shape[1] != self.d:
            raise ValueError(f"expected features of shape [B, {self.d}], got {f_v.shape}")
        f_a = mlp(self.params, "D_a", f_v)
        f_s = mlp(self.params, "D_s", f_v)
        raw_a = linear(self.params, "A", f_a)
        raw_s = linear(self.params, "S", f_s)
        return PDLOutputs(f_a, f_s, raw_a, raw_s, ad.sigmoid(raw_a), ad.sigmoid(raw_s))

    def predicate_scores(self, f_v, vocab, cfg):
        """Forward, calibrate and couple; returns (predicate probabilities, forward outputs)."""
        out = self.forward(f_v)
        p_a, p_s = mutual_calibrate(out.p_a, out.p_s, vocab, cfg)
        ca, cs = vocab.predicate_matrices
        return ad.add(ad.matmul_const(p_a, ca), ad.matmul_const(p_s, cs)), out


def forward(model, f_v):
    return model.forward(f_v)


def adversarial_loss(model, out, cfg, targets=None):
    """Probe KL loss with gradient reversal between disentanglers and probes.

    ``targets`` optionally overrides the (gradient-blocked) pattern
    distributions the probes are compared against; by default they are the
    softmaxes of the heads' own scores on f_s and f_a.
    """
    if cfg.grl_lambda < 0:
        raise ValueError(f"grl_lambda must be >= 0, got {cfg.grl_lambda}")
    params = model.params
    r_a = ad.gradient_reversal(out.f_a, cfg.grl_lambda)
    r_s = ad.gradient_reversal(out.f_s, cfg.grl_lambda)
    raw_a2s = linear(params, "S", mlp(params, "N_a2s", r_a))
    raw_s2a = linear(params, "A", mlp(params, "N_s2a", r_s))
    if targets is None:
        targets = pattern_targets(out)
    t_s, t_a = targets
    return ad.add(
        ad.kl_divergence(ad.softmax(raw_a2s), ad.Tensor(t_s)),
        ad.kl_divergence(ad.softmax(raw_s2a), ad.Tensor(t_a)),
    )


def pattern_targets(out):
    """Gradient-blocked softmax of the spatial and actional head scores."""
    return ad.softmax(ad.detach(out.raw_s)).data, ad.softmax(ad.detach(out.raw_a)).data


def mutual_calibrate(p_a, p_s, vocab, cfg):
    """Mix pattern scores with their projection through predicate space, ``mc_steps`` times."""
    p_a, p_s = ad.as_tensor(p_a), ad.as_tensor(p_s)
    if cfg.mc_steps == 0 or cfg.eta == 1.0:
        return p_a, p_s
    ca, cs = vocab.predicate_matrices
    ra, rs = vocab.pattern_matrices
    for _ in range(cfg.mc_steps):
        p = ad.add(ad.matmul_const(p_a, ca), ad.matmul_const(p_s, cs))
        p_a, p_s = ad.mix(p_a, ad.matmul_const(p, ra), cfg.eta), ad.mix(p_s, ad.matmul_const(p, rs), cfg.eta)
    return p_a, p_s


def predict(model, f_v, vocab, cfg):
    """Predicate probabilities [B, n_p] for a batch of features (no graph recorded)."""
    with ad.no_grad():
        if model.kind == "pdl":
            p, _ = model.predicate_scores(f_v, vocab, cfg)
        else:
            p = model.predicate_scores(f_v)
    return p.data.copy()
