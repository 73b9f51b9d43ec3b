"""Flat ``key = value`` experiment configuration."""
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, get_type_hints

from .data import SyntheticConfig
from .kdl import KDLConfig
from .pdl import PDLConfig

MODES = ("baseline", "pdl", "kdl", "dll")


@dataclass
class ExperimentConfig:
    mode: str = "dll"
    run_name: str = "run"
    # pattern-level decoupling
    grl_lambda: float = 0.13
    eta: float = 1e-2
    mc_steps: int = 1
    # knowledge-level decoupling
    alpha0: float = 0.1
    beta: float = 1e-4
    warmup_epochs: int = 10
    gamma_base: float = 0.99
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    hidden: int = 64
    # data: JSONL files, or a synthetic benchmark when train_data is unset
    train_data: Optional[str] = None
    test_data: Optional[str] = None
    vocab: Optional[str] = None
    n_a: int = 8
    n_s: int = 6
    n_p: int = 30
    d: int = 64
    zipf_s: float = 1.5
    noise_sigma: float = 0.5
    n_train: int = 20000
    n_test: int = 4000
    extra_prob: float = 0.01
    data_seed: Optional[int] = None
    table_seed: int = 0
    # reporting
    ks: tuple = (1, 5, 10)
    mean_ks: tuple = (5, 10)
    head_quantile: float = 0.5
    out: Optional[str] = None
    checkpoint_every: int = 1
    resume: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.mean_ks) != 2:
            raise ValueError("mean_ks needs exactly two cut-offs")
        self.pdl
        self.kdl

    @property
    def pdl(self):
        return PDLConfig(self.grl_lambda, self.eta, self.mc_steps)

    @property
    def kdl(self):
        return KDLConfig(self.alpha0, self.beta, self.warmup_epochs, self.gamma_base)

    @property
    def synthetic(self):
        return SyntheticConfig(
            n_a=self.n_a, n_s=self.n_s, n_p=self.n_p, d=self.d, zipf_s=self.zipf_s,
            noise_sigma=self.noise_sigma, n_train=self.n_train, n_test=self.n_test,
            seed=self.seed if self.data_seed is None else self.data_seed,
            extra_prob=self.extra_prob, table_seed=self.table_seed,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _coerce(name, hint, raw):
    raw = raw.strip()
    optional = hint == Optional[str] or hint == Optional[int]
    if optional and raw.lower() in ("", "none"):
        return None
    if hint in (int, Optional[int]):
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is tuple:
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def parse_config(text, source="<config>"):
    hints = get_type_hints(ExperimentConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, hints[key], raw)
        except ValueError:
            raise ValueError(f"{source}:{lineno}: bad value {raw!r} for {key}") from None
    return ExperimentConfig(**values)


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def format_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            v = "none"
        elif isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
