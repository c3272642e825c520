"""Run configuration: INI text with one section per component.

Grammar (``configparser`` syntax, ``#`` or ``;`` comments)::

    [model]      hidden, blocks, heads, points, ctx_tokens, cond_dim,
                 pma_dim, pma_heads, ffn_mult
    [guidance]   omega, kappa, label_dropout, weight_p, weight_c,
                 time_mu, time_sigma
    [dsa]        lambda_base, tau, delta, set_distance, sinkhorn_iters, p_max
    [optimizer]  lr, warmup_steps, total_steps, batch, beta1, beta2, eps,
                 weight_decay, grad_clip (0 disables)
    [data]       families (comma separated), n_points, n_train, n_test,
                 split_seed
    [run]        seed, out_dir, checkpoint_every

Every section and key is optional; anything unknown is an error, as is any
out-of-range value. Validation happens at parse time, before any compute.
"""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import asdict, dataclass, field, fields

from .backbone import ModelConfig
from .data import FAMILIES
from .dsa import DsaConfig
from .flow import GuidanceConfig


class ConfigError(ValueError):
    """Malformed, unknown or out-of-range configuration entry."""


@dataclass
class OptimConfig:
    lr: float = 1e-3
    warmup_steps: int = 1000
    total_steps: int = 20000
    batch: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("warmup_steps and total_steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("eps must be > 0; weight_decay and grad_clip must be >= 0")


@dataclass
class DataConfig:
    families: tuple = FAMILIES
    n_points: int = 256
    n_train: int = 1000
    n_test: int = 200
    split_seed: int = 0

    def __post_init__(self):
        self.families = tuple(self.families)
        bad = [f for f in self.families if f not in FAMILIES]
        if bad or not self.families:
            raise ValueError(f"families must be a non-empty subset of {FAMILIES}, got {self.families}")
        if self.n_points < 8:
            raise ValueError("n_points must be >= 8")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0 (0: final checkpoint only)")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    dsa: DsaConfig = field(default_factory=DsaConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        if self.data.n_points != self.model.points:
            raise ValueError(
                f"data.n_points ({self.data.n_points}) must equal model.points ({self.model.points})"
            )

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in SECTIONS:
            values = asdict(getattr(self, sec))
            cp[sec] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


SECTIONS = {
    "model": ModelConfig,
    "guidance": GuidanceConfig,
    "dsa": DsaConfig,
    "optimizer": OptimConfig,
    "data": DataConfig,
    "run": RunSection,
}


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(v)
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(cls, name: str, raw: str):
    kind = typing.get_type_hints(cls)[name]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{cls.__name__}.{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    parts = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]; expected one of {list(SECTIONS)}")
        cls = SECTIONS[sec]
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in cp[sec].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{sec}]; expected one of {sorted(known)}")
            kwargs[key] = _coerce(cls, key, raw)
        try:
            parts[sec] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    try:
        return RunConfig(**parts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
