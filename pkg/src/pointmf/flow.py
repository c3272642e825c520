"""Training objectives: flow matching and CFG-guided mean flow.

Both branches regress the network output onto a stop-gradded target built
from the guided tangent ``v~ = w*v_t + k*u(x_t,t,t|c) + (1-w-k)*u(x_t,t,t)``.
On the mean-flow branch the target additionally subtracts ``(t-r) * du/dt``,
with du/dt obtained from a forward-mode JVP along ``(v~, 0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import data_of
from .backbone import ConditionBundle, MeanVelocityNet

FM, MF = "FM", "MF"


@dataclass
class GuidanceConfig:
    omega: float = 1.0
    kappa: float = 0.5
    label_dropout: float = 0.1
    weight_p: float = 1.0
    weight_c: float = 1e-3
    time_mu: float = -0.4
    time_sigma: float = 1.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not 0.0 <= self.label_dropout <= 1.0:
            raise ValueError(f"label_dropout must lie in [0, 1], got {self.label_dropout}")
        if self.weight_c <= 0:
            raise ValueError(f"weight_c must be > 0, got {self.weight_c}")
        if self.time_sigma <= 0:
            raise ValueError(f"time_sigma must be > 0, got {self.time_sigma}")


@dataclass
class TimePair:
    t: float
    r: float
    branch: str


def _logit_normal(rng, size, mu, sigma):
    return 1.0 / (1.0 + np.exp(-rng.normal(mu, sigma, size=size)))


def sample_time_pair(rng: np.random.Generator, mu: float = -0.4, sigma: float = 1.0) -> TimePair:
    """One (t, r) draw: FM (r = t) or MF (r < t) with equal probability."""
    a, b = _logit_normal(rng, 2, mu, sigma)
    if rng.random() < 0.5:
        return TimePair(float(a), float(a), FM)
    while a == b:
        a, b = _logit_normal(rng, 2, mu, sigma)
    return TimePair(float(max(a, b)), float(min(a, b)), MF)


def sample_time_pairs(rng: np.random.Generator, n: int, mu: float = -0.4, sigma: float = 1.0):
    """Vectorised :func:`sample_time_pair`; returns ``(t, r, is_mf)`` arrays."""
    a = _logit_normal(rng, n, mu, sigma)
    b = _logit_normal(rng, n, mu, sigma)
    is_mf = rng.random(n) >= 0.5
    tie = is_mf & (a == b)
    while tie.any():
        b[tie] = _logit_normal(rng, int(tie.sum()), mu, sigma)
        tie = is_mf & (a == b)
    t = np.where(is_mf, np.maximum(a, b), a)
    r = np.where(is_mf, np.minimum(a, b), a)
    return t, r, is_mf


def _bcast_time(t, x):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (np.ndim(x) - t.ndim)) if t.ndim else t


def interpolate(x0, eps, t):
    """Linear path point and its velocity: ``x_t = (1-t) x0 + t eps``, ``v = eps - x0``."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ad.ShapeError(f"interpolate: x0 {x0.shape} vs eps {eps.shape}")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ValueError("interpolate: t must lie in [0, 1]")
    tb = _bcast_time(t, x0)
    return (1.0 - tb) * x0 + tb * eps, eps - x0


def adaptive_weight(delta_sq, cfg: GuidanceConfig) -> np.ndarray:
    """Detached per-sample weight ``1 / (delta_sq + c) ** p``."""
    delta_sq = np.asarray(data_of(delta_sq), dtype=np.float64)
    if np.any(delta_sq < 0):
        raise ValueError("adaptive_weight: delta_sq must be >= 0")
    return 1.0 / (delta_sq + cfg.weight_c) ** cfg.weight_p


def cfg_tangent(v_t, u_cond, u_uncond, cfg: GuidanceConfig) -> np.ndarray:
    w, k = cfg.omega, cfg.kappa
    return w * np.asarray(v_t) + k * data_of(u_cond) + (1.0 - w - k) * data_of(u_uncond)


@dataclass
class TrainBatch:
    """Everything random about one training step, drawn up front.

    Keeping noise, times and the dropout mask here makes loss evaluations
    exactly repeatable, e.g. to compare the FM and MF pipelines.
    """

    x0: np.ndarray
    desc: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    r: np.ndarray
    drop: np.ndarray
    x_t: np.ndarray = field(init=False)
    v_t: np.ndarray = field(init=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.drop = np.asarray(self.drop, dtype=bool)
        if np.any(self.r > self.t):
            raise ValueError("TrainBatch: r > t")
        self.x_t, self.v_t = interpolate(self.x0, self.eps, self.t)

    def __len__(self):
        return len(self.t)

    @property
    def is_mf(self) -> np.ndarray:
        return self.t != self.r

    @classmethod
    def draw(cls, x0, desc, rng: np.random.Generator, cfg: GuidanceConfig, branch: str | None = None):
        B = len(x0)
        t, r, is_mf = sample_time_pairs(rng, B, cfg.time_mu, cfg.time_sigma)
        if branch == FM:
            r = t.copy()
        elif branch == MF:
            while np.any(~is_mf):
                t2, r2, m2 = sample_time_pairs(rng, B, cfg.time_mu, cfg.time_sigma)
                fill = ~is_mf & m2
                t[fill], r[fill], is_mf[fill] = t2[fill], r2[fill], True
        eps = rng.standard_normal(np.shape(x0))
        drop = rng.random(B) < cfg.label_dropout
        return cls(np.asarray(x0, float), np.asarray(desc, float), eps, t, r, drop)


@dataclass
class FlowLoss:
    """Loss terms for one batch.

    ``loss`` is the scalar (graph) objective, ``per_sample`` the weighted
    per-sample values, ``raw_sq`` the unweighted squared error sum_(N,3) Delta^2
    and ``u`` the network output kept on the graph for the DSA term.
    """

    loss: object
    per_sample: object
    raw_sq: np.ndarray
    u: object
    target: np.ndarray
    weights: np.ndarray | None = None


def guided_tangent(net: MeanVelocityNet, batch: TrainBatch, cfg: GuidanceConfig) -> np.ndarray:
    """v~ from graph-free one-timepoint predictions with and without the condition."""
    if cfg.kappa == 0.0 and cfg.omega == 1.0:
        return batch.v_t.copy()
    cond = net.encode(batch.desc)
    u_c = net(batch.x_t, batch.t, batch.t, cond)
    u_u = net(batch.x_t, batch.t, batch.t, net.null_condition(len(batch)))
    return cfg_tangent(batch.v_t, u_c, u_u, cfg)


def weighted_regression(u, target, cfg: GuidanceConfig, weights=None) -> FlowLoss:
    """Adaptive-weighted squared error of ``u`` against a constant target.

    ``weights`` overrides the detached per-sample weights, which lets a
    caller hold every stop-gradded quantity fixed (e.g. for finite differences).
    """
    delta = ad.sub(u, target)
    sq = ad.sum_(ad.square(delta), axis=(1, 2))
    w = adaptive_weight(data_of(sq), cfg) if weights is None else np.asarray(weights, dtype=np.float64)
    per = ad.mul(sq, w)
    return FlowLoss(ad.mean(per), per, data_of(sq).copy(), u, target, w)


def fm_loss(net: MeanVelocityNet, params, batch: TrainBatch, cfg: GuidanceConfig,
            v_tilde: np.ndarray | None = None) -> FlowLoss:
    """One-timepoint regression ``u(x_t, t, t | c) -> sg(v~)`` (needs r == t)."""
    if np.any(batch.is_mf):
        raise ValueError("fm_loss needs r == t for every sample")
    if v_tilde is None:
        v_tilde = guided_tangent(net, batch, cfg)
    cond = net.encode(batch.desc, batch.drop, params=params)
    u = net(batch.x_t, batch.t, batch.t, cond, params=params)
    return weighted_regression(u, v_tilde, cfg)


def mf_cfg_loss(net: MeanVelocityNet, params, batch: TrainBatch, cfg: GuidanceConfig,
                v_tilde: np.ndarray | None = None) -> FlowLoss:
    """Mean-flow regression onto ``sg(v~ - (t-r) du/dt)``.

    Samples with r == t are allowed; for them the target is exactly v~.
    """
    if v_tilde is None:
        v_tilde = guided_tangent(net, batch, cfg)
    cond = net.encode(batch.desc, batch.drop, params=params)

    def fn(x_t, r, t):
        return net(x_t, r, t, cond, params=params)

    B = len(batch)
    u, dudt = ad.jvp(fn, (batch.x_t, batch.r, batch.t), (v_tilde, np.zeros(B), np.ones(B)))
    if not np.all(np.isfinite(dudt)):
        bad = np.where(~np.all(np.isfinite(dudt), axis=(1, 2)))[0]
        raise FloatingPointError(f"non-finite du/dt for batch rows {bad.tolist()}")
    target = v_tilde - _bcast_time(batch.t - batch.r, v_tilde) * dudt
    return weighted_regression(u, target, cfg)
