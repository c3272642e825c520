"""Training loop: mixed FM/MF batches, DSA, AdamW, logging and checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import data_of
from .backbone import MeanVelocityNet
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import make_splits, sample_batch
from .dsa import DsaConfig, denoised_extrapolate, dsa_loss, total_loss
from .flow import GuidanceConfig, TrainBatch, mf_cfg_loss, weighted_regression


class NumericError(FloatingPointError):
    """Non-finite loss or gradient; the parameters were left untouched."""


@dataclass
class Frozen:
    """Stop-gradded pieces of one loss evaluation."""

    target: np.ndarray
    weights: np.ndarray
    scale: float | None


@dataclass
class LossTerms:
    total: object
    l_mf: float
    l_dsa: float | None
    s: float | None
    lam_mean: float
    fm_raw: float | None
    l_mf_raw: float
    frozen: Frozen


def training_loss(net: MeanVelocityNet, params, batch: TrainBatch, gcfg: GuidanceConfig,
                  dcfg: DsaConfig, frozen: Frozen | None = None) -> LossTerms:
    """Mean-flow loss (FM rows included via r == t) plus the DSA term.

    With ``frozen`` the target, weights and DSA scale come from an earlier
    evaluation instead of being recomputed, so the result is exactly the
    function whose gradient ``backward`` reports.
    """
    if frozen is None:
        fl = mf_cfg_loss(net, params, batch, gcfg)
    else:
        cond = net.encode(batch.desc, batch.drop, params=params)
        u = net(batch.x_t, batch.r, batch.t, cond, params=params)
        fl = weighted_regression(u, frozen.target, gcfg, frozen.weights)
    n_coord = batch.x0.shape[1] * batch.x0.shape[2]
    fm_rows = ~batch.is_mf
    fm_raw = float(fl.raw_sq[fm_rows].mean() / n_coord) if fm_rows.any() else None
    rows = np.flatnonzero(batch.is_mf)
    l_dsa, s, lam_mean = None, None, 0.0
    if rows.size and dcfg.lambda_base > 0:
        x_theta = denoised_extrapolate(batch.x_t[rows], batch.t[rows], ad.getitem(fl.u, rows))
        dist = dsa_loss(x_theta, batch.x0[rows], dcfg)
        total, s, lam = total_loss(fl.per_sample, dist, batch.t, batch.r, dcfg, dsa_rows=rows,
                                   scale=None if frozen is None else frozen.scale)
        l_dsa = float(np.mean(data_of(dist)))
        lam_mean = float(lam.mean())
    else:
        total = fl.loss
    return LossTerms(total, float(data_of(fl.loss)), l_dsa, s, lam_mean, fm_raw,
                     float(fl.raw_sq.mean() / n_coord), Frozen(fl.target, fl.weights, s))


class AdamW:
    """Adam with decoupled weight decay over a dict of arrays."""

    def __init__(self, shapes: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros(np.shape(v)) for k, v in shapes.items()}
        self.v = {k: np.zeros(np.shape(v)) for k, v in shapes.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = p - lr * (update + self.weight_decay * p)
        return out


def clip_by_global_norm(grads: dict, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class ProceduralSource:
    """Fresh surface samples of randomly chosen training specs."""

    def __init__(self, specs, n_points: int):
        self.specs = list(specs)
        self.n_points = n_points

    def __call__(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(len(self.specs), size=batch)
        return sample_batch([self.specs[i] for i in idx], self.n_points, rng)


class ArraySource:
    """Minibatches drawn with replacement from fixed (points, descriptor) arrays."""

    def __init__(self, points: np.ndarray, desc: np.ndarray):
        self.points = points
        self.desc = desc

    def __call__(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(len(self.points), size=batch)
        return self.points[idx], self.desc[idx]


def default_source(config: RunConfig) -> ProceduralSource:
    d = config.data
    split = make_splits(d.n_train, d.n_test, d.split_seed, d.families)
    return ProceduralSource(split.train, d.n_points)


class Trainer:
    """Owns the network, optimizer and RNG of one run.

    Every random draw comes from one generator seeded by ``run.seed``, so two
    trainers with the same config produce identical loss traces.
    """

    def __init__(self, config: RunConfig, source=None, net: MeanVelocityNet | None = None):
        self.config = config
        self.net = net or MeanVelocityNet(config.model, seed=config.run.seed)
        self.source = source or default_source(config)
        o = config.optimizer
        self.opt = AdamW(self.net.params, (o.beta1, o.beta2), o.eps, o.weight_decay)
        self.rng = np.random.default_rng(config.run.seed)
        self.step_count = 0
        self._clock = 0.0

    def lr_at(self, step: int) -> float:
        """Linear warmup over ``warmup_steps`` (1-based ``step``), then constant."""
        o = self.config.optimizer
        if o.warmup_steps <= 0:
            return o.lr
        return o.lr * min(1.0, step / o.warmup_steps)

    def draw_batch(self) -> TrainBatch:
        x0, desc = self.source(self.rng, self.config.optimizer.batch)
        return TrainBatch.draw(x0, desc, self.rng, self.config.guidance)

    def loss_and_grads(self, batch: TrainBatch):
        P = self.net.trainable()
        terms = training_loss(self.net, P, batch, self.config.guidance, self.config.dsa)
        if not math.isfinite(float(data_of(terms.total))):
            raise NumericError(f"non-finite loss at step {self.step_count + 1}")
        g = ad.backward(terms.total, list(P.values()))
        grads = {k: g[v] for k, v in P.items()}
        bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
        if bad:
            raise NumericError(f"non-finite gradient at step {self.step_count + 1} in {bad[:5]}")
        return terms, grads

    def _record(self, terms: LossTerms, lr: float, grad_norm: float) -> dict:
        return {
            "step": self.step_count,
            "lr": lr,
            "l_mf": terms.l_mf,
            "l_dsa": terms.l_dsa,
            "s": terms.s,
            "lambda_mean": terms.lam_mean,
            "grad_norm": grad_norm,
            "fm_raw": terms.fm_raw,
            "l_mf_raw": terms.l_mf_raw,
            "wallclock": round(self._clock, 6),
        }

    def initial_loss(self) -> dict:
        """Loss of one batch without touching parameters or the run's RNG."""
        saved = self.rng.bit_generator.state
        try:
            terms, grads = self.loss_and_grads(self.draw_batch())
        finally:
            self.rng.bit_generator.state = saved
        _, norm = clip_by_global_norm(grads, 0.0)
        return self._record(terms, 0.0, norm)

    def step(self) -> dict:
        start = time.perf_counter()
        batch = self.draw_batch()
        try:
            terms, grads = self.loss_and_grads(batch)
        except NumericError:
            raise
        except FloatingPointError as exc:
            raise NumericError(f"step {self.step_count + 1}: {exc}") from None
        grads, norm = clip_by_global_norm(grads, self.config.optimizer.grad_clip)
        lr = self.lr_at(self.step_count + 1)
        self.net.params = self.opt.step(self.net.params, grads, lr)
        self.step_count += 1
        self._clock += time.perf_counter() - start
        return self._record(terms, lr, norm)

    def run(self, steps: int | None = None, log_path=None, ckpt_dir=None, on_step=None) -> list[dict]:
        """Train until ``steps`` total steps (default: optimizer.total_steps).

        Appends one JSON line per step to ``log_path``. Writes periodic and
        final checkpoints to ``ckpt_dir``; on a numeric failure the
        current, still finite parameters go to ``last_good.ckpt`` there.
        """
        total = self.config.optimizer.total_steps if steps is None else steps
        every = self.config.run.checkpoint_every
        records = []
        log = open(log_path, "a") if log_path else None
        try:
            while self.step_count < total:
                try:
                    rec = self.step()
                except NumericError:
                    if ckpt_dir:
                        self.save(Path(ckpt_dir) / "last_good.ckpt")
                    raise
                records.append(rec)
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                if on_step:
                    on_step(rec)
                if ckpt_dir and every and self.step_count % every == 0 and self.step_count < total:
                    self.save(Path(ckpt_dir) / f"step{self.step_count:07d}.ckpt")
            if ckpt_dir:
                self.save(Path(ckpt_dir) / "final.ckpt")
        finally:
            if log:
                log.close()
        return records

    def save(self, path) -> dict[str, str]:
        extra = {"adam_t": self.opt.t, "rng": self.rng.bit_generator.state, "wallclock": self._clock}
        return save_checkpoint(path, self.config.to_text(), self.step_count, self.net.params,
                               {"m": self.opt.m, "v": self.opt.v}, extra)

    @classmethod
    def resume(cls, path, config: RunConfig | None = None, source=None) -> "Trainer":
        """Continue a run from a checkpoint; ``config`` defaults to the stored one."""
        ck = load_checkpoint(path)
        config = config or parse_config(ck.config_text)
        net = MeanVelocityNet(config.model, params=dict(ck.params))
        tr = cls(config, source=source, net=net)
        if ck.moments.get("m"):
            tr.opt.m, tr.opt.v = dict(ck.moments["m"]), dict(ck.moments["v"])
        tr.opt.t = int(ck.extra.get("adam_t", ck.step))
        if "rng" in ck.extra:
            tr.rng.bit_generator.state = ck.extra["rng"]
        tr.step_count = ck.step
        tr._clock = float(ck.extra.get("wallclock", 0.0))
        return tr


def load_model(path) -> tuple[MeanVelocityNet, RunConfig, int]:
    """Network, config and step stored in a checkpoint."""
    ck = load_checkpoint(path)
    config = parse_config(ck.config_text)
    return MeanVelocityNet(config.model, params=dict(ck.params)), config, ck.step


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_ratio(records, early: int = 100, window: int = 20, key: str = "fm_raw") -> dict:
    """Windowed mean of ``key`` at step ``early`` and at the final step, and their ratio.

    Each window covers the ``window`` steps ending at the given step; steps
    without a value (e.g. no FM rows in the batch) are skipped.
    """
    by_step = {r["step"]: r.get(key) for r in records}
    if not by_step:
        raise ValueError("empty log")
    last = max(by_step)
    if early > last:
        raise ValueError(f"log ends at step {last}, before step {early}")

    def windowed(end):
        vals = [by_step[s] for s in range(end - window + 1, end + 1)
                if by_step.get(s) is not None and math.isfinite(by_step[s])]
        if not vals:
            raise ValueError(f"no {key} values in the window ending at step {end}")
        return float(np.mean(vals))

    a, b = windowed(early), windowed(last)
    return {"early_step": early, "final_step": last, "early": a, "final": b, "ratio": b / a}
