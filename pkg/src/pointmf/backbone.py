"""Mean-velocity network u(x_t, r, t | c): a DiT over point tokens.

Point tokens carry no positional embedding, so the network is permutation
equivariant over points. Each block runs self-attention, cross-attention and
an FFN, each modulated AdaLN-Zero style from the shared conditioning vector
``c = e_t(t) + e_dt(t - r) + e_img``. Cross-attention contexts come from the
post-MHSA adapter, which runs its attention once and re-projects per layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DualValue, Value, data_of

TIME_FREQ_DIM = 256
TIME_SCALE = 100.0


@dataclass
class ModelConfig:
    hidden: int = 64
    blocks: int = 4
    heads: int = 4
    points: int = 256
    ctx_tokens: int = 16
    cond_dim: int = 13
    pma_dim: int = 128
    pma_heads: int = 4
    ffn_mult: float = 4.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"ModelConfig.{k} must be positive, got {v}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.pma_dim % self.pma_heads:
            raise ValueError(f"pma_dim={self.pma_dim} not divisible by pma_heads={self.pma_heads}")

    @property
    def ffn_dim(self) -> int:
        return int(round(self.hidden * self.ffn_mult))


# Full-resolution model size; valid, but impractically slow in this engine.
FULL_SCALE_CONFIG = dict(hidden=512, blocks=12, heads=8, points=2048, pma_dim=1024, pma_heads=4)


@dataclass
class ConditionBundle:
    """Encoded conditions for a batch.

    ``global_vec`` is e_img (B x H), ``ctx`` is Z_ctx (B x M x D); rows whose
    ``is_null`` flag is set hold the learned null embeddings instead.
    """

    global_vec: object
    ctx: object
    is_null: np.ndarray

    def __len__(self):
        return len(self.is_null)

    def detach(self) -> "ConditionBundle":
        return ConditionBundle(ad.stop_gradient(self.global_vec), ad.stop_gradient(self.ctx),
                               self.is_null.copy())

    def take(self, idx) -> "ConditionBundle":
        idx = np.atleast_1d(idx)
        return ConditionBundle(data_of(self.global_vec)[idx], data_of(self.ctx)[idx],
                               self.is_null[idx])


def sinusoidal_embed(s, dim: int = TIME_FREQ_DIM):
    """Sin/cos features of ``s`` (shape (B,)) scaled by TIME_SCALE, returns (B, dim)."""
    if dim % 2:
        raise ValueError(f"sinusoidal_embed needs an even dim, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    if not ad.is_traced(s):
        s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        s = ad.reshape(s, (1,))
    arg = ad.mul(ad.reshape(s, (-1, 1)), TIME_SCALE * freqs[None, :])
    return ad.concat([ad.sin(arg), ad.cos(arg)], axis=-1)


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameters. Modulation and per-layer adapter outputs start at zero."""
    rng = np.random.default_rng(seed)
    H, D, M, Hm, F = (config.hidden, config.cond_dim, config.ctx_tokens,
                      config.pma_dim, config.ffn_dim)
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out, zero=False):
        p[name + ".w"] = np.zeros((fan_in, fan_out)) if zero else _xavier(rng, fan_in, fan_out)
        p[name + ".b"] = np.zeros(fan_out)

    lin("embed", 3, H)
    for tm in ("t_mlp", "dt_mlp"):
        lin(tm + ".fc1", TIME_FREQ_DIM, H)
        lin(tm + ".fc2", H, H)
    lin("img", D, H)
    p["ctx.table"] = rng.normal(0.0, 1.0, size=(M, D))
    p["ctx.w"] = _xavier(rng, D, M * D)
    p["null.e"] = rng.normal(0.0, 1.0 / math.sqrt(H), size=H)
    p["null.z"] = rng.normal(0.0, 1.0, size=(M, D))

    lin("pma.in", D, H)
    lin("pma.up", H, Hm)
    lin("pma.qkv", Hm, 3 * Hm)
    lin("pma.out", Hm, Hm)
    for layer in range(config.blocks):
        lin(f"pma.psi{layer}.fc1", Hm, H)
        lin(f"pma.psi{layer}.fc2", H, H, zero=True)

    for layer in range(config.blocks):
        b = f"blk{layer}"
        lin(b + ".mod", H, 9 * H, zero=True)
        lin(b + ".attn.qkv", H, 3 * H)
        lin(b + ".attn.out", H, H)
        lin(b + ".xattn.q", H, H)
        lin(b + ".xattn.kv", H, 2 * H)
        lin(b + ".xattn.out", H, H)
        lin(b + ".ffn.fc1", H, F)
        lin(b + ".ffn.fc2", F, H)
    lin("head", H, 3, zero=True)
    return p


def attention(q, k, v, heads: int):
    """Multi-head scaled dot-product attention on (B, N, E) inputs."""
    B, Nq, E = q.shape
    Nk = k.shape[1]
    dh = E // heads

    def split(x, n):
        return ad.transpose(ad.reshape(x, (B, n, heads, dh)), (0, 2, 1, 3))

    scores = ad.mul(ad.matmul(split(q, Nq), ad.swap_last(split(k, Nk))), 1.0 / math.sqrt(dh))
    out = ad.matmul(ad.softmax(scores), split(v, Nk))
    return ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, Nq, E))


class MeanVelocityNet:
    """Parameter holder plus the forward pass of u(x_t, r, t | c).

    Every method accepts an optional ``params`` mapping; pass a dict of
    trainable :class:`Value` leaves to record a graph, or leave it out to run
    on the stored arrays.
    """

    def __init__(self, config: ModelConfig | None = None, params=None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        self.n_evals = 0
        self.n_mhsa = 0

    def _p(self, params):
        return self.params if params is None else params

    def _lin(self, P, name, x):
        return ad.linear(x, P[name + ".w"], P[name + ".b"])

    def num_parameters(self) -> int:
        return int(sum(np.size(v) for v in self.params.values()))

    def trainable(self) -> dict[str, Value]:
        return {k: Value(v, requires_grad=True, name=k) for k, v in self.params.items()}

    # -- conditioning -------------------------------------------------------

    def encode(self, desc, drop=None, params=None) -> ConditionBundle:
        """Stand-in condition encoder for descriptor rows (B x D).

        ``drop`` marks rows replaced by the null embeddings (both the global
        vector and the context tokens).
        """
        P = self._p(params)
        cfg = self.config
        desc = np.atleast_2d(np.asarray(desc, dtype=np.float64))
        if desc.shape[-1] != cfg.cond_dim:
            raise ValueError(f"descriptor width {desc.shape[-1]} != cond_dim {cfg.cond_dim}")
        B = desc.shape[0]
        drop = np.zeros(B, bool) if drop is None else np.asarray(drop, bool).reshape(B)
        e_img = self._lin(P, "img", ad.layer_normalize(desc))
        z = ad.add(ad.reshape(ad.matmul(desc, P["ctx.w"]), (B, cfg.ctx_tokens, cfg.cond_dim)),
                   P["ctx.table"])
        if drop.any():
            keep = (~drop).astype(np.float64)
            e_img = ad.add(ad.mul(e_img, keep[:, None]), ad.mul(P["null.e"], drop[:, None] * 1.0))
            z = ad.add(ad.mul(z, keep[:, None, None]), ad.mul(P["null.z"], drop[:, None, None] * 1.0))
        return ConditionBundle(e_img, z, drop)

    def null_condition(self, batch: int = 1, params=None) -> ConditionBundle:
        P = self._p(params)
        cfg = self.config
        g = ad.add(np.zeros((batch, cfg.hidden)), P["null.e"])
        z = ad.add(np.zeros((batch, cfg.ctx_tokens, cfg.cond_dim)), P["null.z"])
        return ConditionBundle(g, z, np.ones(batch, bool))

    def condition_vector(self, t, r, e_img, params=None):
        """c = e_t(t) + e_dt(t - r) + e_img, one row per batch element."""
        P = self._p(params)
        if np.any(data_of(r) > data_of(t)):
            raise ValueError("condition_vector: r > t")
        dt = ad.sub(t, r)
        e_t = self._lin(P, "t_mlp.fc2", ad.silu(self._lin(P, "t_mlp.fc1", sinusoidal_embed(t))))
        e_dt = self._lin(P, "dt_mlp.fc2", ad.silu(self._lin(P, "dt_mlp.fc1", sinusoidal_embed(dt))))
        return ad.add(ad.add(e_t, e_dt), e_img)

    def pma_adapt(self, z_ctx, params=None) -> list:
        P = self._p(params)
        cfg = self.config
        z_base = self._lin(P, "pma.in", z_ctx)
        up = self._lin(P, "pma.up", z_base)
        qkv = self._lin(P, "pma.qkv", up)
        Hm = cfg.pma_dim
        mixed = attention(qkv[..., :Hm], qkv[..., Hm:2 * Hm], qkv[..., 2 * Hm:], cfg.pma_heads)
        mixed = self._lin(P, "pma.out", mixed)
        self.n_mhsa += 1
        out = []
        for layer in range(cfg.blocks):
            h = ad.gelu(self._lin(P, f"pma.psi{layer}.fc1", mixed))
            out.append(ad.add(z_base, self._lin(P, f"pma.psi{layer}.fc2", h)))
        return out

    # -- trunk --------------------------------------------------------------

    def dit_block(self, layer: int, x, c, ctx, params=None):
        P = self._p(params)
        cfg = self.config
        H = cfg.hidden
        b = f"blk{layer}"
        B = x.shape[0]
        mod = ad.reshape(self._lin(P, b + ".mod", ad.silu(c)), (B, 1, 9 * H))
        chunks = [mod[..., i * H:(i + 1) * H] for i in range(9)]

        def modulated(x, shift, scale):
            return ad.add(ad.mul(ad.rms_normalize(x), ad.add(scale, 1.0)), shift)

        h = modulated(x, chunks[0], chunks[1])
        qkv = self._lin(P, b + ".attn.qkv", h)
        a = attention(qkv[..., :H], qkv[..., H:2 * H], qkv[..., 2 * H:], cfg.heads)
        x = ad.add(x, ad.mul(chunks[2], self._lin(P, b + ".attn.out", a)))

        h = modulated(x, chunks[3], chunks[4])
        q = self._lin(P, b + ".xattn.q", h)
        kv = self._lin(P, b + ".xattn.kv", ctx)
        a = attention(q, kv[..., :H], kv[..., H:], cfg.heads)
        x = ad.add(x, ad.mul(chunks[5], self._lin(P, b + ".xattn.out", a)))

        h = modulated(x, chunks[6], chunks[7])
        f = self._lin(P, b + ".ffn.fc2", ad.gelu(self._lin(P, b + ".ffn.fc1", h)))
        return ad.add(x, ad.mul(chunks[8], f))

    def forward(self, x_t, r, t, cond: ConditionBundle, params=None):
        """Mean velocity for a batch: x_t (B x N x 3), r and t of shape (B,)."""
        P = self._p(params)
        xd, rd, td = data_of(x_t), np.atleast_1d(data_of(r)), np.atleast_1d(data_of(t))
        if xd.ndim != 3 or xd.shape[-1] != 3:
            raise ad.ShapeError(f"x_t must be B x N x 3, got {xd.shape}")
        for name, arr in (("x_t", xd), ("r", rd), ("t", td)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if rd.shape != (xd.shape[0],) or td.shape != (xd.shape[0],):
            raise ad.ShapeError(f"r, t must have shape ({xd.shape[0]},), got {rd.shape}, {td.shape}")
        if np.any(rd < 0) or np.any(td > 1) or np.any(rd > td):
            raise ValueError("need 0 <= r <= t <= 1 for every batch element")
        self.n_evals += 1
        c = self.condition_vector(t, r, cond.global_vec, P)
        ctxs = self.pma_adapt(cond.ctx, P)
        h = self._lin(P, "embed", x_t)
        for layer in range(self.config.blocks):
            h = self.dit_block(layer, h, c, ctxs[layer], P)
        return self._lin(P, "head", ad.rms_normalize(h))

    __call__ = forward
