"""Procedural conditional point-set data.

Five parametric families are sampled on their surfaces, yawed about z,
scaled and centred. Each shape comes with a 13-wide condition descriptor: a
family one-hot plus range-normalised parameters, a quantised yaw bin and the
scale. Yaw is only given to 1/8 of a turn, so the generator has to cover
the leftover rotation.

Points are drawn in mirrored pairs (p, -p). All families are centrally
symmetric, so this keeps sampling uniform and makes the centroid exactly
zero without shifting points off the surface.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("sphere", "torus", "box", "cylinder", "two-spheres")

# name -> (low, high) for each family parameter, in descriptor order
PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "sphere": {"radius": (0.5, 1.0)},
    "torus": {"R": (0.5, 0.7), "r": (0.1, 0.25)},
    "box": {"sx": (0.3, 0.7), "sy": (0.3, 0.7), "sz": (0.3, 0.7)},
    "cylinder": {"radius": (0.3, 0.7), "half_height": (0.3, 0.9)},
    "two-spheres": {"radius": (0.2, 0.4), "separation": (0.9, 1.2)},
}
SCALE_RANGE = (0.8, 1.0)
YAW_BINS = 8
DESC_DIM = len(FAMILIES) + 8


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    params: tuple[tuple[str, float], ...]
    yaw: float = 0.0
    scale: float = 1.0
    _p: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        p = dict(self.params)
        expected = PARAM_RANGES[self.family]
        if set(p) != set(expected):
            raise ValueError(f"{self.family} needs parameters {list(expected)}, got {list(p)}")
        for k, v in p.items():
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{self.family}.{k} must be a positive number, got {v}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "params", tuple((k, float(p[k])) for k in expected))
        object.__setattr__(self, "_p", p)

    @classmethod
    def make(cls, family: str, yaw: float = 0.0, scale: float = 1.0, **params) -> "ShapeSpec":
        return cls(family, tuple(params.items()), float(yaw), float(scale))

    def __getitem__(self, key):
        return self._p[key]

    def to_line(self) -> str:
        """Manifest record: ``family=torus R=0.7 r=0.2 yaw=0.5 scale=0.9``."""
        kv = [f"family={self.family}"] + [f"{k}={v!r}" for k, v in self.params]
        kv += [f"yaw={self.yaw!r}", f"scale={self.scale!r}"]
        return " ".join(kv)

    @classmethod
    def from_line(cls, line: str) -> "ShapeSpec":
        fields = {}
        for tok in line.split():
            if "=" not in tok:
                raise ValueError(f"bad manifest token {tok!r} (expected key=value)")
            k, v = tok.split("=", 1)
            fields[k] = v
        if "family" not in fields:
            raise ValueError(f"manifest line lacks family=: {line!r}")
        family = fields.pop("family")
        yaw = float(fields.pop("yaw", 0.0))
        scale = float(fields.pop("scale", 1.0))
        fields.pop("id", None)
        return cls.make(family, yaw=yaw, scale=scale, **{k: float(v) for k, v in fields.items()})

    @property
    def hash(self) -> str:
        return hashlib.sha1(self.to_line().encode()).hexdigest()

    @property
    def yaw_bin(self) -> int:
        return int(math.floor((self.yaw % (2 * math.pi)) / (2 * math.pi) * YAW_BINS)) % YAW_BINS


def descriptor(spec: ShapeSpec) -> np.ndarray:
    """One-hot family (5) + 8 normalised slots: params, zero padding, yaw bin, scale."""
    one_hot = np.zeros(len(FAMILIES))
    one_hot[FAMILIES.index(spec.family)] = 1.0
    slots = np.zeros(8)
    for i, (k, v) in enumerate(spec.params):
        lo, hi = PARAM_RANGES[spec.family][k]
        slots[i] = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    slots[6] = spec.yaw_bin / (YAW_BINS - 1)
    lo, hi = SCALE_RANGE
    slots[7] = np.clip((spec.scale - lo) / (hi - lo), 0.0, 1.0)
    return np.concatenate([one_hot, slots])


def _unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n, radius, center=(0.0, 0.0, 0.0)):
    return radius * _unit_vectors(rng, n) + np.asarray(center)


def _torus(rng, n, R, r):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, m)
        v = rng.uniform(0, 2 * np.pi, m)
        # area element is proportional to R + r cos v
        keep = rng.uniform(0, R + r, m) < R + r * np.cos(v)
        u, v = u[keep], v[keep]
        ring = R + r * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _box(rng, n, sx, sy, sz):
    half = np.array([sx, sy, sz])
    areas = np.array([sy * sz, sx * sz, sx * sy])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, (n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _cylinder(rng, n, radius, half_height):
    side = 2 * np.pi * radius * 2 * half_height
    caps = 2 * np.pi * radius**2
    on_side = rng.random(n) < side / (side + caps)
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(on_side, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-half_height, half_height, n),
                 rng.choice([-half_height, half_height], size=n))
    return np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)


def _two_spheres(rng, n, radius, separation):
    which = rng.random(n) < 0.5
    pts = radius * _unit_vectors(rng, n)
    pts[:, 0] += np.where(which, 0.5, -0.5) * separation
    return pts


def _surface(spec: ShapeSpec, rng, n):
    f = spec.family
    if f == "sphere":
        return _sphere(rng, n, spec["radius"])
    if f == "torus":
        return _torus(rng, n, spec["R"], spec["r"])
    if f == "box":
        return _box(rng, n, spec["sx"], spec["sy"], spec["sz"])
    if f == "cylinder":
        return _cylinder(rng, n, spec["radius"], spec["half_height"])
    return _two_spheres(rng, n, spec["radius"], spec["separation"])


def generate_sample(spec: ShapeSpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Surface points (n x 3) for ``spec`` plus its condition descriptor."""
    if n < 8:
        raise ValueError(f"need n >= 8 points, got {n}")
    rng = np.random.default_rng(rng)
    half = _surface(spec, rng, (n + 1) // 2)
    pts = np.concatenate([half, -half])[:n]
    c, s = math.cos(spec.yaw), math.sin(spec.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = spec.scale * pts @ rot.T
    if n % 2:
        pts = pts - pts.mean(axis=0)
    extent = np.abs(pts).max()
    if extent > 1.0:
        pts = pts / extent
    return pts, descriptor(spec)


def random_spec(rng: np.random.Generator, families=FAMILIES) -> ShapeSpec:
    family = families[rng.integers(len(families))]
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES[family].items()}
    return ShapeSpec.make(family, yaw=float(rng.uniform(0, 2 * np.pi)),
                          scale=float(rng.uniform(*SCALE_RANGE)), **params)


@dataclass
class Split:
    train: list[ShapeSpec]
    test: list[ShapeSpec]


def make_splits(n_train: int, n_test: int, seed: int = 0, families=FAMILIES) -> Split:
    """Disjoint train/test spec lists (no spec hash in both)."""
    if n_train < 1 or n_test < 1:
        raise ValueError("split sizes must be >= 1")
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    specs: list[ShapeSpec] = []
    while len(specs) < n_train + n_test:
        s = random_spec(rng, tuple(families))
        if s.hash not in seen:
            seen.add(s.hash)
            specs.append(s)
    return Split(specs[:n_train], specs[n_train:])


def write_manifest(path, specs) -> None:
    with open(path, "w") as fh:
        for s in specs:
            fh.write(s.to_line() + "\n")


def read_manifest(path) -> list[ShapeSpec]:
    with open(path) as fh:
        return [ShapeSpec.from_line(line) for line in fh
                if line.strip() and not line.lstrip().startswith("#")]


def sample_batch(specs, n_points: int, rng: np.random.Generator):
    """Fresh surface samples for each spec; returns (B x N x 3, B x 13)."""
    pts, desc = zip(*(generate_sample(s, n_points, rng) for s in specs))
    return np.stack(pts), np.stack(desc)
