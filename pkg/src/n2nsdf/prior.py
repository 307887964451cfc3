"""Data-driven prior: analytic shapes as signed-distance supervision for an auto-decoder."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step
from .sdf_net import Checkpoint, SdfNetwork

log = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "box", "torus", "capsule", "union")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sphere_dirs(n: int, rng: np.random.Generator) -> np.ndarray:
    return _unit(rng.standard_normal((n, 3)))


@dataclass
class AnalyticShape:
    """Closed-form SDF primitive (or the union of two) in model units."""

    kind: str
    params: dict = field(default_factory=dict)

    # constructors -----------------------------------------------------------
    @classmethod
    def sphere(cls, radius: float, center=(0.0, 0.0, 0.0)) -> "AnalyticShape":
        return cls("sphere", {"radius": float(radius), "center": list(map(float, center))})

    @classmethod
    def box(cls, half_extents, center=(0.0, 0.0, 0.0)) -> "AnalyticShape":
        return cls("box", {"half_extents": list(map(float, half_extents)), "center": list(map(float, center))})

    @classmethod
    def torus(cls, major: float, minor: float, center=(0.0, 0.0, 0.0)) -> "AnalyticShape":
        """Torus around the z axis."""
        return cls("torus", {"major": float(major), "minor": float(minor), "center": list(map(float, center))})

    @classmethod
    def capsule(cls, a, b, radius: float) -> "AnalyticShape":
        return cls("capsule", {"a": list(map(float, a)), "b": list(map(float, b)), "radius": float(radius)})

    @classmethod
    def union(cls, first: "AnalyticShape", second: "AnalyticShape") -> "AnalyticShape":
        return cls("union", {"children": [first.to_dict(), second.to_dict()]})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticShape":
        if d["kind"] not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {d['kind']!r}")
        return cls(d["kind"], d["params"])

    def children(self) -> list["AnalyticShape"]:
        return [AnalyticShape.from_dict(c) for c in self.params["children"]]

    # geometry ---------------------------------------------------------------
    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        k, a = self.kind, self.params
        if k == "sphere":
            return np.linalg.norm(p - a["center"], axis=-1) - a["radius"]
        if k == "box":
            q = np.abs(p - a["center"]) - np.asarray(a["half_extents"])
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return outside + inside
        if k == "torus":
            d = p - a["center"]
            ring = np.linalg.norm(d[..., :2], axis=-1) - a["major"]
            return np.hypot(ring, d[..., 2]) - a["minor"]
        if k == "capsule":
            pa = p - a["a"]
            ba = np.asarray(a["b"]) - a["a"]
            h = np.clip(pa @ ba / (ba @ ba), 0.0, 1.0)
            return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - a["radius"]
        if k == "union":
            c0, c1 = self.children()
            return np.minimum(c0.sdf(p), c1.sdf(p))
        raise ValueError(f"unknown shape kind {k!r}")

    def normals(self, p, h: float = 1e-6) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        g = np.stack([self.sdf(p + h * e) - self.sdf(p - h * e) for e in np.eye(3)], axis=-1)
        return _unit(g)

    def area(self) -> float:
        k, a = self.kind, self.params
        if k == "sphere":
            return 4.0 * math.pi * a["radius"] ** 2
        if k == "box":
            x, y, z = a["half_extents"]
            return 8.0 * (x * y + y * z + x * z)
        if k == "torus":
            return 4.0 * math.pi**2 * a["major"] * a["minor"]
        if k == "capsule":
            r = a["radius"]
            length = float(np.linalg.norm(np.subtract(a["b"], a["a"])))
            return 2.0 * math.pi * r * length + 4.0 * math.pi * r * r
        if k == "union":
            return sum(c.area() for c in self.children())  # upper bound, overlap not removed
        raise ValueError(f"unknown shape kind {k!r}")

    def sample_surface(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` area-uniform surface points with outward unit normals."""
        pts = self._sample(n, rng)
        return pts, self.normals(pts)

    def _sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k, a = self.kind, self.params
        if k == "sphere":
            return np.asarray(a["center"]) + a["radius"] * _sphere_dirs(n, rng)
        if k == "box":
            h = np.asarray(a["half_extents"])
            face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
            axis = rng.choice(3, size=n, p=face_area / face_area.sum())
            pts = rng.uniform(-1.0, 1.0, size=(n, 3))
            pts[np.arange(n), axis] = rng.choice([-1.0, 1.0], size=n)
            return np.asarray(a["center"]) + pts * h
        if k == "torus":
            R, r = a["major"], a["minor"]
            theta = np.empty(0)
            while len(theta) < n:
                t = rng.uniform(0, 2 * math.pi, size=2 * n)
                keep = rng.uniform(0, R + r, size=2 * n) < R + r * np.cos(t)
                theta = np.concatenate([theta, t[keep]])
            theta = theta[:n]
            phi = rng.uniform(0, 2 * math.pi, size=n)
            ring = R + r * np.cos(theta)
            pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), r * np.sin(theta)], axis=1)
            return np.asarray(a["center"]) + pts
        if k == "capsule":
            A, B, r = np.asarray(a["a"]), np.asarray(a["b"]), a["radius"]
            axis_v = B - A
            length = float(np.linalg.norm(axis_v))
            d = axis_v / length
            u = _unit(np.cross(d, [1.0, 0.0, 0.0] if abs(d[0]) < 0.9 else [0.0, 1.0, 0.0]))
            v = np.cross(d, u)
            cyl = 2.0 * math.pi * r * length
            on_cyl = rng.random(n) < cyl / (cyl + 4.0 * math.pi * r * r)
            out = np.empty((n, 3))
            m = int(on_cyl.sum())
            t = rng.random(m)[:, None]
            phi = rng.uniform(0, 2 * math.pi, size=m)[:, None]
            out[on_cyl] = A + t * axis_v + r * (np.cos(phi) * u + np.sin(phi) * v)
            dirs = _sphere_dirs(n - m, rng)
            along = dirs @ d
            cap_b = along > 0
            out[~on_cyl] = np.where(cap_b[:, None], B, A) + r * dirs
            return out
        if k == "union":
            kids = self.children()
            w = np.array([c.area() for c in kids])
            got: list[np.ndarray] = []
            count = 0
            while count < n:
                which = rng.choice(2, size=2 * n, p=w / w.sum())
                for i, child in enumerate(kids):
                    m = int(np.count_nonzero(which == i))
                    if m == 0:
                        continue
                    cand = child._sample(m, rng)
                    cand = cand[kids[1 - i].sdf(cand) > 0.0]
                    got.append(cand)
                    count += len(cand)
            return np.concatenate(got)[:n]
        raise ValueError(f"unknown shape kind {k!r}")

    def bbox_longest_edge(self, n: int = 20000, seed: int = 0) -> float:
        pts = self._sample(n, np.random.default_rng(seed))
        return float(np.max(pts.max(axis=0) - pts.min(axis=0)))


def default_roster() -> list[AnalyticShape]:
    """Desk-scale training shapes: sphere, box and torus inside the unit box."""
    return [
        AnalyticShape.sphere(0.35),
        AnalyticShape.box((0.3, 0.25, 0.2)),
        AnalyticShape.torus(0.3, 0.1),
    ]


@dataclass
class SupervisionBatch:
    shape_id: int
    queries: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.queries) != len(self.targets):
            raise ValueError("queries and targets differ in length")


def generate_supervision(
    shape: AnalyticShape,
    n: int,
    rng: np.random.Generator,
    shape_id: int = 0,
    near_sigma: float = 0.05,
    half_extent: float = 0.5,
) -> SupervisionBatch:
    """Half near-surface queries (surface + N(0, near_sigma)), half uniform in the box."""
    if n < 1:
        raise ValueError("n must be at least 1")
    n_near = n // 2
    surf = shape._sample(n_near, rng)
    near = surf + rng.standard_normal((n_near, 3)) * near_sigma
    far = rng.uniform(-half_extent, half_extent, size=(n - n_near, 3))
    q = np.concatenate([near, far])
    return SupervisionBatch(shape_id, q, shape.sdf(q))


def prior_loss(net: SdfNetwork, params, code, batch: SupervisionBatch, alpha: float):
    """Sum of squared SDF errors over the batch plus ``alpha * |code|^2``."""
    if code is None:
        raise KeyError(f"no latent code for shape {batch.shape_id}")
    s = net.forward(params, code, batch.queries)
    resid = ad.sub(ad.reshape(s, (-1,)), batch.targets)
    return ad.add(ad.sum(ad.square(resid)), ad.mul(ad.sum(ad.square(code)), alpha))


@dataclass
class PriorConfig:
    alpha: float = 1e-4
    epochs: int = 2000
    lr_net: float = 1e-3
    lr_code: float = 5e-4
    decay_every: int = 500
    decay_factor: float = 0.5
    samples_per_shape: int = 4096
    batch_size: int = 1024
    code_init_std: float = 0.01
    embedding_size: int = 256
    hidden: int = 128
    n_layers: int = 8
    activation: str = "softplus"
    beta: float = 100.0
    skip: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.lr_net <= 0 or self.lr_code <= 0:
            raise ValueError("learning rates must be positive")
        self.skip = tuple(self.skip)

    def lr_at(self, epoch: int) -> tuple[float, float]:
        f = self.decay_factor ** (epoch // self.decay_every)
        return self.lr_net * f, self.lr_code * f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip"] = list(self.skip)
        return d


def init_prior(n_shapes: int, cfg: PriorConfig) -> Checkpoint:
    rng = np.random.default_rng(cfg.seed)
    net = SdfNetwork.create(
        cfg.embedding_size, cfg.hidden, cfg.n_layers, cfg.activation, cfg.beta, cfg.skip, rng
    )
    codes = rng.standard_normal((n_shapes, cfg.embedding_size)) * cfg.code_init_std
    return Checkpoint(net, codes, [str(i) for i in range(n_shapes)])


def train_prior(
    shapes: Sequence[AnalyticShape],
    cfg: PriorConfig,
    init: Checkpoint | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[Checkpoint, list[float]]:
    """Jointly fit network parameters and one code per shape; returns checkpoint and loss trace.

    The trace holds the mean per-step loss of every epoch.
    """
    if not shapes:
        raise ValueError("need at least one training shape")
    ckpt = init if init is not None else init_prior(len(shapes), cfg)
    if len(ckpt.codes) != len(shapes):
        raise ValueError("checkpoint code table does not match the shape roster")
    net = ckpt.net.copy()
    codes = np.array(ckpt.codes, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed + 1)
    data = [generate_supervision(s, cfg.samples_per_shape, rng, i) for i, s in enumerate(shapes)]
    params = [p for p in net.params] + [c for c in codes]
    state = AdamState.for_params(params)
    n_net = len(net.params)
    steps = max(1, math.ceil(cfg.samples_per_shape / cfg.batch_size))
    trace: list[float] = []

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        lr_net, lr_code = cfg.lr_at(epoch)
        rates = [lr_net] * n_net + [lr_code] * len(shapes)
        perms = [rng.permutation(cfg.samples_per_shape) for _ in shapes]
        total = 0.0
        for step in range(steps):
            tape = Tape()
            pv = [tape.parameter(p) for p in params[:n_net]]
            cv = [tape.parameter(c) for c in params[n_net:]]
            loss = None
            for i, batch in enumerate(data):
                sel = perms[i][step * cfg.batch_size:(step + 1) * cfg.batch_size]
                sub = SupervisionBatch(i, batch.queries[sel], batch.targets[sel])
                li = prior_loss(net, pv, cv[i], sub, cfg.alpha)
                value = float(li.value)
                if not math.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite prior loss at epoch {epoch}, step {step}, shape {i}"
                    )
                loss = li if loss is None else ad.add(loss, li)
            grads = tape.backward(loss, pv + cv)
            params = adam_step(params, grads, state, rates)
            total += float(loss.value)
        trace.append(total / steps)
        if on_epoch is not None:
            on_epoch(epoch, trace[-1])

    net.params = params[:n_net]
    out = Checkpoint(net, np.stack(params[n_net:]), list(ckpt.ids), dict(ckpt.extra))
    return out, trace
