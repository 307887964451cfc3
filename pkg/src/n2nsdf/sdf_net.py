"""Conditioned neural SDF ``f(q, c)``, the pulling projection and network checkpoints."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .geometry import PointCloud

log = logging.getLogger(__name__)

MAGIC = b"NSDF"
VERSION = 1
GRAD_FLOOR = 1e-8
CHUNK = 32768


class VanishingGradientError(ValueError):
    """The field gradient is (numerically) zero at some queries."""

    def __init__(self, rows: np.ndarray):
        self.rows = np.asarray(rows, dtype=np.int64)
        super().__init__(f"vanishing gradient at query rows {self.rows[:8].tolist()}")


@dataclass
class SdfNetwork:
    """MLP from ``[q, c]`` to one signed distance.

    ``params`` alternates weights ``(fan_in, fan_out)`` and biases ``(fan_out,)``.
    Layers listed in ``skip`` receive the raw input concatenated to their input.
    """

    layer_sizes: tuple[int, ...]
    params: list[np.ndarray]
    activation: str = "softplus"
    beta: float = 100.0
    skip: tuple[int, ...] = ()

    @classmethod
    def create(
        cls,
        embedding_size: int = 256,
        hidden: int = 128,
        n_layers: int = 8,
        activation: str = "softplus",
        beta: float = 100.0,
        skip: Sequence[int] = (),
        rng: np.random.Generator | None = None,
    ) -> "SdfNetwork":
        if n_layers < 2:
            raise ValueError("need at least two layers")
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (3 + embedding_size,) + (hidden,) * (n_layers - 1) + (1,)
        skip = tuple(sorted(skip))
        params = []
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if layer in skip:
                fan_in += sizes[0]
            params.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            params.append(np.zeros(fan_out))
        return cls(sizes, params, activation, float(beta), skip)

    @property
    def embedding_size(self) -> int:
        return self.layer_sizes[0] - 3

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def copy(self) -> "SdfNetwork":
        return SdfNetwork(
            self.layer_sizes, [p.copy() for p in self.params], self.activation, self.beta, self.skip
        )

    def header(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "beta": self.beta,
            "skip": list(self.skip),
        }

    def _act(self, x):
        if self.activation == "softplus":
            return ad.softplus(x, self.beta)
        if self.activation == "tanh":
            return ad.tanh(x)
        if self.activation == "relu":
            return ad.relu(x)
        raise ValueError(f"unknown activation {self.activation!r}")

    def check_code(self, code: np.ndarray) -> None:
        if np.shape(code)[-1] != self.embedding_size:
            raise ValueError(
                f"latent code length {np.shape(code)[-1]} does not match network "
                f"embedding size {self.embedding_size}"
            )

    def forward(self, params: Sequence, code, q, rows: np.ndarray | None = None):
        """Signed distances ``(n, 1)`` for queries ``q`` of shape ``(n, 3)``.

        ``code`` is one embedding ``(E,)`` or a table ``(I, E)`` indexed by ``rows``.
        Works on plain arrays and on tape variables alike.
        """
        n = ad._shape(q)[0]
        W0, b0 = params[0], params[1]
        code_part = ad.matmul(ad.reshape(code, (1, -1)) if rows is None else code, W0[3:])
        if rows is not None:
            code_part = ad.getitem(code_part, rows)
        h = ad.add(ad.add(ad.matmul(q, W0[:3]), code_part), b0)
        x_in = None
        for layer in range(1, self.n_layers):
            h = self._act(h)
            W, b = params[2 * layer], params[2 * layer + 1]
            if layer in self.skip:
                if x_in is None:
                    codes = (
                        ad.broadcast_to(ad.reshape(code, (1, -1)), (n, self.embedding_size))
                        if rows is None
                        else ad.getitem(code, rows)
                    )
                    x_in = ad.concat([q, codes], axis=1)
                h = ad.concat([h, x_in], axis=1)
            h = ad.add(ad.matmul(h, W), b)
        return h

    def bind(self, tape: Tape, code: np.ndarray, trainable: bool = True) -> tuple[list[Var], Var]:
        self.check_code(code)
        params = [tape.leaf(p, trainable=trainable) for p in self.params]
        return params, tape.leaf(code, trainable=trainable)


def _as_queries(q) -> tuple[np.ndarray, bool]:
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    return q.reshape(-1, 3), single


def evaluate(net: SdfNetwork, code: np.ndarray, q) -> np.ndarray | float:
    """``f(q, c)`` for one query ``(3,)`` or a batch ``(n, 3)``."""
    net.check_code(code)
    qs, single = _as_queries(q)
    out = np.empty(len(qs))
    for start in range(0, len(qs), CHUNK):
        chunk = qs[start:start + CHUNK]
        out[start:start + CHUNK] = net.forward(net.params, np.asarray(code, float), chunk)[:, 0]
    return float(out[0]) if single else out


def taped_field(net: SdfNetwork, tape: Tape, params, code: Var, q: Var) -> tuple[Var, Var]:
    """Signed distances ``(n, 1)`` and spatial gradients ``(n, 3)`` kept on the tape."""
    s = net.forward(params, code, q)
    grad = tape.gradient_node(ad.sum(s), q)
    return s, grad


def taped_pull(net: SdfNetwork, tape: Tape, params, code: Var, q: Var) -> tuple[Var, Var, Var]:
    """Differentiable projection ``q - f * grad / |grad|`` onto the zero-level set.

    Raises :class:`VanishingGradientError` listing rows with ``|grad| < 1e-8``.
    """
    s = net.forward(params, code, q)
    pulled, grad = project(tape, s, q)
    return pulled, s, grad


def project(tape: Tape, s: Var, q: Var) -> tuple[Var, Var]:
    """Pull queries ``q`` along the gradient of any taped field ``s`` (n, 1); returns (pulled, grad)."""
    grad = tape.gradient_node(ad.sum(s), q)
    gnorm = ad.norm(grad, axis=1)
    bad = np.flatnonzero(gnorm.value[:, 0] < GRAD_FLOOR)
    if len(bad):
        raise VanishingGradientError(bad)
    pulled = ad.sub(q, ad.mul(s, ad.div(grad, gnorm)))
    return pulled, grad


def _numeric_field(net: SdfNetwork, code: np.ndarray, qs: np.ndarray):
    tape = Tape()
    params = [tape.constant(p) for p in net.params]
    c = tape.constant(code)
    qv = tape.leaf(qs)
    s = net.forward(params, c, qv)
    (grad,) = tape.backward(ad.sum(s), [qv])
    return s.value[:, 0], grad


def spatial_gradient(net: SdfNetwork, code: np.ndarray, q) -> np.ndarray:
    """Exact ``grad_q f(q, c)`` for one query or a batch."""
    net.check_code(code)
    qs, single = _as_queries(q)
    out = np.empty_like(qs)
    for start in range(0, len(qs), CHUNK):
        _, out[start:start + CHUNK] = _numeric_field(net, code, qs[start:start + CHUNK])
    return out[0] if single else out


def pull_to_surface(net: SdfNetwork, code: np.ndarray, q) -> np.ndarray:
    """Project queries onto the zero-level set along the normalized field gradient."""
    net.check_code(code)
    qs, single = _as_queries(q)
    out = np.empty_like(qs)
    for start in range(0, len(qs), CHUNK):
        chunk = qs[start:start + CHUNK]
        s, g = _numeric_field(net, code, chunk)
        gn = np.sqrt(np.sum(g * g, axis=1))
        bad = np.flatnonzero(gn < GRAD_FLOOR)
        if len(bad):
            raise VanishingGradientError(bad + start)
        out[start:start + CHUNK] = chunk - (s / gn)[:, None] * g
    return out[0] if single else out


def init_code_from_prior(prior_codes: Sequence[np.ndarray]) -> np.ndarray:
    """Center of the learned embedding space (elementwise mean of the prior codes)."""
    codes = [np.asarray(c, dtype=np.float64) for c in prior_codes]
    if not codes:
        raise ValueError("need at least one prior code")
    if len({c.shape for c in codes}) != 1:
        raise ValueError("prior codes differ in length")
    return np.mean(np.stack(codes), axis=0)


def denoise_points(net: SdfNetwork, code: np.ndarray, pc: PointCloud) -> tuple[PointCloud, int]:
    """Pull every point onto the learned surface.

    Points with a vanishing field gradient are kept as they are; their count is
    returned alongside the denoised cloud.
    """
    net.check_code(code)
    out = pc.points.copy()
    failed = 0
    for start in range(0, len(out), CHUNK):
        chunk = pc.points[start:start + CHUNK]
        s, g = _numeric_field(net, code, chunk)
        gn = np.sqrt(np.sum(g * g, axis=1))
        ok = gn >= GRAD_FLOOR
        failed += int(np.count_nonzero(~ok))
        moved = chunk[ok] - (s[ok] / gn[ok])[:, None] * g[ok]
        out[start:start + CHUNK][ok] = moved
    if failed:
        log.warning("denoise: %d point(s) left in place due to vanishing gradient", failed)
    return PointCloud(out, "denoised"), failed


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    net: SdfNetwork
    codes: np.ndarray  # (I, E)
    ids: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def code(self, shape_id: str) -> np.ndarray:
        return self.codes[self.ids.index(shape_id)]


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    net = ckpt.net
    codes = np.asarray(ckpt.codes, dtype=np.float64).reshape(-1, net.embedding_size)
    if len(ckpt.ids) != len(codes):
        raise ValueError("embedding ids and table rows disagree")
    header = net.header()
    header["param_shapes"] = [list(p.shape) for p in net.params]
    header["embedding"] = {"ids": list(ckpt.ids), "dim": net.embedding_size}
    header["extra"] = ckpt.extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<I", len(blob)) + blob)
        fh.write(ad.pack_parameters(net.params))
        fh.write(codes.astype("<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a network checkpoint (bad magic)")
    if data[4] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {data[4]}")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    offset = 9 + hlen
    shapes = [tuple(s) for s in header["param_shapes"]]
    params, offset = ad.unpack_parameters(data, shapes, offset)
    dim = header["embedding"]["dim"]
    ids = header["embedding"]["ids"]
    codes = np.frombuffer(data, dtype="<f8", count=len(ids) * dim, offset=offset)
    net = SdfNetwork(
        tuple(header["layer_sizes"]),
        params,
        header["activation"],
        float(header["beta"]),
        tuple(header["skip"]),
    )
    return Checkpoint(net, codes.reshape(len(ids), dim).astype(np.float64), ids, header["extra"])
