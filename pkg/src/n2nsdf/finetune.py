"""Test-time finetuning of the prior on one noisy cloud with a local noise-to-noise EMD loss.

Each iteration draws one local region of the cloud, samples queries around its
points, pulls them onto the current zero-level set and matches the pulled set
against a random subset of the region's noisy points. Because every subset is
an independent noisy observation of the same surface patch, the expected
matching cost is smallest when the zero-level set sits on the mean surface.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step
from .geometry import (
    KnnIndex,
    LocalRegion,
    PointCloud,
    SplitParams,
    sample_queries,
    split_strategy,
)
from .sdf_net import Checkpoint, SdfNetwork, VanishingGradientError, init_code_from_prior, taped_pull
from .transport import emd_loss

log = logging.getLogger(__name__)

PRIOR_MODES = ("with", "without", "without-embed", "fixed-param")
SCOPES = ("local", "global")


@dataclass
class FinetuneConfig:
    iterations: int = 4000
    lr: float = 1e-4
    beta: float = 1e-4
    K: int = 1000
    U: int = 1000
    strategy: str = "sphere-knn"
    scope: str = "local"
    radius: float = 0.1
    voxel_grid: int = 8
    prior_mode: str = "with"
    ground: str = "sqeuclidean"
    max_resample: int = 10
    data_term: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.U > self.K and self.strategy == "sphere-knn" and self.scope == "local":
            raise ValueError(f"U={self.U} cannot exceed K={self.K} when subsetting without replacement")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")

    def split_params(self) -> SplitParams:
        return SplitParams(K=self.K, radius=self.radius, grid=self.voxel_grid)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneState:
    net: SdfNetwork
    code: np.ndarray
    adam: AdamState
    train_network: bool = True
    skipped: int = 0

    @classmethod
    def create(cls, net: SdfNetwork, code: np.ndarray, train_network: bool = True) -> "FinetuneState":
        params = (list(net.params) if train_network else []) + [code]
        return cls(net, np.array(code, dtype=np.float64), AdamState.for_params(params), train_network)


def initial_state(prior: Checkpoint, cfg: FinetuneConfig) -> FinetuneState:
    """Network and code at the start of finetuning, per ``cfg.prior_mode``."""
    rng = np.random.default_rng(cfg.seed + 7919)
    net = prior.net.copy()
    mean_code = init_code_from_prior(list(prior.codes))
    random_code = rng.standard_normal(net.embedding_size) * 0.01
    if cfg.prior_mode == "with":
        return FinetuneState.create(net, mean_code)
    if cfg.prior_mode == "fixed-param":
        return FinetuneState.create(net, mean_code, train_network=False)
    if cfg.prior_mode == "without-embed":
        return FinetuneState.create(net, random_code)
    fresh = SdfNetwork.create(
        net.embedding_size,
        net.layer_sizes[1],
        net.n_layers,
        net.activation,
        net.beta,
        net.skip,
        rng,
    )
    return FinetuneState.create(fresh, random_code)


def _draw_region(
    pc: PointCloud, index: KnnIndex, cfg: FinetuneConfig, rng: np.random.Generator
) -> LocalRegion:
    if cfg.scope == "global":
        members = np.arange(len(pc))
        return LocalRegion(-1, members, index.query_scales)
    return split_strategy(pc, index, cfg.strategy, cfg.split_params(), rng)


def finetune_step(
    state: FinetuneState,
    pc: PointCloud,
    index: KnnIndex,
    cfg: FinetuneConfig,
    rng: np.random.Generator,
) -> float | None:
    """One Monte Carlo step of the noise-to-noise objective; returns the loss before the update.

    Returns ``None`` when the step had to be skipped because pulled queries kept
    landing on a vanishing gradient.
    """
    net = state.net
    region = _draw_region(pc, index, cfg, rng)
    n = min(cfg.U, len(region))
    queries = sample_queries(region, pc, n, rng)
    subset = pc.points[rng.choice(region.members, size=n, replace=False)]

    for attempt in range(cfg.max_resample + 1):
        tape = Tape()
        params = [tape.leaf(p, trainable=state.train_network) for p in net.params]
        code = tape.parameter(state.code)
        q = tape.leaf(queries)
        try:
            pulled, _, _ = taped_pull(net, tape, params, code, q)
            break
        except VanishingGradientError as err:
            if attempt == cfg.max_resample:
                state.skipped += 1
                log.warning("skipping iteration: vanishing gradient after %d resamples", attempt)
                return None
            queries[err.rows] = sample_queries(region, pc, len(err.rows), rng)

    reg = ad.mul(ad.sum(ad.square(code)), cfg.beta)
    if cfg.data_term:
        data, _ = emd_loss(pulled, subset, cfg.ground)
        loss = ad.add(data, reg)
    else:
        loss = reg
    value = float(loss.value)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite finetuning loss {value}")

    wrt = (params if state.train_network else []) + [code]
    grads = tape.backward(loss, wrt)
    current = (list(net.params) if state.train_network else []) + [state.code]
    updated = adam_step(current, grads, state.adam, cfg.lr)
    if state.train_network:
        net.params = updated[:-1]
    state.code = updated[-1]
    return value


def global_mapping_step(
    state: FinetuneState,
    pc: PointCloud,
    index: KnnIndex,
    cfg: FinetuneConfig,
    rng: np.random.Generator,
) -> float | None:
    """Same objective with the whole cloud as the region."""
    cfg_global = FinetuneConfig(**{**cfg.to_dict(), "scope": "global"})
    return finetune_step(state, pc, index, cfg_global, rng)


def finetune(
    prior: Checkpoint, pc: PointCloud, cfg: FinetuneConfig
) -> tuple[SdfNetwork, np.ndarray, list[float]]:
    """Run ``cfg.iterations`` finetuning steps; returns network, code and loss trace.

    Skipped iterations are recorded as NaN in the trace.
    """
    if cfg.scope == "local" and cfg.strategy == "sphere-knn" and cfg.K > len(pc):
        raise ValueError(f"region size K={cfg.K} exceeds point count {len(pc)}")
    state = initial_state(prior, cfg)
    index = KnnIndex.from_cloud(pc)
    rng = np.random.default_rng(cfg.seed)
    trace: list[float] = []
    for _ in range(cfg.iterations):
        loss = finetune_step(state, pc, index, cfg, rng)
        trace.append(float("nan") if loss is None else loss)
    return state.net, state.code, trace
