"""Embedding several frozen sparse networks in one dense weight set.

``elsa_step`` performs one sparsify -> freeze -> densify round. ``multi_level``
chains rounds at decreasing sparsity and tracks, per weight, the first
level at which it was frozen (the counter). Any embedded sparse network can
then be cut out of the final dense weights with :func:`extract_level`.

Non-prunable tensors (biases, batchnorm scale/shift) belong to every sparse
network, so they are frozen after the first round along with the first
sparse subnetwork.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ElsaError
from .nn import (
    BatchNormStats,
    Dataset,
    Network,
    ParamSet,
    TrainConfig,
    compute_bn_stats,
    train,
)
from .rng import derive_seed
from .sparsify import GmpConfig, SparsitySpec, apply_keepset, gmp_run, select

log = logging.getLogger(__name__)

DENSE = "dense"


@dataclass(frozen=True)
class ElsaConfig:
    """How each round sparsifies and densifies.

    ``sparsifier`` is "topk" (one-shot magnitude pruning) or "gmp". GMP rounds
    train while pruning, so the explicit densify phase is skipped for every
    round but the last. ``gmp`` maps a spec to its schedule; when omitted the
    default schedule for ``sparsify_cfg`` is used.
    """

    densify_cfg: TrainConfig = TrainConfig(learning_rate=1e-3, epochs=10)
    sparsifier: str = "gmp"
    sparsify_cfg: TrainConfig = TrainConfig(epochs=10)
    gmp: Optional[Callable[[SparsitySpec], GmpConfig]] = None

    def __post_init__(self):
        if self.sparsifier not in ("topk", "gmp"):
            raise ValueError(f"unknown sparsifier {self.sparsifier!r}")

    @classmethod
    def from_initial(cls, initial: TrainConfig, densify_epochs=10, sparsify_epochs=10,
                     sparsifier="gmp", lr_ratio=0.01):
        """Densify at ``lr_ratio`` times the initial learning rate."""
        return cls(
            densify_cfg=replace(initial, learning_rate=initial.learning_rate * lr_ratio,
                                epochs=densify_epochs),
            sparsifier=sparsifier,
            sparsify_cfg=replace(initial, epochs=sparsify_epochs),
        )


def validate_schedule(schedule: Sequence[SparsitySpec]) -> None:
    if not schedule:
        raise ValueError("a level schedule needs at least one level")
    if len(schedule) > 255:
        raise ValueError("at most 255 levels are supported")
    for a, b in zip(schedule, schedule[1:]):
        if not a.nominal > b.nominal:
            raise ValueError(
                f"sparsity levels must strictly decrease, got {a.label()} then {b.label()}"
            )


def sparsify(network, params, mask, spec, data, cfgs: ElsaConfig, seed_path=()):
    """Run the configured sparsifier; returns ``(sparse params, new mask)``."""
    if cfgs.sparsifier == "topk":
        return apply_keepset(params, select(params, mask, spec), mask)
    train_cfg = replace(cfgs.sparsify_cfg, seed=derive_seed(cfgs.sparsify_cfg.seed, "gmp", *seed_path))
    gmp_cfg = cfgs.gmp(spec) if cfgs.gmp else GmpConfig.default(spec, len(data), train_cfg)
    return gmp_run(network, params, mask, spec, data, train_cfg, gmp_cfg,
                   train_nonprunable=bool(np.all(mask == 1)))


def elsa_step(
    network: Network,
    params: ParamSet,
    mask: Optional[np.ndarray],
    spec: SparsitySpec,
    data: Dataset,
    cfgs: ElsaConfig,
    stamp_hook: Optional[Callable[[ParamSet, np.ndarray], ParamSet]] = None,
    *,
    densify: bool = True,
    on_freeze: Optional[Callable[[ParamSet, np.ndarray], None]] = None,
    level: int = 1,
):
    """One sparsify -> freeze -> densify round.

    ``stamp_hook(sparse_params, newly_frozen_indices)`` may rewrite the newly
    frozen words before anything else sees them; ``on_freeze(sparse_params,
    mask)`` observes the frozen sparse network. Returns ``(params, mask)``.
    """
    if mask is None:
        mask = np.ones(params.D, dtype=np.uint8)
    mask = np.asarray(mask, dtype=np.uint8)
    sparse, new_mask = sparsify(network, params, mask, spec, data, cfgs, seed_path=(level,))
    if stamp_hook is not None:
        newly = np.flatnonzero((mask == 1) & (new_mask == 0))
        sparse = stamp_hook(sparse, newly)
    if on_freeze is not None:
        on_freeze(sparse, new_mask)
    if not densify:
        return sparse, new_mask
    cfg = replace(cfgs.densify_cfg, seed=derive_seed(cfgs.densify_cfg.seed, "densify", level))
    dense = train(network, sparse, new_mask, data, cfg, train_nonprunable=False)
    return dense, new_mask


@dataclass
class EmbeddingResult:
    params: ParamSet
    counter: np.ndarray
    T: int
    stats: dict
    digests: list
    schedule: tuple
    images: Optional[list] = None  # sparse snapshots, kept only on request
    timings: list = field(default_factory=list)


def multi_level(
    network: Network,
    params: ParamSet,
    schedule: Sequence[SparsitySpec],
    data: Dataset,
    cfgs: ElsaConfig,
    *,
    stamper=None,
    keep_images: bool = False,
    on_level: Optional[Callable[[int, ParamSet, np.ndarray], None]] = None,
) -> EmbeddingResult:
    """Embed one sparse network per level of ``schedule``.

    ``stamper`` (see :class:`elsa.lsbpack.LsbStamper`) writes level indices into
    newly frozen weights and finalizes the dense result. Batchnorm statistics
    for every level are measured on ``data``'s inputs right after freezing.
    Only one mask and one counter are alive at any time.
    """
    validate_schedule(schedule)
    T = len(schedule)
    mask = np.ones(params.D, dtype=np.uint8)
    counter = np.ones(params.D, dtype=np.uint16)
    stats, digests = {}, []
    images = [] if keep_images else None
    timings = []

    for t, spec in enumerate(schedule, start=1):
        tick = time.perf_counter()

        def stamp_hook(sparse, newly, t=t):
            return stamper.stamp(sparse, newly, t)

        def freeze(sparse, new_mask, t=t):
            stats[t] = compute_bn_stats(network, sparse, data.x, level=t)
            digests.append(sparse.digest())
            if images is not None:
                images.append(sparse.copy())
            if on_level is not None:
                on_level(t, sparse, new_mask)

        densify = cfgs.sparsifier != "gmp" or t == T
        try:
            params, mask = elsa_step(
                network, params, mask, spec, data, cfgs,
                stamp_hook if stamper is not None else None,
                densify=densify, on_freeze=freeze, level=t,
            )
        except ElsaError as exc:
            raise type(exc)(f"level {t} ({spec.label()}): {exc}") from exc
        counter += mask
        timings.append(time.perf_counter() - tick)
        log.info("level %d/%d (%s) done in %.2fs", t, T, spec.label(), timings[-1])

    if stamper is not None:
        params = stamper.finalize(params, counter)
    stats[DENSE] = compute_bn_stats(network, params, data.x, level=None)
    return EmbeddingResult(params, counter, T, stats, digests, tuple(schedule), images, timings)


def _check_level(t, T):
    if not 1 <= t <= T:
        raise IndexError(f"level {t} outside 1..{T}")


def mask_from_counter(counter: np.ndarray, t: int, T: int) -> np.ndarray:
    """Mask of level ``t``: 0 (frozen) where the counter is at most ``t``."""
    _check_level(t, T)
    return (np.asarray(counter) > t).astype(np.uint8)


def extract_level(params: ParamSet, counter: np.ndarray, t: int, T: int) -> ParamSet:
    """Sparse network of level ``t``: keep weights with counter <= t, zero the rest."""
    _check_level(t, T)
    counter = np.asarray(counter)
    out = params.copy()
    out.flat[counter > t] = np.float32(0.0)
    return out


def stats_for_level(result: EmbeddingResult, t) -> BatchNormStats:
    if t not in result.stats:
        raise KeyError(f"no batchnorm statistics stored for level {t!r}")
    return result.stats[t]
