"""Magnitude-based sparsification that never removes frozen weights.

Scores are float64 with two sentinels: frozen weights score ``+SENTINEL``
and learnable weights that are exactly zero score ``-SENTINEL``. Selections
break score ties by lowest flat index, so every result is deterministic and
can be checked against a plain sort.

Excluded tensors are kept dense: their nonzero entries always belong to the
keep set and do not count against the budget ``K``, which is computed over
the non-excluded (candidate) weights only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .errors import ContractError, DimensionError, InfeasibleError
from .nn import Dataset, Network, ParamSet, TrainConfig, steps_per_epoch, train

SENTINEL = float(np.finfo(np.float64).max)


@dataclass(frozen=True)
class SparsitySpec:
    """``kind`` is "global", "uniform" or "nm"."""

    kind: str
    level: float = 0.0
    n: int = 0
    m: int = 0
    exclusions: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "exclusions", frozenset(self.exclusions))
        if self.kind in ("global", "uniform"):
            if not 0.0 < self.level < 1.0:
                raise ValueError(f"sparsity level must lie strictly in (0, 1), got {self.level}")
        elif self.kind == "nm":
            if not 1 <= self.n < self.m:
                raise ValueError(f"N:M needs 1 <= n < m, got {self.n}:{self.m}")
        else:
            raise ValueError(f"unknown sparsity kind {self.kind!r}")

    @classmethod
    def global_(cls, level, exclusions=()):
        return cls("global", level=level, exclusions=frozenset(exclusions))

    @classmethod
    def uniform(cls, level, exclusions=()):
        return cls("uniform", level=level, exclusions=frozenset(exclusions))

    @classmethod
    def nm(cls, n, m, exclusions=()):
        return cls("nm", n=n, m=m, exclusions=frozenset(exclusions))

    @property
    def nominal(self) -> float:
        """Nominal sparsity of the pruned (non-excluded) weights."""
        return self.level if self.kind != "nm" else 1.0 - self.n / self.m

    def label(self) -> str:
        return f"{self.n}:{self.m}" if self.kind == "nm" else f"{self.nominal:g}"


@dataclass(frozen=True)
class GmpConfig:
    start_step: int
    end_step: int
    prune_every: int
    final: SparsitySpec

    def __post_init__(self):
        if not self.start_step < self.end_step:
            raise ValueError("start_step must precede end_step")
        if self.prune_every < 1:
            raise ValueError("prune_every must be at least 1")

    @classmethod
    def default(cls, final: SparsitySpec, n_examples: int, config: TrainConfig):
        """Prune once per epoch during the middle 60% of the run."""
        per_epoch = steps_per_epoch(n_examples, config.batch_size)
        total = per_epoch * config.epochs
        start = int(0.2 * total)
        end = max(int(0.8 * total), start + 1)
        return cls(start, end, per_epoch, final)


def keep_budget(level: float, size: int) -> int:
    """``round((1 - level) * size)`` with halves rounded up."""
    return int(math.floor((1.0 - level) * size + 0.5))


def nm_keep_count(n: int, m: int, r: int) -> int:
    """Keep count for a group of ``r <= m`` weights."""
    return -(-n * r // m)


def excluded_indices(params: ParamSet, exclusions: Iterable[str]) -> np.ndarray:
    exclusions = set(exclusions)
    unknown = exclusions - {e.name for e in params.entries}
    if unknown:
        raise KeyError(f"unknown parameters in exclusions: {sorted(unknown)}")
    return params.index_mask(exclusions)


# --------------------------------------------------------------------------- #
# Scores and selection
# --------------------------------------------------------------------------- #
def magnitude_scores(params: ParamSet, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (params.D,):
        raise DimensionError(f"mask has length {mask.size}, expected {params.D}")
    scores = np.abs(params.flat.astype(np.float64))
    scores[scores == 0.0] = -SENTINEL
    scores[mask == 0] = SENTINEL
    return scores


def _topk(scores, excluded, K, where, allow_zeros=False):
    """Boolean keep vector: frozen + nonzero excluded + best ``K - frozen`` candidates."""
    frozen = scores == SENTINEL
    zero = scores == -SENTINEL
    if allow_zeros:
        zero = np.zeros_like(zero)
    candidates = ~excluded
    n_frozen = int(np.count_nonzero(frozen & candidates))
    if K < n_frozen:
        raise InfeasibleError(
            f"{where}: budget of {K} weights is below the {n_frozen} already frozen"
        )
    pool = np.flatnonzero(candidates & ~frozen & ~zero)
    need = K - n_frozen
    if need > pool.size:
        raise InfeasibleError(
            f"{where}: need {need} more nonzero weights but only {pool.size} are available"
        )
    keep = frozen | (excluded & ~zero)
    if need:
        order = np.argsort(-scores[pool], kind="stable")
        keep[pool[order[:need]]] = True
    return keep


def _excluded_or_none(excluded, D):
    if excluded is None:
        return np.zeros(D, dtype=bool)
    excluded = np.asarray(excluded, dtype=bool)
    if excluded.shape != (D,):
        raise DimensionError("exclusion vector has the wrong length")
    return excluded


def select_topk_global(
    scores: np.ndarray, spec: SparsitySpec, excluded: Optional[np.ndarray] = None,
    allow_zeros: bool = False,
) -> np.ndarray:
    """Sorted flat indices of the global top-K keep set.

    ``K = keep_budget(spec.level, number of candidates)``; ``excluded`` is a
    boolean vector (see :func:`excluded_indices`). Exact zeros are never kept
    unless ``allow_zeros`` (used for transient, non-freezing selections).
    """
    scores = np.asarray(scores, dtype=np.float64)
    excluded = _excluded_or_none(excluded, scores.size)
    K = keep_budget(spec.level, int(np.count_nonzero(~excluded)))
    return np.flatnonzero(_topk(scores, excluded, K, "global", allow_zeros))


def select_topk_uniform(
    params: ParamSet, scores: np.ndarray, spec: SparsitySpec, excluded: Optional[np.ndarray] = None,
    allow_zeros: bool = False,
) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    excluded = _excluded_or_none(excluded, params.D)
    keep = np.zeros(params.D, dtype=bool)
    for e in params.prunable_entries():
        sl = slice(e.start, e.stop)
        ex = excluded[sl]
        K = keep_budget(spec.level, int(np.count_nonzero(~ex)))
        keep[sl] = _topk(scores[sl], ex, K, f"layer {e.name}", allow_zeros)
    return np.flatnonzero(keep)


def _nm_rows(scores, n, m, name, allow_zeros=False):
    """Keep matrix for ``scores`` of shape ``(rows, groups, m)``."""
    frozen = scores == SENTINEL
    n_frozen = frozen.sum(axis=-1)
    if np.any(n_frozen > n):
        raise InfeasibleError(f"layer {name}: a group holds more than {n} frozen weights")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :n]
    picked = np.take_along_axis(scores, order, axis=-1)
    if not allow_zeros and np.any(picked == -SENTINEL):
        raise InfeasibleError(f"layer {name}: a group has fewer than {n} nonzero weights")
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return keep


def select_nm(
    params: ParamSet, mask: np.ndarray, spec: SparsitySpec, excluded: Optional[np.ndarray] = None,
    allow_zeros: bool = False,
) -> np.ndarray:
    """N:M keep set: ``n`` of every ``m`` consecutive weights along the innermost axis.

    A trailing group of ``r < m`` weights keeps ``ceil(n * r / m)``.
    """
    scores = magnitude_scores(params, mask)
    excluded = _excluded_or_none(excluded, params.D)
    keep = np.zeros(params.D, dtype=bool)
    n, m = spec.n, spec.m
    for e in params.prunable_entries():
        sl = slice(e.start, e.stop)
        if excluded[e.start:e.stop].all():
            keep[sl] = scores[sl] != -SENTINEL
            continue
        if excluded[e.start:e.stop].any():
            raise ValueError(f"{e.name}: partial exclusion of a tensor is not supported")
        inner = e.shape[-1]
        s = scores[sl].reshape(-1, inner)
        k = np.zeros(s.shape, dtype=bool)
        full = (inner // m) * m
        if full:
            k[:, :full] = _nm_rows(s[:, :full].reshape(s.shape[0], -1, m), n, m, e.name, allow_zeros).reshape(
                s.shape[0], full
            )
        r = inner - full
        if r:
            k[:, full:] = _nm_rows(
                s[:, full:][:, None, :], nm_keep_count(n, m, r), r, e.name, allow_zeros)[:, 0, :]
        keep[sl] = k.ravel()
    return np.flatnonzero(keep)


def select(params: ParamSet, mask: np.ndarray, spec: SparsitySpec, allow_zeros=False) -> np.ndarray:
    """Magnitude scores followed by the selector for ``spec.kind``."""
    excluded = excluded_indices(params, spec.exclusions)
    if spec.kind == "nm":
        return select_nm(params, mask, spec, excluded, allow_zeros)
    scores = magnitude_scores(params, mask)
    if spec.kind == "global":
        return select_topk_global(scores, spec, excluded, allow_zeros)
    return select_topk_uniform(params, scores, spec, excluded, allow_zeros)


def expected_nonzeros(params: ParamSet, spec: SparsitySpec) -> int:
    """Size of the keep set ``spec`` produces on ``params`` (assuming no exact zeros)."""
    excluded = excluded_indices(params, spec.exclusions)
    n_excluded = int(np.count_nonzero(excluded))
    if spec.kind == "global":
        return n_excluded + keep_budget(spec.level, params.D - n_excluded)
    total = n_excluded
    for e in params.prunable_entries():
        if excluded[e.start:e.stop].all():
            continue
        if spec.kind == "uniform":
            total += keep_budget(spec.level, e.size)
        else:
            rows = e.size // e.shape[-1]
            inner = e.shape[-1]
            per_row = (inner // spec.m) * spec.n + (
                nm_keep_count(spec.n, spec.m, inner % spec.m) if inner % spec.m else 0
            )
            total += rows * per_row
    return total


def apply_keepset(params: ParamSet, keepset: np.ndarray, mask: np.ndarray):
    """Zero everything outside ``keepset`` and freeze everything inside it.

    Returns ``(sparse params, new mask)``. Kept words are bit-identical;
    dropped prunable words become +0.0; non-prunable tensors are untouched.
    """
    mask = np.asarray(mask)
    if mask.shape != (params.D,):
        raise DimensionError(f"mask has length {mask.size}, expected {params.D}")
    keep = np.zeros(params.D, dtype=bool)
    keep[np.asarray(keepset, dtype=np.int64)] = True
    if np.any((mask == 0) & ~keep):
        raise ContractError("keep set drops frozen weights")
    out = params.copy()
    out.flat[~keep] = np.float32(0.0)
    return out, (~keep).astype(np.uint8)


# --------------------------------------------------------------------------- #
# Gradual magnitude pruning
# --------------------------------------------------------------------------- #
def gmp_level_at(step: int, cfg: GmpConfig) -> float:
    """Cubic ramp from 0 at ``start_step`` to the final sparsity at ``end_step``."""
    u = (step - cfg.start_step) / (cfg.end_step - cfg.start_step)
    u = min(max(u, 0.0), 1.0)
    if u >= 1.0:
        return cfg.final.nominal
    return cfg.final.nominal * (1.0 - (1.0 - u) ** 3)


def _spec_at(spec: SparsitySpec, level: float) -> Optional[SparsitySpec]:
    if spec.kind == "nm":
        # N:M has no fractional pattern; it switches on fully at the first event
        return spec if level > 0 else None
    if level <= 0.0:
        return None
    if level >= spec.level:
        return spec
    return replace(spec, level=level)


def gmp_run(
    network: Network,
    params: ParamSet,
    mask: np.ndarray,
    spec: SparsitySpec,
    data: Dataset,
    train_cfg: TrainConfig,
    gmp_cfg: GmpConfig,
    *,
    train_nonprunable: bool = True,
):
    """Train while pruning along the cubic schedule; freeze only the final pattern.

    Prune events fire at ``start_step + k * prune_every`` (and at ``end_step``)
    inside the prune window. Weights pruned by the latest event are re-zeroed
    after every step but stay learnable, so a later event may pick them again.
    Returns ``(sparse params, new mask)``.
    """
    mask = np.asarray(mask, dtype=np.uint8)
    pruned = np.zeros(params.D, dtype=bool)

    def hook(step, p):
        nonlocal pruned
        in_window = cfg.start_step <= step <= cfg.end_step
        if in_window and ((step - cfg.start_step) % cfg.prune_every == 0 or step == cfg.end_step):
            current = _spec_at(spec, gmp_level_at(step, cfg))
            if current is not None:
                keep = np.zeros(p.D, dtype=bool)
                keep[select(p, mask, current, allow_zeros=True)] = True
                pruned = ~keep
        if pruned.any():
            p.flat[pruned] = np.float32(0.0)

    cfg = gmp_cfg
    trained = train(
        network, params, mask, data, train_cfg,
        train_nonprunable=train_nonprunable, step_hook=hook,
    )
    return apply_keepset(trained, select(trained, mask, spec), mask)
