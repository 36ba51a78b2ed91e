"""Experiment lifecycle: train a dense model, embed levels, extract, evaluate, report."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import lsbpack
from .config import ExperimentConfig
from .core import DENSE, ElsaConfig, EmbeddingResult, multi_level, sparsify
from .data import gen_dataset
from .errors import DataError, IntegrityError
from .nn import (
    BatchNormStats,
    Dataset,
    Network,
    ParamSet,
    compute_bn_stats,
    evaluate,
    steps_per_epoch,
    train,
)
from .rng import derive_seed
from .sparsify import GmpConfig, SparsitySpec

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- #
# Setup
# --------------------------------------------------------------------------- #
def load_datasets(cfg: ExperimentConfig):
    """``(train, test)``; generated test sets use a seed derived from the data seed."""
    train_data = gen_dataset(cfg.data)
    if cfg.data["generator"] == "idx":
        test_data = gen_dataset(cfg.test_data) if cfg.test_data else train_data
    else:
        spec = dict(cfg.data, n=cfg.n_test, seed=derive_seed(cfg.data["seed"], "test"))
        test_data = gen_dataset(spec)
    if train_data.y is None:
        raise DataError("training data needs labels")
    return train_data, test_data


def build_network(cfg: ExperimentConfig, data: Dataset) -> Network:
    classes = int(data.y.max()) + 1
    return Network.mlp(
        [data.x.shape[1], *cfg.hidden, classes], cfg.batchnorm, cfg.train.label_smoothing
    )


def train_dense(cfg: ExperimentConfig, seed: int, data: Dataset):
    network = build_network(cfg, data)
    params = train(network, network.init_params(seed), None, data, cfg.train_config(seed))
    return network, params


def elsa_config(cfg: ExperimentConfig, seed: int, n_train: int) -> ElsaConfig:
    sparsify_cfg = cfg.sparsify_config(derive_seed(seed, "sparsify"))
    total = steps_per_epoch(n_train, sparsify_cfg.batch_size) * sparsify_cfg.epochs

    def gmp(spec: SparsitySpec) -> GmpConfig:
        start = int(cfg.gmp_start * total)
        end = max(int(cfg.gmp_end * total), start + 1)
        every = cfg.gmp_prune_every or steps_per_epoch(n_train, sparsify_cfg.batch_size)
        return GmpConfig(start, end, every, spec)

    return ElsaConfig(
        densify_cfg=cfg.densify_config(derive_seed(seed, "densify")),
        sparsifier=cfg.sparsifier,
        sparsify_cfg=sparsify_cfg,
        gmp=gmp,
    )


def check_architecture(network: Network, params: ParamSet) -> None:
    expected = [(e.name, e.shape, e.prunable) for e in network.init_params(0).entries]
    found = [(e.name, e.shape, e.prunable) for e in params.entries]
    if expected != found:
        raise DataError("model file does not match the configured architecture")


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #
def dense_checkpoint(network: Network, params: ParamSet, stats: BatchNormStats):
    return lsbpack.PackedCheckpoint(0, 0, params, network.bn_dims(), {lsbpack.DENSE_TAG: stats})


def embedded_checkpoint(network: Network, result: EmbeddingResult):
    stats = {lsbpack.DENSE_TAG: result.stats[DENSE]}
    stats.update({t: result.stats[t] for t in range(1, result.T + 1)})
    return lsbpack.PackedCheckpoint(
        result.T, lsbpack.tau_for(result.T), result.params, network.bn_dims(), stats
    )


def network_of(ckpt: lsbpack.PackedCheckpoint) -> Network:
    return Network.from_entries(ckpt.params.entries)


def model_at(ckpt: lsbpack.PackedCheckpoint, level: Optional[int]):
    """``(params, stored stats or None)`` for a level, or the full model when ``level`` is None."""
    if level is None:
        try:
            return ckpt.params, ckpt.stats_for(None)
        except KeyError:
            return ckpt.params, None
    params, stats = lsbpack.extract_level_packed(ckpt, level)
    return params, stats


def evaluate_checkpoint(ckpt, data: Dataset, level=None, recompute_bn=False) -> float:
    network = network_of(ckpt)
    params, stats = model_at(ckpt, level)
    if recompute_bn or not network.bn_layers():
        stats = compute_bn_stats(network, params, data.x)
    elif stats is None:
        raise IntegrityError(
            f"no stored batchnorm statistics for level {level}; use --recompute-bn"
        )
    return evaluate(network, params, stats, data)


def write_digests(path, digests) -> None:
    lines = [f"T={len(digests)}"] + [f"level.{t}={d}" for t, d in enumerate(digests, start=1)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_digests(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{n}: expected key=value")
        if key.startswith("level."):
            out[int(key[len("level."):])] = value
    return out


def verify_checkpoint(ckpt: lsbpack.PackedCheckpoint, digests: dict) -> dict:
    """``{level: matches}`` for every level 1..T."""
    results = {}
    for t in range(1, ckpt.T + 1):
        params, _ = lsbpack.extract_level_packed(ckpt, t)
        results[t] = digests.get(t) == params.digest()
    return results


def level_summary(ckpt: lsbpack.PackedCheckpoint) -> list:
    """Per-level ``(level, nonzeros, achieved sparsity)`` plus a final ``("dense", ...)`` row."""
    words = ckpt.params.flat.view(np.uint32)
    D = words.size
    rows = []
    if ckpt.T:
        lsb = lsbpack.read_lsb(words, ckpt.tau)
        for t in range(1, ckpt.T + 1):
            nz = int(np.count_nonzero((lsb > 0) & (lsb <= t)))
            rows.append((t, nz, 1.0 - nz / D if D else 0.0))
    nz = int(np.count_nonzero(words & 0x7FFFFFFF))
    rows.append(("dense", nz, 1.0 - nz / D if D else 0.0))
    return rows


# --------------------------------------------------------------------------- #
# Runs and reports
# --------------------------------------------------------------------------- #
@dataclass
class SeedRun:
    seed: int
    network: Network
    dense_params: ParamSet
    result: EmbeddingResult
    checkpoint: lsbpack.PackedCheckpoint
    dense_initial_acc: float
    dense_final_acc: float
    level_acc: list
    reference_acc: Optional[list] = None
    seconds: float = 0.0


def reference_accuracy(cfg, seed, network, dense_params, spec, train_data, test_data) -> float:
    """Accuracy of ``spec`` applied on its own to the initial dense model."""
    cfgs = elsa_config(cfg, seed, len(train_data))
    mask = np.ones(dense_params.D, dtype=np.uint8)
    sparse, _ = sparsify(network, dense_params, mask, spec, train_data, cfgs, seed_path=("reference",))
    stats = compute_bn_stats(network, sparse, train_data.x)
    return evaluate(network, sparse, stats, test_data)


def run_seed(cfg: ExperimentConfig, seed: int, train_data, test_data,
             dense: Optional[ParamSet] = None, reference: bool = False) -> SeedRun:
    tick = time.perf_counter()
    if dense is None:
        network, dense = train_dense(cfg, seed, train_data)
    else:
        network = build_network(cfg, train_data)
        check_architecture(network, dense)
    initial_stats = compute_bn_stats(network, dense, train_data.x)
    dense_initial = evaluate(network, dense, initial_stats, test_data)

    T = len(cfg.levels)
    result = multi_level(
        network, dense, cfg.levels, train_data, elsa_config(cfg, seed, len(train_data)),
        stamper=lsbpack.LsbStamper(T),
    )
    ckpt = embedded_checkpoint(network, result)
    level_acc = []
    for t in range(1, T + 1):
        params, stats = lsbpack.extract_level_packed(ckpt, t)
        level_acc.append(evaluate(network, params, stats, test_data))
    dense_final = evaluate(network, result.params, result.stats[DENSE], test_data)
    refs = None
    if reference:
        refs = [reference_accuracy(cfg, seed, network, dense, spec, train_data, test_data)
                for spec in cfg.levels]
    return SeedRun(seed, network, dense, result, ckpt, dense_initial, dense_final, level_acc,
                   refs, time.perf_counter() - tick)


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


@dataclass
class RunReport:
    """Rows sorted by decreasing sparsity; accuracies as mean and sample std over seeds."""

    rows: list
    seeds: tuple
    seconds: float = 0.0
    digests: dict = field(default_factory=dict)

    COLUMNS = ("model", "nominal_sparsity", "actual_sparsity", "nonzeros",
               "acc_mean", "acc_std", "ref_mean", "ref_std")

    @classmethod
    def from_runs(cls, cfg: ExperimentConfig, runs: list):
        first = runs[0].checkpoint
        summary = level_summary(first)
        rows = []
        for t, spec in enumerate(cfg.levels, start=1):
            _, nz, actual = summary[t - 1]
            mean, std = _mean_std([r.level_acc[t - 1] for r in runs])
            row = {"model": f"level {t}", "nominal_sparsity": spec.nominal,
                   "actual_sparsity": actual, "nonzeros": nz, "acc_mean": mean, "acc_std": std,
                   "ref_mean": None, "ref_std": None}
            if runs[0].reference_acc is not None:
                row["ref_mean"], row["ref_std"] = _mean_std([r.reference_acc[t - 1] for r in runs])
            rows.append(row)
        rows.sort(key=lambda r: -r["actual_sparsity"])
        D = first.params.D
        for name, accs, params in (
            ("dense final", [r.dense_final_acc for r in runs], first.params),
            ("dense initial", [r.dense_initial_acc for r in runs], runs[0].dense_params),
        ):
            nz = int(np.count_nonzero(params.flat))
            mean, std = _mean_std(accs)
            rows.append({"model": name, "nominal_sparsity": 0.0,
                         "actual_sparsity": 1.0 - nz / D if D else 0.0, "nonzeros": nz,
                         "acc_mean": mean, "acc_std": std, "ref_mean": None, "ref_std": None})
        return cls(rows, tuple(r.seed for r in runs), sum(r.seconds for r in runs),
                   {r.seed: r.result.digests for r in runs})

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c])
                        for c in self.COLUMNS])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"seeds: {', '.join(map(str, self.seeds))}",
                 f"{'model':<14} {'sparsity':>18} {'nonzeros':>9} {'accuracy':>16} {'reference':>16}"]
        for r in self.rows:
            sparsity = f"{100 * r['nominal_sparsity']:.0f} ({100 * r['actual_sparsity']:.2f}%)"
            acc = f"{100 * r['acc_mean']:.2f} ± {100 * r['acc_std']:.2f}"
            ref = "" if r["ref_mean"] is None else f"{100 * r['ref_mean']:.2f} ± {100 * r['ref_std']:.2f}"
            lines.append(f"{r['model']:<14} {sparsity:>18} {r['nonzeros']:>9} {acc:>16} {ref:>16}")
        return "\n".join(lines) + "\n"
