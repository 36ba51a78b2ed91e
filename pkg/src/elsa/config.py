"""Experiment configuration files.

Grammar: INI-style sections of ``key = value`` lines (Python's
``configparser`` dialect); ``#`` and ``;`` start comments, lists are
comma-separated. Every key is optional. Recognised sections and keys::

    [network]   hidden (ints), batchnorm (none|first|all)
    [data]      generator (blobs|spirals|idx), classes, dim, separation, n,
                n_test, noise, seed, images, labels, test_images, test_labels
    [train]     learning_rate, momentum, nesterov, epochs, batch_size,
                weight_decay, label_smoothing
    [densify]   epochs, lr_ratio, learning_rate (overrides lr_ratio)
    [sparsify]  method (gmp|topk), kind (global|uniform|nm), levels,
                exclude (parameter names), exclude_first_layer, epochs,
                learning_rate
    [gmp]       start, end (fractions of the sparsify run), prune_every
                (steps; 0 = once per epoch)
    [run]       seeds (ints)

Levels are fractions (``0.9, 0.8, 0.5``) or, for ``kind = nm``, patterns
(``1:8, 1:4, 2:4``).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .nn import TrainConfig
from .sparsify import SparsitySpec

_KEYS = {
    "network": {"hidden", "batchnorm"},
    "data": {"generator", "classes", "dim", "separation", "n", "n_test", "noise", "seed",
             "images", "labels", "test_images", "test_labels"},
    "train": {"learning_rate", "momentum", "nesterov", "epochs", "batch_size",
              "weight_decay", "label_smoothing"},
    "densify": {"epochs", "lr_ratio", "learning_rate"},
    "sparsify": {"method", "kind", "levels", "exclude", "exclude_first_layer", "epochs",
                 "learning_rate"},
    "gmp": {"start", "end", "prune_every"},
    "run": {"seeds"},
}


@dataclass
class ExperimentConfig:
    hidden: tuple = (64, 64)
    batchnorm: str = "first"
    data: dict = field(default_factory=lambda: {
        "generator": "blobs", "classes": 2, "dim": 2, "separation": 4.0, "n": 2000, "seed": 0,
    })
    n_test: int = 1000
    test_data: Optional[dict] = None  # idx only: explicit test files
    train: TrainConfig = TrainConfig()
    densify_epochs: int = 10
    densify_lr_ratio: float = 0.01
    densify_lr: Optional[float] = None
    sparsifier: str = "gmp"
    sparsify_epochs: int = 10
    sparsify_lr: Optional[float] = None
    levels: tuple = (SparsitySpec.global_(0.9), SparsitySpec.global_(0.8), SparsitySpec.global_(0.5))
    gmp_start: float = 0.2
    gmp_end: float = 0.8
    gmp_prune_every: int = 0
    seeds: tuple = (0,)

    def densify_config(self, seed: int) -> TrainConfig:
        lr = self.densify_lr if self.densify_lr is not None else self.train.learning_rate * self.densify_lr_ratio
        return replace(self.train, learning_rate=lr, epochs=self.densify_epochs, seed=seed)

    def sparsify_config(self, seed: int) -> TrainConfig:
        lr = self.sparsify_lr if self.sparsify_lr is not None else self.train.learning_rate
        return replace(self.train, learning_rate=lr, epochs=self.sparsify_epochs, seed=seed)

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)


class _Section:
    def __init__(self, parser, name):
        self.name = name
        self.sec = parser[name] if parser.has_section(name) else {}

    def _get(self, key, conv, default):
        if key not in self.sec:
            return default
        raw = self.sec[key]
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from exc

    def text(self, key, default=None):
        return self._get(key, lambda s: s.strip(), default)

    def integer(self, key, default=None):
        return self._get(key, int, default)

    def number(self, key, default=None):
        return self._get(key, float, default)

    def flag(self, key, default=None):
        def conv(s):
            v = s.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        return self._get(key, conv, default)

    def items(self, key, conv=str, default=None):
        return self._get(key, lambda s: tuple(conv(p.strip()) for p in s.split(",") if p.strip()), default)


def _parse_level(kind, text, exclusions):
    if kind == "nm":
        n, sep, m = text.partition(":")
        if not sep:
            raise ValueError(f"expected an N:M pattern, got {text!r}")
        return SparsitySpec.nm(int(n), int(m), exclusions)
    return SparsitySpec(kind, level=float(text), exclusions=frozenset(exclusions))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        unknown = set(parser[section]) - _KEYS[section]
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")

    cfg = ExperimentConfig()
    net = _Section(parser, "network")
    cfg.hidden = net.items("hidden", int, cfg.hidden)
    cfg.batchnorm = net.text("batchnorm", cfg.batchnorm)
    if cfg.batchnorm not in ("none", "first", "all"):
        raise ConfigError(f"[network] batchnorm = {cfg.batchnorm!r}: expected none, first or all")

    d = _Section(parser, "data")
    gen = d.text("generator", "blobs")
    if gen == "blobs":
        cfg.data = {
            "generator": gen, "classes": d.integer("classes", 2), "dim": d.integer("dim", 2),
            "separation": d.number("separation", 4.0), "n": d.integer("n", 2000), "seed": d.integer("seed", 0),
        }
    elif gen == "spirals":
        cfg.data = {"generator": gen, "n": d.integer("n", 2000), "noise": d.number("noise", 0.1),
                    "seed": d.integer("seed", 0)}
    elif gen == "idx":
        if d.text("images") is None:
            raise ConfigError("[data] images is required for generator = idx")
        cfg.data = {"generator": gen, "images": d.text("images"), "labels": d.text("labels")}
        if d.text("test_images"):
            cfg.test_data = {"generator": gen, "images": d.text("test_images"),
                             "labels": d.text("test_labels")}
    else:
        raise ConfigError(f"[data] generator = {gen!r}: expected blobs, spirals or idx")
    cfg.n_test = d.integer("n_test", cfg.n_test)

    t = _Section(parser, "train")
    try:
        cfg.train = TrainConfig(
            learning_rate=t.number("learning_rate", 0.1),
            momentum=t.number("momentum", 0.9),
            nesterov=t.flag("nesterov", True),
            epochs=t.integer("epochs", 30),
            batch_size=t.integer("batch_size", 64),
            weight_decay=t.number("weight_decay", 5e-4),
            label_smoothing=t.number("label_smoothing", 0.1),
        )
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc

    ds = _Section(parser, "densify")
    cfg.densify_epochs = ds.integer("epochs", cfg.densify_epochs)
    cfg.densify_lr_ratio = ds.number("lr_ratio", cfg.densify_lr_ratio)
    cfg.densify_lr = ds.number("learning_rate", None)

    sp = _Section(parser, "sparsify")
    cfg.sparsifier = sp.text("method", cfg.sparsifier)
    if cfg.sparsifier not in ("gmp", "topk"):
        raise ConfigError(f"[sparsify] method = {cfg.sparsifier!r}: expected gmp or topk")
    cfg.sparsify_epochs = sp.integer("epochs", cfg.sparsify_epochs)
    cfg.sparsify_lr = sp.number("learning_rate", None)
    kind = sp.text("kind", "global")
    if kind not in ("global", "uniform", "nm"):
        raise ConfigError(f"[sparsify] kind = {kind!r}: expected global, uniform or nm")
    exclusions = set(sp.items("exclude", str, ()))
    if sp.flag("exclude_first_layer", False):
        exclusions.add("0.weight")
    default_levels = ("1:8", "1:4", "2:4") if kind == "nm" else ("0.9", "0.8", "0.5")
    raw_levels = sp.items("levels", str, default_levels)
    try:
        cfg.levels = tuple(_parse_level(kind, x, exclusions) for x in raw_levels)
    except ValueError as exc:
        raise ConfigError(f"[sparsify] levels: {exc}") from exc
    for a, b in zip(cfg.levels, cfg.levels[1:]):
        if not a.nominal > b.nominal:
            raise ConfigError(f"[sparsify] levels must strictly decrease in sparsity ({a.label()}, {b.label()})")
    if not 1 <= len(cfg.levels) <= 255:
        raise ConfigError("[sparsify] levels: between 1 and 255 levels are supported")

    g = _Section(parser, "gmp")
    cfg.gmp_start = g.number("start", cfg.gmp_start)
    cfg.gmp_end = g.number("end", cfg.gmp_end)
    cfg.gmp_prune_every = g.integer("prune_every", cfg.gmp_prune_every)
    if not 0.0 <= cfg.gmp_start < cfg.gmp_end <= 1.0:
        raise ConfigError("[gmp] need 0 <= start < end <= 1")

    r = _Section(parser, "run")
    cfg.seeds = r.items("seeds", int, cfg.seeds)
    if not cfg.seeds:
        raise ConfigError("[run] seeds must not be empty")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, str(path))
    for spec in (cfg.data, cfg.test_data):
        for key in ("images", "labels"):
            if spec and spec.get(key) and not Path(spec[key]).is_absolute():
                spec[key] = str(path.parent / spec[key])
    return cfg
