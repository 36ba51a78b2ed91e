"""Command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 infeasible
sparsity request, 4 integrity failure (checksum, format, digest mismatch).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import harness, lsbpack
from .config import ExperimentConfig, load_config
from .errors import DataError, ElsaError, IntegrityError
from .nn import compute_bn_stats, evaluate

log = logging.getLogger("elsa")


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _read_model(path):
    if not Path(path).is_file():
        raise DataError(f"model file not found: {path}")
    return lsbpack.read(path)


def cmd_train(args):
    cfg = _config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    train_data, test_data = harness.load_datasets(cfg)
    network, params = harness.train_dense(cfg, seed, train_data)
    stats = compute_bn_stats(network, params, train_data.x)
    size = lsbpack.write(args.out, params, 0, 0, network.bn_dims(), {lsbpack.DENSE_TAG: stats})
    print(f"train_accuracy={evaluate(network, params, stats, train_data):.6f}")
    print(f"test_accuracy={evaluate(network, params, stats, test_data):.6f}")
    print(f"wrote={args.out} bytes={size}")
    return 0


def cmd_embed(args):
    cfg = _config(args)
    train_data, test_data = harness.load_datasets(cfg)
    dense = _read_model(args.dense).params if args.dense else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in sorted(cfg.seeds):
        run = harness.run_seed(cfg, seed, train_data, test_data, dense, reference=args.reference)
        lsbpack.write(out / f"seed-{seed}.elsa", run.checkpoint.params, run.checkpoint.T,
                      run.checkpoint.tau, run.checkpoint.bn_dims, run.checkpoint.stats)
        harness.write_digests(out / f"seed-{seed}.digests", run.result.digests)
        log.info("seed %d: %.1fs", seed, run.seconds)
        runs.append(run)
    report = harness.RunReport.from_runs(cfg, runs)
    (out / "report.csv").write_text(report.csv(), encoding="utf-8")
    (out / "report.txt").write_text(report.table(), encoding="utf-8")
    sys.stdout.write(report.table())
    print(f"T={len(cfg.levels)} tau={lsbpack.tau_for(len(cfg.levels))} seconds={report.seconds:.2f}")
    return 0


def cmd_extract(args):
    src = Path(args.model)
    if not src.is_file():
        raise DataError(f"model file not found: {src}")
    tmp = Path(str(args.out) + ".partial")
    try:
        if args.stream:
            with open(src, "rb") as r, open(tmp, "wb") as w:
                lsbpack.extract_streaming(r, args.level, w)
        else:
            ckpt = lsbpack.read(src)
            tmp.write_bytes(lsbpack.encode_checkpoint(lsbpack.extracted_checkpoint(ckpt, args.level)))
        os.replace(tmp, args.out)
    except IndexError as exc:
        raise _UsageError(str(exc)) from exc
    finally:
        if tmp.exists():
            tmp.unlink()
    print(f"wrote={args.out} level={args.level}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    ckpt = _read_model(args.model)
    train_data, test_data = harness.load_datasets(cfg)
    data = train_data if args.split == "train" else test_data
    level = None if args.dense else args.level
    try:
        acc = harness.evaluate_checkpoint(ckpt, data, level, args.recompute_bn)
    except IndexError as exc:
        raise _UsageError(str(exc)) from exc
    print(f"accuracy={acc:.6f}")
    return 0


def cmd_inspect(args):
    path = Path(args.model)
    ckpt = _read_model(path)
    lay = lsbpack.layout(ckpt)
    total = path.stat().st_size
    records = [("T", ckpt.T), ("tau", ckpt.tau), ("version", ckpt.version),
               ("weights", sum(e.size for e in ckpt.params.entries)),
               ("prunable", ckpt.params.D)]
    for level, nz, sparsity in harness.level_summary(ckpt):
        records.append((f"level.{level}.nonzeros", nz))
        records.append((f"level.{level}.sparsity", f"{sparsity:.6f}"))
    records += [("bn.levels", len(ckpt.stats)), ("bn.bytes", lay.bn),
                ("bn.fraction", f"{lay.bn / total:.6f}"), ("header.bytes", lay.header),
                ("payload.bytes", lay.payload), ("total.bytes", total)]
    if args.machine:
        for k, v in records:
            print(f"{k}={v}")
        return 0
    print(f"ELSA checkpoint v{ckpt.version}: T={ckpt.T} tau={ckpt.tau}")
    print(f"{'level':>6} {'nonzeros':>10} {'sparsity':>9}")
    for level, nz, sparsity in harness.level_summary(ckpt):
        print(f"{level:>6} {nz:>10} {100 * sparsity:>8.2f}%")
    print(f"batchnorm statistics: {len(ckpt.stats)} level(s), {lay.bn} bytes "
          f"({100 * lay.bn / total:.3f}% of file)")
    print(f"total size: {total} bytes (header {lay.header}, payload {lay.payload})")
    return 0


def cmd_verify(args):
    ckpt = _read_model(args.model)
    digests = harness.read_digests(args.digests)
    results = harness.verify_checkpoint(ckpt, digests)
    for t, ok in results.items():
        print(f"level.{t}={'pass' if ok else 'FAIL'}")
    bad = [t for t, ok in results.items() if not ok]
    if bad:
        raise IntegrityError(f"digest mismatch at level(s) {', '.join(map(str, bad))}")
    return 0


class _UsageError(ElsaError):
    exit_code = 1


def build_parser():
    p = argparse.ArgumentParser(prog="elsa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the initial dense model")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="embed the configured sparsity levels")
    s.add_argument("--config")
    s.add_argument("--dense", help="start every seed from this dense model")
    s.add_argument("--reference", action="store_true",
                   help="also sparsify the initial model independently at each level")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("extract", help="write the sparse model of one level")
    s.add_argument("model")
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--stream", action="store_true", help="single pass, constant memory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("eval", help="accuracy of one level or of the dense model")
    s.add_argument("model")
    s.add_argument("--config")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--level", type=int)
    g.add_argument("--dense", action="store_true")
    s.add_argument("--recompute-bn", action="store_true",
                   help="recompute batchnorm statistics from the evaluation inputs")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="summarise a checkpoint")
    s.add_argument("model")
    s.add_argument("--machine", action="store_true", help="key=value output")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("verify", help="check every level against recorded digests")
    s.add_argument("model")
    s.add_argument("--digests", required=True)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ElsaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
