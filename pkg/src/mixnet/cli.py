"""``mixnet`` command-line interface.

Failures print one line ``error:<category>:<message>`` to stderr and exit
nonzero (2 for configuration/usage problems, 3 for a partially processed
evaluation, 1 otherwise).
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import ModelConfig, RunConfig, load_run_config
from .errors import ConfigError, MixNetError
from .imageio import load_image, match_pairs, save_image
from .inference import TILED_WARNING, TileSpec, bench, restore
from .metrics import MetricReport
from .model import config_from_weights, init_weights, param_breakdown, param_count, param_shapes
from .training import ImagePair, train_loop
from .weights import WeightStore, check_schema, read_tensors, save_weights

log = logging.getLogger("mixnet")

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


class CliError(MixNetError):
    def __init__(self, category: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.category = category
        self.code = code


def load_model(path) -> tuple[WeightStore, ModelConfig]:
    arrays = read_tensors(path)
    cfg = config_from_weights(arrays)
    check_schema(arrays, param_shapes(cfg))
    return WeightStore.from_arrays(arrays), cfg


def _require_dir(path: Path | None, key: str) -> Path:
    if path is None:
        raise ConfigError(f"{key} is not set")
    if not path.is_dir():
        raise ConfigError(f"{key} does not exist or is not a directory: {path}")
    return path


def _require_parent(path: Path) -> None:
    if not path.parent.is_dir():
        raise ConfigError(f"output directory does not exist: {path.parent}")


def load_pairs(root: Path) -> list[ImagePair]:
    """Read ``root/degraded`` and ``root/clean`` matched by filename."""
    deg, cln = root / "degraded", root / "clean"
    for d in (deg, cln):
        if not d.is_dir():
            raise ConfigError(f"dataset directory {root} must contain degraded/ and clean/")
    pairs, unmatched = match_pairs(deg, cln)
    if unmatched:
        raise CliError("data", "unmatched files: " + ", ".join(unmatched))
    if not pairs:
        raise CliError("data", f"no pairs found in {root}")
    return [ImagePair(load_image(d), load_image(c), name) for name, d, c in pairs]


def cmd_train(args) -> int:
    run: RunConfig = load_run_config(args.config)
    train_dir = _require_dir(run.train_dir, "train_dir")
    if run.val_dir is not None:
        _require_dir(run.val_dir, "val_dir")
    if run.checkpoint_dir is None:
        raise ConfigError("checkpoint_dir is not set")
    if run.checkpoint_dir.exists() and not run.checkpoint_dir.is_dir():
        raise ConfigError(f"checkpoint_dir is not a directory: {run.checkpoint_dir}")
    pairs = load_pairs(train_dir)
    val = load_pairs(run.val_dir) if run.val_dir is not None else None
    result = train_loop(run.model, run.train, pairs, run.checkpoint_dir)
    final = run.checkpoint_dir / "final.mixw"
    save_weights(result.weights, final)
    print(f"final_weights\t{final}")
    print(f"final_loss\t{result.losses[-1][2]:.6f}" if result.losses else "final_loss\tnan")
    if val is not None:
        report = MetricReport()
        for pair in val:
            report.add(pair.id, restore(pair.degraded, result.weights, run.model), pair.clean)
        report.write(run.checkpoint_dir / "val_report.tsv")
        print(f"val_psnr\t{report.mean_psnr:.4f}\nval_ssim\t{report.mean_ssim:.4f}")
    return 0


def cmd_infer(args) -> int:
    out_path = Path(args.output)
    _require_parent(out_path)
    weights, cfg = load_model(args.weights)
    tile = None
    if args.tile is not None:
        tile = TileSpec(args.tile, args.overlap)
        tile.validate(cfg.downsample_factor)
    elif args.overlap is not None:
        raise ConfigError("--overlap requires --tile")
    img = load_image(args.input)
    if tile is not None:
        print(f"warning: {TILED_WARNING}", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = restore(img, weights, cfg, tile)
    save_image(out_path, out)
    return 0


def cmd_eval(args) -> int:
    report_path = Path(args.report)
    _require_parent(report_path)
    weights, cfg = load_model(args.weights)
    pairs, unmatched = match_pairs(args.degraded, args.clean)
    if not pairs:
        raise CliError("data", "no pairs found")
    for name in unmatched:
        print(f"unpaired\t{name}", file=sys.stderr)
    report = MetricReport()
    for name, dpath, cpath in pairs:
        report.add(name, restore(load_image(dpath), weights, cfg), load_image(cpath))
    report.write(report_path)
    print(f"MEAN\t{report.mean_psnr:.4f}\t{report.mean_ssim:.4f}")
    if unmatched:
        print(f"error:partial:{len(unmatched)} unpaired files skipped", file=sys.stderr)
        return EXIT_PARTIAL
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite(seed=args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError("gradcheck", "failing ops: " + ", ".join(failed))
    return 0


def cmd_params(args) -> int:
    cfg = load_run_config(args.config).model if args.config else ModelConfig()
    for name, count in param_breakdown(cfg).items():
        print(f"{name}\t{count}")
    print(f"total\t{param_count(cfg)}")
    return 0


def cmd_bench(args) -> int:
    if args.weights:
        weights, cfg = load_model(args.weights)
    else:
        cfg = load_run_config(args.config).model if args.config else ModelConfig()
        weights = init_weights(cfg, seed=0)
    if args.width < 1 or args.height < 1:
        raise ConfigError("width and height must be >= 1")
    r = bench(weights, cfg, args.width, args.height)
    print(f"resolution\t{r.width}x{r.height}")
    print(f"seconds\t{r.seconds:.3f}")
    print(f"peak_rss_bytes\t{r.peak_rss_bytes}")
    print(f"activation_peak_bytes\t{r.activation_peak_bytes}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixnet", description="MixNet image restoration")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train from a key=value run config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="restore one image")
    s.add_argument("--weights", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--tile", type=int)
    s.add_argument("--overlap", type=int)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PSNR/SSIM over filename-matched pairs")
    s.add_argument("--weights", required=True)
    s.add_argument("--degraded", required=True)
    s.add_argument("--clean", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op, block and a tiny model")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("params", help="learnable parameter counts")
    s.add_argument("--config")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("bench", help="time and memory of one whole-image forward pass")
    s.add_argument("--weights")
    s.add_argument("--config", help="used with random weights when --weights is absent")
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MixNetError as exc:
        print(f"error:{exc.category}:{exc}", file=sys.stderr)
        code = getattr(exc, "code", None)
        if code is None:
            code = EXIT_CONFIG if exc.category in ("config", "usage") else EXIT_FAILURE
        return code
    except MemoryError:
        print("error:memory:out of memory", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
