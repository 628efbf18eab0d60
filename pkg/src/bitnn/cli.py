"""Command-line interface for the whole pipeline.

Subcommands: train, eval, fold, export-mem, import-mem, infer, simulate,
sweep, bench. Exit codes: 0 success, 2 usage, 3 I/O error, 4 validation
failure, 5 calibration failure. All errors go to stderr with the prefix
``bitnn: <kind>:``. Option values resolve as command-line flag > config
file (``--config``, ``key = value`` lines) > built-in default, and every
run echoes the fully-resolved configuration to stderr.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time
from pathlib import Path

from . import engine, folding, hwsim, memfmt, mnist_data, trainer
from .bitcore import BitVector

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_CALIBRATION = 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


def io_error(msg):
    return CliError("io", str(msg), EXIT_IO)


def validation_error(msg):
    return CliError("validation", str(msg), EXIT_VALIDATION)


def _parse_value(key, raw, caster):
    try:
        if caster is bool:
            lowered = str(raw).strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return caster(raw)
    except (TypeError, ValueError):
        raise validation_error(f"bad value for {key!r}: {raw!r}") from None


def read_config_file(path) -> dict:
    """Plain key = value lines; # starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise io_error(f"cannot read config file: {e}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise validation_error(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args, table: dict, command: str) -> dict:
    """flag > config file > default; unknown config-file keys are rejected."""
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(table)
    if unknown:
        raise validation_error(
            f"unknown config key(s) for {command}: {', '.join(sorted(unknown))}"
        )
    resolved = {}
    for key, (caster, default) in table.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
        elif key in file_cfg:
            resolved[key] = _parse_value(key, file_cfg[key], caster)
        else:
            resolved[key] = default
    for key in sorted(resolved):
        print(f"config: {key} = {resolved[key]}", file=sys.stderr)
    return resolved


def _load_dataset(data_dir, split):
    try:
        return mnist_data.load_dir(data_dir, split)
    except FileNotFoundError as e:
        raise io_error(e) from None
    except mnist_data.IdxFormatError as e:
        raise validation_error(e) from None


def _load_checkpoint(path):
    try:
        return trainer.load_checkpoint(path)
    except FileNotFoundError as e:
        raise io_error(e) from None
    except (ValueError, KeyError) as e:
        raise validation_error(f"bad checkpoint {path}: {e}") from None


def _load_folded(path):
    try:
        return memfmt.load_folded(path)
    except FileNotFoundError as e:
        raise io_error(e) from None
    except (memfmt.MemFormatError, ValueError, KeyError) as e:
        raise validation_error(e) from None


def _resolve_input(args) -> BitVector:
    """One inference input from --image-mem or --data-dir/--index."""
    if args.image_mem:
        try:
            return memfmt.read_image(args.image_mem)
        except FileNotFoundError as e:
            raise io_error(e) from None
        except memfmt.MemFormatError as e:
            raise validation_error(e) from None
    if args.data_dir is None:
        raise validation_error("need either --image-mem or --data-dir with --index")
    ds = _load_dataset(args.data_dir, args.split)
    if not 0 <= args.index < len(ds):
        raise validation_error(f"--index {args.index} out of range for {len(ds)} samples")
    return mnist_data.binarize_image(ds.images[args.index])


def _hw_config(resolved) -> hwsim.HwConfig:
    try:
        return hwsim.HwConfig(
            parallelism=resolved["parallelism"],
            memory_style=resolved["memory_style"],
            clock_period_ns=resolved["clock_period_ns"],
            g_group=resolved["g_group"],
            c_fixed=resolved["c_fixed"],
            t0_ns=resolved["t0_ns"],
        )
    except ValueError as e:
        raise validation_error(e) from None


def _write_or_print(text: str, out_path):
    if out_path:
        try:
            Path(out_path).write_text(text)
        except OSError as e:
            raise io_error(e) from None
    else:
        sys.stdout.write(text)


# -- subcommands ---------------------------------------------------------------

TRAIN_TABLE = {
    "batch_size": (int, 64),
    "epochs": (int, 15),
    "lr0": (float, 0.001),
    "decay": (float, 0.96),
    "decay_steps": (int, 1000),
    "staircase": (bool, True),
    "seed": (int, 0),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "bn_eps": (float, 1e-3),
    "bn_momentum": (float, 0.99),
}


def cmd_train(args) -> int:
    resolved = resolve_config(args, TRAIN_TABLE, "train")
    try:
        cfg = trainer.TrainConfig(**resolved)
    except ValueError as e:
        raise validation_error(e) from None
    train_ds = _load_dataset(args.data_dir, "train")
    test_ds = _load_dataset(args.data_dir, "test") if not args.no_eval else None
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    net, history = trainer.train(cfg, train_ds, test_ds, log=log)
    out = Path(args.out)
    try:
        trainer.save_checkpoint(net, cfg, out)
        lines = ["epoch,train_loss,test_accuracy"]
        for rec in history:
            acc = rec.get("test_accuracy", "")
            lines.append(f"{rec['epoch']},{rec['train_loss']!r},{acc!r}" if acc != "" else
                         f"{rec['epoch']},{rec['train_loss']!r},")
        (out / "history.csv").write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise io_error(e) from None
    if history and "test_accuracy" in history[-1]:
        print(f"final test accuracy (real-valued path): {history[-1]['test_accuracy']:.4f}")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_dataset(args.data_dir, args.split)
    if args.checkpoint:
        net, _ = _load_checkpoint(args.checkpoint)
        acc = trainer.evaluate_float(net, ds)
        print(f"real-valued path accuracy on {args.split}: {acc:.4f} ({len(ds)} samples)")
        return EXIT_OK
    if args.model:
        model = _load_folded(args.model)
        try:
            report = engine.classify_dataset(model, ds)
        except ValueError as e:
            raise validation_error(e) from None
        print(
            f"integer path accuracy on {args.split}: {report.accuracy:.4f} "
            f"({report.correct}/{report.total})"
        )
        if args.confusion:
            print("confusion matrix (rows = true label, columns = prediction):")
            for row in report.confusion:
                print("  " + " ".join(f"{v:5d}" for v in row))
        return EXIT_OK
    raise validation_error("need --checkpoint (real-valued path) or --model (integer path)")


def cmd_fold(args) -> int:
    net, _ = _load_checkpoint(args.checkpoint)
    clamped = []
    model = folding.fold_model(net, on_clamp=lambda i, n: clamped.append((i, n)))
    for i, n in clamped:
        print(f"warning: layer {i + 1}: {n} threshold(s) saturated to 11 bits", file=sys.stderr)
    try:
        memfmt.save_folded(model, args.out)
    except OSError as e:
        raise io_error(e) from None
    dims = "-".join(str(d) for d in model.dims)
    print(f"folded model ({dims}) written to {args.out}")
    return EXIT_OK


def cmd_export_mem(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise io_error(e) from None
    wrote = []
    if args.model:
        model = _load_folded(args.model)
        try:
            for k, layer in enumerate(model.layers, start=1):
                memfmt.write_weights(layer, out / memfmt.weights_name(k))
                wrote.append(memfmt.weights_name(k))
                if layer.thresholds is not None:
                    memfmt.write_thresholds(layer.thresholds, out / memfmt.thresholds_name(k))
                    wrote.append(memfmt.thresholds_name(k))
        except OSError as e:
            raise io_error(e) from None
    if args.suite or args.index is not None:
        if args.data_dir is None:
            raise validation_error("image export needs --data-dir")
        ds = _load_dataset(args.data_dir, args.split)
        if args.suite:
            try:
                suite = mnist_data.select_verification_set(ds)
            except ValueError as e:
                raise validation_error(e) from None
            labels = []
            for i in range(len(suite)):
                name = f"image_{i:03d}.mem"
                memfmt.write_image(mnist_data.binarize_image(suite.images[i]), out / name)
                labels.append(f"{name} {suite.labels[i]}")
                wrote.append(name)
            (out / "labels.txt").write_text("\n".join(labels) + "\n")
            wrote.append("labels.txt")
        else:
            if not 0 <= args.index < len(ds):
                raise validation_error(f"--index {args.index} out of range for {len(ds)} samples")
            name = f"image_{args.index:05d}.mem"
            memfmt.write_image(mnist_data.binarize_image(ds.images[args.index]), out / name)
            wrote.append(name)
    if not wrote:
        raise validation_error("nothing to export: give --model and/or --suite/--index")
    print(f"wrote {len(wrote)} file(s) to {out}")
    return EXIT_OK


def cmd_import_mem(args) -> int:
    src = Path(args.dir)
    weight_files = sorted(src.glob("weights_l*.mem"))
    if not weight_files:
        raise validation_error(f"no weights_l*.mem files in {src}")
    n_layers = len(weight_files)
    layers = []
    try:
        for k in range(1, n_layers + 1):
            weights = memfmt.read_weights(src / memfmt.weights_name(k))
            if k < n_layers:
                thresholds = memfmt.read_thresholds(src / memfmt.thresholds_name(k))
                layers.append(folding.FoldedLayer(weights, thresholds))
            else:
                layers.append(folding.FoldedLayer(weights, None))
        model = folding.FoldedModel(tuple(layers))
    except FileNotFoundError as e:
        raise io_error(e) from None
    except (memfmt.MemFormatError, ValueError) as e:
        raise validation_error(e) from None
    try:
        memfmt.save_folded(model, args.out)
    except OSError as e:
        raise io_error(e) from None
    dims = "-".join(str(d) for d in model.dims)
    print(f"imported folded model ({dims}) into {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_folded(args.model)
    x = _resolve_input(args)
    try:
        result = engine.infer(model, x)
    except Exception as e:
        raise validation_error(e) from None
    print("logits: " + " ".join(str(v) for v in result.logits))
    print(f"predicted: {result.predicted}")
    return EXIT_OK


SIM_TABLE = {
    "parallelism": (int, 64),
    "memory_style": (str, "bram"),
    "clock_period_ns": (float, hwsim.DEFAULT_CLOCK_NS),
    "g_group": (int, hwsim.DEFAULT_G_GROUP),
    "c_fixed": (int, hwsim.DEFAULT_C_FIXED),
    "t0_ns": (float, hwsim.DEFAULT_T0_NS),
}


def cmd_simulate(args) -> int:
    resolved = resolve_config(args, SIM_TABLE, "simulate")
    model = _load_folded(args.model)
    x = _resolve_input(args)
    cfg = _hw_config(resolved)
    try:
        report = hwsim.simulate(model, x, cfg)
    except ValueError as e:
        raise validation_error(e) from None
    for state in hwsim.STATE_ORDER:
        print(f"{state.value:>8}: {report.cycles_per_stage[state]} cycles")
    print(f"total cycles: {report.total_cycles}")
    print(f"latency: {report.latency_ns:.1f} ns")
    print(f"speedup vs P=1 ({cfg.memory_style}): {report.speedup_vs_p1:.2f}")
    print(f"predicted: {report.functional_result.predicted}")
    return EXIT_OK


SWEEP_TABLE = {
    "clock_period_ns": (float, hwsim.DEFAULT_CLOCK_NS),
    "g_group": (int, hwsim.DEFAULT_G_GROUP),
    "c_fixed": (int, hwsim.DEFAULT_C_FIXED),
    "t0_ns": (float, hwsim.DEFAULT_T0_NS),
}


def _reference_rows_from_csv(path):
    import csv as csv_mod

    try:
        text = Path(path).read_text()
    except OSError as e:
        raise io_error(e) from None
    rows = []
    reader = csv_mod.DictReader(text.splitlines())
    for rec in reader:
        try:
            rows.append(
                hwsim.ReferenceRow(
                    parallelism=int(rec["parallelism"]),
                    memory_style=rec["memory_style"].strip(),
                    latency_ns=float(rec["latency_ns"]),
                    speedup=float(rec.get("speedup", 0) or 0),
                )
            )
        except (KeyError, ValueError) as e:
            raise validation_error(f"bad reference row {rec!r}: {e}") from None
    return rows


def cmd_sweep(args) -> int:
    resolved = resolve_config(args, SWEEP_TABLE, "sweep")
    model = _load_folded(args.model)
    if args.calibrate is not None:
        rows = (
            _reference_rows_from_csv(args.calibrate)
            if args.calibrate != "builtin"
            else hwsim.REFERENCE_ROWS
        )
        dims = tuple(
            (l.in_features, l.out_features) for l in model.layers
        )
        try:
            fit = hwsim.calibrate(
                rows,
                dims=dims,
                n_classes=model.layers[-1].out_features,
                clock_period_ns=resolved["clock_period_ns"],
            )
        except hwsim.CalibrationError as e:
            raise CliError("calibration", str(e), EXIT_CALIBRATION) from None
        print(fit.report(), file=sys.stderr)
        resolved = dict(resolved, g_group=fit.g_group, c_fixed=fit.c_fixed, t0_ns=fit.t0_ns)

    if args.parallelism_list:
        try:
            p_values = [int(p) for p in args.parallelism_list.split(",")]
        except ValueError:
            raise validation_error(f"bad --parallelism-list {args.parallelism_list!r}") from None
        styles = args.styles.split(",") if args.styles else ["bram", "lut"]
        cfgs = []
        try:
            for style in styles:
                for p in p_values:
                    cfgs.append(
                        hwsim.HwConfig(
                            parallelism=p,
                            memory_style=style,
                            clock_period_ns=resolved["clock_period_ns"],
                            g_group=resolved["g_group"],
                            c_fixed=resolved["c_fixed"],
                            t0_ns=resolved["t0_ns"],
                        )
                    )
        except ValueError as e:
            raise validation_error(e) from None
    else:
        cfgs = hwsim.default_sweep_configs(
            clock_period_ns=resolved["clock_period_ns"],
            g_group=resolved["g_group"],
            c_fixed=resolved["c_fixed"],
            t0_ns=resolved["t0_ns"],
        )
    x = memfmt.read_image(args.image_mem) if args.image_mem else None
    try:
        report = hwsim.sweep(model, cfgs, x)
    except ValueError as e:
        raise validation_error(e) from None
    text = report.to_csv() if args.format == "csv" else report.to_text()
    _write_or_print(text, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _load_folded(args.model)
    ds = _load_dataset(args.data_dir, args.split)
    runs, warmup = args.runs, args.warmup
    if runs < 1:
        raise validation_error("--runs must be >= 1")
    inputs = [
        mnist_data.binarize_image(ds.images[i % len(ds)]) for i in range(runs + warmup)
    ]
    times_ms = []
    for i, x in enumerate(inputs):
        t0 = time.perf_counter()
        engine.infer(model, x)
        dt = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            times_ms.append(dt)
    mean = statistics.fmean(times_ms)
    stdev = statistics.stdev(times_ms) if len(times_ms) > 1 else 0.0
    if args.format == "csv":
        print("runs,mean_ms,min_ms,max_ms,stddev_ms")
        print(f"{runs},{mean:.6f},{min(times_ms):.6f},{max(times_ms):.6f},{stdev:.6f}")
    else:
        print(f"per-image inference latency over {runs} runs ({warmup} warm-up excluded):")
        print(f"  mean   {mean:.4f} ms")
        print(f"  min    {min(times_ms):.4f} ms")
        print(f"  max    {max(times_ms):.4f} ms")
        print(f"  stddev {stdev:.4f} ms")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitnn",
        description="Binarized MLP toolkit: train, fold, run, and simulate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="key = value config file (flags win)")

    p = sub.add_parser("train", help="quantization-aware training")
    p.add_argument("--data-dir", required=True, help="directory with the IDX files")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    add_config(p)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--no-eval", action="store_true", help="skip per-epoch test accuracy")
    for key, (caster, default) in TRAIN_TABLE.items():
        flag = "--" + key.replace("_", "-")
        if caster is bool:
            p.add_argument(flag, type=lambda v: _parse_value(key, v, bool), default=None,
                           metavar="BOOL", help=f"default {default}")
        else:
            p.add_argument(flag, type=caster, default=None, help=f"default {default}")

    p = sub.add_parser("eval", help="accuracy of a checkpoint or folded model")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--checkpoint", help="evaluate the real-valued path")
    p.add_argument("--model", help="evaluate the folded integer path")
    p.add_argument("--confusion", action="store_true", help="print the confusion matrix")

    p = sub.add_parser("fold", help="fold a checkpoint into a hardware model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="folded model output directory")

    p = sub.add_parser("export-mem", help="write .mem files from a folded model or dataset")
    p.add_argument("--model", help="folded model directory")
    p.add_argument("--out", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--suite", action="store_true",
                   help="export the deterministic 100-image verification suite")
    p.add_argument("--index", type=int, help="export one image by dataset index")

    p = sub.add_parser("import-mem", help="rebuild a folded model from .mem files")
    p.add_argument("--dir", required=True, help="directory holding weights_l*.mem files")
    p.add_argument("--out", required=True, help="folded model output directory")

    def add_infer_input(p):
        p.add_argument("--image-mem", help="784-bit .mem image file")
        p.add_argument("--data-dir", help="IDX directory (with --index)")
        p.add_argument("--split", choices=["train", "test"], default="test")
        p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("infer", help="classify one image with the integer engine")
    p.add_argument("--model", required=True)
    add_infer_input(p)

    p = sub.add_parser("simulate", help="cycle-accurate run of the accelerator FSM")
    p.add_argument("--model", required=True)
    add_infer_input(p)
    add_config(p)
    p.add_argument("--parallelism", type=int, default=None,
                   help=f"one of {hwsim.SUPPORTED_PARALLELISM}")
    p.add_argument("--memory-style", choices=["bram", "lut"], default=None)
    p.add_argument("--clock-period-ns", type=float, default=None)
    p.add_argument("--g-group", type=int, default=None)
    p.add_argument("--c-fixed", type=int, default=None)
    p.add_argument("--t0-ns", type=float, default=None)

    p = sub.add_parser("sweep", help="latency/speedup table across configurations")
    p.add_argument("--model", required=True)
    p.add_argument("--image-mem", help="optional probe image (latency is input-independent)")
    add_config(p)
    p.add_argument("--parallelism-list", help="comma-separated, e.g. 1,4,8,16,32,64,128")
    p.add_argument("--styles", help="comma-separated subset of bram,lut")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.add_argument("--out", help="write the table to a file instead of stdout")
    p.add_argument("--calibrate", nargs="?", const="builtin", default=None, metavar="CSV",
                   help="refit overhead constants from measured rows "
                        "(builtin reference rows when no CSV is given)")
    p.add_argument("--clock-period-ns", type=float, default=None)
    p.add_argument("--g-group", type=int, default=None)
    p.add_argument("--c-fixed", type=int, default=None)
    p.add_argument("--t0-ns", type=float, default=None)

    p = sub.add_parser("bench", help="per-image CPU latency statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--format", choices=["text", "csv"], default="text")

    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "fold": cmd_fold,
    "export-mem": cmd_export_mem,
    "import-mem": cmd_import_mem,
    "infer": cmd_infer,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"bitnn: {e.kind}: {e}", file=sys.stderr)
        return e.code
    except BrokenPipeError:
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
