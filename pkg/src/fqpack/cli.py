"""Command-line pipeline: compress, decompress, infer, train, sweep, cost, report.

Exit codes: 0 success, 1 usage/configuration problem, 2 data or validation
failure (bad files, corrupt containers, shape mismatches), 3 internal error.
The master seed resolves flag > FQ_SEED environment variable > config file.
"""

import argparse
import configparser
import io
import os
import re
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .codec import (
    CompressedModel,
    compression_report,
    load_compressed,
    report_to_csv,
    save_compressed,
)
from .cost_model import (
    DEFAULT_ACT_BITS,
    DEFAULT_GEOMETRY,
    DEFAULT_SCHEMES,
    gate_report,
    gate_report_csv,
    parse_geometry,
    parse_scheme,
)
from .engine import FloatSimulator, IntegerEngine
from .errors import FqError
from .focused_quant import MIN_BITS_SHIFT, dequantize_layer, quantize_layer
from .model_store import (
    LayerSpec,
    ModelFile,
    load_cifar10_batch,
    load_model,
    save_model,
    synthetic_blobs,
)
from .nn import ToyNet
from .pruner import prune_by_magnitude
from .rng import derive_seed
from .trainer import (
    TrainConfig,
    finetune_inq,
    metrics_csv,
    sweep_detail_csv,
    sweep_grid,
    sweep_summary_csv,
    top1_accuracy,
    train_float,
    wsep_sweep,
)

MODES_HEADER = "layer,mode,bits,wsep"
HIST_HEADER = "bin_left,bin_right,count"
SEED_ENV = "FQ_SEED"


class UsageError(Exception):
    """Bad flags or malformed command line (exit code 1)."""


class ConfigError(UsageError):
    """Invalid or inconsistent configuration file contents (exit code 1)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs, mirroring the config file layout."""

    model: str = ""
    output: str = ""
    report_dir: str = ""
    n_bits: int = 5
    prune_fraction: float = 0.5
    w_sep: float = 2.0
    seed: int = 0
    act_bits: int = 8
    float_epochs: int = 4
    float_lr: float = 0.05
    float_momentum: float = 0.9
    train: TrainConfig = field(default_factory=TrainConfig)
    # per-layer overrides: name -> {"n_bits"|"prune_fraction"|"w_sep": value}
    layers: dict = field(default_factory=dict)

    def layer_value(self, name: str, key: str):
        return self.layers.get(name, {}).get(key, getattr(self, key))


_PIPELINE_KEYS = {
    "model": str,
    "output": str,
    "report_dir": str,
    "n_bits": int,
    "prune_fraction": float,
    "w_sep": float,
    "seed": int,
    "act_bits": int,
}
_TRAIN_KEYS = {
    "learning_rate": float,
    "epochs_per_step": int,
    "inq_fractions": "fractions",
    "refresh_interval": int,
    "refresh_growth": int,
    "refresh_mode": str,
    "momentum": float,
    "batch_size": int,
    "lr_decay": float,
    "lr_decay_every": int,
    "float_epochs": int,
    "float_lr": float,
    "float_momentum": float,
}
_LAYER_KEYS = {"n_bits": int, "prune_fraction": float, "w_sep": float}
_FLOAT_PRETRAIN = ("float_epochs", "float_lr", "float_momentum")


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "fractions":
            return tuple(float(tok) for tok in raw.split(",") if tok.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _validate_quant_params(where: str, n_bits: int, prune_fraction: float,
                           w_sep: float):
    if n_bits < MIN_BITS_SHIFT or n_bits > 8:
        raise ConfigError(
            f"{where}: n_bits {n_bits} outside [{MIN_BITS_SHIFT}, 8] "
            f"(the symbol layout needs at least {MIN_BITS_SHIFT} bits)"
        )
    if not 0.0 <= prune_fraction < 1.0:
        raise ConfigError(f"{where}: prune_fraction {prune_fraction} not in [0, 1)")
    if w_sep < 0.0:
        raise ConfigError(f"{where}: w_sep {w_sep} must be >= 0")


def parse_config(text: str) -> PipelineConfig:
    """Parse the flat ``key = value`` config with layer-scoped sections."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc

    cfg = PipelineConfig()
    train_kwargs = {}
    for section in parser.sections():
        items = parser[section]
        if section == "pipeline":
            for key, raw in items.items():
                if key not in _PIPELINE_KEYS:
                    raise ConfigError(f"[pipeline] unknown key {key!r}")
                setattr(cfg, key, _convert(section, key, raw, _PIPELINE_KEYS[key]))
        elif section == "train":
            for key, raw in items.items():
                if key not in _TRAIN_KEYS:
                    raise ConfigError(f"[train] unknown key {key!r}")
                value = _convert(section, key, raw, _TRAIN_KEYS[key])
                if key in _FLOAT_PRETRAIN:
                    setattr(cfg, key, value)
                else:
                    train_kwargs[key] = value
        elif section.startswith("layer "):
            name = section[len("layer "):].strip()
            if not name:
                raise ConfigError("layer section needs a name: [layer NAME]")
            overrides = {}
            for key, raw in items.items():
                if key not in _LAYER_KEYS:
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                overrides[key] = _convert(section, key, raw, _LAYER_KEYS[key])
            cfg.layers[name] = overrides
        else:
            raise ConfigError(f"unknown section [{section}]")

    _validate_quant_params("[pipeline]", cfg.n_bits, cfg.prune_fraction, cfg.w_sep)
    if not 2 <= cfg.act_bits <= 16:
        raise ConfigError(f"[pipeline] act_bits {cfg.act_bits} not in [2, 16]")
    if cfg.float_epochs < 0:
        raise ConfigError("[train] float_epochs must be >= 0")
    for name, overrides in cfg.layers.items():
        merged = {k: overrides.get(k, getattr(cfg, k)) for k in _LAYER_KEYS}
        _validate_quant_params(f"[layer {name}]", **merged)
    try:
        cfg.train = TrainConfig(
            seed=cfg.seed, w_sep=cfg.w_sep, n_bits=cfg.n_bits,
            prune_fraction=cfg.prune_fraction, **train_kwargs,
        )
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def canonical_config(cfg: PipelineConfig) -> str:
    """Normalized text form; parse(canonical(parse(x))) == parse(x)."""
    out = io.StringIO()
    out.write("[pipeline]\n")
    for key in _PIPELINE_KEYS:
        out.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
    out.write("\n[train]\n")
    for key in _TRAIN_KEYS:
        source = cfg if key in _FLOAT_PRETRAIN else cfg.train
        out.write(f"{key} = {_format_value(getattr(source, key))}\n")
    for name in sorted(cfg.layers):
        out.write(f"\n[layer {name}]\n")
        for key in _LAYER_KEYS:
            if key in cfg.layers[name]:
                out.write(f"{key} = {_format_value(cfg.layers[name][key])}\n")
    return out.getvalue()


def resolve_seed(flag_seed, cfg: PipelineConfig) -> int:
    """Seed precedence: command-line flag, then FQ_SEED, then config."""
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return cfg.seed


# ---------------------------------------------------------------------------
# small shared helpers


def weight_histogram(values: np.ndarray, bins: int = 64):
    """(bin_left, bin_right, count) rows over the value range."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("cannot histogram an empty array")
    lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
            for i in range(len(counts))]


def histogram_csv(rows) -> str:
    lines = [HIST_HEADER]
    lines += [f"{left:.6g},{right:.6g},{count}" for left, right, count in rows]
    return "\n".join(lines) + "\n"


def modes_csv(rows) -> str:
    lines = [MODES_HEADER]
    lines += [f"{name},{mode},{bits},{wsep:.4f}" for name, mode, bits, wsep in rows]
    return "\n".join(lines) + "\n"


def _write_text(path, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def _load_images(path, limit=None):
    images, labels = load_cifar10_batch(path)
    if limit is not None and limit > 0:
        images, labels = images[:limit], labels[:limit]
    return images, labels


def _quantize_model(model: ModelFile, cfg: PipelineConfig, seed: int):
    """Prune + quantize every layer; returns (CompressedModel, mode rows)."""
    quantized = []
    mode_rows = []
    for spec in model.layers:
        n_bits = cfg.layer_value(spec.name, "n_bits")
        prune = cfg.layer_value(spec.name, "prune_fraction")
        w_sep = cfg.layer_value(spec.name, "w_sep")
        try:
            mask = prune_by_magnitude(spec.weight, prune)
            lq = quantize_layer(
                spec.weight, mask, n_bits, w_sep,
                seed=derive_seed(seed, spec.name), name=spec.name,
            )
        except FqError as exc:
            raise type(exc)(f"layer {spec.name!r}: {exc}") from exc
        quantized.append(lq)
        mode_rows.append((spec.name, lq.mode, lq.n_bits, lq.wsep))
    return CompressedModel(quantized), mode_rows


def _emit_reports(report_dir, model: ModelFile, cm: CompressedModel, mode_rows):
    rows = compression_report(model, cm)
    _write_text(os.path.join(report_dir, "compression.csv"), report_to_csv(rows))
    _write_text(os.path.join(report_dir, "modes.csv"), modes_csv(mode_rows))
    for spec in model.layers:
        stem = _safe_name(spec.name)
        pre = weight_histogram(spec.weight)
        post = weight_histogram(dequantize_layer(cm.layer(spec.name)))
        _write_text(os.path.join(report_dir, f"hist_pre_{stem}.csv"),
                    histogram_csv(pre))
        _write_text(os.path.join(report_dir, f"hist_post_{stem}.csv"),
                    histogram_csv(post))
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_compress(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.model:
        cfg.model = args.model
    if args.out:
        cfg.output = args.out
    if args.report_dir:
        cfg.report_dir = args.report_dir
    if args.n_bits is not None:
        cfg.n_bits = args.n_bits
    if args.prune is not None:
        cfg.prune_fraction = args.prune
    if args.w_sep is not None:
        cfg.w_sep = args.w_sep
    _validate_quant_params("compress", cfg.n_bits, cfg.prune_fraction, cfg.w_sep)
    if not cfg.model or not cfg.output:
        raise UsageError("compress needs a model path and an output path")
    seed = resolve_seed(args.seed, cfg)
    report_dir = cfg.report_dir or (os.path.dirname(os.path.abspath(cfg.output)))

    model = load_model(cfg.model)
    cm, mode_rows = _quantize_model(model, cfg, seed)
    save_compressed(cm, cfg.output)
    rows = _emit_reports(report_dir, model, cm, mode_rows)
    print(report_to_csv(rows), end="")
    print(f"wrote {cfg.output} and reports under {report_dir}")
    return 0


def cmd_decompress(args) -> int:
    cm = load_compressed(args.input)
    model = load_model(args.model)
    layers = []
    for spec in model.layers:
        weights = dequantize_layer(cm.layer(spec.name))
        layers.append(replace(spec, weight=weights.reshape(spec.weight.shape)))
    save_model(ModelFile(layers), args.out)
    print(f"wrote {args.out} ({len(layers)} layers)")
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.model)
    cm = load_compressed(args.compressed)
    images, labels = _load_images(args.data, args.limit)
    engine = IntegerEngine(model, cm, act_bits=args.act_bits)
    simulator = FloatSimulator(model, cm, act_bits=args.act_bits)
    logits = engine.forward(images[: min(len(images), args.print_logits)])
    for i, row in enumerate(logits):
        print(f"sample {i}: " + " ".join(f"{v:.6f}" for v in row))
    engine_top = engine.predict(images)
    float_top = simulator.predict(images)
    agreement = top1_accuracy(engine_top, float_top)
    print(f"agreement {agreement:.4f} over {len(images)} samples")
    print(f"engine top1 {top1_accuracy(engine_top, labels):.4f}")
    print(f"float top1 {top1_accuracy(float_top, labels):.4f}")
    return 0


def _training_data(args, seed: int):
    if args.data:
        images, labels = _load_images(args.data)
    else:
        images, labels = synthetic_blobs(args.samples, seed=derive_seed(seed, "train"))
    if args.val_data:
        val = _load_images(args.val_data)
    elif args.data:
        split = max(1, len(images) // 5)
        val, images, labels = (images[:split], labels[:split]), images[split:], labels[split:]
        return images, labels, val
    else:
        val = synthetic_blobs(args.val_samples, seed=derive_seed(seed, "val"))
    return images, labels, val


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    seed = resolve_seed(args.seed, cfg)
    train_cfg = replace(cfg.train, seed=seed)
    images, labels, (val_images, val_labels) = _training_data(args, seed)

    net = ToyNet(seed=derive_seed(seed, "init"))
    float_history = []
    if cfg.float_epochs > 0:
        float_history = train_float(
            net, images, labels, epochs=cfg.float_epochs,
            learning_rate=cfg.float_lr, momentum=cfg.float_momentum,
            seed=derive_seed(seed, "float"), eval_set=(val_images, val_labels),
        )
    float_top1 = top1_accuracy(net.predict(val_images), val_labels)
    result = finetune_inq(net, images, labels, train_cfg,
                          eval_set=(val_images, val_labels))

    model = net.to_model_file()
    if args.out_model:
        save_model(model, args.out_model)
    if args.out_compressed:
        save_compressed(result.compressed, args.out_compressed)
    if args.metrics:
        _write_text(args.metrics, metrics_csv(float_history + result.history))
    engine = IntegerEngine(model, result.compressed, act_bits=cfg.act_bits)
    engine_top1 = top1_accuracy(engine.predict(val_images), val_labels)
    print(f"float top1 {float_top1:.4f}")
    print(f"quantized top1 {engine_top1:.4f}")
    for name, mode in result.modes.items():
        print(f"layer {name}: {mode} (W={result.wsep[name]:.2f})")
    return 0


def cmd_sweep(args) -> int:
    if args.step <= 0:
        raise UsageError("--step must be positive")
    cfg = load_config(args.config) if args.config else PipelineConfig()
    seed = resolve_seed(args.seed, cfg)
    train_cfg = replace(cfg.train, seed=seed)
    grid = sweep_grid(args.min, args.max, args.step)

    images, labels = synthetic_blobs(args.samples, seed=derive_seed(seed, "train"))
    test_images, test_labels = synthetic_blobs(
        args.val_samples, seed=derive_seed(seed, "val"))
    net = ToyNet(seed=derive_seed(seed, "init"))
    if cfg.float_epochs > 0:
        train_float(net, images, labels, epochs=cfg.float_epochs,
                    learning_rate=cfg.float_lr, momentum=cfg.float_momentum,
                    seed=derive_seed(seed, "float"))
    detail, summary, modes = wsep_sweep(
        net, images, labels, test_images, test_labels, train_cfg,
        grid=grid, repeats=args.repeats,
    )
    _write_text(args.out, sweep_detail_csv(detail))
    if args.summary:
        _write_text(args.summary, sweep_summary_csv(summary))
    if args.modes:
        _write_text(args.modes, modes_csv(
            [(f"{w:g}/{r}/{name}", mode, train_cfg.n_bits, w)
             for w, r, name, mode in modes]))
    print(sweep_summary_csv(summary), end="")
    return 0


def cmd_cost(args) -> int:
    try:
        geom = parse_geometry(args.geometry)
        schemes = [parse_scheme(tok) for tok in args.schemes.split(",") if tok.strip()]
        rows = gate_report(schemes, geom, act_bits=args.act_bits)
        if args.baseline:
            base = _baseline_gates(rows, args.baseline)
            rows = [(label, g_text, gates, gates / base)
                    for label, g_text, gates, _ in rows]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    csv_text = gate_report_csv(rows)
    if args.out:
        _write_text(args.out, csv_text)
    print(csv_text, end="")
    return 0


def _baseline_gates(rows, baseline: str) -> float:
    matches = [gates for label, _, gates, _ in rows
               if label == baseline or label.split(":")[0] == baseline]
    if not matches:
        raise ValueError(f"baseline scheme {baseline!r} is not in the report")
    return float(min(matches))


def cmd_report(args) -> int:
    model = load_model(args.model)
    cm = load_compressed(args.compressed)
    mode_rows = [(lq.name, lq.mode, lq.n_bits, lq.wsep) for lq in cm.layers]
    rows = _emit_reports(args.out_dir, model, cm, mode_rows)
    print(report_to_csv(rows), end="")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fqpack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("compress", help="prune + quantize + encode a model file")
    p.add_argument("--model", help="input model file")
    p.add_argument("--out", help="output compressed container")
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("--n-bits", type=int, dest="n_bits")
    p.add_argument("--prune", type=float, help="prune fraction in [0, 1)")
    p.add_argument("--w-sep", type=float, dest="w_sep")
    p.add_argument("--seed", type=int)
    p.add_argument("--report-dir", dest="report_dir")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="rebuild a float model from a container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", required=True, help="original model (geometry source)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("infer", help="integer inference + float agreement check")
    p.add_argument("--model", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--data", required=True, help="CIFAR-10 format binary batch")
    p.add_argument("--limit", type=int, default=None, help="use first N samples")
    p.add_argument("--print-logits", type=int, default=4, dest="print_logits")
    p.add_argument("--act-bits", type=int, default=8, dest="act_bits")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="float pretrain + INQ fine-tune + compress")
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("--data", help="CIFAR-10 format binary batch (default: synthetic)")
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--val-samples", type=int, default=256, dest="val_samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-model", dest="out_model")
    p.add_argument("--out-compressed", dest="out_compressed")
    p.add_argument("--metrics", help="write epoch,loss,top1 CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="separation-threshold sweep")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="detail CSV (wsep,run,top1)")
    p.add_argument("--summary", help="summary CSV (wsep,mean_top1,std_top1)")
    p.add_argument("--modes", help="per-layer mode decisions CSV")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--min", type=float, default=1.0)
    p.add_argument("--max", type=float, default=3.5)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--val-samples", type=int, default=256, dest="val_samples")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cost", help="hardware gate-count estimates")
    p.add_argument("--geometry", default=DEFAULT_GEOMETRY)
    p.add_argument("--schemes", default=DEFAULT_SCHEMES)
    p.add_argument("--act-bits", type=int, default=DEFAULT_ACT_BITS, dest="act_bits")
    p.add_argument("--baseline", help="normalize ratios to this scheme")
    p.add_argument("--out", help="write the CSV here as well as stdout")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("report", help="regenerate reports from saved artifacts")
    p.add_argument("--model", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FqError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
