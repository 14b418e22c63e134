"""``fastscnn`` command line: summary, train, infer, eval, bench, selftest.

Every option is a flat key that can appear in a ``key=value`` config file
(``--config``) or as ``--key value`` on the command line.  Precedence is
flag > file > default.  Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import data_io
from .augment import AugmentConfig
from .bench import bench_fps
from .blocks import BottleneckSpec
from .metrics import evaluate, format_report
from .model import DEFAULT_BOTTLENECKS, ModelConfig, build, summary_report
from .train import TrainConfig, TrainingDiverged, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("summary", "train", "infer", "eval", "bench", "selftest")


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ValueError(f"expected HxW, got {text!r}") from None


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _bottlenecks(text: str) -> tuple:
    """``t,c,n,s;t,c,n,s;...``"""
    return tuple(BottleneckSpec(*_ints(row)) for row in text.split(";") if row.strip())


def _fmt_bottlenecks(specs) -> str:
    return ";".join(f"{b.t},{b.c},{b.n},{b.s}" for b in specs)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    show: Callable[[Any], str] = str


def _show_tuple(v) -> str:
    return ",".join(str(x) for x in v)


KEYS = {
    "classes": Key(int, 19, "number of output classes"),
    "input": Key(_size, (1024, 2048), "model input size HxW", lambda v: f"{v[0]}x{v[1]}"),
    "ppm_bins": Key(_ints, (1, 2, 3, 6), "pyramid pooling bins, comma separated", _show_tuple),
    "bottlenecks": Key(_bottlenecks, DEFAULT_BOTTLENECKS, "bottleneck rows t,c,n,s separated by ';'",
                       _fmt_bottlenecks),
    "dropout": Key(float, 0.1, "dropout before the final 1x1 conv"),
    "seed": Key(int, 0, "random seed"),
    "mode": Key(str, "cls", "inference output: prob or cls"),
    "zero_skip": Key(_bool, False, "zero the learning-to-downsample input of the fusion module"),
    "weights": Key(str, "", "weight file to load"),
    "data": Key(str, "", "dataset root containing <split>/images and <split>/labels"),
    "split": Key(str, "", "dataset split (default: train for train, val for eval)"),
    "val_split": Key(str, "", "validation split used to pick the best checkpoint"),
    "label_map": Key(str, "cityscapes", "cityscapes, identity, or a 'raw_id trainId' table file"),
    "norm_mean": Key(_floats, (0.5,), "normalization mean, one value or one per channel", _show_tuple),
    "norm_std": Key(_floats, (0.5,), "normalization std, one value or one per channel", _show_tuple),
    "image": Key(str, "", "input image for infer"),
    "out": Key(str, "", "output file (infer, eval, bench) or directory (train)"),
    "epochs": Key(int, 1000, "training epochs"),
    "max_iters": Key(int, 0, "stop after this many iterations (0: run the full schedule)"),
    "batch_size": Key(int, 2, "training batch size"),
    "base_lr": Key(float, 0.045, "poly schedule base learning rate"),
    "power": Key(float, 0.9, "poly schedule power"),
    "momentum": Key(float, 0.9, "SGD momentum"),
    "l2": Key(float, 4e-5, "l2 penalty on standard and pointwise conv weights"),
    "aux_weight": Key(float, 0.4, "weight of each auxiliary loss"),
    "augment": Key(_bool, True, "random resize/crop/flip/noise/brightness during training"),
    "crop": Key(_size, (512, 1024), "training crop HxW", lambda v: f"{v[0]}x{v[1]}"),
    "scale_range": Key(_floats, (0.5, 2.0), "random resize scale range lo,hi", _show_tuple),
    "flip_p": Key(float, 0.5, "horizontal flip probability"),
    "noise_std": Key(float, 0.02, "per-pixel colour noise std (normalized units)"),
    "gain_range": Key(_floats, (0.75, 1.25), "brightness gain range lo,hi", _show_tuple),
    "checkpoint_every": Key(int, 0, "also keep epoch<k>.fscn every k epochs (0: off)"),
    "burn_in": Key(int, 100, "bench: un-timed frames"),
    "measured": Key(int, 100, "bench: timed frames"),
    "threads": Key(int, 1, "native thread pool size"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fastscnn", description="Real-time semantic segmentation on CPU.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value config file")
    for name, key in KEYS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, metavar="VALUE",
                            help=f"{key.help} (default {key.show(key.default)})")
    return parser


def read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {k!r}")
        values[k] = v
    return values


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file and flags into typed values."""
    raw = read_config(args.config) if args.config else {}
    raw.update({k: getattr(args, k) for k in KEYS if getattr(args, k) is not None})
    cfg = {k: key.default for k, key in KEYS.items()}
    for k, text in raw.items():
        try:
            cfg[k] = KEYS[k].parse(text)
        except (ValueError, TypeError) as err:
            raise UsageError(f"invalid value for {k}: {err}") from None
    if cfg["mode"] not in ("prob", "cls"):
        raise UsageError(f"mode must be prob or cls, got {cfg['mode']!r}")
    return cfg


def config_lines(cfg: dict) -> list[str]:
    return [f"{k}={KEYS[k].show(v)}" for k, v in cfg.items()]


def model_config(cfg: dict, train: bool = False, input_size=None) -> ModelConfig:
    h, w = input_size or cfg["input"]
    mc = ModelConfig(num_classes=cfg["classes"], input_h=h, input_w=w, bottlenecks=cfg["bottlenecks"],
                     ppm_bins=cfg["ppm_bins"], dropout=cfg["dropout"], zero_skip=cfg["zero_skip"],
                     mode=cfg["mode"], train=train, seed=cfg["seed"])
    try:
        mc.validate()
    except ValueError as err:
        raise UsageError(str(err)) from None
    return mc


def _make_model(cfg: dict, train: bool = False, input_size=None):
    try:
        model = build(model_config(cfg, train, input_size))
    except ValueError as err:
        raise UsageError(str(err)) from None
    if cfg["weights"]:
        data_io.load_weights(model, cfg["weights"], ignore_prefixes=() if train else ("aux_",))
    return model


def _label_map(cfg: dict):
    name = cfg["label_map"]
    return name if name in ("cityscapes", "identity") else data_io.read_mapping(name)


def _norm(cfg: dict):
    return cfg["norm_mean"], cfg["norm_std"]


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg[k]]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _emit(cfg: dict, text: str) -> None:
    """Print ``text``; with ``out`` set also write it, prefixed by the effective config."""
    print(text)
    if cfg["out"]:
        header = "".join(f"# {line}\n" for line in config_lines(cfg))
        data_io.atomic_write(cfg["out"], (header + text + "\n").encode())


def cmd_summary(cfg: dict) -> int:
    model = _make_model(cfg, train=True)
    _emit(cfg, summary_report(model))
    return EXIT_OK


def _augment_config(cfg: dict) -> AugmentConfig:
    for key in ("scale_range", "gain_range"):
        if len(cfg[key]) != 2 or cfg[key][0] > cfg[key][1]:
            raise UsageError(f"{key} must be lo,hi with lo <= hi, got {KEYS[key].show(cfg[key])}")
    return AugmentConfig(scale_range=cfg["scale_range"], crop=cfg["crop"], flip_p=cfg["flip_p"],
                         noise_std=cfg["noise_std"], gain_range=cfg["gain_range"])


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    split = cfg["split"] or "train"
    mean, std = _norm(cfg)
    index = data_io.scan_dataset(cfg["data"], split, cfg["classes"])
    dataset = index.load(_label_map(cfg), mean, std)
    val = None
    if cfg["val_split"]:
        val = data_io.scan_dataset(cfg["data"], cfg["val_split"], cfg["classes"]).load(_label_map(cfg), mean, std)
    model = _make_model(cfg, train=True)
    tc = TrainConfig(base_lr=cfg["base_lr"], power=cfg["power"], momentum=cfg["momentum"],
                     batch_size=cfg["batch_size"], l2=cfg["l2"], aux_weight=cfg["aux_weight"],
                     epochs=cfg["epochs"], seed=cfg["seed"],
                     augment=_augment_config(cfg) if cfg["augment"] else None)
    if not cfg["augment"]:
        sizes = {s.size for s in dataset}
        if len(sizes) > 1:
            raise data_io.DataError(f"images differ in size {sorted(sizes)}; enable augment to crop them")
    try:
        tc.validate()
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data_io.atomic_write(out / "config.txt", "".join(f"{l}\n" for l in config_lines(cfg)).encode())

    def checkpoint(tag: str, m) -> None:
        if tag == "best" or not tag.startswith("epoch"):
            data_io.save_weights(m, out / f"{tag}.fscn")
            return
        data_io.save_weights(m, out / "last.fscn")
        k = int(tag[5:]) + 1
        if cfg["checkpoint_every"] and k % cfg["checkpoint_every"] == 0:
            data_io.save_weights(m, out / f"{tag}.fscn")

    lines: list[str] = []

    def log(line: str) -> None:
        lines.append(line)
        print(line)

    try:
        train_loop(model, dataset, tc, checkpoint, val, log, cfg["max_iters"] or None)
    except TrainingDiverged as err:
        raise NumericalError(str(err)) from None
    finally:
        header = "".join(f"# {l}\n" for l in config_lines(cfg))
        data_io.atomic_write(out / "train.log", (header + "".join(f"{l}\n" for l in lines)).encode())
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    _require(cfg, "image", "out")
    image = data_io.read_image(cfg["image"])
    x = data_io.normalize(image, *_norm(cfg))
    model = _make_model(cfg)
    try:
        model.check_input(x.shape)
    except ValueError as err:
        raise data_io.DataError(f"{cfg['image']}: {err}") from None
    out = model.infer(x, cfg["mode"])
    if not np.isfinite(out).all():
        raise NumericalError("inference produced non-finite values")
    meta = dict(line.split("=", 1) for line in config_lines(cfg))
    if cfg["mode"] == "cls":
        data_io.write_label_png(cfg["out"], out[0], text=meta)
    else:
        data_io.write_raw(cfg["out"], out.astype(np.float32), layout="NCHW", **meta)
    print(f"wrote {cfg['out']} mode={cfg['mode']} shape={'x'.join(str(d) for d in out.shape)}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "data", "weights")
    samples = data_io.scan_dataset(cfg["data"], cfg["split"] or "val", cfg["classes"]).load(
        _label_map(cfg), *_norm(cfg))
    model = _make_model(cfg)
    for i, s in enumerate(samples):
        try:
            model.check_input(s.image.shape)
        except ValueError as err:
            raise data_io.DataError(f"sample {i} of split {cfg['split'] or 'val'}: {err}") from None
    cm = evaluate(model, samples, cfg["classes"])
    _emit(cfg, format_report(cm))
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    model = _make_model(cfg)
    h, w = cfg["input"]
    result = bench_fps(model, h, w, cfg["burn_in"], cfg["measured"], cfg["mode"], cfg["threads"], cfg["seed"])
    _emit(cfg, result.report())
    return EXIT_OK


def cmd_selftest(cfg: dict) -> int:
    from . import selftest

    ok = selftest.run(model_config(cfg))
    return EXIT_OK if ok else EXIT_NUMERIC


HANDLERS = {
    "summary": cmd_summary, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "bench": cmd_bench, "selftest": cmd_selftest,
}


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        cfg = resolve(args)
        with threadpool_limits(limits=cfg["threads"]):
            return HANDLERS[args.command](cfg)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (data_io.DataError, data_io.WeightFileError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
