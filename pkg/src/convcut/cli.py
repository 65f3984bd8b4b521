"""``convcut`` command line: train, eval, ablate, gradcheck, gradcam.

Settings come from an optional ``key = value`` file (``--config``), then the
``CONVCUT_SEED`` environment variable (seed only), then command-line flags.
Exit codes: 0 success, 1 verification failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import (
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    parse_synthetic,
    read_ppm,
    resize_nearest,
    split,
    write_pgm,
    write_ppm,
)
from .errors import ConfigError, ConvCutError, DataError, LoadError
from .model import (
    PROFILE_IMAGE_SIZE,
    PROFILES,
    ConvCutConfig,
    ConvCutModel,
    build_model,
    grad_cam,
    profile_config,
)
from .rng import INIT_STREAM, TRAIN_STREAM, make_rng
from .tensor import Tensor
from .train import TrainConfig, evaluate, fit

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _opt(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass
class RunConfig:
    """Every recognised configuration key. ``None`` means "profile default"
    (or, for num_classes, "infer from the data or checkpoint")."""

    profile: str = _opt("tiny", "model profile: tiny or base")
    retained_stages: int = _opt(2, "ConvNeXt stages kept in the backbone (1-3)")
    stage_widths: tuple | None = _opt(None, "comma-separated stage channel widths")
    stage_depths: tuple | None = _opt(None, "comma-separated blocks per stage")
    num_classes: int | None = _opt(None, "number of classes")
    dropout_p: float = _opt(0.1, "spatial dropout rate in Detail Extraction")
    token_dim: int | None = _opt(None, "width of each attention token")
    d_q: int | None = _opt(None, "attention query/key/value width")
    freeze_backbone: bool = _opt(False, "exclude stem and stages from training")
    enable_attention: bool = _opt(True, "use the self-attention head")
    enable_detail_extraction: bool = _opt(True, "use the Detail Extraction block")
    det_conv_layers: int = _opt(2, "separable conv layers in Detail Extraction (1-3)")
    image_size: int | None = _opt(None, "input side length in pixels")
    batch_size: int = _opt(16, "minibatch size")
    epochs: int = _opt(50, "training epochs")
    learning_rate: float = _opt(1e-3, "Adam learning rate")
    adam_beta1: float = _opt(0.9, "Adam first-moment decay")
    adam_beta2: float = _opt(0.999, "Adam second-moment decay")
    adam_eps: float = _opt(1e-8, "Adam epsilon")
    seed: int = _opt(0, "random seed (CONVCUT_SEED overrides the config file)")
    hflip_prob: float = _opt(0.5, "horizontal flip probability")
    data_root: str = _opt("", "dataset directory root/<class>/<image>.ppm")
    synthetic: str = _opt("", "generate a bright-quadrant set, CLASSESxPER_CLASS (e.g. 2x32)")
    noise_std: float = _opt(0.1, "synthetic image noise")
    train_fraction: float = _opt(1.0, "stratified train share; below 1 holds out a test split")
    checkpoint_in: str = _opt("", "checkpoint to load")
    checkpoint_out: str = _opt("", "checkpoint to write (default OUTPUT_DIR/model.ccut)")
    output_dir: str = _opt("convcut_out", "directory for metrics, tables and images")
    image: str = _opt("", "PPM image for gradcam")
    class_idx: int = _opt(0, "class whose evidence gradcam maps")
    target_layer: str = _opt("", "gradcam layer (default: last backbone stage)")
    instances: int = _opt(5, "random instances per gradcheck case")

    # -- model / training views ------------------------------------------

    def model_config(self, num_classes: int | None = None) -> ConvCutConfig:
        overrides = dict(
            retained_stages=self.retained_stages, dropout_p=self.dropout_p,
            freeze_backbone=self.freeze_backbone, enable_attention=self.enable_attention,
            enable_detail_extraction=self.enable_detail_extraction, det_conv_layers=self.det_conv_layers,
        )
        for key in ("stage_widths", "stage_depths", "token_dim", "d_q"):
            if getattr(self, key) is not None:
                overrides[key] = getattr(self, key)
        classes = self.num_classes if self.num_classes is not None else num_classes
        if classes is None:
            raise ConfigError("num_classes is unknown; set it or provide data/checkpoint to infer it")
        overrides["num_classes"] = classes
        return profile_config(self.profile, **overrides)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, self.learning_rate, self.adam_beta1,
                           self.adam_beta2, self.adam_eps, self.seed, self.hflip_prob)

    @property
    def input_size(self) -> int:
        return self.image_size or PROFILE_IMAGE_SIZE.get(self.profile, 64)


KEYS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, text: str):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    default = KEYS[key].default
    kind = KEYS[key].type
    try:
        if "tuple" in str(kind):
            if text in ("", "auto"):
                return None
            return tuple(int(v) for v in text.split(","))
        if "None" in str(kind) and text in ("", "auto"):
            return None
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, int) or "int" in str(kind):
            return int(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = parse_value(key, value)
    return dataclasses.replace(base or RunConfig(), **values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(getattr(cfg, k))}\n" for k in KEYS)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc.strerror}") from exc
        cfg = parse_config_text(text, cfg)
    env_seed = os.environ.get("CONVCUT_SEED")
    if env_seed:
        cfg = dataclasses.replace(cfg, seed=parse_value("seed", env_seed))
    overrides = {k: parse_value(k, v) for k, v in vars(args).items() if k in KEYS and v is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    if cfg.profile not in PROFILES:
        raise ConfigError(f"unknown profile {cfg.profile!r}; choose from {sorted(PROFILES)}")
    return cfg


# ---------------------------------------------------------------------------
# shared steps


def _dataset(cfg: RunConfig) -> LabeledDataset:
    if cfg.synthetic:
        classes, per_class = parse_synthetic(cfg.synthetic)
        return generate_synthetic(SyntheticSpec(classes, per_class, cfg.input_size, cfg.noise_std, cfg.seed))
    if cfg.data_root:
        return load_dataset(cfg.data_root, cfg.input_size)
    raise ConfigError("no dataset: set data_root or synthetic")


def _splits(cfg: RunConfig, ds: LabeledDataset) -> tuple[LabeledDataset, LabeledDataset | None]:
    if cfg.train_fraction >= 1.0:
        return ds, None
    return split(ds, cfg.train_fraction, cfg.seed)


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_classes(path: str) -> int | None:
    bias = read_checkpoint(path).get("head.bias")
    return None if bias is None else int(bias.shape[0])


def _restore(cfg: RunConfig, num_classes: int | None = None) -> ConvCutModel:
    if not cfg.checkpoint_in:
        raise ConfigError("checkpoint_in is required")
    if num_classes is None and cfg.num_classes is None:
        num_classes = _checkpoint_classes(cfg.checkpoint_in)
    model = build_model(cfg.model_config(num_classes), make_rng(cfg.seed, INIT_STREAM))
    load_checkpoint(cfg.checkpoint_in, model, strict=True)
    return model


def _train_model(cfg: RunConfig, model_cfg, train_ds: LabeledDataset, metrics_path: Path | None,
                 echo: bool) -> ConvCutModel:
    model = build_model(model_cfg, make_rng(cfg.seed, INIT_STREAM))
    if cfg.checkpoint_in:
        report = load_checkpoint(cfg.checkpoint_in, model, strict=False)
        print(f"loaded {len(report.loaded)} tensors from {cfg.checkpoint_in}; "
              f"{len(report.missing)} left at initialisation")
    if metrics_path is not None and metrics_path.exists():
        metrics_path.unlink()

    def show(stats):
        if echo:
            print(f"epoch {stats.epoch:3d}  loss {stats.loss:.6f}  train_acc {stats.accuracy:.4f}")

    fit(model, train_ds, cfg.train_config(), make_rng(cfg.seed, TRAIN_STREAM), metrics_path, on_epoch=show)
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    train_ds, test_ds = _splits(cfg, ds)
    out = _output_dir(cfg)
    model = _train_model(cfg, cfg.model_config(ds.num_classes), train_ds, out / "metrics.csv", echo=True)
    ckpt = Path(cfg.checkpoint_out) if cfg.checkpoint_out else out / "model.ccut"
    save_checkpoint(model, ckpt)
    (out / "config.txt").write_text(dump_config(dataclasses.replace(cfg, num_classes=ds.num_classes)))
    if test_ds is not None and len(test_ds):
        m = evaluate(model, test_ds)
        print(f"test accuracy {m.accuracy:.4f}  macro_f1 {m.macro_f1:.4f}")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    train_ds, test_ds = _splits(cfg, ds)
    target = test_ds if test_ds is not None else train_ds
    model = _restore(cfg, ds.num_classes)
    m = evaluate(model, target)
    out = _output_dir(cfg)
    lines = [",".join(ds.label_map)] + [",".join(str(int(v)) for v in row) for row in m.confusion]
    (out / "confusion.csv").write_text("\n".join(lines) + "\n")
    print(f"accuracy {m.accuracy:.4f}")
    print(f"macro_f1 {m.macro_f1:.4f}")
    return EXIT_OK


ABLATION_COLUMNS = ("table", "config", "attention", "detail_extraction", "det_conv_layers",
                    "params", "accuracy", "macro_f1")


def ablation_runs() -> list[tuple[str, str, bool, bool, int]]:
    runs = [
        ("table2", f"attention={'on' if a else 'off'} det={'on' if d else 'off'}", a, d, 2)
        for a, d in ((False, False), (True, False), (False, True), (True, True))
    ]
    runs += [("table3", f"det_layers={n}", True, True, n) for n in (1, 2, 3)]
    return runs


def run_ablation(cfg: RunConfig, ds: LabeledDataset) -> list[dict]:
    train_ds, test_ds = _splits(cfg, ds)
    target = test_ds if test_ds is not None and len(test_ds) else train_ds
    rows = []
    for table, name, attention, det, layers in ablation_runs():
        run_cfg = dataclasses.replace(cfg, enable_attention=attention, enable_detail_extraction=det,
                                      det_conv_layers=layers)
        model = _train_model(run_cfg, run_cfg.model_config(ds.num_classes), train_ds, None, echo=False)
        m = evaluate(model, target)
        rows.append(dict(table=table, config=name, attention=attention, detail_extraction=det,
                         det_conv_layers=layers, params=model.num_parameters(),
                         accuracy=m.accuracy, macro_f1=m.macro_f1))
    return rows


def format_ablation(rows: list[dict]) -> tuple[str, str]:
    """Render ablation rows as (csv, aligned text)."""
    cells = [[format_value(r[c]) if not isinstance(r[c], float) else f"{r[c]:.4f}" for c in ABLATION_COLUMNS]
             for r in rows]
    csv = "\n".join([",".join(ABLATION_COLUMNS)] + [",".join(c) for c in cells]) + "\n"
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(ABLATION_COLUMNS)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = "\n".join([fmt.format(*ABLATION_COLUMNS)] + [fmt.format(*c) for c in cells]) + "\n"
    return csv, text


def cmd_ablate(cfg: RunConfig) -> int:
    rows = run_ablation(cfg, _dataset(cfg))
    csv, text = format_ablation(rows)
    out = _output_dir(cfg)
    (out / "ablation.csv").write_text(csv)
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    failures = []
    for res in gradcheck.run_suite(cfg.seed, cfg.instances):
        ok = res.passed()
        print(f"{res.name:<30} max_rel_err {res.max_error:.3e}  {'ok' if ok else 'FAIL'}  ({res.worst})")
        if not ok:
            failures.append(res)
    if failures:
        for res in failures:
            print(f"gradcheck failed: {res.name} worst element {res.worst} "
                  f"error {res.max_error:.3e} > {gradcheck.TOLERANCE:g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_gradcam(cfg: RunConfig) -> int:
    if not cfg.image:
        raise ConfigError("gradcam needs --image")
    img = resize_nearest(read_ppm(cfg.image), cfg.input_size)
    model = _restore(cfg)
    heat = grad_cam(model, Tensor(img[None]), cfg.class_idx, cfg.target_layer or None)
    out = _output_dir(cfg)
    write_pgm(out / "gradcam.pgm", heat)
    h, w = img.shape[:2]
    rows = np.arange(h) * heat.shape[0] // h
    cols = np.arange(w) * heat.shape[1] // w
    red = np.zeros_like(img)
    red[..., 0] = heat[rows][:, cols]
    write_ppm(out / "gradcam_overlay.ppm", 0.5 * img + 0.5 * red)
    peak = np.unravel_index(int(np.argmax(heat)), heat.shape)
    print(f"heatmap {heat.shape[0]}x{heat.shape[1]} peak at row {peak[0]}, col {peak[1]}; "
          f"written to {out / 'gradcam.pgm'}")
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train a model and write metrics.csv and a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint; write confusion.csv"),
    "ablate": (cmd_ablate, "attention x Detail Extraction matrix and 1/2/3-layer sweep"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every op, block and the full model"),
    "gradcam": (cmd_gradcam, "write a Grad-CAM heatmap (PGM) and overlay (PPM)"),
}
ALIASES = {"learning_rate": ["--lr"]}


def build_parser() -> argparse.ArgumentParser:
    keys = argparse.ArgumentParser(add_help=False)
    keys.add_argument("--config", metavar="FILE", help="key = value config file")
    group = keys.add_argument_group("config keys (each may also be set in the config file)")
    for name, f in KEYS.items():
        flags = ["--" + name.replace("_", "-")] + ALIASES.get(name, [])
        group.add_argument(*flags, dest=name, metavar="VALUE", default=None,
                           help=f"{f.metadata['help']} [{name}, default {format_value(f.default)}]")
    epilog = "config keys: " + ", ".join(KEYS)
    parser = argparse.ArgumentParser(prog="convcut", description=__doc__.splitlines()[0], epilog=epilog)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help) in COMMANDS.items():
        sub.add_parser(name, parents=[keys], help=help, description=help, epilog=epilog)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        print(f"convcut: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LoadError, OSError) as exc:
        print(f"convcut: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConvCutError as exc:
        print(f"convcut: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
