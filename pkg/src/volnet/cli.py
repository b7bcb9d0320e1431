"""Command-line entry point: ``volnet {train,evaluate,gradcam,synth-gen,inspect}``.

Run configuration is a flat ``key = value`` text file. Blank lines and
``#`` comments are ignored; unknown keys are rejected. Keys:

    seed                 model-init and shuffling seed (default 0)
    out                  output directory (default ``runs``)
    crossed              also train on the val/test-swapped split and average (default true)
    deterministic        single-threaded numerics (default false)
    data.manifest        manifest CSV; relative paths resolve against its directory
    data.synthetic       generate the dataset in memory from the ``synth.*`` keys (default false)
    model.<field>        any ModelConfig field, e.g. ``model.stage_channels = 4,8,16,32``
    train.<field>        any TrainConfig field except ``seed``
    synth.<field>        any SynthSpec field; centres as ``10,10,11; 21,22,21``

``--config`` also accepts the presets ``synth_tiny`` and ``paper``.

Exit codes: 0 success, 2 configuration error, 3 data or file error,
4 training diverged (non-finite loss). Reports go to stdout, diagnostics
to stderr. ``VOLNET_NUM_THREADS`` caps the BLAS thread pool; ``--deterministic``
forces one thread.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from volnet.data import (
    SPLITS,
    Manifest,
    SynthSpec,
    load_split,
    split_samples,
    synth_generate,
    write_nifti,
    write_raw,
    read_volume,
)
from volnet.errors import ConfigError, DataError, ShapeError, TrainingDivergedError, VolnetError
from volnet.gradcam import compute_heatmap, export_heatmap
from volnet.metrics import format_table, mean_report, write_report_csv
from volnet.model import ModelConfig, build_model, parameter_layout, parameter_manifest, stage_shapes
from volnet.train import (
    Checkpoint,
    TrainConfig,
    evaluate,
    fit,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    write_history_csv,
)

log = logging.getLogger("volnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig.tiny)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthSpec = dataclasses.field(default_factory=SynthSpec)
    manifest: str | None = None
    synthetic: bool = False
    seed: int = 0
    out: str = "runs"
    crossed: bool = True
    deterministic: bool = False

    def check_data(self) -> None:
        if self.synthetic == (self.manifest is not None):
            raise ConfigError("set exactly one of data.manifest and data.synthetic = true")


PRESETS = {
    "synth_tiny": "data.synthetic = true\n",
    "paper": "model.stage_channels = 64,128,256,512\nmodel.reduction = 8\nmodel.input_shape = 121,145,121\n",
}

_TOP_KEYS = {"seed": int, "out": str, "crossed": bool, "deterministic": bool}
_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec}
_EXCLUDED = {("train", "seed")}


def _parse_bool(text: str, key: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected true or false, got {text!r}")


def _parse_like(text: str, default, key: str):
    """Parse ``text`` to the type of ``default``."""
    try:
        if isinstance(default, bool):
            return _parse_bool(text, key)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(_parse_like(g, default[0], key) for g in text.split(";") if g.strip())
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    raise ConfigError(f"{key}: unsupported value type")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return "; ".join(_format(v) for v in value)
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        pairs[key] = value

    top: dict = {}
    section_kw: dict[str, dict] = {name: {} for name in _SECTIONS}
    base = {"model": ModelConfig.tiny(), "train": TrainConfig(), "synth": SynthSpec()}
    for key, value in pairs.items():
        if key in _TOP_KEYS:
            top[key] = _parse_like(value, _TOP_KEYS[key](), key)
        elif key == "data.manifest":
            top["manifest"] = value
        elif key == "data.synthetic":
            top["synthetic"] = _parse_bool(value, key)
        else:
            section, _, name = key.partition(".")
            fields = {f.name for f in dataclasses.fields(_SECTIONS[section])} if section in _SECTIONS else set()
            if name not in fields or (section, name) in _EXCLUDED:
                raise ConfigError(f"{source}: unknown key {key!r}")
            section_kw[section][name] = _parse_like(value, getattr(base[section], name), key)
    try:
        model = dataclasses.replace(base["model"], **section_kw["model"])
        train = dataclasses.replace(base["train"], **section_kw["train"])
        synth = dataclasses.replace(base["synth"], **section_kw["synth"])
    except DataError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(model=model, train=train, synth=synth, **top)


def config_text(cfg: RunConfig) -> str:
    """Every key with its effective value, in a form ``parse_config_text`` reads back."""
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}", f"crossed = {_format(cfg.crossed)}",
             f"deterministic = {_format(cfg.deterministic)}"]
    if cfg.manifest is not None:
        lines.append(f"data.manifest = {cfg.manifest}")
    lines.append(f"data.synthetic = {_format(cfg.synthetic)}")
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("synth", cfg.synth)):
        for f in dataclasses.fields(obj):
            if (section, f.name) not in _EXCLUDED:
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(spec: str | None) -> RunConfig:
    if spec is None:
        return parse_config_text(PRESETS["synth_tiny"], "synth_tiny")
    if spec in PRESETS and not Path(spec).exists():
        return parse_config_text(PRESETS[spec], spec)
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes: dict = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["out"] = args.out
    if getattr(args, "deterministic", False):
        changes["deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        changes["train"] = dataclasses.replace(cfg.train, total_epochs=args.epochs)
    return dataclasses.replace(cfg, **changes)


def _thread_limit(deterministic: bool):
    if deterministic:
        return threadpool_limits(limits=1)
    env = os.environ.get("VOLNET_NUM_THREADS")
    if env:
        try:
            return threadpool_limits(limits=int(env))
        except ValueError:
            raise ConfigError(f"VOLNET_NUM_THREADS must be an integer, got {env!r}") from None
    return contextlib.nullcontext()


# --- data ------------------------------------------------------------------

def load_dataset(cfg: RunConfig) -> tuple[dict, Manifest | None, list | None]:
    """``(splits, manifest, samples)``; ``samples`` is set only for synthetic data."""
    cfg.check_data()
    if cfg.synthetic:
        samples, manifest = synth_generate(cfg.synth)
        return split_samples(samples, manifest), manifest, samples
    manifest = Manifest.from_csv(cfg.manifest)
    return {s: load_split(manifest, s) for s in SPLITS}, manifest, None


def _datasets_for_runs(cfg: RunConfig) -> list[tuple[str, dict]]:
    splits, manifest, samples = load_dataset(cfg)
    shape = splits["train"].x.shape[2:]
    if tuple(shape) != cfg.model.input_shape:
        raise ConfigError(f"volumes are {tuple(shape)} but model.input_shape is {cfg.model.input_shape}")
    runs = [("run_a", splits)]
    if cfg.crossed:
        runs.append(("run_b", {"train": splits["train"], "val": splits["test"], "test": splits["val"]}))
    return runs


# --- commands --------------------------------------------------------------

def write_param_manifest(params, path) -> None:
    with open(path, "w") as fh:
        fh.write("name\tshape\ttrainable\tcount\n")
        for name, shape, trainable in parameter_manifest(params):
            fh.write(f"{name}\t{'x'.join(map(str, shape))}\t{int(trainable)}\t{int(np.prod(shape))}\n")


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.out)
    runs = _datasets_for_runs(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg))
    reports = {}
    for name, dataset in runs:
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        params = build_model(cfg.model, cfg.seed)
        if name == "run_a":
            write_param_manifest(params, out / "params.tsv")
        train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
        history = fit(params, dataset, train_cfg)
        write_history_csv(history, run_dir / "history.csv")
        save_checkpoint(
            Checkpoint.from_params(params, task=train_cfg.task, run=name, seed=cfg.seed, best_epoch=history.best_epoch),
            run_dir / "best.ckpt",
        )
        reports[name] = history.test_report
        write_report_csv(run_dir / "report.csv", {"test": history.test_report.row()})
        log.info("%s: best epoch %d, val acc %.4f", name, history.best_epoch, history.best_val_acc)
    rows = {name: rep.row() for name, rep in reports.items()}
    rows["mean"] = mean_report(list(reports.values()))
    write_report_csv(out / "report.csv", rows)
    print(format_table(rows))
    return EXIT_OK


def _checkpoint(path) -> Checkpoint:
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_evaluate(args) -> int:
    ckpt = _checkpoint(args.checkpoint)
    params = restore_params(ckpt)
    if args.manifest is not None:
        split = load_split(Manifest.from_csv(args.manifest), args.split)
    else:
        cfg = _apply_overrides(load_config(args.config), args)
        splits, _, _ = load_dataset(cfg)
        if args.split not in splits:
            raise DataError(f"split {args.split!r} is empty")
        split = splits[args.split]
    report = evaluate(params, split)
    rows = {args.split: report.row()}
    print(format_table(rows))
    print(f"tp={report.tp} fp={report.fp} tn={report.tn} fn={report.fn}")
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_report_csv(Path(args.out) / f"eval_{args.split}.csv", rows)
    return EXIT_OK


def cmd_gradcam(args) -> int:
    if args.stage not in (1, 2, 3, 4):
        raise ConfigError(f"--stage must be 1..4, got {args.stage}")
    params = restore_params(_checkpoint(args.checkpoint))
    volume = read_volume(args.volume)
    if volume.shape != params.config.input_shape:
        raise ShapeError(f"volume is {volume.shape} but the model expects {params.config.input_shape}")
    heat = compute_heatmap(params, volume, args.stage, args.target_class, use_attended=args.attended)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    prefix = out / f"{Path(args.volume).stem}_stage{args.stage}_class{args.target_class}"
    for path in export_heatmap(heat, volume, prefix):
        print(path)
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    spec = cfg.synth if args.seed is None else dataclasses.replace(cfg.synth, seed=args.seed)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    samples, manifest = synth_generate(spec)
    for s in samples:
        write_nifti(s.volume, out / s.path)
        write_raw(s.mask.astype(np.float32), out / (Path(s.path).stem + ".mask.vol"))
    manifest.to_csv(out / "manifest.csv")
    print(f"wrote {len(samples)} volumes and manifest.csv to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint is not None:
        ckpt = _checkpoint(args.checkpoint)
        config, tensors, meta = ckpt.config, ckpt.tensors, ckpt.meta
        shapes = [(name, arr.shape) for name, arr in tensors.items()]
    else:
        config = load_config(args.config).model
        shapes, meta = [(s.name, s.shape) for s in parameter_layout(config)], {}
    kinds = {s.name: s.trainable for s in parameter_layout(config)}
    print("config:")
    for key, value in config.to_dict().items():
        print(f"  {key} = {_format(value)}")
    for key, value in sorted(meta.items()):
        print(f"  meta.{key} = {value}")
    print(f"fused_width = {config.fused_width}")
    for name, shape in stage_shapes(config, config.input_shape):
        print(f"  {name}: {'x'.join(map(str, shape))}")
    print("parameters:")
    trainable = frozen = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        flag = "trainable" if kinds.get(name, True) else "buffer"
        trainable, frozen = (trainable + count, frozen) if flag == "trainable" else (trainable, frozen + count)
        print(f"  {name:<40} {'x'.join(map(str, shape)):<16} {count:>10} {flag}")
    print(f"tensors = {len(shapes)}")
    print(f"trainable_parameters = {trainable}")
    print(f"buffer_values = {frozen}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volnet", description=__doc__.split("\n", 1)[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, epochs=False):
        p.add_argument("--config", help="config file or preset name (synth_tiny, paper)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--deterministic", action="store_true")
        if epochs:
            p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", help="fit on split A (and B when crossed), write histories, checkpoints, reports")
    common(p, epochs=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="inference pass over one split of a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="manifest CSV; defaults to the config's data source")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcam", help="Grad-CAM heatmap of one volume")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help=".nii or .vol file")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--class", dest="target_class", type=int, default=1)
    p.add_argument("--attended", action="store_true", help="use attention-scaled maps instead of raw activations")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("synth-gen", help="write a synthetic dataset with manifest")
    common(p)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("inspect", help="print config, stage shapes and parameter namespace")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        deterministic = getattr(args, "deterministic", False)
        with _thread_limit(deterministic):
            return args.func(args)
    except TrainingDivergedError as exc:
        print(f"volnet: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"volnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, VolnetError, OSError) as exc:
        print(f"volnet: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
