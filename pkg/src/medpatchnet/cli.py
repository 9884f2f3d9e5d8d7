"""Command-line entry point: ``generate``, ``train``, ``eval`` and ``explain``.

Every config-file key is also a flag (``peak_lr`` <-> ``--peak-lr``);
flags win over file values, and the effective configuration is written
next to each command's outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Type

import numpy as np

from . import backbone as bb
from . import kvconfig, netpbm
from .backbone import Backbone, BackboneConfig
from .data import ManifestError, SyntheticSpec, generate_splits, load_manifest, write_dataset
from .evaluation import METHODS, REPORT_SCHEMA, evaluate, saliency_maps
from .patches import PatchGridSpec, predict
from .saliency import SaliencyMap, ShiftSpec, render_overlay, save_map
from .tensor import NonFiniteError
from .training import TrainConfig, format_log_line, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


@dataclass(frozen=True)
class DatasetSize:
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_valid, self.n_test) < 0 or self.n_train + self.n_valid + self.n_test < 1:
            raise ValueError("split sizes must be >= 0 with at least one sample")


@dataclass(frozen=True)
class ModelSpec:
    patches_per_side: int = 8
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3


@dataclass(frozen=True)
class EvalSettings:
    method: str = "patch_raw"
    shift: Optional[int] = None
    bootstrap_n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}")
        if self.bootstrap_n < 0:
            raise ValueError("bootstrap_n must be >= 0")


@dataclass(frozen=True)
class ExplainSettings:
    method: str = "patch_raw"
    shift: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser, classes: Sequence[Type], skip: Sequence[str] = ()) -> None:
    seen = set(skip)
    for cls in classes:
        for f in dataclasses.fields(cls):
            if f.name in seen:
                continue
            seen.add(f.name)
            parser.add_argument(_flag(f.name), dest=f.name, default=None, metavar="VALUE", help=f"config key {f.name}")


def _resolve(classes: Sequence[Type], args: argparse.Namespace, config_path: Optional[str]):
    """Split file values and flag overrides across ``classes`` (first owner wins)."""
    values: Dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        values.update(kvconfig.parse_kv(path.read_text()))
    for cls in classes:
        for f in dataclasses.fields(cls):
            v = getattr(args, f.name, None)
            if v is not None:
                values[f.name] = v
    owners = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            owners.setdefault(f.name, cls)
    unknown = sorted(set(values) - set(owners))
    if unknown:
        raise kvconfig.ConfigError(f"unknown config key(s): {', '.join(unknown)}; valid keys: {', '.join(owners)}")
    out = []
    for cls in classes:
        mine = {k: v for k, v in values.items() if owners[k] is cls}
        out.append(kvconfig.build(cls, mine))
    return out


def _prepare_out(path: Path, force: bool, is_dir: bool) -> None:
    if path.exists():
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        if is_dir and path.is_dir():
            shutil.rmtree(path)
        elif not is_dir:
            path.unlink()
    if is_dir:
        path.mkdir(parents=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} {path} does not exist")
    return path


def _dump_configs(path: Path, *configs) -> None:
    path.write_text("".join(kvconfig.dump(c) for c in configs))


def _load_model(path: Path):
    model, block = bb.load_checkpoint(_require(path, "checkpoint"))
    grid = block.get("patch_grid")
    if not grid:
        raise DataError(f"checkpoint {path} has no patch grid")
    return model, PatchGridSpec(grid["image_side"], grid["patches_per_side"]), block.get("metadata", {})


# ------------------------------------------------------------------- commands
def cmd_generate(args) -> int:
    spec, size = _resolve([SyntheticSpec, DatasetSize], args, args.config)
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    samples = generate_splits(spec, size.n_train, size.n_valid, size.n_test, size.seed)
    manifest = write_dataset(samples, out, spec.class_names)
    _dump_configs(out / "config.txt", spec, size)
    prevalence = load_manifest(manifest).prevalence()
    print(f"wrote {len(samples)} samples to {manifest}")
    for name, p in prevalence.items():
        print(f"  {name}: prevalence {p:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, model_spec = _resolve([TrainConfig, ModelSpec], args, args.config)
    ds = load_manifest(_require(Path(args.manifest), "manifest"))
    train_samples = ds.split("train")
    if not train_samples:
        raise DataError("manifest has no train split")
    S = train_samples[0].image.shape[0]
    try:
        grid = PatchGridSpec(S, model_spec.patches_per_side)
        bcfg = BackboneConfig(ds.num_classes, grid.patch_side, model_spec.stage_channels, model_spec.kernel_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=False)
    log_path = out.with_name(out.name + ".log.jsonl")
    images = np.stack([s.image for s in train_samples])
    labels = np.stack([s.labels for s in train_samples]).astype(np.float64)
    valid_samples = ds.split("valid")
    valid = None
    if valid_samples:
        valid = (np.stack([s.image for s in valid_samples]), np.stack([s.labels for s in valid_samples]).astype(np.float64))
    lines: List[str] = []

    def on_log(entry):
        if not math.isfinite(entry["loss"]):
            raise NumericError(f"non-finite loss at epoch {entry['epoch']}")
        line = format_log_line(entry)
        lines.append(line)
        print(line, flush=True)

    model = Backbone.build(bcfg, cfg.seed)
    result = train(model, images, labels, grid, cfg, valid=valid, on_log=on_log)
    meta = {"class_names": ds.class_names, "train_config": dataclasses.asdict(cfg), "final_loss": result.final_loss}
    bb.save(result.model, out, grid=grid.to_dict(), metadata=meta)
    log_path.write_text("".join(line + "\n" for line in lines))
    _dump_configs(out.with_name(out.name + ".config.txt"), cfg, model_spec)
    return EXIT_OK


def cmd_eval(args) -> int:
    (settings,) = _resolve([EvalSettings], args, args.config)
    ds = load_manifest(_require(Path(args.manifest), "manifest"))
    model, grid, meta = _load_model(Path(args.checkpoint))
    if model.config.num_classes != ds.num_classes:
        raise DataError(f"checkpoint has {model.config.num_classes} classes, manifest has {ds.num_classes}")
    valid, test = ds.split("valid"), ds.split("test")
    if not valid or not test:
        raise DataError("evaluation needs valid and test splits in the manifest")
    shift = _shift(settings.shift, grid)
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    report = evaluate(model, grid, valid, test, ds.class_names, settings.method, shift, settings.bootstrap_n, settings.seed)
    text = report.to_json()
    if "NaN" in text or "Infinity" in text:
        raise NumericError("report contains non-finite values")
    (out / "report.json").write_text(text)
    (out / "report.txt").write_text(report.format_table())
    (out / "report.schema.json").write_text(json.dumps(REPORT_SCHEMA, indent=2, sort_keys=True) + "\n")
    _dump_configs(out / "config.txt", settings)
    print(report.format_table(), end="")
    return EXIT_OK


def _shift(offset: Optional[int], grid: PatchGridSpec) -> ShiftSpec:
    shift = ShiftSpec(grid.patch_side if offset is None else offset)
    try:
        shift.validate(grid.patch_side)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return shift


def cmd_explain(args) -> int:
    (settings,) = _resolve([ExplainSettings], args, args.config)
    model, grid, meta = _load_model(Path(args.checkpoint))
    names = meta.get("class_names") or [str(c) for c in range(model.config.num_classes)]
    if args.class_name not in names:
        raise UsageError(f"unknown class {args.class_name!r}; valid classes: {', '.join(names)}")
    c = names.index(args.class_name)
    try:
        image = netpbm.read_pgm(_require(Path(args.image), "image"))
    except netpbm.NetpbmError as exc:
        raise DataError(str(exc)) from exc
    if image.shape != (grid.image_side, grid.image_side):
        raise DataError(f"image is {image.shape[1]}x{image.shape[0]}, model expects {grid.image_side}x{grid.image_side}")
    shift = _shift(settings.shift, grid)
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    values = saliency_maps(image[None], model, grid, settings.method, shift)[0, c]
    kind = {"patch_raw": "raw_patch", "patch_scaled": "scaled_patch", "gradcam": "gradcam"}[settings.method]
    smap = SaliencyMap(values, c, kind)
    render_overlay(image, smap, out / "overlay.ppm")
    save_map(smap, out / "map.pgm")
    g = predict(image, model, grid)
    if not (np.isfinite(g.logits).all() and np.isfinite(values).all()):
        raise NumericError("non-finite logits or saliency values")
    info = {
        "class_names": names,
        "class": args.class_name,
        "method": settings.method,
        "shift_offset": shift.offset,
        "Z": g.global_logits.tolist(),
        "y_hat": g.probabilities.tolist(),
        "patch_logits": g.logits.tolist(),
    }
    (out / "explain.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _dump_configs(out / "config.txt", settings)
    print(f"{args.class_name}: Z = {g.global_logits[c]:.6f}, y_hat = {g.probabilities[c]:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="medpatchnet", description="Patch-decomposed classifier: data, training, evaluation, explanation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default 1)")

    g = sub.add_parser("generate", help="write a synthetic dataset (PGM files + manifest.csv)")
    g.add_argument("--out", required=True, help="output directory")
    common(g)
    _add_config_flags(g, [SyntheticSpec, DatasetSize])
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a patch model from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    common(t)
    _add_config_flags(t, [TrainConfig, ModelSpec])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="classification + localization report with bootstrap CIs")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="output directory")
    common(e)
    _add_config_flags(e, [EvalSettings])
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="saliency overlay and patch logits for one image")
    x.add_argument("--image", required=True, help="PGM image")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--class", dest="class_name", required=True, help="class name")
    x.add_argument("--out", required=True, help="output directory")
    common(x)
    _add_config_flags(x, [ExplainSettings])
    x.set_defaults(func=cmd_explain)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.threads < 1:
        print("usage error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, kvconfig.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError, netpbm.NetpbmError, bb.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
