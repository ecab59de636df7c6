"""Operator surface: one entry point with gen-data / train / eval / infer /
diff-report subcommands, driven by a validated configuration tree
(defaults < config file < flags) with per-key provenance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, MapUpdateError
from .evaluation import EvalConfig, evaluate_dataset
from .map_model import read_tile, write_change_records, write_tile
from .model_core import ModelConfig, load_checkpoint
from .synth_world import SceneConfig, build_dataset, load_manifest
from .training import TrainConfig, load_train_samples, train
from .update_engine import InferenceConfig, infer, render_diff_panels

ENV_CONFIG = "MAPUPDATE_CONFIG"

SECTIONS: dict[str, type] = {
    "scene": SceneConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "inference": InferenceConfig,
    "eval": EvalConfig,
}


# ---------------------------------------------------------------------------
# Config tree: flatten dataclasses to dotted keys, merge file + flag overrides
# ---------------------------------------------------------------------------

def _default_tree(cls) -> dict:
    obj = cls()
    out = {}
    for f in dataclasses.fields(cls):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = _default_tree(value.__class__)
        else:
            out[f.name] = value
    return out


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def _parse_flag_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        elem = default[0] if default else 0.0
        cast = int if isinstance(elem, int) else float
        return tuple(cast(part) for part in raw.split(","))
    return raw


def _build_dataclass(cls, tree: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        value = tree[f.name]
        if isinstance(value, dict):
            default = getattr(cls(), f.name)
            kwargs[f.name] = _build_dataclass(default.__class__, value)
        elif isinstance(getattr(cls(), f.name), tuple):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


@dataclasses.dataclass
class RunConfig:
    scene: SceneConfig
    model: ModelConfig
    train: TrainConfig
    inference: InferenceConfig
    eval: EvalConfig
    provenance: dict

    def check_consistency(self) -> None:
        r = self.scene.raster
        if r.width_px != r.height_px:
            raise ConfigError("scene.raster must be square to feed the model")
        if self.model.image_size != r.width_px:
            raise ConfigError(f"model.image_size {self.model.image_size} != "
                              f"scene.raster.width_px {r.width_px}")
        if abs(self.model.pixels_per_meter - r.pixels_per_meter) > 1e-9:
            raise ConfigError("model.pixels_per_meter != scene.raster.pixels_per_meter")


def default_config_tree() -> dict:
    return {name: _default_tree(cls) for name, cls in SECTIONS.items()}


def load_run_config(config_path: str | None, flag_values: dict[str, str | None]) -> RunConfig:
    """Merge defaults, an optional JSON config file, and flag overrides.

    Unknown keys are errors; provenance records where each key came from.
    """
    tree = default_config_tree()
    flat_defaults = _flatten(tree)
    provenance = {key: "default" for key in flat_defaults}

    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                file_tree = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
        for dotted, value in _flatten(file_tree).items():
            if dotted not in flat_defaults:
                raise ConfigError(f"unknown config key {dotted!r} in {config_path}")
            if isinstance(flat_defaults[dotted], tuple):
                value = tuple(value)
            _set_dotted(tree, dotted, value)
            provenance[dotted] = "file"

    for dotted, raw in flag_values.items():
        if raw is None:
            continue
        value = _parse_flag_value(raw, flat_defaults[dotted])
        _set_dotted(tree, dotted, value)
        provenance[dotted] = "flag"

    try:
        sections = {name: _build_dataclass(cls, tree[name]) for name, cls in SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return RunConfig(provenance=provenance, **sections)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_arguments(parser: argparse.ArgumentParser) -> list[str]:
    parser.add_argument("--config", default=None,
                        help=f"JSON config file (default from ${ENV_CONFIG})")
    keys = []
    for dotted, default in sorted(_flatten(default_config_tree()).items()):
        parser.add_argument(f"--{dotted}", default=None, metavar="V", dest=dotted,
                            help=f"override (default: {default})")
        keys.append(dotted)
    return keys


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mapupdate",
                     description="Lane-level map updating on synthetic BEV scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", required=True, type=int, help="number of sample pairs")
    p.add_argument("--split-ratio", default="8,1,1", help="train,val,test ratio")
    _add_config_arguments(p)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    _add_config_arguments(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--cheat", action="store_true",
                   help="score ground truth against itself (harness self-test)")
    _add_config_arguments(p)

    p = sub.add_parser("infer", help="update one tile from an image + historical map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="BEV PNG")
    p.add_argument("--historical", required=True, help="historical tile JSONL")
    p.add_argument("--out", required=True)
    _add_config_arguments(p)

    p = sub.add_parser("diff-report", help="infer plus a change-summary report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--historical", required=True)
    p.add_argument("--out", required=True)
    _add_config_arguments(p)
    return parser


def _run_config_from_args(args: argparse.Namespace) -> RunConfig:
    config_path = args.config or os.environ.get(ENV_CONFIG) or None
    flat_keys = _flatten(default_config_tree()).keys()
    flags = {key: vars(args).get(key) for key in flat_keys}
    return load_run_config(config_path, flags)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _run_config_from_args(args)
    ratio = tuple(int(x) for x in args.split_ratio.split(","))
    if len(ratio) != 3:
        raise ConfigError("--split-ratio must be three comma-separated integers")
    manifest = build_dataset(cfg.scene, args.count, args.out, ratio)
    counts = {split: sum(1 for s in manifest["samples"] if s["split"] == split)
              for split in ("train", "val", "test")}
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"),
                      "count": manifest["count"], "splits": counts}))
    return 0


def _check_dataset_model(manifest: dict, model_cfg: ModelConfig) -> None:
    raster = manifest["scene_config"]["raster"]
    if raster["width_px"] != model_cfg.image_size or raster["height_px"] != model_cfg.image_size:
        raise ConfigError(f"dataset raster {raster['width_px']}x{raster['height_px']} does not "
                          f"match model.image_size {model_cfg.image_size}")
    if abs(raster["pixels_per_meter"] - model_cfg.pixels_per_meter) > 1e-9:
        raise ConfigError("dataset pixels_per_meter does not match model.pixels_per_meter")


def cmd_train(args) -> int:
    cfg = _run_config_from_args(args)
    if not (Path(args.dataset) / "manifest.json").exists():
        raise ConfigError(f"dataset manifest not found under {args.dataset}")
    manifest = load_manifest(args.dataset)
    _check_dataset_model(manifest, cfg.model)
    samples = load_train_samples(args.dataset, cfg.model, "train")
    result = train(samples, cfg.model, cfg.train, args.out)
    print(json.dumps({"final_checkpoint": str(result.final_checkpoint),
                      "best_checkpoint": str(result.best_checkpoint),
                      "log": str(result.log_path), "steps": cfg.train.steps}))
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config_from_args(args)
    if not (Path(args.dataset) / "manifest.json").exists():
        raise ConfigError(f"dataset manifest not found under {args.dataset}")
    if not args.cheat and args.checkpoint is None:
        raise ConfigError("--checkpoint is required unless --cheat is given")
    report = evaluate_dataset(args.checkpoint, args.dataset, args.split, args.out,
                              cfg.eval, cfg.inference, cheat=args.cheat)
    print(json.dumps({"r_at_p": report.r_at_p, "p_u": report.p_u, "r_u": report.r_u,
                      "evaluated": report.evaluated, "empty": report.empty}))
    return 0


def _run_infer(args):
    cfg = _run_config_from_args(args)
    model, _ = load_checkpoint(args.checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB"))
    historical = read_tile(args.historical)
    result = infer(image, historical, model, cfg.inference)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tile(result.updated, out / "updated.jsonl")
    write_change_records(result.changes, out / "changes.json")
    panels = render_diff_panels(historical, image, result.updated, result.changes)
    Image.fromarray(panels).save(out / "diff.png", format="PNG")
    return cfg, result, out


def cmd_infer(args) -> int:
    _, result, out = _run_infer(args)
    print(json.dumps({"out": str(out), "instances": len(result.updated.instances),
                      "changes": sum(1 for r in result.changes if r.kind != "no_change")}))
    return 0


def cmd_diff_report(args) -> int:
    _, result, out = _run_infer(args)
    kinds = {"no_change": 0, "style_change": 0, "addition": 0, "deletion": 0}
    for rec in result.changes:
        kinds[rec.kind] += 1
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump({"change_counts": kinds,
                   "instances": len(result.updated.instances)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"out": str(out), "change_counts": kinds}))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "diff-report": cmd_diff_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"mapupdate: config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"mapupdate: config error: {exc}", file=sys.stderr)
        return 1
    except MapUpdateError as exc:
        print(f"mapupdate: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mapupdate: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
