"""Command-line entry point: ``depthmotion {synth,train,refine,eval,viz} --out DIR``.

Each command prints the fully-resolved config and writes it to
``<out>/config.ini``; rerunning with ``--config <out>/config.ini`` reproduces
every artifact byte for byte.

Exit codes: 0 success, 2 invalid config, 3 missing or malformed data,
4 numeric failure (non-finite loss or divergence guard).
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import fileio, losses, synthdata, viz
from .metrics import EvaluationError, depth_metrics
from .predictors import DirectModel, load_checkpoint, model_arrays, model_from_arrays, save_checkpoint
from .trainer import NumericError, fit, online_refine

log = logging.getLogger("depthmotion")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
COMMANDS = ("synth", "train", "refine", "eval", "viz")


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(_json_line(r) + "\n" for r in rows))


def _require(value: str, key: str) -> Path:
    if not value:
        raise cfgmod.ConfigError(f"{key} must be set for this command")
    return Path(value)


# -- commands ---------------------------------------------------------------

def _scene(cfg: cfgmod.RunConfig, rng: np.random.Generator, index: int) -> synthdata.SceneSpec:
    s = cfg.synth
    size = dict(width=s.width, height=s.height, fx=0.75 * s.width, texture_scale=s.texture_scale,
                texture_seed=cfg.run.seed + index)
    if s.scene == "static":
        spec = synthdata.static_scene(**size)
    elif s.scene == "lateral_object":
        spec = synthdata.lateral_object_scene(**size)
    elif s.scene == "follow":
        spec = synthdata.degenerate_follow_scene(**size)
    else:
        spec = synthdata.random_scene(rng, s.width, s.height, s.n_objects,
                                      None if s.background == "any" else s.background,
                                      texture_scale=s.texture_scale, translation=s.translation,
                                      rotation=s.rotation, object_speed=s.object_speed)
    return dataclasses.replace(spec, num_frames=s.num_frames)


def cmd_synth(cfg: cfgmod.RunConfig, out: Path) -> None:
    rng = np.random.default_rng(cfg.run.seed)
    for n in range(cfg.synth.num_sequences):
        try:
            spec = _scene(cfg, rng, n)
        except synthdata.SpecError as exc:
            raise cfgmod.ConfigError(f"cannot build scene {n}: {exc}") from exc
        fileio.write_sequence(out, n, spec)


def _load_dataset(root: Path):
    samples, gts = [], []
    for seq in fileio.sequence_dirs(root):
        s, g = fileio.load_windows(seq)
        samples.extend(s)
        gts.extend(g)
    return samples, gts


def cmd_train(cfg: cfgmod.RunConfig, out: Path) -> None:
    samples, _ = _load_dataset(_require(cfg.data.dataset, "data.dataset"))
    model = DirectModel(samples[0].k.shape, init_depth=cfg.run.init_depth, prior_init=cfg.run.prior_init)
    for s in samples:
        model.register_sample(s)
    try:
        trace = fit(samples, model, cfg.train_config(), cfg.loss_weights()).trace
    except NumericError as exc:
        _write_jsonl(out / "trace.jsonl", exc.trace)
        raise
    _write_jsonl(out / "trace.jsonl", trace)
    save_checkpoint(out / "model", model_arrays(model), {"samples": [s.name for s in samples]})


def _base_model(cfg: cfgmod.RunConfig, shape) -> DirectModel:
    if not cfg.data.checkpoint:
        return DirectModel(shape, init_depth=cfg.run.init_depth, prior_init=cfg.run.prior_init)
    path = Path(cfg.data.checkpoint)
    if not path.with_suffix(".json").is_file() or not path.with_suffix(".bin").is_file():
        raise fileio.DataError(f"checkpoint {path}.json/.bin not found")
    arrays, _ = load_checkpoint(path)
    model = model_from_arrays(arrays, init_depth=cfg.run.init_depth, prior_init=cfg.run.prior_init)
    if model.depth.shape != tuple(shape):
        raise fileio.DataError(f"checkpoint depth shape {model.depth.shape} != image shape {tuple(shape)}")
    return model


def cmd_refine(cfg: cfgmod.RunConfig, out: Path) -> None:
    root = _require(cfg.data.dataset, "data.dataset")
    tc = cfg.train_config()
    tc = dataclasses.replace(tc, refine_steps=tc.refine_steps if cfg.flags.enable_refinement else 0)
    rows = []
    base = None
    for seq in fileio.sequence_dirs(root):
        samples, gts = fileio.load_windows(seq)
        if base is None:
            base = _base_model(cfg, samples[0].k.shape)
        result = online_refine(samples, copy.deepcopy(base), tc, cfg.loss_weights())
        (out / seq.name).mkdir(parents=True, exist_ok=True)
        for s, (win, gt) in enumerate(zip(result.windows, gts)):
            fileio.write_pfm(out / seq.name / f"depth_{s + 1}.pfm", win.depth)
            m = depth_metrics(win.depth, gt, cfg=cfg.eval)
            rows.append({"sequence": seq.name, "frame": s + 1, "final_loss": win.losses[-1] if win.losses else None,
                         **m.as_dict()})
    _write_jsonl(out / "metrics.jsonl", rows)
    _write_json(out / "metrics.json", _summary(rows))


_METRIC_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")


def _summary(rows) -> dict:
    return {"count": len(rows), **{k: float(np.mean([r[k] for r in rows])) for k in _METRIC_KEYS}}


def _depth_files(root: Path) -> list[tuple[str, int, Path]]:
    found = []
    for seq in fileio.sequence_dirs(root):
        for p in seq.iterdir():
            m = re.fullmatch(r"depth_(\d+)\.pfm", p.name)
            if m:
                found.append((seq.name, int(m.group(1)), p))
    if not found:
        raise fileio.DataError(f"no depth_<k>.pfm files under {root}")
    return sorted(found, key=lambda t: (int(t[0][4:]), t[1]))


def cmd_eval(cfg: cfgmod.RunConfig, out: Path) -> None:
    preds = _require(cfg.data.predictions, "data.predictions")
    gt_root = _require(cfg.data.dataset, "data.dataset")
    rows = []
    for seq, k, path in _depth_files(preds):
        gt = fileio.read_pfm(gt_root / seq / f"depth_{k}.pfm")
        pred = fileio.read_pfm(path)
        try:
            m = depth_metrics(pred, gt, cfg=cfg.eval)
        except EvaluationError as exc:
            raise fileio.DataError(f"{seq}/depth_{k}.pfm: {exc}") from exc
        rows.append({"sequence": seq, "frame": k, **m.as_dict()})
    _write_jsonl(out / "metrics.jsonl", rows)
    _write_json(out / "metrics.json", _summary(rows))


def cmd_viz(cfg: cfgmod.RunConfig, out: Path) -> None:
    if not (cfg.data.predictions or cfg.data.dataset):
        raise cfgmod.ConfigError("data.predictions or data.dataset must be set for viz")
    src = Path(cfg.data.predictions or cfg.data.dataset)
    gt_root = Path(cfg.data.dataset) if cfg.data.dataset and cfg.data.predictions else None
    v = cfg.viz
    for seq, k, path in _depth_files(src):
        (out / seq).mkdir(parents=True, exist_ok=True)
        depth = fileio.read_pfm(path)
        fileio.write_png(out / seq / f"depth_{k}.png", viz.depth_heatmap(depth, v.near, v.far))
        if gt_root is not None:
            gt = fileio.read_pfm(gt_root / seq / f"depth_{k}.pfm")
            fileio.write_png(out / seq / f"error_{k}.png", viz.error_heatmap(depth, gt, v.max_error))


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "refine": cmd_refine, "eval": cmd_eval, "viz": cmd_viz}


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthmotion", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true", help="do not echo the resolved config")
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config, args.overrides)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = cfgmod.dump(cfg)
    if not args.quiet:
        sys.stdout.write(text)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(text)
        HANDLERS[args.command](cfg, out)
    except (cfgmod.ConfigError, losses.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (fileio.DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
