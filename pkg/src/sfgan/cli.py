"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``SFGAN_OUTPUT_ROOT`` sets the default output root (``./sfgan-out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import dataset, evaluation, formats, synth, training, viz
from .errors import ConfigError, SceneFlowError
from .networks import load_checkpoint, read_checkpoint_meta
from .types import CameraRig, pack_input, pack_target

log = logging.getLogger("sfgan")

ENV_OUTPUT_ROOT = "SFGAN_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "sfgan-out"))


def load_config_doc(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    try:
        doc = yaml.safe_load(text) if path.suffix.lower() in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return doc


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _gen_config(doc) -> synth.GenerationConfig:
    unknown = set(doc) - set(synth.GenerationConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown generation field(s): {', '.join(sorted(unknown))}")
    return synth.GenerationConfig(**doc)


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _gen_config(load_config_doc(args.config))
    if args.print_config:
        return _emit(asdict(cfg))
    out = Path(args.out or output_root() / "data")
    index = synth.generate_dataset(args.n, args.seed, out, cfg)
    print(f"wrote {len(index)} samples to {out / cfg.subset / cfg.split}")


def _train_config(args) -> training.TrainConfig:
    doc = load_config_doc(args.config)
    for key in ("max_steps", "seed", "learning_rate", "lambda_adv"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    return training.TrainConfig.from_dict(doc)


def _index(args, split=None, subset=None):
    root = _require(args.data, "dataset root")
    return dataset.build_index(root, split or args.split, subset or args.subset)


def cmd_train(args):
    cfg = _train_config(args)
    if args.print_config:
        return _emit(cfg.to_dict())
    out = Path(args.out or output_root() / "train")
    out.mkdir(parents=True, exist_ok=True)
    cfg.log_path = str(out / "train_log.jsonl")
    Path(cfg.log_path).write_text("")
    if cfg.checkpoint_every and not cfg.checkpoint_dir:
        cfg.checkpoint_dir = str(out / "checkpoints")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    index = _index(args)
    if len(index) == 0:
        raise SceneFlowError("training set is empty")
    state, hist = training.train(cfg, index)
    path = training.save_state(state, out / "final.npz")
    last = hist[-1].to_json() if hist else "{}"
    print(f"trained {state.step} steps; checkpoint {path}; last record {last}")


def _predictor(args):
    if args.predictor == "gt":
        return evaluation.ground_truth_predictor, "ground-truth"
    if args.predictor == "zero":
        return evaluation.zero_predictor, "zero"
    if not args.checkpoint:
        raise UsageError("--checkpoint is required with --predictor generator")
    nets, meta, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    return nets["generator"], args.tag or Path(args.checkpoint).stem


def cmd_evaluate(args):
    predict, tag = _predictor(args)
    reports = []
    for subset in args.subsets.split(","):
        index = _index(args, subset=subset)
        reports.append(evaluation.evaluate(predict, index, tag))
    report = evaluation.merge_reports(reports)
    out = Path(args.out or output_root() / "eval")
    evaluation.write_report(report, out)
    print(evaluation.render_table(report))


def _sample(args):
    index = _index(args)
    for rec in index:
        if rec.id == args.sample:
            return rec
    raise UsageError(f"sample {args.sample!r} not in {args.data} ({args.subset}/{args.split})")


def _predict_one(args, rec):
    quad, gt = dataset.load_sample(rec)
    predict, _ = _predictor(args)
    if isinstance(predict, evaluation.ParameterSet):
        predict = evaluation.GeneratorPredictor(predict)
    return predict(pack_input(quad), rec), pack_target(gt)


def cmd_reconstruct(args):
    rec = _sample(args)
    rig = dataset.load_rig(rec)
    if args.focal is not None:
        rig = CameraRig(args.focal, (args.cx, args.cy), args.baseline)
    if rig is None:
        raise UsageError("no scene.json for this sample; pass --focal/--cx/--cy/--baseline")
    pred, _ = _predict_one(args, rec)
    cloud = evaluation.reconstruct_point_flow(pred, rig)
    out = Path(args.out or output_root() / f"{rec.id}_pointflow.xyz")
    out.parent.mkdir(parents=True, exist_ok=True)
    cloud.save_xyz(out)
    stats = evaluation.projection_consistency_check(pred, rig)
    print(f"wrote {int(cloud.mask.sum())} points to {out}; reprojection residual {json.dumps(stats)}")


def cmd_visualize(args):
    rec = _sample(args)
    pred, gt = _predict_one(args, rec)
    out = Path(args.out or output_root() / f"vis_{rec.id}")
    paths = viz.render_panels(pred, gt, out)
    print("\n".join(str(p) for p in paths))


def cmd_ablate_bn(args):
    cfg = _train_config(args)
    if args.print_config:
        return _emit(cfg.to_dict())
    out = Path(args.out or output_root() / "ablate_bn")
    out.mkdir(parents=True, exist_ok=True)
    index = _index(args)
    curves = training.run_bn_ablation(cfg, index, out / "curves.json")
    viz.plot_curves(curves, out / "curves.png", title="batch-norm ablation")
    print(f"wrote {out / 'curves.json'} and {out / 'curves.png'}")
    for k, ys in curves.items():
        print(f"{k}: first {ys[0]:.4f} last {ys[-1]:.4f}")


def _stats(arr) -> dict:
    arr = np.asarray(arr)
    finite = arr[np.isfinite(arr)]
    return {
        "min": float(finite.min()) if finite.size else None,
        "max": float(finite.max()) if finite.size else None,
        "mean": float(finite.mean()) if finite.size else None,
        "nonfinite": int(arr.size - finite.size),
    }


def inspect_file(path) -> list[tuple[str, object]]:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        hdr = formats.sniff_header(path)
        img = formats.read_pfm(path.read_bytes())
        s = _stats(img.data)
        return [
            ("format", "pfm"),
            ("magic", hdr["magic"]),
            ("dims", f"{hdr['width']}x{hdr['height']}"),
            ("channels", img.channels),
            ("scale", hdr["scale"]),
            ("endianness", "little" if hdr["scale"] < 0 else "big"),
            *s.items(),
        ]
    if suffix == ".flo":
        flow = formats.read_flo(path.read_bytes())
        uv = flow.as_array()
        return [
            ("format", "flo"),
            ("dims", f"{flow.u.width}x{flow.u.height}"),
            *((f"u_{k}", v) for k, v in _stats(uv[0]).items()),
            *((f"v_{k}", v) for k, v in _stats(uv[1]).items()),
            ("epe_max", float(np.hypot(uv[0], uv[1]).max())),
        ]
    if suffix == ".npz":
        meta = read_checkpoint_meta(path)
        nets, _, aux = load_checkpoint(path)
        rows = [("format", "checkpoint"), ("version", meta["version"])]
        for role, ps in nets.items():
            rows.append((f"{role}_spec", json.dumps(meta["specs"][role], sort_keys=True)))
            rows.append((f"{role}_arrays", len(ps)))
            rows.append((f"{role}_learnable", ps.count()))
        rows.append(("step", meta.get("extra", {}).get("step")))
        rows.append(("aux_arrays", len(aux)))
        return rows
    img = formats.load_image(path)
    return [("format", suffix.lstrip(".")), ("dims", f"{img.width}x{img.height}"), ("channels", img.channels), *_stats(img.data).items()]


def cmd_inspect(args):
    for key, val in inspect_file(_require(args.path, "file")):
        print(f"{key}: {val}")


# -- parser -----------------------------------------------------------------

def _data_args(p, split="train"):
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--subset", default="synthetic", choices=dataset.SUBSETS)
    p.add_argument("--split", default=split, choices=dataset.SPLITS)


def _predictor_args(p):
    p.add_argument("--predictor", default="generator", choices=("generator", "gt", "zero"))
    p.add_argument("--checkpoint", help="checkpoint (.npz) holding the generator")
    p.add_argument("--tag", help="model tag for the report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfgan", description="Adversarial scene-flow estimation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (
        ("train", cmd_train, "alternating adversarial training"),
        ("ablate-bn", cmd_ablate_bn, "paired runs with and without batch-norm"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data")
        p.add_argument("--subset", default="synthetic", choices=dataset.SUBSETS)
        p.add_argument("--split", default="train", choices=dataset.SPLITS)
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--lambda-adv", dest="lambda_adv", type=float)
        p.add_argument("--print-config", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="per-subset error report (flow EPE, d_t, d_t1)")
    p.add_argument("--data", required=True)
    p.add_argument("--subsets", default="synthetic", help="comma-separated subsets, e.g. A,B,C")
    p.add_argument("--split", default="test", choices=dataset.SPLITS)
    p.add_argument("--out")
    _predictor_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", help="export 3D points and motion for one sample")
    _data_args(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--out")
    p.add_argument("--focal", type=float)
    p.add_argument("--cx", type=float, default=0.0)
    p.add_argument("--cy", type=float, default=0.0)
    p.add_argument("--baseline", type=float, default=1.0)
    _predictor_args(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("visualize", help="flow/disparity panels for one sample")
    _data_args(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--out")
    _predictor_args(p)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("inspect", help="header and statistics of a PFM, .flo, image or checkpoint")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def _fail(code, exc):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("train", "ablate-bn") and not args.print_config and not args.data:
        parser.error(f"{args.command}: --data is required")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(2, exc)
    except (SceneFlowError, OSError, ValueError, KeyError) as exc:
        return _fail(1, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
