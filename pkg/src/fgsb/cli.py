"""Command line entry point.

Subcommands: make-phantom, prepare, train, synthesize, evaluate, ablate.

Configuration is layered: built-in defaults < ``--config`` YAML < environment
variables < explicit flags. Environment overrides use the ``FGSB_`` prefix
with ``__`` between nesting levels, e.g. ``FGSB_TRAIN__EPOCHS=3`` or
``FGSB_TRAIN__WEIGHTS__LAMBDA_REC=50``; values are parsed as YAML scalars.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml
from pydantic import Field, ValidationError

from .config import StrictModel
from .dataset import DatasetManifest, build_manifest, generate_phantom_dataset
from .inference import InferenceConfig, SynthesisError, synthesize_stack
from .metrics import evaluate, to_unit
from .models import count_parameters
from .slice_io import SliceFormatError, read_slice, write_slice
from .trainer import TrainConfig, apply_ablation, load_bundle, train

log = logging.getLogger("fgsb")

ENV_PREFIX = "FGSB_"
SLICE_SUFFIXES = (".fgsb", ".png", ".npy")
ABLATION_VARIANTS = ("full", "no_sb", "no_ssl_d", "no_noise", "nfe1", "nfe3")


class ConfigError(ValueError):
    pass


class DataConfig(StrictModel):
    manifest: str | None = None


class RunConfig(StrictModel):
    out: str = "runs/fgsb"
    device: str = "cpu"
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)


# ---------------------------------------------------------------------------
# config resolution


def _set_path(tree: dict, keys: Sequence[str], value) -> None:
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{'.'.join(keys)}: {k} is not a section")
        node = nxt
    node[keys[-1]] = value


def env_overrides(environ: Mapping[str, str]) -> list[tuple[list[str], object]]:
    out = []
    for key in sorted(environ):
        if key.startswith(ENV_PREFIX) and len(key) > len(ENV_PREFIX):
            path = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
            out.append((path, yaml.safe_load(environ[key])))
    return out


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def resolve_config(path: str | None = None, environ: Mapping[str, str] | None = None,
                   seed: int | None = None, device: str | None = None, out: str | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for keys, value in env_overrides(os.environ if environ is None else environ):
        _set_path(raw, keys, value)
    if seed is not None:
        _set_path(raw, ["train", "seed"], seed)
        _set_path(raw, ["inference", "seed"], seed)
    if device is not None:
        raw["device"] = device
    if out is not None:
        raw["out"] = out
    return RunConfig.model_validate(raw)


def dump_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_resolved(cfg: RunConfig, run_dir: Path) -> Path:
    return dump_json(cfg.model_dump(mode="json"), run_dir / "resolved_config.json")


# ---------------------------------------------------------------------------
# slice collections


def _is_manifest(path: Path) -> bool:
    return path.suffix == ".jsonl" or (path.is_dir() and (path / "manifest.jsonl").exists())


def load_slices(path: str | Path, key: str = "source", split: str | None = "test") -> dict[str, np.ndarray]:
    """Named slices from a manifest (one field of one split) or a directory of slice files."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    if _is_manifest(path):
        man = DatasetManifest.load(path)
        pairs = man.pairs if split is None else man.subset(split)
        out = {}
        for p in pairs:
            arr = getattr(p, key)
            if arr is not None:
                out[f"{p.subject_id}_{p.slice_index:04d}"] = arr
        return out
    files = sorted(f for f in path.iterdir() if f.suffix in SLICE_SUFFIXES)
    out = {}
    for f in files:
        out[f.stem] = np.load(f).astype(np.float32) if f.suffix == ".npy" else read_slice(f)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_make_phantom(args) -> int:
    out = Path(args.out)
    man = generate_phantom_dataset(args.seed, args.subjects, args.slices, (args.canvas, args.canvas),
                                   args.lesion_rate, n_test_subjects=args.test_subjects)
    path = man.save(out, fmt=args.format)
    dump_json({"seed": args.seed, "subjects": args.subjects, "slices": args.slices, "canvas": args.canvas,
               "lesion_rate": args.lesion_rate, "test_subjects": args.test_subjects}, out / "phantom.json")
    print(path)
    return 0


def cmd_prepare(args) -> int:
    """Each subject directory holds ``source/`` and ``target/`` (optionally ``mask/``) slices matched by name."""
    root = Path(args.input)
    subjects = {}
    for sub in sorted(d for d in root.iterdir() if d.is_dir()):
        src = load_slices(sub / "source", split=None)
        tgt = load_slices(sub / "target", split=None)
        msk = load_slices(sub / "mask", split=None) if (sub / "mask").is_dir() else {}
        missing = sorted(set(src) ^ set(tgt))
        if missing:
            raise ValueError(f"{sub.name}: unmatched slices {missing[:5]}")
        subjects[sub.name] = [(src[k], tgt[k], msk.get(k)) for k in sorted(src)]
    if not subjects:
        raise ValueError(f"no subject directories under {root}")
    unknown = set(args.test_subjects) - set(subjects)
    if unknown:
        raise ValueError(f"unknown test subjects {sorted(unknown)}")
    man = build_manifest(subjects, (args.canvas, args.canvas), test_subjects=args.test_subjects,
                         prior_threshold=args.prior_threshold, drop_background=not args.keep_background)
    print(man.save(args.out, fmt=args.format))
    return 0


def _manifest_for(cfg: RunConfig) -> DatasetManifest:
    if cfg.data.manifest is None:
        raise ConfigError("data.manifest is not set")
    return DatasetManifest.load(cfg.data.manifest)


def run_training(cfg: RunConfig, resume: bool = False) -> Path:
    from .plots import plot_loss_curves, read_metrics_stream

    man = _manifest_for(cfg)
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, run_dir)
    last = run_dir / "checkpoints" / "last.pt"
    trainer, _ = train(man, cfg.train, run_dir, resume=last if resume and last.exists() else None,
                       device=cfg.device)
    dump_json(count_parameters(trainer.bundle), run_dir / "parameters.json")
    records = read_metrics_stream(run_dir / "metrics.jsonl")
    if records:
        plot_loss_curves(records, run_dir / "loss_curves.png")
    return run_dir


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, seed=args.seed, device=args.device, out=args.out)
    if args.manifest:
        cfg = cfg.model_copy(update={"data": DataConfig(manifest=args.manifest)})
    print(json.dumps(cfg.model_dump(mode="json"), sort_keys=True))
    print(run_training(cfg, resume=args.resume))
    return 0


def run_synthesis(checkpoint, sources: dict[str, np.ndarray], out_dir: Path, nfe=None, tau=None, seed=0,
                  batch_size=8, device="cpu", fmt="fgsb") -> dict:
    bundle, tcfg = load_bundle(checkpoint, device=device)
    comp = apply_ablation(tcfg)
    icfg = InferenceConfig(nfe=comp.nfe if nfe is None else nfe, tau=comp.tau if tau is None else tau,
                           seed=seed, batch_size=batch_size)
    names = list(sources)
    preds = synthesize_stack([sources[n] for n in names], bundle, icfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, pred in zip(names, preds):
        write_slice(out_dir / f"{name}.{fmt}", np.clip(pred, -1.0, 1.0))
    record = {"checkpoint": str(checkpoint), "inference": icfg.model_dump(mode="json"), "slices": names}
    dump_json(record, out_dir / "synthesis.json")
    return record


def cmd_synthesize(args) -> int:
    sources = load_slices(args.input, key="source", split=args.split)
    if not sources:
        raise ValueError(f"no slices found in {args.input}")
    rec = run_synthesis(args.checkpoint, sources, Path(args.out), args.nfe, args.tau, args.seed or 0,
                        args.batch_size, args.device or "cpu", args.format)
    print(f"{len(rec['slices'])} slices -> {args.out}")
    return 0


def run_evaluation(preds: dict, refs: dict, out_dir: Path, masks: dict | None = None, sources: dict | None = None,
                   lesion_threshold: float = 0.8, grid_count: int = 8, metrics_stream=None, workers: int = 1) -> dict:
    from .plots import comparison_grid, plot_loss_curves, plot_per_slice, read_metrics_stream

    missing = sorted(set(refs) - set(preds))
    if missing:
        raise ValueError(f"{len(missing)} reference slices have no prediction, e.g. {missing[:3]}")
    names = sorted(refs)
    mask_list = None
    if masks:
        absent = [n for n in names if n not in masks]
        if absent:
            raise ValueError(f"no mask for {absent[:3]}")
        mask_list = [masks[n] for n in names]
    report = evaluate([preds[n] for n in names], [refs[n] for n in names], lesion_threshold, mask_list,
                      names=names, workers=workers)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    for n in names[:grid_count]:
        panels, titles = [], []
        if sources and n in sources:
            panels.append(sources[n]), titles.append("source")
        err = np.abs(to_unit(preds[n]) - to_unit(refs[n]))
        panels += [preds[n], refs[n], err]
        titles += ["synthesized", "reference", "|error|"]
        comparison_grid(panels, titles, out_dir / "comparisons" / f"{n}.png")
    plot_per_slice(report.rows, out_dir / "per_slice_metrics.png")
    if metrics_stream is not None and Path(metrics_stream).exists():
        plot_loss_curves(read_metrics_stream(metrics_stream), out_dir / "loss_curves.png")
    return report.aggregate()


def cmd_evaluate(args) -> int:
    preds = load_slices(args.pred, key="source", split=None)
    refs = load_slices(args.ref, key="target", split=args.split)
    masks = load_slices(args.mask, key="prior_mask", split=args.split) if args.mask else None
    sources = load_slices(args.source, key="source", split=args.split) if args.source else None
    agg = run_evaluation(preds, refs, Path(args.out), masks, sources, args.lesion_threshold, args.grid_count,
                         args.metrics_stream, args.workers)
    print(json.dumps(agg, sort_keys=True))
    return 0


def variant_config(base: RunConfig, name: str, root: Path) -> RunConfig:
    d = base.model_dump(mode="json")
    t = d["train"]
    if name == "no_sb":
        t["flags"]["no_sb"] = True
    elif name == "no_ssl_d":
        t["flags"]["no_ssl_d"] = True
    elif name == "no_noise":
        t["flags"]["no_noise"] = True
    elif name.startswith("nfe") and name[3:].isdigit():
        t["bridge"] = {"nfe": int(name[3:]), "tau": t["bridge"]["tau"]}
    elif name != "full":
        raise ConfigError(f"unknown ablation variant {name!r}; choose from {', '.join(ABLATION_VARIANTS)}")
    cfg = RunConfig.model_validate({**d, "out": str(root / name)})
    comp = apply_ablation(cfg.train)
    inf = cfg.inference.model_copy(update={"nfe": comp.nfe, "tau": comp.tau})
    return cfg.model_copy(update={"inference": inf})


def cmd_ablate(args) -> int:
    from .plots import plot_metric_bars

    base = resolve_config(args.config, seed=args.seed, device=args.device, out=args.out)
    if args.manifest:
        base = base.model_copy(update={"data": DataConfig(manifest=args.manifest)})
    root = Path(base.out)
    variants = args.variants or list(ABLATION_VARIANTS)
    cfgs = {v: variant_config(base, v, root) for v in variants}  # validate all before any training
    man = _manifest_for(base)
    test = {f"{p.subject_id}_{p.slice_index:04d}": p for p in man.subset("test")}
    summary = {}
    for name, cfg in cfgs.items():
        log.info("ablation variant %s", name)
        run_dir = run_training(cfg, resume=args.resume)
        if not test or args.no_eval:
            continue
        sources = {k: p.source for k, p in test.items()}
        run_synthesis(run_dir / "checkpoints" / "last.pt", sources, run_dir / "synth",
                      seed=cfg.inference.seed, batch_size=cfg.inference.batch_size, device=cfg.device)
        preds = load_slices(run_dir / "synth", split=None)
        agg = run_evaluation(preds, {k: p.target for k, p in test.items()}, run_dir / "eval",
                             sources=sources, lesion_threshold=args.lesion_threshold, grid_count=args.grid_count)
        summary[name] = {k: v["mean"] for k, v in agg.items()}
    if summary:
        dump_json(summary, root / "ablation.json")
        plot_metric_bars(summary, root / "ablation_metrics.png")
    print(json.dumps({"runs": [str(c.out) for c in cfgs.values()], "summary": summary}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", default=None, help="YAML run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--device", default=None)
    p.add_argument("--out", required=out_required, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgsb", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-phantom", help="write a synthetic paired cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--slices", type=int, default=20)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--lesion-rate", type=float, default=0.5)
    p.add_argument("--test-subjects", type=int, default=1)
    p.add_argument("--format", choices=("fgsb", "png"), default="fgsb")
    p.set_defaults(func=cmd_make_phantom)

    p = sub.add_parser("prepare", help="normalize and pad raw paired slices into a manifest")
    p.add_argument("--input", required=True, help="directory of subject folders")
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=256)
    p.add_argument("--test-subjects", nargs="*", default=[])
    p.add_argument("--prior-threshold", type=float, default=None)
    p.add_argument("--keep-background", action="store_true")
    p.add_argument("--format", choices=("fgsb", "png"), default="fgsb")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--manifest", default=None, help="overrides data.manifest")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last.pt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="translate source slices with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="slice directory or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", help="manifest split to read (ignored for directories)")
    p.add_argument("--nfe", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default=None)
    p.add_argument("--format", choices=("fgsb", "png"), default="fgsb")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True, help="slice directory or manifest (targets)")
    p.add_argument("--mask", default=None, help="lesion masks; default thresholds the reference")
    p.add_argument("--source", default=None, help="optional sources shown in the comparison grids")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--lesion-threshold", type=float, default=0.8)
    p.add_argument("--grid-count", type=int, default=8)
    p.add_argument("--metrics-stream", default=None, help="training metrics.jsonl to plot")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the ablation variants")
    _common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--variants", nargs="*", default=None, help=f"subset of {', '.join(ABLATION_VARIANTS)}")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--no-eval", action="store_true")
    p.add_argument("--lesion-threshold", type=float, default=0.8)
    p.add_argument("--grid-count", type=int, default=4)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as err:
        print(format_validation_error(err), file=sys.stderr)
        return 2
    except ConfigError as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, SliceFormatError, SynthesisError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
