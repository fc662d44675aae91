"""Command-line entry point: data, edge DB, training, generation, evaluation.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric error. Every command is a
pure function of its arguments, config file and input files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import RunFlags, apply_flags
from .edgedb import EdgeDBError, RetrievalError, build_index, compose, retrieve_topk
from .evalkit import EvalConfigError, FrechetError, evaluate
from .fgcontrol import BranchConfig, ControlBranch
from .guidance import GuidanceError
from .layout import Layout
from .spectral import HighPassSpec, SpectralConsistencyError, freq_gate, highpass
from .synthdata import (DEFAULT_PALETTE, ClassPalette, SceneConfig, box_edges, gen_dataset, load_dataset,
                        load_gray, save_gray)
from .toydiffusion import (EDGE_PREFIX, SCENE_PREFIX, Denoiser, DenoiserConfig, PromptSpec, SamplerConfig,
                           SamplingError, TrainConfig, TrainingError, fit, img2img, sample)
from .weights import weights_hash


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


# ---------------------------------------------------------------- config


DEFAULT_CONFIG = {
    "seed": 0,
    "sampler": asdict(SamplerConfig()),
    "flags": asdict(RunFlags()),
    "highpass": {"d": 16, "tau": 0.05},
    "train": asdict(TrainConfig()),
    "eval": {"mode": "hbb"},
}


def load_config(path) -> dict:
    """Defaults deep-merged with a JSON file; unknown keys are rejected."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path}: {exc}") from exc
    for key, val in user.items():
        if key not in cfg:
            raise UsageError(f"config {path}: unknown key {key!r}")
        if isinstance(cfg[key], dict):
            bad = set(val) - set(cfg[key])
            if bad:
                raise UsageError(f"config {path}: unknown keys in {key!r}: {sorted(bad)}")
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def _override(cfg: dict, args) -> dict:
    for name in ("guidance", "masked_attention", "fgcontrol", "spatial_gate", "highpass"):
        v = getattr(args, name, None)
        if v is not None:
            cfg["flags"][name] = v
    for name in ("steps", "strength", "guided_fraction"):
        v = getattr(args, name, None)
        if v is not None:
            cfg["sampler"][name] = v
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        cfg["sampler"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    for name in ("train_steps", "lr", "batch_size"):
        v = getattr(args, name, None)
        if v is not None:
            cfg["train"]["steps" if name == "train_steps" else name] = v
    if getattr(args, "mode", None) in ("hbb", "obb"):
        cfg["eval"]["mode"] = args.mode
    return cfg


def _sampler(cfg: dict) -> SamplerConfig:
    return SamplerConfig(**cfg["sampler"])


def _dump(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _palette_for(root) -> ClassPalette:
    p = Path(root) / "palette.json" if root is not None else None
    if p is not None and p.exists():
        return ClassPalette.from_json(json.loads(p.read_text()))
    return DEFAULT_PALETTE


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def _load_model(path, what: str) -> Denoiser:
    if path is None:
        raise DataError(f"{what} weights are required")
    stem = Path(path).with_suffix("")
    if not stem.with_suffix(".json").exists() or not stem.with_suffix(".bin").exists():
        raise DataError(f"{what} weights not found: {path}")
    return Denoiser.load(stem)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    manifest = gen_dataset(args.n, args.seed, args.out, SceneConfig(oriented=args.oriented))
    print(manifest)
    return 0


def cmd_edb(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise DataError(f"edge database directory not found: {root}")
    index = build_index(root)
    if args.action == "build":
        if len(index) == 0:
            print(f"warning: no edge records under {root}", file=sys.stderr)
        recs = [{"id": r.id, "class": r.class_name, "aspect_ratio": r.aspect_ratio,
                 "shape": list(r.edge.shape)} for r in sorted(index.records.values(), key=lambda r: r.id)]
        summary = {"n_records": len(recs),
                   "classes": {c: len(v) for c, v in sorted(index.by_class.items())}, "records": recs}
        if args.out:
            _dump(Path(args.out), summary)
        print(f"{len(recs)} records")
        return 0
    if args.ar is None or args.cls is None:
        raise UsageError("query needs --class and --ar")
    if not args.ar > 0:
        raise UsageError("--ar must be positive")
    for rec in retrieve_topk(index, args.cls, args.ar, args.k):
        print(f"{rec.id}\t{rec.aspect_ratio:.6g}")
    return 0


def _read_layout(path, palette) -> Layout:
    try:
        return Layout.load(path, palette.names)
    except FileNotFoundError as exc:
        raise DataError(f"layout file not found: {path}") from exc


def cmd_compose(args) -> int:
    palette = _palette_for(args.edb)
    layout = _read_layout(args.layout, palette)
    index = build_index(args.edb)
    canvas = compose(layout, index, palette.names)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_gray(args.out, canvas)
    print(args.out)
    return 0


def _layout_jobs(layout_arg, palette):
    p = Path(layout_arg)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        if not files:
            raise DataError(f"no layout files in {p}")
        return [(f.stem, f, _read_layout(f, palette)) for f in files]
    return [(p.stem, p, _read_layout(p, palette))]


def _edge_for(args, stem, layout, palette, index_cache):
    if args.edge_map:
        src = Path(args.edge_map)
        f = src / f"{stem}.png" if src.is_dir() else src
        if not f.exists():
            raise DataError(f"edge map not found: {f}")
        return load_gray(f), str(f)
    if args.edb:
        if "index" not in index_cache:
            index_cache["index"] = build_index(args.edb)
        return compose(layout, index_cache["index"], palette.names), f"composed:{args.edb}"
    raise UsageError("an edge source is required: --edge-map or --edb")


def cmd_generate(args) -> int:
    cfg = _override(load_config(args.config), args)
    flags = RunFlags(**cfg["flags"])
    scfg = apply_flags(_sampler(cfg), flags)
    palette = _palette_for(args.edb or args.palette_root)
    seeds = _parse_seeds(args.seeds) if args.seeds else [cfg["seed"]]
    jobs = _layout_jobs(args.layout, palette)
    model = _load_model(args.weights, "model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = {"command": "generate", "mode": args.mode, "version": __version__, "sampler": asdict(scfg),
            "flags": flags.to_json(), "weights": {"model": weights_hash(Path(args.weights).with_suffix(""))},
            "outputs": []}
    index_cache = {}
    branch = None
    if args.mode == "scene" and flags.fgcontrol:
        if args.branch is None:
            raise DataError("--fgcontrol needs --branch weights")
        stem = Path(args.branch).with_suffix("")
        if not stem.with_suffix(".json").exists():
            raise DataError(f"branch weights not found: {args.branch}")
        hp = cfg["highpass"]
        branch = ControlBranch.load(stem).with_flags(spatial_gate=flags.spatial_gate, highpass=flags.highpass,
                                                     d=hp["d"], tau=hp["tau"])
        prov["weights"]["branch"] = weights_hash(stem)
        prov["highpass"] = hp
    multi = len(jobs) > 1
    for k, (stem, path, layout) in enumerate(jobs):
        run_seeds = [seeds[0] + k] if multi else seeds
        edge, edge_src = (None, None)
        if args.mode == "edges" or branch is not None:
            edge, edge_src = _edge_for(args, stem, layout, palette, index_cache)
        for s in run_seeds:
            name = f"{stem}.png" if multi else f"{stem}_s{s}.png"
            if args.mode == "scene":
                e = None if branch is None else edge[None]
                img = sample(model, [layout], PromptSpec(SCENE_PREFIX, len(palette)), scfg, branch=branch,
                             edges=e, seeds=[s], hw=(layout.canvas_h, layout.canvas_w))[0]
            else:
                img = img2img(model, edge[None, None], scfg.strength, [layout], PromptSpec(EDGE_PREFIX, len(palette)),
                              scfg, seeds=[s])[0]
            save_gray(out / name, img)
            prov["outputs"].append({"file": name, "layout": str(path), "layout_sha256": _sha(path),
                                    "seed": s, "edge_source": edge_src})
    _dump(out / "provenance.json", prov)
    print(out / "provenance.json")
    return 0


def cmd_train(args) -> int:
    cfg = _override(load_config(args.config), args)
    tcfg = TrainConfig(**cfg["train"])
    root = Path(args.data)
    if not (root / "layouts").is_dir():
        raise DataError(f"dataset not found: {root}")
    palette = _palette_for(root)
    images, edges, layouts, _ = load_dataset(root, palette)
    if edges is None and args.target != "base":
        raise DataError(f"{args.target} training needs edge maps under {root / 'edges'}")
    out = Path(args.out).with_suffix("")
    meta = {"target": args.target, "train": asdict(tcfg), "data_sha256": _sha(root / "index.jsonl")}
    losses = []
    log = (lambda s, v: print(f"step {s} loss {v:.5f}", file=sys.stderr)) if args.verbose else None
    if args.target in ("base", "edgemodel"):
        model = Denoiser.init(DenoiserConfig(num_classes=len(palette)), seed=tcfg.seed)
        if args.target == "base":
            prompt, data = PromptSpec(SCENE_PREFIX, len(palette)), images
        else:
            prompt = PromptSpec(EDGE_PREFIX, len(palette))
            data = np.stack([box_edges(e, lay) for e, lay in zip(edges, layouts)])[:, None]
        losses = fit(model, data, layouts, tcfg, prompt, log=log)
        model.save(out, {**meta, "prompt_prefix": prompt.prefix})
    else:
        base = _load_model(args.base, "base")
        hp = cfg["highpass"]
        branch = ControlBranch.init(BranchConfig(base_channels=base.cfg.channels, d=hp["d"], tau=hp["tau"]),
                                    seed=tcfg.seed)
        losses = fit(base, images, layouts, tcfg, PromptSpec(SCENE_PREFIX, len(palette)), branch=branch,
                     edges=edges, log=log)
        branch.save(out, {**meta, "base_sha256": weights_hash(Path(args.base).with_suffix(""))})
    with open(out.with_name(out.name + "_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([k, repr(v)] for k, v in enumerate(losses))
    print(out.with_suffix(".json"))
    return 0


def cmd_eval(args) -> int:
    cfg = _override(load_config(args.config), args)
    gen = Path(args.generated)
    files = sorted(gen.glob("*.png")) if gen.is_dir() else []
    if not files:
        raise DataError(f"no generated images in {gen}")
    root = Path(args.gt)
    if not (root / "layouts").is_dir():
        raise DataError(f"ground-truth dataset not found: {root}")
    palette = _palette_for(root)
    ref, _, layouts, stems = load_dataset(root, palette)
    if len(files) != len(layouts):
        raise DataError(f"{len(files)} generated images but {len(layouts)} ground-truth layouts")
    images = np.stack([load_gray(f) for f in files])
    report = evaluate(images, layouts, ref, palette, cfg["eval"]["mode"])
    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_demo_filter(args) -> int:
    src = Path(args.image)
    if not src.exists():
        raise DataError(f"image not found: {src}")
    img = load_gray(src)
    spec = HighPassSpec(args.d, args.tau)
    hp = highpass(img - img.mean(), spec.d)
    gated = freq_gate(img - img.mean(), spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_gray(out / "before.png", img)
    save_gray(out / "highpass.png", 0.5 + hp)
    save_gray(out / "after.png", 0.5 + gated)
    print(out / "after.png")
    return 0


# ---------------------------------------------------------------- parser


def _add_flag_args(p):
    bo = argparse.BooleanOptionalAction
    p.add_argument("--guidance", action=bo, default=None)
    p.add_argument("--masked-attention", dest="masked_attention", action=bo, default=None)
    p.add_argument("--fgcontrol", action=bo, default=None)
    p.add_argument("--spatial-gate", dest="spatial_gate", action=bo, default=None)
    p.add_argument("--highpass", action=bo, default=None)
    p.add_argument("--steps", type=int, default=None, help="sampling steps")
    p.add_argument("--strength", type=float, default=None, help="img2img strength")
    p.add_argument("--guided-fraction", dest="guided_fraction", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="layoutgen", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset and edge-crop database")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--oriented", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("edb", help="build or query the edge database")
    p.add_argument("action", choices=("build", "query"))
    p.add_argument("--root", required=True)
    p.add_argument("--out", help="summary JSON (build)")
    p.add_argument("--class", dest="cls")
    p.add_argument("--ar", type=float)
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(func=cmd_edb)

    p = sub.add_parser("compose", help="composite edge map for a layout")
    p.add_argument("--layout", required=True)
    p.add_argument("--edb", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("generate", help="generate scenes or diversified edge maps")
    p.add_argument("--mode", choices=("scene", "edges"), default="scene")
    p.add_argument("--layout", required=True, help="layout JSON file or directory of them")
    p.add_argument("--weights", required=True)
    p.add_argument("--branch")
    p.add_argument("--edge-map", dest="edge_map", help="edge PNG, or directory of <stem>.png")
    p.add_argument("--edb", help="edge database root used to compose edge maps")
    p.add_argument("--palette-root", dest="palette_root", help="directory holding palette.json")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_flag_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the base model, control branch or edge model")
    p.add_argument("--target", choices=("base", "branch", "edgemodel"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="frozen base weights (branch target)")
    p.add_argument("--steps", dest="train_steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="layout AP and Frechet distance of generated images")
    p.add_argument("--generated", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("hbb", "obb"), default=None)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo-filter", help="before/after images of the frequency gate")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.05)
    p.set_defaults(func=cmd_demo_filter)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, EdgeDBError, RetrievalError, EvalConfigError, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, SamplingError, GuidanceError, FrechetError, SpectralConsistencyError,
            FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
