"""Ablation flags and the paired generation/evaluation runs built on them."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np

from .edgedb import EdgeIndex, EdgeRecord, compose
from .evalkit import evaluate
from .fgcontrol import BranchConfig, ControlBranch
from .layout import rasterize
from .synthdata import DEFAULT_PALETTE, SceneConfig, box_edges, crop_instance, gen_scene
from .toydiffusion import (EDGE_PREFIX, SCENE_PREFIX, Denoiser, DenoiserConfig, NoiseSchedule, PromptSpec,
                           SamplerConfig, TrainConfig, fit, img2img, sample)


@dataclass(frozen=True)
class RunFlags:
    guidance: bool = True
    masked_attention: bool = True
    fgcontrol: bool = False
    spatial_gate: bool = True
    highpass: bool = True

    def to_json(self):
        return asdict(self)


ABLATIONS = {
    "neither": RunFlags(guidance=False, masked_attention=False),
    "masked_only": RunFlags(guidance=False),
    "guidance_only": RunFlags(masked_attention=False),
    "full": RunFlags(),
    "full+fgcontrol": RunFlags(fgcontrol=True),
    "global_control": RunFlags(fgcontrol=True, spatial_gate=False, highpass=False),
    "gated_no_highpass": RunFlags(fgcontrol=True, highpass=False),
}


def apply_flags(cfg: SamplerConfig, flags: RunFlags) -> SamplerConfig:
    return replace(cfg, guidance=flags.guidance, masked_attention=flags.masked_attention)


def generate(base: Denoiser, layouts, prompt: PromptSpec, cfg: SamplerConfig, flags: RunFlags,
             branch=None, edges=None, seeds=None, schedule: NoiseSchedule = NoiseSchedule(),
             hw=(32, 32), batch: int = 25) -> np.ndarray:
    """Images (B x 1 x H x W) for ``layouts`` under ``flags``, generated in chunks of ``batch``."""
    cfg = apply_flags(cfg, flags)
    use = None
    if flags.fgcontrol:
        if branch is None or edges is None:
            raise ValueError("fgcontrol requested without a branch and edge maps")
        use = branch.with_flags(spatial_gate=flags.spatial_gate, highpass=flags.highpass)
    seeds = list(range(cfg.seed, cfg.seed + len(layouts))) if seeds is None else list(seeds)
    out = []
    for i in range(0, len(layouts), batch):
        sl = slice(i, i + batch)
        e = None if use is None else np.asarray(edges)[sl]
        out.append(sample(base, layouts[sl], prompt, cfg, schedule, use, e, seeds[sl], hw))
    return np.concatenate(out) if out else np.zeros((0, 1, *hw))


def score_images(images, layouts, reference, palette, mode: str = "hbb") -> dict:
    return evaluate(images, layouts, reference, palette, mode)


def run_ablation(base, layouts, reference, palette, prompt, cfg: SamplerConfig, names=None,
                 branch=None, edges=None, seeds=None, log=None) -> dict:
    """Score each named configuration on identical seeds; returns name -> report."""
    names = list(ABLATIONS) if names is None else list(names)
    reports = {}
    for name in names:
        flags = ABLATIONS[name]
        if flags.fgcontrol and branch is None:
            continue
        imgs = generate(base, layouts, prompt, cfg, flags, branch, edges, seeds)
        reports[name] = {**score_images(imgs, layouts, reference, palette), "flags": flags.to_json()}
        if log is not None:
            log(name, reports[name])
    return reports


def edge_mass_inside(edge: np.ndarray, layout, threshold: float = 0.0) -> float:
    """Fraction of edge intensity (values >= ``threshold``) inside the union of layout boxes."""
    e = np.asarray(edge, dtype=np.float64)
    if e.ndim == 3:
        e = e[0]
    e = np.where(e >= threshold, e, 0.0)
    total = e.sum()
    if total <= 0:
        return 0.0
    union = rasterize(layout, *e.shape).union
    return float((e * union).sum() / total)


def edge_diversity(edge_model: Denoiser, composite: np.ndarray, layout, seeds, prompt: PromptSpec,
                   cfg: SamplerConfig, strength: float | None = None, threshold: float = 0.2,
                   schedule: NoiseSchedule = NoiseSchedule()) -> dict:
    """img2img the composite once per seed; pairwise spread and in-box edge mass."""
    s = cfg.strength if strength is None else strength
    seeds = list(seeds)
    init = np.repeat(np.asarray(composite, dtype=np.float64)[None, None], len(seeds), axis=0)
    outs = img2img(edge_model, init, s, [layout] * len(seeds), prompt, cfg, schedule, seeds)
    diffs = [float(np.mean(np.abs(outs[i] - outs[j]))) for i, j in combinations(range(len(seeds)), 2)]
    inside = [edge_mass_inside(o, layout, threshold) for o in outs]
    return {"outputs": outs, "pairwise_mad": diffs, "min_pairwise_mad": min(diffs) if diffs else 0.0,
            "inside_fraction": inside, "min_inside_fraction": min(inside) if inside else 0.0}


# ---------------------------------------------------------------- end-to-end toy experiment


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 2000
    n_eval: int = 100
    train_seed: int = 0
    eval_offset: int = 10 ** 6
    noise_offset: int = 7 * 10 ** 6
    base: TrainConfig = TrainConfig(steps=3000)
    branch: TrainConfig = TrainConfig(steps=1000, seed=1)
    edge: TrainConfig = TrainConfig(steps=3000, seed=2)
    # the toy base has no layout input besides masked attention, so it stays on while guidance runs
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(mask_during_guidance=True))
    # at strength 0.6 a 20-step grid leaves 12 denoising steps, too coarse to keep edges on box boundaries
    edge_sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(steps=100, mask_during_guidance=True))
    diversity_seeds: tuple = tuple(range(8))


def _scenes(n, offset, cfg: SceneConfig = SceneConfig()):
    return [gen_scene(offset + k, cfg) for k in range(n)]


def train_models(cfg: ExperimentConfig, log=None) -> dict:
    """Base denoiser, control branch (frozen base) and edge-domain model on the same toy scenes."""
    train = _scenes(cfg.n_train, cfg.train_seed)
    images = np.stack([s.image for s in train])
    edges = np.stack([s.edge for s in train])
    layouts = [s.layout for s in train]
    out = {"train": train}
    step_log = (lambda tag: (lambda s, v: log(f"{tag} step {s} loss {v:.4f}"))) if log else (lambda tag: None)
    base = Denoiser.init(DenoiserConfig(), seed=cfg.base.seed)
    out["base_losses"] = fit(base, images, layouts, cfg.base, PromptSpec(SCENE_PREFIX), log=step_log("base"))
    branch = ControlBranch.init(BranchConfig(), seed=cfg.branch.seed)
    out["branch_losses"] = fit(base, images, layouts, cfg.branch, PromptSpec(SCENE_PREFIX), branch=branch,
                               edges=edges, log=step_log("branch"))
    edge_model = Denoiser.init(DenoiserConfig(), seed=cfg.edge.seed)
    boxed = np.stack([box_edges(e, lay) for e, lay in zip(edges, layouts)])
    out["edge_losses"] = fit(edge_model, boxed[:, None], layouts, cfg.edge, PromptSpec(EDGE_PREFIX),
                             log=step_log("edge"))
    out.update(base=base, branch=branch, edge_model=edge_model)
    return out


def layout_adherence_report(models: dict, cfg: ExperimentConfig, names=None, log=None) -> dict:
    """Paired ablation on held-out layouts with ground-truth edges and identical seeds."""
    held = _scenes(cfg.n_eval, cfg.eval_offset)
    layouts = [s.layout for s in held]
    reference = np.stack([s.image for s in held])
    edges = np.stack([s.edge for s in held])
    seeds = list(range(cfg.noise_offset, cfg.noise_offset + cfg.n_eval))
    names = list(ABLATIONS) if names is None else names
    return run_ablation(models["base"], layouts, reference, DEFAULT_PALETTE, PromptSpec(SCENE_PREFIX), cfg.sampler,
                        names, models["branch"], edges, seeds, log)


def edge_diversity_report(models: dict, cfg: ExperimentConfig, scene_offset: int = 2 * 10 ** 6) -> dict:
    """Compose a held-out layout's edge map from the training crops and diversify it over seeds."""
    index = EdgeIndex()
    rid = 0
    for s in models["train"]:
        for inst in s.layout.instances:
            index.add(EdgeRecord(rid, DEFAULT_PALETTE.names[inst.class_id], inst.aspect_ratio,
                                 crop_instance(s.edge, inst)))
            rid += 1
    layout = next(s.layout for s in _scenes(50, scene_offset) if len(s.layout) >= 2)
    composite = compose(layout, index, DEFAULT_PALETTE.names)
    rep = edge_diversity(models["edge_model"], composite, layout, cfg.diversity_seeds, PromptSpec(EDGE_PREFIX),
                         cfg.edge_sampler)
    rep["composite_inside_fraction"] = edge_mass_inside(composite, layout)
    rep["layout"] = layout
    return rep
