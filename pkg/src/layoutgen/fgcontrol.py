"""Edge-conditioned control branch with frequency purification and box gating.

Per injection site: zero-initialized 1x1 projection -> high-pass + soft
threshold -> multiply by the union box mask at the site's resolution. The
result is added to the base denoiser's features.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _nn
from .layout import Layout, rasterize
from .spectral import HighPassSpec, freq_gate, freq_gate_adjoint
from .tensor import avgpool2, avgpool2_adjoint, conv2d
from .weights import load_weights, save_weights

SITES = ("site16", "site32")


class SiteConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BranchConfig:
    channels: int = 12
    attn_dim: int = 16
    heads: int = 1
    base_channels: int = 24
    time_dim: int = 32
    T: int = 1000
    d: int = 16
    tau: float = 0.05
    highpass: bool = True
    spatial_gate: bool = True

    @property
    def spec(self) -> HighPassSpec:
        return HighPassSpec(self.d, self.tau)


class ControlBranch:
    def __init__(self, params: dict, cfg: BranchConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: BranchConfig = BranchConfig(), seed: int = 0) -> "ControlBranch":
        rng = np.random.default_rng(seed)
        c, p = cfg.channels, {}
        p["t.w"] = _nn.linear_init(rng, c, cfg.time_dim)
        p["t.b"] = np.zeros(c)
        p["in.w"], p["in.b"] = _nn.conv_init(rng, c, 2, 3)
        _nn.resblock_init(rng, p, "rb", c)
        _nn.attn_init(rng, p, "sa", c, c, cfg.attn_dim)
        for site in SITES:
            p[f"zc_{site}.w"] = np.zeros((cfg.base_channels, c, 1, 1))
            p[f"zc_{site}.b"] = np.zeros(cfg.base_channels)
        return cls(p, cfg)

    def with_flags(self, **flags) -> "ControlBranch":
        """Same weights, different ablation flags (highpass, spatial_gate, tau, d)."""
        cfg = BranchConfig(**{**asdict(self.cfg), **flags})
        return ControlBranch(self.params, cfg)

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    def astype(self, dtype) -> "ControlBranch":
        return ControlBranch({k: v.astype(dtype) for k, v in self.params.items()}, self.cfg)

    def save(self, path, meta=None):
        return save_weights(self.params, path, {"config": asdict(self.cfg), **(meta or {})})

    @classmethod
    def load(cls, path) -> "ControlBranch":
        params, meta = load_weights(path)
        return cls(params, BranchConfig(**meta["config"]))


def purify(dh: np.ndarray, spec: HighPassSpec = HighPassSpec()) -> np.ndarray:
    return freq_gate(dh, spec)


def gate_mask(layouts, h: int, w: int) -> np.ndarray:
    """B x 1 x h x w union foreground masks, rasterized at the site resolution."""
    return np.stack([rasterize(lay, h, w).union for lay in layouts])[:, None]


def gate(dh_str: np.ndarray, layout: Layout) -> np.ndarray:
    """Zero every position outside the layout boxes. ``dh_str`` is C x h x w."""
    h, w = dh_str.shape[-2:]
    return dh_str * rasterize(layout, h, w).union


def _site_output(branch, name, h_res, masks):
    cfg, p = branch.cfg, branch.params
    dh = conv2d(h_res, p[f"zc_{name}.w"], p[f"zc_{name}.b"])
    dh_str = purify(dh, cfg.spec) if cfg.highpass else dh
    final = dh_str * masks if cfg.spatial_gate else dh_str
    return final, dh


def control_forward(branch: ControlBranch, edges, z_t, t, layouts):
    """Residuals per site for a batch: edges B x H x W in [0, 1], latents B x 1 x H x W."""
    cfg, p = branch.cfg, branch.params
    edges = np.asarray(edges, dtype=branch.dtype)
    if edges.ndim == 3:
        edges = edges[:, None]
    if edges.shape[-2:] != z_t.shape[-2:]:
        raise SiteConfigError(f"edge map {edges.shape[-2:]} does not match latent {z_t.shape[-2:]}")
    B = z_t.shape[0]
    tf = _nn.timestep_features(np.broadcast_to(t, (B,)), cfg.time_dim, cfg.T).astype(branch.dtype)
    z_t = z_t.astype(branch.dtype, copy=False)
    te = tf @ p["t.w"].T + p["t.b"]
    inp = np.concatenate([z_t, edges], axis=1)
    h0 = conv2d(inp, p["in.w"], p["in.b"]) + te[:, :, None, None]
    h1, rb = _nn.resblock(h0, p, "rb")
    d = avgpool2(h1)
    ah, aw = d.shape[-2:]
    x2, _, sa = _nn.attn_block(_nn.to_tokens(d), _nn.to_tokens(d), p, "sa", cfg.heads, None)
    h16 = _nn.from_tokens(x2, ah, aw)
    masks = {"site32": gate_mask(layouts, *h1.shape[-2:]), "site16": gate_mask(layouts, ah, aw)}
    sources = {"site32": h1, "site16": h16}
    residuals, dhs = {}, {}
    for name in SITES:
        residuals[name], dhs[name] = _site_output(branch, name, sources[name], masks[name])
    cache = dict(inp=inp, tf=tf, rb=rb, sa=sa, hw=(ah, aw), sources=sources, masks=masks, dhs=dhs)
    return residuals, cache


def control_backward(branch: ControlBranch, cache, site_grads: dict, straight_through: bool = True) -> dict:
    """Parameter grads of the branch given cotangents on the injected residuals."""
    cfg, p = branch.cfg, branch.params
    grads = {}
    dsrc = {}
    for name in SITES:
        g = site_grads[name]
        if cfg.spatial_gate:
            g = g * cache["masks"][name]
        if cfg.highpass:
            g = freq_gate_adjoint(cache["dhs"][name], cfg.spec, g, straight_through).astype(branch.dtype)
        dsrc[name] = _nn.conv_backward(cache["sources"][name], g, p, f"zc_{name}", grads)
    ah, aw = cache["hw"]
    dx, _ = _nn.attn_block_backward(cache["sa"], _nn.to_tokens(dsrc["site16"]), p, "sa", cfg.heads,
                                    grads, None, self_attn=True)
    dh1 = dsrc["site32"] + avgpool2_adjoint(_nn.from_tokens(dx, ah, aw))
    dh0 = _nn.resblock_backward(cache["rb"], dh1, p, "rb", grads)
    dte = dh0.sum(axis=(2, 3))
    grads["t.w"] = dte.T @ cache["tf"]
    grads["t.b"] = dte.sum(axis=0)
    _nn.conv_backward(cache["inp"], dh0, p, "in", grads)
    return grads
