"""A tiny epsilon-prediction latent diffusion model with layout-aware attention hooks.

The latent is the image grid itself, affinely mapped from [0, 1] to [-1, 1].
Network: conv-in -> residual block -> 2x pool -> self-attention ->
cross-attention over prompt tokens -> 2x upsample (+skip) -> residual block ->
conv-out, with a sinusoidal time embedding added after conv-in and before the
second residual block. Control residuals can be added at two decoder sites:
``site16`` (after cross-attention, pooled resolution) and ``site32`` (after the
second residual block, full resolution).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _nn
from .attention import TokenMap, build_cross_mask, build_self_mask, open_cross_mask
from .layout import Layout, rasterize
from .tensor import avgpool2, avgpool2_adjoint, conv2d, silu, silu_adjoint, upsample2, upsample2_adjoint
from .weights import load_weights, save_weights

PAD, SCENE_PREFIX, EDGE_PREFIX = 0, 1, 2
FIRST_CLASS_TOKEN = 3


class TrainingError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


def to_latent(img):
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def from_latent(z):
    return np.clip((z + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------- noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine schedule: alpha_t = cos(t/T * acos(alpha_min)), sigma_t = sin(...)."""

    T: int = 1000
    alpha_min: float = 0.02

    @property
    def alphas(self) -> np.ndarray:
        ang = np.arange(self.T + 1) / self.T * math.acos(self.alpha_min)
        return np.cos(ang)

    @property
    def sigmas(self) -> np.ndarray:
        ang = np.arange(self.T + 1) / self.T * math.acos(self.alpha_min)
        return np.sin(ang)

    def alpha(self, t):
        return math.cos(t / self.T * math.acos(self.alpha_min))

    def sigma(self, t):
        return math.sin(t / self.T * math.acos(self.alpha_min))


def add_noise(z0, t, eps, schedule: NoiseSchedule = NoiseSchedule()):
    """alpha_t z0 + sigma_t eps; ``t`` is a scalar or one timestep per batch row."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T}]")
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"shape mismatch {np.shape(z0)} vs {np.shape(eps)}")
    a = schedule.alphas[t_arr]
    s = schedule.sigmas[t_arr]
    if t_arr.ndim:
        extra = (1,) * (np.ndim(z0) - 1)
        a, s = a.reshape(-1, *extra), s.reshape(-1, *extra)
    return a * z0 + s * eps


# ---------------------------------------------------------------- prompts


@dataclass(frozen=True)
class PromptSpec:
    """Prompt = one prefix token followed by one class token per instance."""

    prefix: int = SCENE_PREFIX
    num_classes: int = 3
    max_instances: int = 8

    @property
    def length(self) -> int:
        return 1 + self.max_instances

    @property
    def vocab(self) -> int:
        return FIRST_CLASS_TOKEN + self.num_classes

    def encode(self, layout: Layout, drop_classes: bool = False):
        if len(layout) > self.max_instances:
            raise ValueError(f"layout has {len(layout)} instances, prompt holds {self.max_instances}")
        ids = np.full(self.length, PAD, dtype=np.int64)
        ids[0] = self.prefix
        per = []
        if not drop_classes:
            for i, inst in enumerate(layout.instances):
                ids[1 + i] = FIRST_CLASS_TOKEN + inst.class_id
                per.append((1 + i,))
        return ids, TokenMap((0,), tuple(per))


@dataclass
class Conditioning:
    ids: np.ndarray          # B x L
    tokens: list             # TokenMap per row
    self_mask: np.ndarray | None  # B x P x P additive, or None
    cross_mask: np.ndarray   # B x P x L additive


def attention_resolution(h: int, w: int) -> tuple[int, int]:
    return h // 2, w // 2


def make_conditioning(layouts, prompt: PromptSpec, hw, masked, drop=None) -> Conditioning:
    """Prompt ids and attention masks for a batch. ``masked``/``drop`` are bools or per-row lists."""
    b = len(layouts)
    masked = [masked] * b if np.isscalar(masked) else list(masked)
    drop = [False] * b if drop is None else ([drop] * b if np.isscalar(drop) else list(drop))
    ah, aw = attention_resolution(*hw)
    P, L = ah * aw, prompt.length
    ids = np.zeros((b, L), dtype=np.int64)
    tokens = []
    cross = np.empty((b, P, L))
    selfm = np.zeros((b, P, P)) if any(masked) else None
    for r, lay in enumerate(layouts):
        ids[r], tm = prompt.encode(lay, drop[r])
        tokens.append(tm)
        if masked[r]:
            lab = rasterize(lay, ah, aw).label_map
            selfm[r] = build_self_mask(lab)
            if drop[r]:
                cross[r] = open_cross_mask(tm, P, L)
            else:
                cross[r] = build_cross_mask(lab, tm, L)
        else:
            cross[r] = open_cross_mask(tm, P, L)
    return Conditioning(ids, tokens, selfm, cross)


# ---------------------------------------------------------------- denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 24
    attn_dim: int = 32
    heads: int = 2
    token_dim: int = 32
    time_dim: int = 32
    num_classes: int = 3
    T: int = 1000
    alpha_min: float = 0.02
    # "v": eps_hat = alpha_t * F + sigma_t * z_t, so F acts as a velocity and the
    # implied x0 estimate stays bounded at high noise; "eps": eps_hat = F
    output: str = "v"


class Denoiser:
    def __init__(self, params: dict, cfg: DenoiserConfig, meta: dict | None = None):
        self.params = params
        self.cfg = cfg
        self.meta = meta or {}

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    def astype(self, dtype) -> "Denoiser":
        """Copy computing in ``dtype`` (float32 for speed, float64 for exact checks)."""
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return Denoiser(params, self.cfg, self.meta)

    @classmethod
    def init(cls, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> "Denoiser":
        rng = np.random.default_rng(seed)
        C, p = cfg.channels, {}
        p["t.w"] = _nn.linear_init(rng, 2 * C, cfg.time_dim)
        p["t.b"] = np.zeros(2 * C)
        p["in.w"], p["in.b"] = _nn.conv_init(rng, C, 1, 3)
        _nn.resblock_init(rng, p, "rb1", C)
        _nn.attn_init(rng, p, "sa", C, C, cfg.attn_dim)
        _nn.attn_init(rng, p, "xa", C, cfg.token_dim, cfg.attn_dim)
        p["tok"] = rng.standard_normal((FIRST_CLASS_TOKEN + cfg.num_classes, cfg.token_dim))
        _nn.resblock_init(rng, p, "rb2", C)
        p["out.w"], p["out.b"] = _nn.conv_init(rng, 1, C, 3, gain=0.3)
        return cls(p, cfg)

    def save(self, path, meta=None):
        return save_weights(self.params, path, {"config": asdict(self.cfg), **(meta or {})})

    @classmethod
    def load(cls, path) -> "Denoiser":
        params, meta = load_weights(path)
        return cls(params, DenoiserConfig(**meta["config"]), meta)

    def forward(self, z, t, cond: Conditioning, residuals: dict | None = None):
        """Predicted noise for latents ``z`` (B x 1 x H x W) and a cache for :meth:`backward`."""
        p, cfg = self.params, self.cfg
        z = z.astype(self.dtype, copy=False)
        B, _, H, W = z.shape
        C = cfg.channels
        tf = _nn.timestep_features(np.broadcast_to(t, (B,)), cfg.time_dim, cfg.T).astype(self.dtype)
        te = tf @ p["t.w"].T + p["t.b"]
        h0 = conv2d(z, p["in.w"], p["in.b"]) + te[:, :C, None, None]
        h1, rb1 = _nn.resblock(h0, p, "rb1")
        d = avgpool2(h1)
        ah, aw = d.shape[-2:]
        x = _nn.to_tokens(d)
        x2, w_self, sa = _nn.attn_block(x, x, p, "sa", cfg.heads, cond.self_mask)
        ctx = p["tok"][cond.ids]
        x3, w_cross, xa = _nn.attn_block(x2, ctx, p, "xa", cfg.heads, cond.cross_mask)
        a = _nn.from_tokens(x3, ah, aw)
        if residuals and "site16" in residuals:
            a = a + residuals["site16"].astype(a.dtype, copy=False)
        g0 = h1 + upsample2(a) + te[:, C:, None, None]
        h2, rb2 = _nn.resblock(g0, p, "rb2")
        if residuals and "site32" in residuals:
            h2 = h2 + residuals["site32"].astype(h2.dtype, copy=False)
        s2 = silu(h2)
        out = conv2d(s2, p["out.w"], p["out.b"])
        a_t = s_t = None
        if cfg.output == "v":
            a_t, s_t = self._coeffs(t, B)
            out = a_t * out + s_t * z
        cache = dict(z=z, tf=tf, a_t=a_t, s_t=s_t, h0=h0, rb1=rb1, sa=sa, xa=xa, ids=cond.ids, hw=(ah, aw),
                     rb2=rb2, h2=h2, s2=s2, w_self=w_self, w_cross=w_cross)
        return out, cache

    def backward(self, cache, g_out=None, g_self_w=None, g_cross_w=None, param_grads=True):
        """Reverse pass. Returns a dict of parameter grads plus ``z``, ``site16``, ``site32``.

        ``g_self_w`` / ``g_cross_w`` are direct cotangents on the attention weights
        (B x heads x P x K). With ``g_out`` None the decoder is skipped.
        """
        p, cfg = self.params, self.cfg
        C = cfg.channels
        grads = {} if param_grads else None
        ah, aw = cache["hw"]
        B = cache["z"].shape[0]
        dte = np.zeros((B, 2 * C), dtype=self.dtype)
        dz_skip = None
        if g_out is not None:
            if cache["a_t"] is not None:
                dz_skip = cache["s_t"] * g_out
                g_out = cache["a_t"] * g_out
            ds2 = _nn.conv_backward(cache["s2"], g_out, p, "out", grads)
            dh2 = silu_adjoint(cache["h2"], ds2)
            site32 = dh2
            dg0 = _nn.resblock_backward(cache["rb2"], dh2, p, "rb2", grads)
            dte[:, C:] = dg0.sum(axis=(2, 3))
            dh1 = dg0
            da = upsample2_adjoint(dg0)
        else:
            site32 = None
            dh1 = np.zeros_like(cache["h0"])
            da = np.zeros((B, C, ah, aw), dtype=self.dtype)
        site16 = da
        dx3 = _nn.to_tokens(da)
        dx2, dctx = _nn.attn_block_backward(cache["xa"], dx3, p, "xa", cfg.heads, grads, g_cross_w)
        dx, _ = _nn.attn_block_backward(cache["sa"], dx2, p, "sa", cfg.heads, grads, g_self_w, self_attn=True)
        dh1 = dh1 + avgpool2_adjoint(_nn.from_tokens(dx, ah, aw))
        dh0 = _nn.resblock_backward(cache["rb1"], dh1, p, "rb1", grads)
        dte[:, :C] = dh0.sum(axis=(2, 3))
        dz = _nn.conv_backward(cache["z"], dh0, p, "in", grads)
        if dz_skip is not None:
            dz = dz + dz_skip
        out = {} if grads is None else grads
        if grads is not None:
            grads["t.w"] = dte.T @ cache["tf"]
            grads["t.b"] = dte.sum(axis=0)
            dtok = np.zeros_like(p["tok"])
            np.add.at(dtok, cache["ids"].reshape(-1), dctx.reshape(-1, dctx.shape[-1]))
            grads["tok"] = dtok
        out["z"], out["site16"], out["site32"] = dz, site16, site32
        return out

    def _coeffs(self, t, B):
        ang = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)) / self.cfg.T * math.acos(self.cfg.alpha_min)
        shape = (B, 1, 1, 1)
        return np.cos(ang).reshape(shape).astype(self.dtype), np.sin(ang).reshape(shape).astype(self.dtype)

    def predict(self, z, t, cond, residuals=None):
        return self.forward(z, t, cond, residuals)[0]


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    optimizer: str = "adam"
    p_mask: float = 0.5
    p_uncond: float = 0.1
    seed: int = 0
    straight_through: bool = True
    lr_schedule: str = "cosine"  # or "constant"
    dtype: str = "float32"


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    if cfg.lr_schedule != "cosine":
        raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


def make_optimizer(cfg: TrainConfig):
    return _nn.Adam(cfg.lr) if cfg.optimizer == "adam" else _nn.SGD(cfg.lr)


def train_step(model: Denoiser, batch: dict, schedule: NoiseSchedule, optimizer, rng,
               prompt: PromptSpec, branch=None, p_mask: float = 0.5, p_uncond: float = 0.1,
               straight_through: bool = True) -> float:
    """One step: MSE between injected and predicted noise, then an optimizer update.

    With ``branch`` set only the branch trains; the base model is frozen.
    ``batch`` holds ``z0`` (B x 1 x H x W), ``layouts`` and, for a branch, ``edges``.
    """
    from .fgcontrol import control_backward, control_forward

    z0, layouts = batch["z0"], batch["layouts"]
    B = z0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(z0.shape)
    zt = add_noise(z0, t, eps, schedule)
    masked = rng.random(B) < p_mask
    drop = rng.random(B) < p_uncond
    cond = make_conditioning(layouts, prompt, z0.shape[-2:], masked, drop)
    residuals = bcache = None
    if branch is not None:
        residuals, bcache = control_forward(branch, batch["edges"], zt, t, layouts)
    pred, cache = model.forward(zt, t, cond, residuals)
    diff = pred - eps
    loss = float(np.mean(diff ** 2))
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    g = (2.0 * diff / diff.size).astype(model.dtype)
    if branch is None:
        grads = model.backward(cache, g)
        optimizer.step(model.params, grads, sorted(model.params))
    else:
        site = model.backward(cache, g, param_grads=False)
        grads = control_backward(branch, bcache, site, straight_through)
        optimizer.step(branch.params, grads, sorted(branch.params))
    return loss


def fit(model: Denoiser, images: np.ndarray, layouts: list, cfg: TrainConfig, prompt: PromptSpec,
        schedule: NoiseSchedule = NoiseSchedule(), branch=None, edges=None, log=None) -> list[float]:
    """Run ``cfg.steps`` training steps on images in [0, 1]; returns per-step losses.

    The trainable parameters (base, or branch when given) are updated in place;
    compute runs in ``cfg.dtype`` and results are stored back as float64.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    z_all = to_latent(images)
    work = model.astype(cfg.dtype)
    wbranch = None if branch is None else branch.astype(cfg.dtype)
    losses = []
    n = len(layouts)
    for step in range(cfg.steps):
        opt.lr = lr_at(cfg, step)
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = {"z0": z_all[idx], "layouts": [layouts[i] for i in idx]}
        if branch is not None:
            batch["edges"] = edges[idx]
        losses.append(train_step(work, batch, schedule, opt, rng, prompt, wbranch,
                                 cfg.p_mask, cfg.p_uncond, cfg.straight_through))
        if log is not None and (step % 100 == 0 or step == cfg.steps - 1):
            log(step, float(np.mean(losses[-100:])))
    target, trained = (model, work) if branch is None else (branch, wbranch)
    if cfg.steps and cfg.lr:
        target.params.update({k: v.astype(np.float64) for k, v in trained.params.items()})
    return losses


# ---------------------------------------------------------------- sampling


@dataclass
class SamplerConfig:
    steps: int = 20
    guided_fraction: float = 0.3
    guidance: bool = True
    masked_attention: bool = True
    mask_during_guidance: bool = False
    lam_start: float = 8.0
    lam_end: float = 2.0
    guidance_iters: int = 1
    guidance_layers: tuple = ("cross", "self")
    strength: float = 0.6
    seed: int = 0
    clip_x0: bool = True
    ancestral: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength}")
        self.guidance_layers = tuple(self.guidance_layers)

    def to_json(self):
        return asdict(self)


def timestep_grid(schedule: NoiseSchedule, steps: int, t_start: int | None = None) -> list[int]:
    full = [int(v) for v in np.round(np.linspace(schedule.T, 0, steps + 1))]
    if t_start is None or t_start >= schedule.T:
        return full
    return [t_start] + [t for t in full if t < t_start]


def _seed_noise(seeds, shape):
    return np.stack([np.random.default_rng(s).standard_normal(shape) for s in seeds])


def denoise_loop(model: Denoiser, z, grid, layouts, prompt: PromptSpec, cfg: SamplerConfig,
                 schedule: NoiseSchedule, branch=None, edges=None, seeds=None, hooks=None):
    """Deterministic reverse updates along ``grid``; returns the final latent."""
    from .fgcontrol import control_forward
    from .guidance import GuidanceError, GuidanceSchedule, guidance_step, lambda_at

    model = model.astype(cfg.dtype)
    branch = None if branch is None else branch.astype(cfg.dtype)
    hw = z.shape[-2:]
    n = len(grid) - 1
    n_guided = math.ceil(cfg.guided_fraction * n) if n else 0
    open_cond = make_conditioning(layouts, prompt, hw, False)
    mask_cond = make_conditioning(layouts, prompt, hw, True) if cfg.masked_attention else open_cond
    gsched = GuidanceSchedule(cfg.lam_start, cfg.lam_end, n_guided, cfg.guidance_layers, cfg.guidance_iters)
    ah, aw = attention_resolution(*hw)
    fg = [rasterize(lay, ah, aw) for lay in layouts]
    rngs = [np.random.default_rng([s, 1]) for s in seeds] if cfg.ancestral else None
    for k in range(n):
        t, t_prev = grid[k], grid[k + 1]
        guided = k < n_guided
        try:
            if guided and cfg.guidance and any(len(l) for l in layouts):
                lam = lambda_at(k, gsched)
                for _ in range(cfg.guidance_iters):
                    z, _report = guidance_step(model, z, t, open_cond, fg, lam, cfg.guidance_layers)
        except GuidanceError as exc:
            raise SamplingError(f"step {k} (t={t}): {exc}") from exc
        if guided:
            cond = mask_cond if cfg.mask_during_guidance else open_cond
        else:
            cond = mask_cond
        residuals = None
        if branch is not None:
            residuals, _ = control_forward(branch, edges, z, np.full(len(layouts), t), layouts)
        eps = model.predict(z, t, cond, residuals)
        if hooks is not None:
            hooks(k, t, z, eps)
        a, s = schedule.alpha(t), schedule.sigma(t)
        a_prev, s_prev = schedule.alpha(t_prev), schedule.sigma(t_prev)
        x0 = (z - s * eps) / a
        if cfg.clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
            eps = (z - a * x0) / s
        if cfg.ancestral and t_prev > 0:
            var = (s_prev ** 2 / s ** 2) * (1.0 - (a / a_prev) ** 2)
            noise = np.stack([r.standard_normal(z.shape[1:]) for r in rngs])
            z = a_prev * x0 + math.sqrt(max(s_prev ** 2 - var, 0.0)) * eps + math.sqrt(var) * noise
        else:
            z = a_prev * x0 + s_prev * eps
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"step {k} (t={t}): non-finite latent")
    return z


def sample(model: Denoiser, layouts, prompt: PromptSpec, cfg: SamplerConfig,
           schedule: NoiseSchedule = NoiseSchedule(), branch=None, edges=None, seeds=None,
           hw=(32, 32)) -> np.ndarray:
    """Generate one image per layout (B x 1 x H x W in [0, 1])."""
    single = isinstance(layouts, Layout)
    layouts = [layouts] if single else list(layouts)
    seeds = [cfg.seed + i for i in range(len(layouts))] if seeds is None else list(seeds)
    eps = _seed_noise(seeds, (1, *hw))
    z = add_noise(np.zeros_like(eps), schedule.T, eps, schedule)
    grid = timestep_grid(schedule, cfg.steps)
    z = denoise_loop(model, z, grid, layouts, prompt, cfg, schedule, branch, edges, seeds)
    out = from_latent(z)
    return out[0] if single else out


def img2img(model: Denoiser, init, strength: float, layouts, prompt: PromptSpec, cfg: SamplerConfig,
            schedule: NoiseSchedule = NoiseSchedule(), seeds=None, branch=None, edges=None) -> np.ndarray:
    """Noise ``init`` (images in [0, 1]) to ``ceil(strength*T)`` and denoise back."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    single = isinstance(layouts, Layout)
    layouts = [layouts] if single else list(layouts)
    init = np.asarray(init, dtype=np.float64)
    batch = init if not single else init[None]
    if batch.ndim == 3:
        batch = batch[:, None]
    t_start = math.ceil(strength * schedule.T)
    if t_start == 0:
        return init.copy()
    seeds = [cfg.seed + i for i in range(len(layouts))] if seeds is None else list(seeds)
    eps = _seed_noise(seeds, batch.shape[1:])
    # full strength discards the init so it matches sampling from scratch exactly
    z0 = np.zeros_like(eps) if t_start >= schedule.T else to_latent(batch)
    z = add_noise(z0, t_start, eps, schedule)
    grid = timestep_grid(schedule, cfg.steps, t_start)
    z = denoise_loop(model, z, grid, layouts, prompt, cfg, schedule, branch, edges, seeds)
    out = from_latent(z)
    return out[0] if single else out
