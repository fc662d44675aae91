"""Acceptance gate: one test per criterion, each recorded as a PASS/FAIL summary line."""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import mc_iou
from layoutgen.ablation import ExperimentConfig, edge_diversity_report, layout_adherence_report, train_models
from layoutgen.attention import TokenMap, build_cross_mask, build_self_mask, sdpa
from layoutgen.evalkit import box_iou, detect, frechet
from layoutgen.fgcontrol import BranchConfig, ControlBranch, gate, purify
from layoutgen.guidance import region_gradient, region_loss
from layoutgen.layout import BACKGROUND, Instance, Layout, obb_iou, rasterize
from layoutgen.spectral import (HighPassSpec, dft2_forward, dft2_inverse, freq_gate, highpass, highpass_mask,
                                soft_threshold)
from layoutgen.synthdata import DEFAULT_PALETTE, gen_scene
from layoutgen.toydiffusion import (Denoiser, DenoiserConfig, PromptSpec, SamplerConfig, make_conditioning,
                                    sample)


def _record(criteria, k, name, ok, detail):
    criteria[k] = (bool(ok), name, detail)
    print(f"criterion {k} {'PASS' if ok else 'FAIL'}: {name}: {detail}")
    assert ok, f"criterion {k} ({name}) failed: {detail}"


def _random_layout(r, h=32, w=32, max_n=5):
    insts = []
    for _ in range(int(r.integers(0, max_n + 1))):
        c = int(r.integers(3))
        if r.random() < 0.5:
            insts.append(Instance.hbb(c, *r.uniform([-4, -4, 1, 1], [w, h, w / 2, h / 2])))
        else:
            insts.append(Instance.obb(c, *r.uniform([0, 0, 1, 1], [w, h, w / 2, h / 2]), r.uniform(-math.pi, math.pi)))
    return Layout(w, h, insts)


def test_c01_gating_exactness(criteria):
    r = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(1000):
        lay = _random_layout(r)
        side = 32 if k % 2 else 16
        dh = r.standard_normal((int(r.integers(1, 9)), side, side)) * r.uniform(0.01, 10)
        final = gate(purify(dh, HighPassSpec(16, 0.05)), lay)
        worst = max(worst, float(np.abs(final * rasterize(lay, side, side).bg_mask).max()))
    dt = time.perf_counter() - t0
    _record(criteria, 1, "gating exactness", worst == 0.0 and dt < 10,
            f"max |residual on background| = {worst} over 1000 pairs in {dt:.2f}s")


def test_c02_zero_init_transparency(criteria):
    t0 = time.perf_counter()
    model = Denoiser.init(DenoiserConfig(), 0)
    branch = ControlBranch.init(BranchConfig(), 0)
    r = np.random.default_rng(2)
    seeds = list(range(20))
    lays = [_random_layout(r, max_n=4) for _ in seeds]
    edges = r.random((20, 32, 32))
    cfg = SamplerConfig()
    a = sample(model, lays, PromptSpec(), cfg, seeds=seeds)
    b = sample(model, lays, PromptSpec(), cfg, seeds=seeds, branch=branch, edges=edges)
    dt = time.perf_counter() - t0
    same = bool(np.array_equal(a, b))
    _record(criteria, 2, "zero-init transparency", same and dt < 120,
            f"bit-identical for 20 seeds: {same}, {dt:.1f}s")


def test_c03_frequency_purity(criteria):
    r = np.random.default_rng(3)
    const = max(float(np.abs(freq_gate(np.full((4, 32, 32), c), HighPassSpec())).max())
                for c in r.uniform(-5, 5, 20))
    const_hp = max(float(np.abs(highpass(np.full((16, 16), c), 16)).max()) for c in r.uniform(-5, 5, 20))
    rt = max(float(np.abs(dft2_inverse(dft2_forward(x)).real - x).max())
             for x in (r.standard_normal((32, 32)), r.standard_normal((64, 64))))
    st = soft_threshold(np.array([0.03, -0.10]), 0.05)
    st_ok = st[0] == 0.0 and st[1] == -0.05
    zeroed = int((highpass_mask(32, 32, 16) == 0).sum())
    ok = const <= 1e-9 and const_hp <= 1e-9 and rt <= 1e-9 and st_ok and zeroed == 9
    _record(criteria, 3, "frequency purity", ok,
            f"constant->{max(const, const_hp):.1e}, roundtrip {rt:.1e}, soft threshold {st.tolist()}, "
            f"zeroed bins {zeroed}")


def test_c04_region_loss_arithmetic(criteria):
    cases = [region_loss([(0.5, 0.0)]).total, region_loss([(0.2, 0.2)]).total,
             region_loss([(0.1, 0.1), (0.4, 0.4)]).total]
    exact = abs(cases[0]) <= 1e-12 and abs(cases[1] - 0.25) <= 1e-12 and abs(cases[2] - 8 / 9) <= 1e-12
    r = np.random.default_rng(4)
    bad = 0
    for _ in range(10 ** 4):
        n = int(r.integers(1, 9))
        stats = r.random((n, 2)) * r.choice([1e-9, 1e-3, 1.0], size=(n, 2))
        v = region_loss([tuple(s) for s in stats]).total
        bad += not (0.0 <= v <= n)
    _record(criteria, 4, "region-loss arithmetic", exact and bad == 0,
            f"cases {cases}, bound violations {bad}/10000")


def test_c05_guidance_gradient(criteria):
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-4
    for k in range(10):
        r = np.random.default_rng(50 + k)
        cfg = DenoiserConfig(channels=int(r.integers(3, 7)), attn_dim=4, heads=int(r.integers(1, 3)), token_dim=4,
                             time_dim=8)
        model = Denoiser.init(cfg, k)
        lays = [_random_layout(r, 8, 8, 3) for _ in range(2)]
        if not any(len(l) for l in lays):
            lays[0] = Layout(8, 8, [Instance.hbb(0, 1, 1, 4, 4)])
        cond = make_conditioning(lays, PromptSpec(), (8, 8), False)
        ms = [rasterize(l, 4, 4) for l in lays]
        z = r.standard_normal((2, 1, 8, 8))
        t = int(r.integers(100, 1000))
        _, g, _ = region_gradient(model, z, t, cond, ms)
        fd = np.zeros_like(z)
        for idx in np.ndindex(*z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (region_gradient(model, zp, t, cond, ms)[0] - region_gradient(model, zm, t, cond, ms)[0]) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300)))
    dt = time.perf_counter() - t0
    _record(criteria, 5, "guidance gradient", worst <= 1e-3 and dt < 60,
            f"worst relative error {worst:.2e} over 10 configs in {dt:.1f}s")


def test_c06_masked_attention_blocking(criteria):
    r = np.random.default_rng(6)
    zero_ok, ident_ok = True, True
    for _ in range(100):
        lab = np.full((6, 6), BACKGROUND)
        y0, x0 = r.integers(0, 2, size=2)
        lab[y0:y0 + 3, x0:x0 + 3] = 0
        lab[4:, 3:] = 1
        lab[r.random((6, 6)) < 0.1] = BACKGROUND
        tm = TokenMap((0,), ((1,), (2,)))
        cm = build_cross_mask(lab, tm, 5)
        sm = build_self_mask(lab)
        q = r.standard_normal((36, 4))
        k = r.standard_normal((5, 4))
        v = r.standard_normal((5, 3))
        out, w = sdpa(q, k, v, cm)
        zero_ok &= bool((w[np.isneginf(cm)] == 0).all())
        k2, v2 = k.copy(), v.copy()
        k2[2] += r.standard_normal(4) * 5
        v2[2] += r.standard_normal(3) * 5
        out2, _ = sdpa(q, k2, v2, cm)
        inst1 = (lab.reshape(-1) == 0)
        ident_ok &= bool(np.array_equal(out[inst1], out2[inst1]))
        x = r.standard_normal((36, 4))
        so, sw = sdpa(x, x, x, sm)
        zero_ok &= bool((sw[np.isneginf(sm)] == 0).all())
        x2 = x.copy()
        inst2 = (lab.reshape(-1) == 1)
        x2[inst2] += r.standard_normal((int(inst2.sum()), 4))
        so2, _ = sdpa(x2, x2, x2, sm)
        ident_ok &= bool(np.array_equal(so[inst1], so2[inst1]))
    _record(criteria, 6, "masked-attention blocking", zero_ok and ident_ok,
            f"blocked weights exactly 0: {zero_ok}; instance-1 outputs bit-identical over 100 trials: {ident_ok}")


def test_c07_oriented_iou(criteria):
    r = np.random.default_rng(7)
    worst = 0.0
    for k in range(50):
        a = Instance.obb(0, *r.uniform([0, 0, 1, 1], [6, 6, 6, 6]), r.uniform(-math.pi, math.pi))
        b = Instance.obb(0, *r.uniform([0, 0, 1, 1], [6, 6, 6, 6]), r.uniform(-math.pi, math.pi))
        worst = max(worst, abs(obb_iou(a, b) - mc_iou(a, b, 10 ** 6, k, stratified=True)))
    sq = obb_iou(Instance.obb(0, 0, 0, 1, 1, 0.0), Instance.obb(0, 0, 0, 1, 1, math.pi / 4))
    _record(criteria, 7, "oriented IoU", worst <= 1e-3 and abs(sq - 0.7071) <= 1e-3,
            f"max |clip - MC| = {worst:.1e} over 50 pairs, rotated square {sq:.5f}")


def test_c08_frechet_formula(criteria):
    r = np.random.default_rng(8)
    m = r.standard_normal((6, 6))
    s = m @ m.T
    mu = r.standard_normal(6)
    same = frechet(mu, s, mu, s)
    scalar = frechet([0.0], [[1.0]], [1.0], [[1.0]])
    a, b = r.random(6) + 0.05, r.random(6) + 0.05
    mu_b = r.standard_normal(6)
    closed = float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2) + np.sum((mu - mu_b) ** 2))
    diag = abs(frechet(mu, np.diag(a), mu_b, np.diag(b)) - closed)
    _record(criteria, 8, "Frechet formula", same <= 1e-9 and scalar == 1.0 and diag <= 1e-9,
            f"identical {same:.1e}, scalar {scalar!r}, diagonal error {diag:.1e}")


def test_c09_oracle_validity(criteria):
    ious, correct, total = [], 0, 0
    for seed in range(200):
        s = gen_scene(5000 + seed)
        dets = detect(s.image, DEFAULT_PALETTE)
        for g in s.layout.instances:
            total += 1
            if not dets:
                ious.append(0.0)
                continue
            best = max(dets, key=lambda d: box_iou(d.box, g))
            ious.append(box_iou(best.box, g))
            correct += best.class_id == g.class_id
    mean_iou = float(np.mean(ious))
    _record(criteria, 9, "oracle validity", mean_iou >= 0.9 and correct == total,
            f"mean IoU {mean_iou:.4f}, class accuracy {correct}/{total} on 200 scenes")


@pytest.fixture(scope="module")
def end_to_end():
    cfg = ExperimentConfig()
    t0 = time.time()
    models = train_models(cfg)
    reports = layout_adherence_report(models, cfg)
    runtime = time.time() - t0
    return cfg, models, reports, runtime


def test_c10_end_to_end_layout_adherence(criteria, end_to_end):
    cfg, _, rep, runtime = end_to_end
    ap = {k: r["ap50_95"] for k, r in rep.items()}
    fg_gain = ap["full+fgcontrol"] - ap["full"]
    attn_gain = ap["full"] - ap["neither"]
    ordering = ap["full+fgcontrol"] > ap["gated_no_highpass"] > ap["global_control"]
    ok = fg_gain >= 0.05 and attn_gain >= 0.03 and runtime < 45 * 60
    detail = (f"AP50-95 {', '.join(f'{k}={v:.4f}' for k, v in ap.items())}; fgcontrol gain {fg_gain:+.4f} (>=0.05), "
              f"masked+guidance gain {attn_gain:+.4f} (>=0.03); control ordering full>gated>global {ordering}; "
              f"train+generate {runtime / 60:.1f} min (<45)")
    _record(criteria, 10, "end-to-end layout adherence", ok, detail)


def test_c11_end_to_end_edge_diversity(criteria, end_to_end):
    cfg, models, _, _ = end_to_end
    rep = edge_diversity_report(models, cfg)
    ok = rep["min_pairwise_mad"] > 0.01 and rep["min_inside_fraction"] >= 0.9
    detail = (f"{len(cfg.diversity_seeds)} seeds, min pairwise MAD {rep['min_pairwise_mad']:.4f} (>0.01), "
              f"min edge mass inside boxes {rep['min_inside_fraction']:.3f} (>=0.9), "
              f"composite itself {rep['composite_inside_fraction']:.3f}")
    _record(criteria, 11, "end-to-end edge diversity", ok, detail)


def _cli(*args, cwd):
    res = subprocess.run([sys.executable, "-m", "layoutgen.cli", *map(str, args)], capture_output=True, cwd=cwd)
    assert res.returncode == 0, res.stderr.decode()
    return res.stdout


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c12_cli_determinism(criteria, tmp_path):
    def run(tag):
        w = tmp_path / tag
        w.mkdir()
        outs = {}
        outs["synth"] = _cli("synth", "--n", 5, "--seed", 4, "--out", "data", cwd=w)
        outs["edb build"] = _cli("edb", "build", "--root", "data", "--out", "edb.json", cwd=w)
        outs["edb query"] = _cli("edb", "query", "--root", "data", "--class", "building", "--ar", 1.3, "--k", 3, cwd=w)
        outs["compose"] = _cli("compose", "--layout", "data/layouts/0000.json", "--edb", "data", "--out", "c.png",
                               cwd=w)
        outs["train"] = _cli("train", "--target", "base", "--data", "data", "--out", "base", "--steps", 3,
                             "--batch-size", 2, cwd=w)
        outs["train branch"] = _cli("train", "--target", "branch", "--data", "data", "--base", "base", "--out",
                                    "branch", "--steps", 2, "--batch-size", 2, cwd=w)
        outs["train edges"] = _cli("train", "--target", "edgemodel", "--data", "data", "--out", "edge", "--steps", 2,
                                   "--batch-size", 2, cwd=w)
        outs["generate"] = _cli("generate", "--layout", "data/layouts", "--weights", "base", "--steps", 3,
                                "--fgcontrol", "--branch", "branch", "--edge-map", "data/edges", "--out", "gen", cwd=w)
        outs["generate edges"] = _cli("generate", "--mode", "edges", "--layout", "data/layouts/0001.json",
                                      "--weights", "edge", "--edb", "data", "--seeds", "1,2", "--steps", 3,
                                      "--out", "gen_edges", cwd=w)
        outs["eval"] = _cli("eval", "--generated", "gen", "--gt", "data", "--out", "report.json", cwd=w)
        outs["demo-filter"] = _cli("demo-filter", "--image", "data/scenes/0000.png", "--out", "demo", cwd=w)
        return outs, _tree_bytes(w)

    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out_a, files_a = run("a")
        out_b, files_b = run("b")
    differ = sorted({k for k in out_a if out_a[k].replace(b"/a/", b"/b/") != out_b[k]} |
                    {k for k in files_a if files_a[k] != files_b.get(k)} | (set(files_b) ^ set(files_a)))
    _record(criteria, 12, "CLI determinism", not differ,
            f"{len(out_a)} commands, {len(files_a)} files compared; differing: {differ or 'none'}")
