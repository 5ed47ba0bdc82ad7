"""Acceptance criteria 1-13, one test each.

Every test prints a single ``criterion N: PASS|FAIL <detail>`` line to the
terminal (uncaptured) before asserting, so ``pytest -v`` output doubles as
the acceptance report.
"""
import dataclasses
import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from abpdcnet import tape
from abpdcnet.abpdc import AbpdcParams, abpdc, abpdc_forward
from abpdcnet.attention import global_attention_var, window_attention_var
from abpdcnet.experiments import ExperimentConfig, run_ablation, run_register, run_train
from abpdcnet.footprint import footprint
from abpdcnet.fpran import FpranConfig, rotation_displacement
from abpdcnet.losses import (cross_entropy_var, ncc_loss, ncc_loss_var, smoothness_loss,
                             smoothness_loss_var)
from abpdcnet.model import LossWeights, Model, ModelConfig, classify
from abpdcnet.synthetic import GenConfig, generate_case
from abpdcnet.volume import Rng, spatial_grid
from abpdcnet.warp import (affine_compose_var, affine_displacement_var, base_rotation,
                           identity_affine, sample_var, trilinear_sample)
from conftest import TOY
from helpers import model_grad_error, naive_conv3d, tape_grad_error

SEEDS = range(5)


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


# 1 ----------------------------------------------------------------------


def test_c01_footprint_oracle(report):
    t = time.perf_counter()
    ok = True
    for k in (1, 3, 5, 7):
        m = k // 2
        brute = [o for o in itertools.product(range(-m, m + 1), repeat=3)
                 if max(abs(o[1]), abs(o[2])) + abs(o[0]) <= m]
        ok &= list(footprint(k).pyramid) == brute
    sizes = (len(footprint(3).pyramid), len(footprint(5).pyramid))
    dt = time.perf_counter() - t
    report(1, ok and sizes == (11, 45) and dt < 1.0, f"|S(3)|,|S(5)| = {sizes}, {dt:.3f} s")


# 2 ----------------------------------------------------------------------


def test_c02_standard_mode_matches_naive_convolution(report):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    fp = footprint(3)
    for _ in range(20):
        x = rng.normal(size=(1, 2, 6, 6, 6))
        w = rng.normal(size=(2, 2, 3, 3, 3))
        out, _ = abpdc_forward(x, AbpdcParams(w, mode="standard"), fp)
        worst = max(worst, float(np.abs(out - naive_conv3d(x, w)).max()))
    dt = time.perf_counter() - t
    report(2, worst < 1e-12 and dt < 10.0, f"max |diff| = {worst:.2e}, {dt:.2f} s")


# 3 ----------------------------------------------------------------------


def cdc_oracle(x, w, theta):
    """theta * sum_d w(d) (x(v+d) - x(v)) + (1 - theta) * sum_d w(d) x(v+d), zero padded."""
    n, ci, D, H, W = x.shape
    co, _, k = w.shape[:3]
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r), (r, r)))
    out = np.zeros((n, co, D, H, W))
    for o in range(co):
        for c in range(ci):
            for dz, dy, dx in itertools.product(range(k), repeat=3):
                nb = xp[:, c, dz:dz + D, dy:dy + H, dx:dx + W]
                wt = w[o, c, dz, dy, dx]
                out[:, o] += theta * wt * (nb - x[:, c]) + (1 - theta) * wt * nb
    return out


def test_c03_cdc_degeneration(report):
    rng = np.random.default_rng(3)
    fp = footprint(3)
    worst = 0.0
    for _ in range(5):
        x = rng.normal(size=(2, 2, 5, 6, 4))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        out, _ = abpdc_forward(x, AbpdcParams(w, mode="fixed", theta=0.7), fp, diff_offsets=fp.cube)
        worst = max(worst, float(np.abs(out - cdc_oracle(x, w, 0.7)).max()))
    report(3, worst < 1e-12, f"max |diff| = {worst:.2e}")


# 4 ----------------------------------------------------------------------


def _grad_cases():
    fp = footprint(3)

    def abpdc_case(r):
        return (lambda a: abpdc(a["x"], a["w"], a["gs"], a["gb"], fp, "adaptive", stride=(1, 2, 2)),
                {"x": r.normal(size=(2, 2, 4, 4, 4)), "w": 0.5 * r.normal(size=(2, 2, 3, 3, 3)),
                 "gs": np.array([r.uniform(0.2, 2)]), "gb": np.array([r.normal()])}, False)

    def sampler_case(r):
        return (lambda a: sample_var(a["src"], a["c"]),
                {"src": r.normal(size=(1, 2, 3, 4, 4)),
                 "c": r.uniform(-0.5, 1.0, size=(1, 3, 12)) * np.array([2.5, 3.5, 3.5]).reshape(1, 3, 1)}, True)

    def affine_case(r):
        return (lambda a: affine_displacement_var(affine_compose_var(base_rotation(), a["A"]), a["p"],
                                                  (8, 6, 8), (2, 2, 2)),
                {"A": identity_affine()[None] + 0.1 * r.normal(size=(1, 3, 4)),
                 "p": r.uniform(0, 3, size=(1, 3, 2, 3, 4))}, False)

    def global_attention_case(r):
        return (lambda a: global_attention_var(a["q"], a["k"], a["v"])[0],
                {"q": r.normal(size=(1, 3, 2, 2, 3)), "k": r.normal(size=(1, 3, 2, 2, 3)),
                 "v": r.normal(size=(1, 2, 2, 2, 3))}, False)

    def window_attention_case(r):
        return (lambda a: window_attention_var(a["q"], a["k"], a["v"], 3)[0],
                {"q": r.normal(size=(1, 3, 3, 3, 3)), "k": r.normal(size=(1, 3, 3, 3, 3)),
                 "v": r.normal(size=(1, 2, 3, 3, 3))}, False)

    def ncc_case(r):
        return (lambda a: ncc_loss_var(a["a"], a["b"], 3),
                {"a": r.normal(size=(1, 1, 4, 4, 4)), "b": r.normal(size=(1, 1, 4, 4, 4))}, False)

    def smooth_case(r):
        return (lambda a: smoothness_loss_var(a["psi"]), {"psi": r.normal(size=(1, 3, 3, 4, 3))}, False)

    def ce_case(r):
        y = r.integers(0, 2, size=4)
        return (lambda a: cross_entropy_var(a["z"], y), {"z": r.normal(size=(4, 2))}, False)

    def classifier_case(r):
        return (lambda a: classify(a["fc"], a["fm"], {"cls.W": a["W"], "cls.b": a["b"]}),
                {"fc": r.normal(size=(2, 3, 2, 2, 2)), "fm": r.normal(size=(2, 3, 2, 2, 2)),
                 "W": r.normal(size=(2, 6)), "b": r.normal(size=(2,))}, False)

    return {"abpdc-adaptive": abpdc_case, "trilinear-sampler": sampler_case, "affine-grid": affine_case,
            "global-attention": global_attention_case, "window-attention": window_attention_case,
            "ncc": ncc_case, "smoothness": smooth_case, "cross-entropy": ce_case,
            "classifier": classifier_case}


def test_c04_gradient_suite(report):
    t = time.perf_counter()
    worst, where = 0.0, ""
    for name, make in _grad_cases().items():
        for seed in SEEDS:
            build, arrays, kinks = make(np.random.default_rng(100 + seed))
            err, used, _ = tape_grad_error(build, arrays, seed, eps=1e-5, probes=16, skip_kinks=kinks)
            assert used > 0
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
    dt = time.perf_counter() - t
    report(4, worst < 1e-4 and dt < 120.0,
           f"9 ops x 5 seeds, worst rel. error {worst:.1e} ({where}), {dt:.1f} s")


# 5 ----------------------------------------------------------------------


def test_c05_end_to_end_gradient(report):
    cfg = ModelConfig(**TOY, zero_init_output=False)
    rng = np.random.default_rng(5)
    ct, mri, y = rng.normal(size=(2, 1, 8, 8, 8)), rng.normal(size=(2, 1, 8, 8, 8)), np.array([0, 1])
    worst, used_total, skipped_total = 0.0, 0, 0
    for seed in SEEDS:
        err, used, skipped = model_grad_error(Model(cfg, seed=seed), ct, mri, y, LossWeights(),
                                              probes=2, eps=1e-5, seed=seed)
        worst, used_total, skipped_total = max(worst, err), used_total + used, skipped_total + skipped
    report(5, worst < 1e-4, f"worst rel. error {worst:.1e} over 5 seeds "
                            f"({used_total} probes, {skipped_total} skipped at ReLU/sampler kinks)")


# 6 ----------------------------------------------------------------------


def test_c06_ncc_properties(report):
    a = np.random.default_rng(6).normal(0, 3, size=(1, 1, 8, 8, 8))
    same = ncc_loss(a, a, 5)[0]
    neg = ncc_loss(a, -a + 7, 5)[0]
    aff = abs(ncc_loss(a, 2 * a + 3, 5)[0] - same)
    report(6, same <= -0.999 and neg >= 0.999 and aff < 1e-3,
           f"loss(a,a)={same:.6f} loss(a,-a+7)={neg:.6f} |diff affine|={aff:.1e}")


# 7 ----------------------------------------------------------------------


def test_c07_smoothness_analytics(report):
    const = smoothness_loss(np.full((1, 3, 5, 6, 7), -1.25))[0]
    ramp = np.zeros((1, 3, 5, 6, 7))
    ramp[:, 2] = np.arange(7.0)
    r = smoothness_loss(ramp)[0]
    report(7, const == 0.0 and r == 1.0 / 3.0, f"constant -> {const}, unit x-ramp -> {r!r}")


# 8 ----------------------------------------------------------------------


def test_c08_identity_cascade(report):
    cfg = ModelConfig(use_rotation=False)
    case = generate_case(Rng(8), GenConfig(rotation=False))
    res, _ = Model(cfg, seed=8).forward(case.ct, case.mri, None, track=False)
    zero = bool(np.all(res.psi1.value == 0))
    same = bool(np.array_equal(res.x_ct_warped.value, case.ct))
    report(8, zero and same, f"psi_1 all zero: {zero}, warped CT bit-equal: {same}")


# 9 ----------------------------------------------------------------------


def test_c09_rotation_one_hot(report):
    cfg = FpranConfig(channels=(1, 1, 1, 1), input_shape=(8, 8, 8), level_strides=((1, 1, 1),) * 4)
    psi = rotation_displacement(cfg, 1)
    coords = spatial_grid((8, 8, 8)) + psi
    worst, misplaced = 1.0, 0
    for z, y, x in itertools.product(range(8), repeat=3):
        src = np.zeros((1, 1, 8, 8, 8))
        src[0, 0, z, y, x] = 1.0
        out, _ = trilinear_sample(src, coords)
        # oracle: out[i, j, k] = src[k, j, 7 - i]
        target = (7 - x, y, z)
        worst = min(worst, float(out[(0, 0) + target]))
        misplaced += int(np.argmax(out[0, 0]) != np.ravel_multi_index(target, (8, 8, 8)))
    report(9, worst >= 0.999 and misplaced == 0,
           f"all 512 positions, min value at oracle index {worst:.6f}, misplaced {misplaced}")


# 10 ---------------------------------------------------------------------


def test_c10_registration_recovery(report, tmp_path):
    cfg = ExperimentConfig(seed=0, lr=1e-3, register_steps=500)
    t = time.perf_counter()
    r = run_register(cfg, tmp_path)
    dt = time.perf_counter() - t
    ok = r["endpoint_error_ratio"] <= 0.5 and r["final_ncc"] >= 0.9 and dt < 600
    report(10, ok, f"64x64x16, max |psi*| {r['max_nonrigid']:.2f} vox: endpoint error "
                   f"{r['initial_endpoint_error']:.3f} -> {r['final_endpoint_error']:.3f} "
                   f"(ratio {r['endpoint_error_ratio']:.2f}), NCC {r['initial_ncc']:.3f} -> "
                   f"{r['final_ncc']:.3f}, {dt:.0f} s")


# 11 ---------------------------------------------------------------------


def test_c11_classification_overfit(report):
    cfg = ExperimentConfig(train_cases=4, test_cases=0, epochs=200, max_steps=200, stop_when_fit=True)
    r = run_train(cfg, write=False)
    ok = r["train_acc"] == 1.0 and r["steps_to_fit"] is not None and r["steps_to_fit"] <= 200
    report(11, ok, f"train accuracy {r['train_acc']} after {r['steps']} steps "
                   f"(steps to fit: {r['steps_to_fit']})")


# 12 ---------------------------------------------------------------------


# reduced scale; strides keep every stage input >= 3 per axis and level 4 cubic,
# sparser texture and a wider lesion make the label learnable from 32 cases
ABLATION = ExperimentConfig(input_shape=(8, 32, 32),
                            stage_strides=((1, 2, 2), (1, 2, 2), (2, 2, 2), (1, 1, 1)),
                            train_cases=32, test_cases=32, epochs=30, batch_size=8, lr=1e-3,
                            gen_n_blobs=60, gen_lesion_amplitude=3.0, gen_lesion_sigma=0.2)


def test_c12_ablation_ordering(report):
    table = run_ablation(ABLATION, seeds=list(SEEDS), presets=("baseline", "+A+F"))
    base, full = table["baseline"]["mean"], table["+A+F"]["mean"]
    detail = ", ".join(f"{k}: {v['mean']:.3f} {[round(a, 3) for a in v['accuracy']]}" for k, v in table.items())
    report(12, full >= base, f"mean test accuracy over 5 seeds, {detail}")


# 13 ---------------------------------------------------------------------


def _cli(*args):
    r = subprocess.run([sys.executable, "-m", "abpdcnet.cli", *map(str, args)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    return r.stdout


def _snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c13_cli_determinism(report, tmp_path):
    cfg = ExperimentConfig(input_shape=(8, 16, 16), stage_channels=(2, 2, 3, 3),
                           stage_strides=((2, 2, 2), (1, 2, 2), (1, 1, 1), (1, 1, 1)), ncc_window=3,
                           epochs=2, batch_size=2, train_cases=4, test_cases=2, register_steps=3,
                           gen_psi_max=1.0, seed=13)
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    (tmp_path / "pred.txt").write_text("0.9 0.1 0.6 0.3\n")
    (tmp_path / "labels.txt").write_text("1 0 0 1\n")
    runs, stdout = [], []
    for rep in ("a", "b"):
        out = tmp_path / rep
        text = (_cli("gen", "--config", tmp_path / "c.cfg", "--out", out / "gen")
                + _cli("train", "--config", tmp_path / "c.cfg", "--out", out / "train")
                + _cli("register", "--config", tmp_path / "c.cfg", "--out", out / "register")
                + _cli("metrics", "--pred", tmp_path / "pred.txt", "--labels", tmp_path / "labels.txt",
                       "--out", out / "metrics.json"))
        stdout.append(text.replace(str(out), "<out>"))
        runs.append(_snapshot(out))
    same = runs[0] == runs[1] and stdout[0] == stdout[1]
    report(13, same and len(runs[0]) > 20,
           f"gen/train/register/metrics twice: {len(runs[0])} files, byte-identical: {same}")
