"""Acceptance criteria 1-10, one PASS/FAIL line each.

Each test prints a single summary line straight to the terminal and then
asserts it. Criterion 6 trains two toy models through the CLI and is slow.
"""
import math
import time

import numpy as np
import pytest
from test_analysis import DRM_COLUMN, GOLDEN

from fbsnet import ModelConfig, analyze, build, init_weights, load_weights, save_weights, shape_trace
from fbsnet import blocks as B
from fbsnet import nn
from fbsnet.analysis import REFERENCE_FLOPS, REFERENCE_SIB_FLOPS, registry_param_count
from fbsnet.checks import BLOCK_NAMES, block_cases, block_gradcheck, conv_oracle_suite, gradcheck, \
    primitive_cases, shuffle_checks
from fbsnet.cli import main
from fbsnet.fileio import save_image_ppm
from fbsnet.tensor import Tensor, no_grad
from fbsnet.training import ConfusionMatrix, PolySchedule, miou, read_history_csv

LN4 = math.log(4)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def full_graph():
    return build(ModelConfig())


def test_criterion_1_shape_trace(full_graph, verdict):
    t0 = time.perf_counter()
    trace = dict(shape_trace(full_graph))
    secs = time.perf_counter() - t0
    rows = [trace[d.name][1:] for d in full_graph.layers if d.branch != "sdb"]
    drm = [trace[f"sdb.drm.{k}"][1:] for k in ("input", "conv1", "separable", "output")]
    ok = rows == GOLDEN and drm == DRM_COLUMN and rows[32] == (128, 64, 128) and secs < 1
    verdict(1, ok, f"{sum(a == b for a, b in zip(rows, GOLDEN))}/45 rows match, DRM {drm == DRM_COLUMN}, "
                   f"{secs * 1000:.0f} ms")


def test_criterion_2_parameter_budget(full_graph, verdict):
    t0 = time.perf_counter()
    sib = build(ModelConfig(spatial_branch=False))
    full_n, sib_n = analyze(full_graph).params, analyze(sib).params
    exact = full_n == registry_param_count(full_graph) and sib_n == registry_param_count(sib)
    secs = time.perf_counter() - t0
    rel, rel_sib = abs(full_n / 620_000 - 1), abs(sib_n / 592_300 - 1)
    ok = rel <= 0.15 and rel_sib <= 0.15 and exact and secs < 1
    verdict(2, ok, f"params {full_n} ({rel:.1%} off), SIB-only {sib_n} ({rel_sib:.1%} off), "
                   f"registry exact {exact}, {secs * 1000:.0f} ms")


def test_criterion_3_flop_budget(full_graph, verdict):
    t0 = time.perf_counter()
    macs = analyze(full_graph).macs
    sib_macs = analyze(build(ModelConfig(spatial_branch=False))).macs
    secs = time.perf_counter() - t0
    rel = min(abs(macs - REFERENCE_FLOPS), abs(2 * macs - REFERENCE_FLOPS)) / REFERENCE_FLOPS
    increase = macs / sib_macs - 1
    ref_delta = REFERENCE_FLOPS - REFERENCE_SIB_FLOPS
    delta_rel = abs((macs - sib_macs) - ref_delta) / ref_delta
    # the branch must add compute, by a relative amount in [30%, 60%], and an absolute
    # amount within 20% of the published delta
    ok = rel <= 0.20 and 0.30 <= increase <= 0.60 and delta_rel <= 0.20 and secs < 1
    verdict(3, ok, f"MACs {macs / 1e9:.3f} G ({rel:.1%} off), SIB-only {sib_macs / 1e9:.3f} G, "
                   f"branch adds {increase:.1%} ({(macs - sib_macs) / 1e9:.2f} G, {delta_rel:.1%} off "
                   f"the reference delta), {secs * 1000:.0f} ms")


def test_criterion_4_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, fn, tensors in primitive_cases(seed=11):
        worst[name] = max(gradcheck(fn, tensors, seed=11).values())
    for name, mod, fwd, inputs in block_cases(seed=11, training=False):
        worst[name] = max(block_gradcheck(mod, fwd, inputs, seed=11).values())
    secs = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    ok = worst[name] < 1e-5 and set(BLOCK_NAMES) <= set(worst) and secs < 120
    verdict(4, ok, f"{len(worst)} cases, worst rel err {worst[name]:.1e} ({name}), {secs:.1f} s")


def test_criterion_5_conv_oracle(verdict):
    t0 = time.perf_counter()
    failures, worst = conv_oracle_suite(200, seed=5, tol=1e-6)
    secs = time.perf_counter() - t0
    verdict(5, not failures and secs < 60,
            f"{200 - len(failures)}/200 specs within 1e-6, worst {worst:.1e}, {secs:.1f} s")


def _toy_run(tmp_path, optimizer):
    w, h, data = tmp_path / f"{optimizer}.fbsw", tmp_path / f"{optimizer}.csv", tmp_path / "data"
    t0 = time.perf_counter()
    assert main(["train-toy", "--seed", "7", "--iters", "300", "--optimizer", optimizer, "--out-weights", str(w),
                 "--history", str(h), "--data-dir", str(data), "--normalize"]) == 0
    secs = time.perf_counter() - t0
    rows = read_history_csv(h).rows
    final = rows[-1]
    late = [(r.iteration + 1, r.loss) for r in rows if r.iteration + 1 > 10 and not r.loss < LN4]
    return w, data, secs, final, late


@pytest.mark.slow
@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_criterion_6_toy_overfit(optimizer, tmp_path, capsys, verdict):
    w, data, secs, final, late = _toy_run(tmp_path, optimizer)
    capsys.readouterr()
    assert main(["eval", "--weights", str(w), "--images", str(data / "images"),
                 "--labels", str(data / "labels"), "--normalize"]) == 0
    out = capsys.readouterr().out.splitlines()
    acc = float(out[-2].split()[1])
    miou = float(out[-1].split()[1])
    ok = acc >= 0.95 and miou >= 0.90 and not late and secs < 600
    spikes = ", ".join(f"{i}:{v:.2f}" for i, v in late[:6]) or "none"
    verdict(6, ok, f"{optimizer}: pixel_acc {acc:.4f}, mIoU {miou:.4f}, loss >= ln 4 after iteration 10 "
                   f"at [{spikes}], {secs:.0f} s")


def test_criterion_7_schedule(verdict):
    s = PolySchedule(4.5e-2, 300)
    vals = [s(0), s(300), s(150)]
    want = [4.5e-2, 0.0, 4.5e-2 * 0.5 ** 0.9]
    ok = vals[1] == 0.0 and all(abs(a - b) <= 1e-12 * b for a, b in zip(vals, want) if b)
    verdict(7, ok, f"lr(0)={vals[0]!r}, lr(max)={vals[1]!r}, lr(max/2)={vals[2]!r}")


def test_criterion_8_metrics(verdict):
    cm = ConfusionMatrix(2)
    cm.counts[...] = [[3, 1], [1, 3]]
    rng = np.random.default_rng(8)
    pred, lab = rng.integers(0, 5, (2, 16, 16)), rng.integers(0, 5, (2, 16, 16))
    base = miou(ConfusionMatrix(5).accumulate(pred, lab))[1]
    invariant = 0
    for _ in range(20):
        perm = rng.permutation(5)
        invariant += miou(ConfusionMatrix(5).accumulate(perm[pred], perm[lab]))[1] == base
    value = miou(cm)[1]
    ok = value == 0.6 and invariant == 20
    verdict(8, ok, f"[[3,1],[1,3]] -> {value!r}, permutation invariant {invariant}/20")


def test_criterion_9_determinism(tmp_path, verdict):
    cfg = ModelConfig(num_classes=4, input_size=(64, 128), seed=9)
    save_weights(build(cfg), tmp_path / "a.fbsw")
    save_weights(build(cfg), tmp_path / "b.fbsw")
    same_init = (tmp_path / "a.fbsw").read_bytes() == (tmp_path / "b.fbsw").read_bytes()
    g = build(cfg)
    reg = load_weights(tmp_path / "a.fbsw")
    round_trip = all(np.array_equal(reg[k], v) for k, v in g.registry().items()) and reg.keys() == g.registry().keys()
    img = tmp_path / "in.ppm"
    save_image_ppm(img, np.random.default_rng(9).random((3, 64, 128)).astype(np.float32))
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}.ppm"
        assert main(["infer", "--weights", str(tmp_path / "a.fbsw"), "--image", str(img), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    ok = same_init and round_trip and outs[0] == outs[1]
    verdict(9, ok, f"seeded weights identical {same_init}, round trip exact {round_trip}, "
                   f"infer identical {outs[0] == outs[1]}")


def test_criterion_10_structural(verdict):
    bad_shuffle = shuffle_checks(32)
    rng = np.random.default_rng(10)
    lo, hi = 1.0, 0.0
    cam, sam, fam = B.CAM(8, dtype=np.float64), B.SAM(dtype=np.float64), B.FAM(8, dtype=np.float64)
    for k, mod in enumerate((cam, sam, fam)):
        init_weights(mod, k)
    sam.bn.running_mean[...] = 0.5
    sam.bn.running_var[...] = 2.0
    with no_grad():
        for trial in range(20):
            x = Tensor(rng.normal(0, 3, (2, 8, 8, 8)))
            y = Tensor(rng.normal(0, 3, (2, 8, 8, 8)))
            gates = [cam.attention_map(x), sam.attention_map(x, trial % 2 == 0)]
            _, parts = fam.apply(x, y, training=True)
            gates += [parts["K_h"], parts["K_w"]]
            lo = min([lo] + [float(g.data.min()) for g in gates])
            hi = max([hi] + [float(g.data.max()) for g in gates])
        bru, drm = B.BRU(8, 5, dtype=np.float64), B.DRM(8, 16, dtype=np.float64)
        for mod in (bru, drm):
            init_weights(mod, 3)
            for name, p in mod.named_parameters():
                if not name.endswith((".gamma", ".beta")):
                    p.data[...] = 0.0
        bru_ok = drm_ok = True
        for training in (True, False):
            bru_ok &= np.allclose(bru(x, training).data, nn.channel_shuffle(x, 2).data, atol=1e-12)
            drm_ok &= np.allclose(drm(x, training).data, x.data, atol=1e-12)
    ok = not bad_shuffle and 0 < lo and hi < 1 and bru_ok and drm_ok
    verdict(10, ok, f"shuffle bijective and exact for all C <= 32 {not bad_shuffle}, gates span "
                    f"[{lo:.3g}, {hi:.3g}], zero BRU -> shuffle {bru_ok}, zero DRM -> identity {drm_ok}")
