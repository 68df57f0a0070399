"""Acceptance suite. Each test prints one ``PASS``/``FAIL`` line with the
measured values, then asserts the criterion at its stated tolerance.

The end-to-end test trains the default configuration (about 6 minutes on
one core); the distractor test reuses that trained network.
"""
import json
import time

import numpy as np
import pytest

from cartseg import data as D
from cartseg import diffcore as dc
from cartseg.cli import main
from cartseg.diffcore import Tensor
from cartseg.losses import TverskyParams, soft_dice, tversky_index, tversky_loss
from cartseg.optim import AMSGrad, AMSGradConfig
from cartseg.pipeline import load_model, predict_volume
from cartseg.postproc import binarize, keep_largest, label_components
from cartseg.vnet import NetworkConfig, VNet

from .oracles import (
    central_differences,
    conv3d_loops,
    flood_fill_labels,
    gradient_mismatches,
    same_partition,
)


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}")
        assert ok, detail

    return report


# --- 1: gradients ----------------------------------------------------------


def _op_cases(rng):
    a = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    drop_seed = 7
    return {
        "add": (dc.add, [a(3, 4), a(3, 4)]),
        "sub": (dc.sub, [a(3, 4), a(3, 4)]),
        "mul": (dc.mul, [a(3, 4), a(3, 4)]),
        "div": (dc.div, [a(3, 4), pos(3, 4)]),
        "neg": (dc.neg, [a(5)]),
        "add_scalar": (lambda x: dc.add_scalar(x, 1.5), [a(5)]),
        "mul_scalar": (lambda x: dc.mul_scalar(x, -2.5), [a(5)]),
        "sum_axis": (lambda x: dc.tsum(x, (1, 2)), [a(2, 3, 4)]),
        "mean": (lambda x: dc.mean(x, 0), [a(3, 4)]),
        "concat": (lambda x, y: dc.concat_channels([x, y]), [a(1, 2, 2, 2, 2), a(1, 3, 2, 2, 2)]),
        # keep away from the kink at 0
        "selu": (dc.selu, [np.sign(v) * (np.abs(v) + 0.05) for v in [a(4, 4)]]),
        "sigmoid": (dc.sigmoid, [3 * a(4, 4)]),
        "dropout": (lambda x: dc.dropout(x, 0.4, True, np.random.default_rng(drop_seed)), [a(4, 4)]),
        "conv3d_s1_p1": (lambda x, w, b: dc.conv3d(x, w, b, 1, 1), [a(2, 2, 4, 4, 4), a(3, 2, 3, 3, 3), a(3)]),
        "conv3d_s2_k2": (lambda x, w, b: dc.conv3d(x, w, b, 2, 0), [a(1, 2, 4, 4, 4), a(3, 2, 2, 2, 2), a(3)]),
        "conv3d_s2_p1": (lambda x, w: dc.conv3d(x, w, None, 2, 1), [a(1, 2, 5, 5, 5), a(2, 2, 3, 3, 3)]),
        "conv3d_T": (lambda x, w, b: dc.conv3d_transposed(x, w, 2, b), [a(1, 3, 2, 2, 2), a(3, 2, 2, 2, 2), a(2)]),
    }


def _check(build, arrays, rng):
    leaves = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in arrays]
    out = build(*leaves)
    r = rng.normal(size=out.shape)
    (out * Tensor(r)).sum().backward()
    numeric = central_differences(
        lambda: float((build(*[Tensor(t.data) for t in leaves]).data * r).sum()), [t.data for t in leaves]
    )
    worst, bad = 0.0, 0
    for t, n in zip(leaves, numeric):
        b, w = gradient_mismatches(t.grad, n, rtol=1e-5)
        bad, worst = bad + b, max(worst, w)
    return bad, worst


def test_criterion_1_gradient_suite(verdict):
    t0 = time.time()
    rng = np.random.default_rng(0)
    failures, worst = [], 0.0
    for name, (build, arrays) in _op_cases(rng).items():
        bad, w = _check(build, arrays, rng)
        worst = max(worst, w)
        if bad:
            failures.append(name)

    net = VNet.build(NetworkConfig(stages=1, base_channels=2, input_patch_size=8), rng, dtype=np.float64)
    for name, p in net.params.items():
        if name.endswith(".bias"):
            p.data[:] = rng.normal(scale=0.1, size=p.shape)
    x = rng.normal(size=(1, 1, 8, 8, 8))
    y = (rng.random(x.shape) < 0.1).astype(np.float64)

    def loss():
        return tversky_loss(net.forward(Tensor(x), True, np.random.default_rng(3)), y)

    loss().backward()
    numeric = central_differences(lambda: float(loss().data), [p.data for p in net.params.values()])
    for (name, p), n in zip(net.params.items(), numeric):
        bad, w = gradient_mismatches(p.grad, n, rtol=1e-5)
        worst = max(worst, w)
        if bad:
            failures.append(name)
    seconds = time.time() - t0
    ok = not failures and seconds < 120
    verdict(1, "gradient suite", ok,
            f"{len(_op_cases(rng))} ops + {len(net.params)} micro-net tensors, worst rel err {worst:.1e}, "
            f"failures {failures}, {seconds:.1f}s")


# --- 2: oracle equivalence ---------------------------------------------------


def test_criterion_2_oracle_equivalence(verdict):
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        n, c, k = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        kernel, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        padding = int(rng.integers(0, kernel))
        spatial = tuple(int(s) for s in rng.integers(max(kernel - 2 * padding, 1), 6, size=3))
        x = rng.normal(size=(n, c, *spatial))
        w = rng.normal(size=(k, c, kernel, kernel, kernel))
        b = rng.normal(size=k) if rng.random() < 0.5 else None
        got = dc.conv3d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, padding).data
        want = conv3d_loops(x, w, b, stride, padding)
        assert got.shape == want.shape
        worst = max(worst, float(np.max(np.abs(got - want))))
    partitions_equal = 0
    for _ in range(100):
        m = rng.random((16, 16, 16)) < 0.2
        ref, count = flood_fill_labels(m, 26)
        comps = label_components(m, 26)
        partitions_equal += comps.count == count and same_partition(comps.labels, ref)
    seconds = time.time() - t0
    ok = worst <= 1e-12 and partitions_equal == 100 and seconds < 120
    verdict(2, "oracle equivalence", ok,
            f"conv max abs diff {worst:.1e} over 200 cases, {partitions_equal}/100 labelings equal, {seconds:.1f}s")


# --- 3: Tversky identities ---------------------------------------------------


def test_criterion_3_tversky_identities(verdict):
    rng = np.random.default_rng(2)
    truth = (rng.random((8, 8, 8)) < 0.1).astype(np.float64)
    perfect = tversky_index(Tensor(truth), truth).item()
    half = TverskyParams(0.5, 0.5, 1e-30)
    dice_gap = 0.0
    for _ in range(100):
        p = rng.random((6, 6, 6))
        g = (rng.random((6, 6, 6)) < 0.3).astype(np.float64)
        dice_gap = max(dice_gap, abs(tversky_index(Tensor(p), g, half).item() - soft_dice(p, g)))
    hand_truth = np.zeros(8)
    hand_truth[0] = 1
    hand = tversky_index(Tensor(np.ones(8)), hand_truth, TverskyParams(0.4, 0.6, 1e-12)).item()
    ok = abs(perfect - 1) < 1e-6 and dice_gap <= 1e-12 and abs(hand - 1 / 5.2) < 1e-9
    verdict(3, "Tversky identities", ok,
            f"perfect T={perfect:.9f}, max |T-Dice|={dice_gap:.1e}, hand case {hand:.12f} vs {1 / 5.2:.12f}")


# --- 4: AMSGrad --------------------------------------------------------------


def _amsgrad_replay(seed):
    rng = np.random.default_rng(seed)
    params = {"w": Tensor(rng.normal(size=(6,)), requires_grad=True)}
    opt = AMSGrad(params, AMSGradConfig(learning_rate=1e-2))
    monotone = True
    prev = opt.v_hat["w"].copy()
    for t in range(100):
        # alternate large and tiny gradients so v itself rises and falls
        scale = 10.0 if t % 10 == 0 else 1e-3
        params["w"].grad = scale * rng.choice([-1.0, 1.0], size=6)
        opt.step()
        monotone &= bool(np.all(opt.v_hat["w"] >= prev))
        prev = opt.v_hat["w"].copy()
    return monotone, params["w"].data.tobytes() + opt.v_hat["w"].tobytes()


def test_criterion_4_amsgrad(verdict):
    monotone, state_a = _amsgrad_replay(4)
    _, state_b = _amsgrad_replay(4)
    params = {"theta": Tensor(np.array([1.0]), requires_grad=True)}
    opt = AMSGrad(params, AMSGradConfig(learning_rate=0.1, beta1=0.9, beta2=0.999, eps=1e-8))
    params["theta"].grad = np.array([1.0])
    opt.step()
    theta = float(params["theta"].data[0])
    ok = monotone and abs(theta - (-2.16228)) < 1e-4 and state_a == state_b
    verdict(4, "AMSGrad properties", ok,
            f"v_hat non-decreasing={monotone}, step-1 theta={theta:.6f}, replay identical={state_a == state_b}")


# --- 5: sampler --------------------------------------------------------------


def test_criterion_5_sampler_statistics(verdict):
    image, truth = D.generate_phantom(D.PhantomConfig(seed=5))
    patches = D.sample_training_patches(
        image, truth, count=10_000, patch_size=16, positive_ratio=0.7, rng=5, augment=True
    )
    frac = float(np.mean([p.spec.kind == D.POSITIVE for p in patches]))
    violations = sum((D.POSITIVE if p.truth.any() else D.NEGATIVE) != p.spec.kind for p in patches)
    ok = abs(frac - 0.7) <= 0.015 and violations == 0
    verdict(5, "sampler statistics", ok, f"positive fraction {frac:.4f} over 10000 draws, {violations} kind violations")


# --- 6: tiling ---------------------------------------------------------------


def test_criterion_6_tiling_round_trip(verdict):
    rng = np.random.default_rng(6)
    cases = [((100, 100, 100), 32)]
    while len(cases) < 50:
        cases.append((tuple(int(d) for d in rng.integers(1, 70, size=3)), int(rng.choice([8, 16, 32]))))
    exact = 0
    for i, (dims, size) in enumerate(cases):
        if i % 2:
            vol = D.Volume.mask(rng.random(dims) < 0.2)
        else:
            vol = D.Volume.gray(rng.normal(size=dims))
        out = D.stitch(D.extract_tiles(vol, size), dims)
        exact += out.dtype == vol.voxels.dtype and out.tobytes() == vol.voxels.tobytes()
    verdict(6, "tiling round trip", exact == 50, f"{exact}/50 volumes byte-exact (incl. 100^3 with patch 32)")


# --- 7: VVOL -----------------------------------------------------------------


def test_criterion_7_vvol_round_trip(verdict, tmp_path):
    rng = np.random.default_rng(7)
    results = {}
    for dtype, vol in (
        (D.MASK_U8, D.Volume.mask(rng.random((13, 7, 5)) < 0.5, (0.2, 0.3, 0.4))),
        (D.GRAY_F32, D.Volume.gray(rng.normal(size=(13, 7, 5)), (0.2, 0.2, 0.2))),
    ):
        first, second = tmp_path / f"{dtype}_1.vvol", tmp_path / f"{dtype}_2.vvol"
        D.write_volume(vol, first)
        D.write_volume(D.read_volume(first), second)
        results[dtype] = first.read_bytes() == second.read_bytes()
    verdict(7, "VVOL round trip", all(results.values()), f"byte-identical {results}")


# --- 8 and 9: desk-scale experiment -------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """gen -> train -> predict -> postprocess -> eval through the CLI, default config."""
    root = tmp_path_factory.mktemp("desk")
    data, run, out = root / "data", root / "run", root / "out"
    out.mkdir()
    t0 = time.time()
    assert main(["gen", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--quiet"]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    raw, post, truth = [], [], []
    for e in manifest["volumes"]:
        if e["split"] != "test":
            continue
        stem = f"vol{e['index']:03d}"
        prob, mask, kept = out / f"{stem}_prob.vvol", out / f"{stem}_raw.vvol", out / f"{stem}_post.vvol"
        assert main(["predict", "--checkpoint", str(run / "best.ckpt"), "--input", str(data / e["image"]),
                     "--out-prob", str(prob), "--out-mask", str(mask)]) == 0
        assert main(["postprocess", "--input", str(mask), "--out", str(kept), "--keep", "2"]) == 0
        raw.append(str(mask))
        post.append(str(kept))
        truth.append(str(data / e["truth"]))
    assert main(["eval", "--pred", *raw, "--truth", *truth, "--json", str(root / "raw.json")]) == 0
    assert main(["eval", "--pred", *post, "--truth", *truth, "--json", str(root / "post.json")]) == 0
    return {
        "raw": json.loads((root / "raw.json").read_text()),
        "post": json.loads((root / "post.json").read_text()),
        "manifest": manifest,
        "checkpoint": run / "best.ckpt",
        "seconds": time.time() - t0,
    }


@pytest.mark.slow
def test_criterion_8_desk_experiment(verdict, desk_run):
    raw, post = desk_run["raw"], desk_run["post"]
    n_test = len(post["volumes"])
    positive = float(np.mean([e["positive_fraction"] for e in desk_run["manifest"]["volumes"]]))
    recall = post["macro"]["recall"]
    raw_acc = raw["macro"]["accuracy"]
    gains = [
        (p["precision"] or 0.0) - (r["precision"] or 0.0) for r, p in zip(raw["volumes"], post["volumes"])
    ]
    strictly = sum(g > 0 for g in gains)
    minutes = desk_run["seconds"] / 60
    ok = (
        n_test == 8
        and recall is not None and recall >= 0.60
        and strictly == n_test
        and raw_acc >= 0.99
        and minutes <= 60
    )
    verdict(8, "desk-scale experiment", ok,
            f"{n_test} test volumes, positive fraction {positive:.5f}, post macro recall {recall:.3f}, "
            f"precision raised on {strictly}/{n_test} (min gain {min(gains):+.4f}), "
            f"raw macro accuracy {raw_acc:.5f}, post macro precision {post['macro']['precision']:.3f}, "
            f"dice {post['macro']['dice']:.3f}, {minutes:.1f} min")


@pytest.mark.slow
def test_criterion_9_distractor_removal(verdict, desk_run):
    net = load_model(desk_run["checkpoint"])
    clean, raw_hits = 0, []
    for trial in range(20):
        p = D.make_phantom(D.PhantomConfig(distractor_count=20, seed=10_000 + trial))
        raw = binarize(predict_volume(net, p.image))
        kept = keep_largest(label_components(raw, 26), 2).astype(bool)
        raw_hits.append(int((raw.astype(bool) & p.distractors).sum()))
        clean += not (kept & p.distractors).any()
    ok = clean >= 19
    verdict(9, "distractor removal", ok,
            f"{clean}/20 kept-2 outputs free of distractor voxels "
            f"(raw predictions touched distractors in {sum(h > 0 for h in raw_hits)}/20)")
