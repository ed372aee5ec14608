"""One test per acceptance criterion; the terminal summary prints a PASS/FAIL line for each."""

import time
from dataclasses import replace

import numpy as np
import pytest

from a2j import autodiff as ad
from a2j.autodiff import Tensor
from a2j.checkpoint import load_checkpoint, save_checkpoint
from a2j.geometry import build_anchor_grid, depth_target_inverse, depth_target_transform
from a2j.gradcheck import LOSS_TOLERANCE, OP_TOLERANCE, run_suite
from a2j.losses import LossConfig, joint_position_loss, smooth_l1_tau, smooth_l1_value, surrounding_loss, total_loss
from a2j.metrics import success_frame_curve
from a2j.model import A2JConfig, A2JNet, NetworkOutput, aggregate
from a2j.synth import GenConfig, generate_dataset
from a2j.train import TrainConfig, ablation_grid, evaluate, train
from test_autodiff import naive_conv
from test_model import brute_force_aggregate, random_output

TINY = dict(trunk_channels=(4, 4, 8, 8), regression_channels=8, branch_channels=4, branch_layers=1)


@pytest.mark.criterion(1, "gradient suite vs central differences")
def test_criterion_1_gradient_suite(request):
    start = time.perf_counter()
    report = run_suite()
    seconds = time.perf_counter() - start
    request.node.criterion_detail = (f"ops max {report.max_op_error:.2e}, end-to-end max {report.max_loss_error:.2e}, "
                                     f"{seconds:.1f} s")
    assert report.max_op_error < OP_TOLERANCE
    assert report.max_loss_error < LOSS_TOLERANCE
    assert seconds < 120


@pytest.mark.criterion(2, "aggregate and conv2d equal their loop oracles")
def test_criterion_2_oracle_equivalence(request):
    rng = np.random.default_rng(2)
    grid = build_anchor_grid(32, 32, 4)
    worst = 0.0
    for _ in range(100):
        out = random_output(rng, 1, grid.count, 3, scale=rng.uniform(0.1, 6.0))
        est = aggregate(out, grid)
        uv, d = brute_force_aggregate(out.offsets.data[0], out.depths.data[0], out.responses.data[0], grid.positions)
        scale = max(1.0, np.abs(uv).max(), np.abs(d).max())
        worst = max(worst, np.abs(est.uv.data[0] - uv).max() / scale, np.abs(est.depth.data[0] - d).max() / scale)
    conv_worst = 0.0
    for stride in (1, 2):
        for padding in (0, 1, 2):
            for dilation in (1, 2):
                for k in (1, 3):
                    x = rng.standard_normal((2, 3, 9, 8)).astype(np.float32)
                    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
                    b = rng.standard_normal(4).astype(np.float32)
                    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation).data
                    want = naive_conv(x, w, b, stride, padding, dilation)
                    conv_worst = max(conv_worst, np.abs(got - want).max() / max(1.0, np.abs(want).max()))
    request.node.criterion_detail = f"aggregate {worst:.1e}, conv2d {conv_worst:.1e} over 24 settings"
    assert worst < 1e-5
    assert conv_worst < 1e-5


@pytest.mark.criterion(3, "exact loss and depth-transform constants")
def test_criterion_3_constants(request):
    cfg = LossConfig()
    assert (cfg.alpha, cfg.tau1, cfg.tau2, cfg.lam) == (0.5, 1.0, 3.0, 3.0)
    assert smooth_l1_value(0.5, 1.0) == 0.125
    assert smooth_l1_value(2.0, 1.0) == 1.5
    for tau in (1.0, 3.0):
        x = np.array([tau - 1e-7, tau + 1e-7])
        v = smooth_l1_tau(Tensor(x), tau).data
        assert v[0] == pytest.approx(tau / 2, abs=1e-6) and v[1] == pytest.approx(tau / 2, abs=1e-6)
    assert depth_target_transform(512.0, 1.0, 512.0) == 0.0
    assert depth_target_transform(1.2, 50.0, 0.0) == pytest.approx(60.0)
    assert depth_target_inverse(60.0, 50.0, 0.0) == pytest.approx(1.2)
    l1, l2 = Tensor(np.float32(1.25)), Tensor(np.float32(0.5))
    assert total_loss(l1, l2, cfg).item() == pytest.approx(3 * 1.25 + 0.5)
    request.node.criterion_detail = "SmoothL1 0.125/1.5, mu 1 and 50, total = 3*loss1 + loss2"


@pytest.mark.criterion(4, "176x176, K=14 shape contract")
def test_criterion_4_shapes(request):
    net = A2JNet(A2JConfig(num_joints=14, width=176, height=176, **TINY))
    x = Tensor(np.zeros((1, 1, 176, 176), np.float32))
    maps = net.branch_maps(x)
    out = net.forward(x)
    request.node.criterion_detail = (f"{net.grid.count} anchors, feature {net.grid.feature_shape}, "
                                     f"channels {maps['offset'][1]}/{maps['depth'][1]}/{maps['proposal'][1]}")
    assert net.grid.count == 1936
    assert net.grid.feature_shape == (11, 11)
    assert maps == {"offset": (1, 448, 11, 11), "depth": (1, 224, 11, 11), "proposal": (1, 224, 11, 11)}
    assert out.offsets.shape == (1, 1936, 14, 2)
    assert out.depths.shape == out.responses.shape == (1, 1936, 14)


# desk-scale training analog; see README for the rationale behind these sizes
TRAIN_SAMPLES, TEST_SAMPLES = 3600, 400
ACCEPT_MODEL = A2JConfig(branch_channels=16)
ACCEPT_TRAIN = TrainConfig(epochs=30, decay_every=10, batch_size=32, augment=False)
RIVALS = ("global-reg", "no-surround", "no-proposal")


@pytest.mark.slow
@pytest.mark.criterion(5, "desk-scale training analog and ablation orderings")
def test_criterion_5_training_analog(request):
    start = time.perf_counter()
    gcfg = GenConfig()
    train_ds = generate_dataset(0, gcfg, TRAIN_SAMPLES, "train")
    test_ds = generate_dataset(0, gcfg, TEST_SAMPLES, "test")
    assert not set(train_ds.subjects.tolist()) & set(test_ds.subjects.tolist())
    target = 0.05 * gcfg.working_volume_diagonal

    errors, wins = {}, {r: 0 for r in RIVALS}
    seeds_run = []
    for seed in (0, 1, 2):
        # a third seed is only needed while some ordering is still undecided
        if seeds_run and all(w >= 2 or w + (3 - len(seeds_run)) < 2 for w in wins.values()):
            break
        rows = ablation_grid(train_ds, test_ds, ACCEPT_TRAIN, ACCEPT_MODEL, ("full",) + RIVALS, (seed,))
        errors[seed] = {r.variant: r.mean_error_mm for r in rows}
        seeds_run.append(seed)
        for rival in RIVALS:
            wins[rival] += errors[seed]["full"] < errors[seed][rival]
    seconds = time.perf_counter() - start

    table = "; ".join(f"seed {s}: " + ", ".join(f"{v} {e:.2f}" for v, e in errors[s].items()) for s in seeds_run)
    request.node.criterion_detail = (f"target {target:.2f} mm; {table}; full wins "
                                     + ", ".join(f"{r} {wins[r]}/{len(seeds_run)}" for r in RIVALS)
                                     + f"; {seconds / 60:.1f} min")
    print(request.node.criterion_detail)
    assert all(errors[s]["full"] < target for s in seeds_run)
    for rival in RIVALS:
        assert wins[rival] >= 2, f"full A2J beat {rival} on {wins[rival]} of {len(seeds_run)} seeds"
    assert seconds < 30 * 60


def _rel(a, b):
    """Max absolute difference relative to the magnitude of the values (at least 1)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(1.0, np.abs(a).max()))


@pytest.mark.criterion(6, "invariance suite")
def test_criterion_6_invariances(request):
    rng = np.random.default_rng(6)
    grid = build_anchor_grid(32, 32, 4)
    cfg = LossConfig()
    worst_shift = worst_perm = worst_sym = 0.0
    for _ in range(25):
        out = random_output(rng, 2, grid.count, 3)
        uv_t, d_t = rng.uniform(0, 32, (2, 3, 2)), rng.normal(0, 20, (2, 3))
        base = aggregate(out, grid)
        c = np.float32(rng.uniform(-20, 20))
        shifted = aggregate(NetworkOutput(out.offsets, out.depths, Tensor(out.responses.data + c)), grid)
        l_base = joint_position_loss(base, uv_t, d_t, cfg).item()
        l_shift = joint_position_loss(shifted, uv_t, d_t, cfg).item()
        worst_shift = max(worst_shift, _rel(base.uv.data, shifted.uv.data), _rel(base.depth.data, shifted.depth.data),
                          _rel(l_base, l_shift))

        perm = rng.permutation(grid.count)
        permuted = NetworkOutput(Tensor(out.offsets.data[:, perm]), Tensor(out.depths.data[:, perm]),
                                 Tensor(out.responses.data[:, perm]))
        pgrid = replace(grid, positions=grid.positions[perm])
        p = aggregate(permuted, pgrid)
        worst_perm = max(worst_perm, _rel(base.uv.data, p.uv.data), _rel(base.depth.data, p.depth.data))

        a, b = rng.choice(grid.count, 2, replace=False)
        w = np.zeros((1, grid.count, 1), np.float32)
        w[0, [a, b], 0] = 0.5
        mid = ((grid.positions[a] + grid.positions[b]) / 2)[None, None]
        worst_sym = max(worst_sym, abs(surrounding_loss(Tensor(w), grid, mid, cfg).item()))

    monotone = True
    for _ in range(50):
        preds, gts = rng.normal(0, 25, (12, 4, 3)), np.zeros((12, 4, 3))
        curve = success_frame_curve(preds, gts, np.sort(rng.uniform(0, 120, 20)))
        monotone &= bool(np.all(np.diff(curve) >= 0))
    request.node.criterion_detail = (f"shift {worst_shift:.1e}, permutation {worst_perm:.1e}, "
                                     f"two-anchor loss2 {worst_sym:.1e}, curve monotone {monotone}")
    assert worst_shift < 1e-5
    assert worst_perm < 1e-5
    assert worst_sym < 1e-5
    assert monotone


@pytest.mark.criterion(7, "determinism and checkpoint round trip")
def test_criterion_7_determinism(request, tmp_path):
    gcfg = GenConfig()
    a, b = generate_dataset(7, gcfg, 24), generate_dataset(7, gcfg, 24)
    same_data = all(getattr(a, f).tobytes() == getattr(b, f).tobytes() for f in ("depth", "uv", "td", "world"))
    test_ds = generate_dataset(7, gcfg, 12, "test")
    model_cfg = A2JConfig(branch_channels=8, trunk_channels=(4, 8, 16, 16), regression_channels=16)
    cfg = TrainConfig(epochs=2, decay_every=1, batch_size=8, seed=7)
    r1, r2 = train(a, cfg, model_cfg), train(b, cfg, model_cfg)
    same_log = r1.loss_csv() == r2.loss_csv()
    save_checkpoint(str(tmp_path / "ckpt"), r1.model)
    restored, _, _ = load_checkpoint(str(tmp_path / "ckpt"))
    same_report = evaluate(restored, test_ds).to_csv() == evaluate(r1.model, test_ds).to_csv()
    request.node.criterion_detail = f"datasets {same_data}, loss logs {same_log}, MetricReport {same_report}"
    assert same_data and same_log and same_report
