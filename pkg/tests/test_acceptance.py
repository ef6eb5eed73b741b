"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py``; the report lines are printed
even without ``-s``.
"""

import math
import time

import numpy as np
import pytest
from helpers import noiseless_dataset, perturb_trajectory, random_graph
from scipy.optimize import brentq
from scipy.special import ndtri
from test_association import brute_force_weights
from test_optimizer import feature_graph

from varslam.association import exact_weights_from_loglik, factored_weights_from_loglik
from varslam.fileio import dataset_to_dict, dumps, export_trajectory, import_trajectory, read_dataset, write_dataset
from varslam.generative import recon_loss
from varslam.geometry import orientation_prior_moments, se3_compose, se3_exp
from varslam.metrics import ate, rpe
from varslam.optimizer import SolverConfig, build_jacobian, run_em, update_features
from varslam.simulator import NoiseConfig, TrajectoryConfig, WorldConfig, integrate_odometry, make_dataset

SEEDS = range(10)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def non_increasing(seq):
    return all(b <= a for a, b in zip(seq, seq[1:]))


# ---------------------------------------------------------------------------
# Shared solver runs (criteria 4 to 7)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def zero_noise_run():
    ds = noiseless_dataset(num_landmarks=6, num_frames=120, stride=15)
    init = perturb_trajectory(ds.trajectory, np.random.default_rng(2024), max_norm=0.05)
    t0 = time.perf_counter()
    sol = run_em(ds, SolverConfig(sigma_v=0.0), init)
    return ds, sol, time.perf_counter() - t0


def loop_scenario(seed, dominant=0):
    return make_dataset(
        WorldConfig(num_landmarks=12, num_categories=3, dominant_label_count=dominant, seed=seed),
        TrajectoryConfig(shape="square_loop", num_frames=120, keyframe_stride=15),
        NoiseConfig(odom_sigma_rot=0.01, odom_sigma_trans=0.05, sigma_t=0.1),
    )


@pytest.fixture(scope="module")
def loop_runs():
    rows = []
    t0 = time.perf_counter()
    for seed in SEEDS:
        ds = loop_scenario(seed)
        odo = ate(integrate_odometry(ds.start_pose, ds.odometry), ds.trajectory)
        sol = run_em(ds, SolverConfig())
        rows.append((seed, odo, ate(sol.trajectory, ds.trajectory), sol))
    return rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ablation_runs():
    rows = []
    for seed in SEEDS:
        ds = loop_scenario(seed, dominant=8)
        full = run_em(ds, SolverConfig())
        shape = run_em(ds, SolverConfig(use_orientation=False))
        rows.append((seed, ate(full.trajectory, ds.trajectory), ate(shape.trajectory, ds.trajectory), full, shape))
    return rows


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_1_orientation_moments(capsys):
    # stratified standard-normal draws (one per probability stratum) give a far
    # less noisy estimate than iid draws; the tolerance is still 3 iid standard errors
    rng = np.random.default_rng(1)
    n = 10**6
    t0 = time.perf_counter()
    z = ndtri((np.arange(n) + rng.random(n)) / n)
    worst_z, worst_identity = 0.0, 0.0
    for _ in range(100):
        v = rng.uniform(-math.pi, math.pi)
        sigma = rng.uniform(0.0, 0.3)
        while sigma == 0.0:
            sigma = rng.uniform(0.0, 0.3)
        angle = v + sigma * z
        mc, ms, vc, vs = orientation_prior_moments(v, sigma)
        worst_identity = max(worst_identity, abs(vc + vs - (1.0 - math.exp(-sigma * sigma))))
        for samples, mean, var in ((np.cos(angle), mc, vc), (np.sin(angle), ms, vs)):
            est = samples.mean()
            dev2 = np.square(samples - est)
            m2 = dev2.mean()
            m4 = np.dot(dev2, dev2) / n
            se_mean = math.sqrt(m2 / n)
            se_var = math.sqrt(max(m4 - m2 * m2, 0.0) / n)
            worst_z = max(worst_z, abs(est - mean) / se_mean, abs(m2 - var) / se_var)
    elapsed = time.perf_counter() - t0
    ok = worst_z <= 3.0 and worst_identity <= 1e-12 and elapsed < 10.0
    report(capsys, 1, ok, f"worst |z| {worst_z:.3f}, identity error {worst_identity:.1e}, {elapsed:.1f} s")


def test_criterion_2_em_weights(capsys):
    rng = np.random.default_rng(2)
    worst, worst_row = 0.0, 0.0
    for _ in range(200):
        m = int(rng.integers(1, 5))
        k = int(rng.integers(1, m + 1))
        ll = rng.normal(size=(k, m)) * rng.uniform(0.1, 10)
        w = exact_weights_from_loglik(ll)
        worst = max(worst, float(np.max(np.abs(w - brute_force_weights(ll)))))
        worst_row = max(worst_row, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
    single = rng.normal(size=(1, 4)) * 5
    k1_exact = np.array_equal(exact_weights_from_loglik(single), factored_weights_from_loglik(single))
    ok = worst <= 1e-10 and worst_row <= 1e-9 and k1_exact
    report(capsys, 2, ok, f"max oracle error {worst:.1e}, max row-sum error {worst_row:.1e}, K=1 identical {k1_exact}")


def test_criterion_3_feature_update(capsys):
    rng = np.random.default_rng(3)
    worst, hull_ok = 0.0, True
    for _ in range(100):
        n = int(rng.integers(1, 7))
        feats = rng.normal(size=(n, 4)) * rng.uniform(0.5, 5)
        w = rng.uniform(0.01, 1.0, n)
        out, _ = update_features(feature_graph(list(feats), list(w)))
        got = np.concatenate([out.landmark_nodes[0].feature_c, out.landmark_nodes[0].feature_i])
        for c in range(4):
            def objective(mu, c=c):
                return float(np.sum(w * (mu - feats[:, c]) ** 2) / 2)

            # golden-section search stalls near sqrt(machine eps); a bracketed root of
            # the central-difference slope locates the same minimum to ~1e-12
            def slope(mu, h=1e-3):
                return (objective(mu + h) - objective(mu - h)) / (2 * h)

            ref = brentq(slope, feats[:, c].min() - 1, feats[:, c].max() + 1, xtol=1e-15)
            worst = max(worst, abs(got[c] - ref))
        hull_ok &= bool(np.all(got >= feats.min(axis=0) - 1e-12) and np.all(got <= feats.max(axis=0) + 1e-12))
    ok = worst <= 1e-8 and hull_ok
    report(capsys, 3, ok, f"max argmin error {worst:.1e}, within convex hull {hull_ok}")


def test_criterion_4_noise_free_consistency(capsys, zero_noise_run):
    ds, sol, elapsed = zero_noise_run
    err = ate(sol.trajectory, ds.trajectory)
    iters = len(sol.cost_history)
    keyframes = len(ds.keyframes)
    ok = err < 1e-6 and iters <= 2 and elapsed < 30.0 and keyframes == 8 and len(ds.landmarks) == 6
    report(capsys, 4, ok, f"ATE {err:.2e} m, {iters} EM iterations, {elapsed:.1f} s, {keyframes} keyframes")


def test_criterion_5_loop_closure(capsys, loop_runs):
    rows, elapsed = loop_runs
    passed = sum(solved <= odo / 5.0 for _, odo, solved, _ in rows)
    ratios = ", ".join(f"{odo / solved:.1f}" for _, odo, solved, _ in rows)
    ok = passed >= 9 and elapsed < 120.0
    report(capsys, 5, ok, f"{passed}/10 seeds reach odometry/5, ratios [{ratios}], {elapsed:.0f} s")


def test_criterion_6_orientation_ablation(capsys, ablation_runs):
    passed = sum(shape > full for _, full, shape, _, _ in ablation_runs)
    pairs = ", ".join(f"{full:.3f}/{shape:.3f}" for _, full, shape, _, _ in ablation_runs)
    report(capsys, 6, passed >= 8, f"{passed}/10 seeds worse without orientation, full/shape-only ATE [{pairs}]")


def test_criterion_7_optimizer_soundness(capsys, zero_noise_run, loop_runs, ablation_runs):
    sols = [zero_noise_run[1]] + [r[3] for r in loop_runs[0]]
    sols += [s for r in ablation_runs for s in r[3:]]
    histories = [s.cost_history for s in sols] + [h for s in sols for h in s.lm_cost_histories]
    monotone = all(non_increasing(h) for h in histories)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        g = random_graph(rng, n_poses=int(rng.integers(2, 6)), n_landmarks=int(rng.integers(1, 4)))
        j1, _ = build_jacobian(g, SolverConfig(sigma_v=0.1), 1e-6)
        j2, _ = build_jacobian(g, SolverConfig(sigma_v=0.1), 1e-7)
        worst = max(worst, float(np.linalg.norm(j1 - j2) / np.linalg.norm(j1)))
    ok = monotone and worst < 1e-4
    report(capsys, 7, ok, f"{len(histories)} histories non-increasing {monotone}, max stencil error {worst:.1e}")


def test_criterion_8_serialization_and_metrics(capsys, tmp_path, loop_runs):
    ds = loop_scenario(0)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_dataset(ds, a)
    write_dataset(read_dataset(a), b)
    dataset_exact = a.read_bytes() == b.read_bytes() and dumps(dataset_to_dict(read_dataset(a))) == a.read_text()

    sol = loop_runs[0][0][3]
    export_trajectory(sol.trajectory, tmp_path / "t.traj")
    back = import_trajectory(tmp_path / "t.traj")
    export_trajectory(back, tmp_path / "u.traj")
    traj_exact = (tmp_path / "t.traj").read_bytes() == (tmp_path / "u.traj").read_bytes()
    traj_err = max(
        max(np.max(np.abs(x.rotation - y.rotation)), np.max(np.abs(x.translation - y.translation)))
        for x, y in zip(sol.trajectory, back)
    )

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        t1, t2 = se3_exp(rng.normal(size=6) * 3), se3_exp(rng.normal(size=6) * 3)
        est = [se3_compose(t1, x) for x in sol.trajectory]
        gt = [se3_compose(t2, x) for x in ds.trajectory]
        worst = max(
            worst,
            abs(ate(est, gt) - ate(sol.trajectory, ds.trajectory)),
            abs(rpe(est, gt) - rpe(sol.trajectory, ds.trajectory)),
        )

    n = 4096
    target = rng.integers(0, 2, n)
    recon_err = abs(recon_loss(np.full(n, 0.5), target, gamma=0.5) - 0.5 * math.log(2.0) * n)
    ok = dataset_exact and traj_exact and traj_err < 1e-9 and worst <= 1e-9 and recon_err <= 1e-9
    report(
        capsys,
        8,
        ok,
        f"dataset bytes identical {dataset_exact}, trajectory bytes identical {traj_exact} "
        f"(max error {traj_err:.1e}), metric invariance {worst:.1e}, recon error {recon_err:.1e}",
    )
