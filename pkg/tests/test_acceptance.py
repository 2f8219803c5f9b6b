"""Acceptance checks, one test per criterion; the summary prints a PASS/FAIL line for each.

Criterion 1 needs the CIFAR-10 binary distribution: point SUBDIFF_CIFAR10 at
the directory holding ``data_batch_1.bin`` ... ``test_batch.bin``.
"""

import json
import os
import time

import numpy as np
import pytest

from subdiff.cli import SWEEP_COUNT, SWEEP_DIMS, SWEEP_TIMES, main, parse_floats, rmsd_table, sweep, train_model
from subdiff.data import CIFAR_SHAPE, SyntheticSpec, load_cifar10, make_synthetic
from subdiff.divergence import DivergenceCurve, fisher_divergence, select_transition_times
from subdiff.flow import OdeConfig, ProbabilityFlow
from subdiff.sampler import SamplerConfig, pc_sample, sample_subspace_diffusion
from subdiff.scorenet import GmmScore, GmmSpec, ScoreNet, TrainConfig, ZeroScore, gmm_log_density
from subdiff.sde import SubspaceSchedule, VEProcess, make_schedule
from subdiff.subspace import ExplicitChain, ImageShape, downsampling_chain, pca_chain

PROC = VEProcess(0.01, 13.0)
TABLE1 = {
    ("downsampling", 16): 0.075, ("downsampling", 8): 0.110,
    ("pca", 16): 0.024, ("pca", 8): 0.061,
    ("patch-pca", 16): 0.064, ("patch-pca", 8): 0.093,
}


def test_criterion_1_cifar_rmsd_table(report):
    root = os.environ.get("SUBDIFF_CIFAR10")
    if not root or not os.path.isdir(root):
        report("1", None, "CIFAR-10 not available (set SUBDIFF_CIFAR10); see criterion 1-runtime")
        pytest.skip("CIFAR-10 binaries not available")
    t0 = time.process_time()
    images = load_cifar10(root, train_only=True)["train"]
    rows = rmsd_table(images, CIFAR_SHAPE)
    cpu = time.process_time() - t0
    errs = {(m, s): v for m, s, _, v in rows}
    ok = all(abs(errs[key] - ref) <= 0.005 for key, ref in TABLE1.items()) and cpu < 600
    detail = " ".join(f"{m}{s}={errs[(m, s)]:.4f}" for m, s in TABLE1) + f" cpu={cpu:.0f}s"
    report("1", ok, detail)
    assert ok, detail


def test_criterion_1_runtime_on_cifar_shaped_data(report):
    # same sizes as the CIFAR-10 train split; checks only the <10 min CPU budget
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(50_000, CIFAR_SHAPE.size)).astype(np.float64) / 255.0
    t0 = time.process_time()
    rows = rmsd_table(images, CIFAR_SHAPE)
    cpu = time.process_time() - t0
    ok = cpu < 600 and len(rows) == 6
    report("1-runtime", ok, f"rmsd table on 50000x3072 synthetic images: {cpu:.0f}s CPU (budget 600s)")
    assert ok


def test_criterion_2_synthetic_mixture_reproduction(report):
    t0 = time.process_time()
    _, train_pts, _ = make_synthetic(SyntheticSpec(seed=0))
    full, _ = train_model(train_pts, PROC, None, 256, TrainConfig(seed=0), seed=0)
    subs = {n: train_model(train_pts, PROC, n, 256, TrainConfig(seed=n), seed=n)[0] for n in SWEEP_DIMS}
    times = parse_floats(SWEEP_TIMES)
    rows = sweep(full, subs, train_pts, times, SWEEP_COUNT, SamplerConfig(), seed=0)
    cpu = time.process_time() - t0

    d = train_pts.shape[1]
    grid = {(r["dim"], r["t"]): (r["nn"], r["se"]) for r in rows}
    base_cells = [grid[(d, t)] for t in times]
    baseline = np.mean([v for v, _ in base_cells])
    base_se = np.sqrt(np.sum([s**2 for _, s in base_cells])) / len(base_cells)
    ok_a = 4.3 <= baseline <= 6.5

    lines, ok_b, ok_c = [], True, True
    for n in SWEEP_DIMS:
        vals = [grid[(n, t)] for t in times]
        best = min(range(len(times)), key=lambda i: vals[i][0])
        inner = min(range(1, len(times) - 1), key=lambda i: vals[i][0])
        if n >= 7:
            ok_b &= vals[best][0] < baseline
        v, s = vals[inner]
        gaps = [(vals[e][0] - v) / np.hypot(s, vals[e][1]) for e in (0, len(times) - 1)]
        ok_c &= min(gaps) > 2
        lines.append(f"dim {n}: min {vals[best][0]:.2f}@{times[best]:.2f}, ends {vals[0][0]:.2f}/"
                     f"{vals[-1][0]:.2f}, interior gap {min(gaps):.1f} SE")
    ok_t = cpu <= 7200
    ok = ok_a and ok_b and ok_c and ok_t
    detail = (f"(a) full nn {baseline:.3f}+-{base_se:.3f} {'ok' if ok_a else 'FAIL'}; "
              f"(b) {'ok' if ok_b else 'FAIL'}; (c) {'ok' if ok_c else 'FAIL'}; cpu {cpu / 60:.1f} min"
              f"\n    " + "\n    ".join(lines))
    report("2", ok, detail)
    assert ok, detail


def test_criterion_3_oracle_sampling_equivalence(report):
    spec = GmmSpec([0.2, 0.3, 0.5], [[-3.0, 0.0], [0.0, 0.0], [3.0, 0.0]], [0.2, 0.2, 0.2])
    u = np.array([[1.0], [0.0]])
    data, _ = spec.sample(20_000, np.random.default_rng(0))
    sched = make_schedule(ExplicitChain([u]), PROC, data, [0.5])
    bank = [GmmScore(spec, PROC), GmmScore(spec.project(u), PROC)]
    out = sample_subspace_diffusion(bank, sched, SamplerConfig(), 10_000, np.random.default_rng(1))
    assign = np.argmin(((out[:, None, :] - spec.means[None]) ** 2).sum(-1), axis=1)
    occ = np.bincount(assign, minlength=3) / out.shape[0]
    mean_err = [np.linalg.norm(out[assign == c].mean(axis=0) - spec.means[c]) for c in range(3)]
    ok = np.all(np.abs(occ - spec.weights) <= 0.03) and max(mean_err) < 0.05
    detail = f"occupancy {np.round(occ, 3).tolist()} vs {spec.weights.tolist()}, max mean error {max(mean_err):.3f}"
    report("3", ok, detail)
    assert ok, detail


def test_criterion_4_k0_bitwise(report):
    net = ScoreNet(5, PROC, hidden=(32, 32), seed=3)
    sched = SubspaceSchedule(ExplicitChain([], ambient_dim=5), PROC, (), ())
    cfg = SamplerConfig()
    a = sample_subspace_diffusion([net], sched, cfg, 200, np.random.default_rng(7))
    b = pc_sample(PROC, net, 5, cfg, 200, np.random.default_rng(7))
    ok = a.tobytes() == b.tobytes()
    report("4", ok, "pipeline with K=0 vs plain predictor-corrector, 200 samples x 100 steps: "
           + ("byte-identical" if ok else "different"))
    assert ok


def test_criterion_5_likelihood(report):
    gmm, _, _ = make_synthetic(SyntheticSpec(train_size=1000, seed=0))
    rng = np.random.default_rng(2)
    x, _ = gmm.sample(100, rng)
    x = PROC.perturb(x, PROC.eps, rng.standard_normal(x.shape))
    flow = ProbabilityFlow([GmmScore(gmm, PROC)], SubspaceSchedule(ExplicitChain([], ambient_dim=30), PROC, (), ()))
    res = flow.log_likelihood(x, OdeConfig())
    err = np.abs(res.logp - gmm_log_density(gmm, PROC, x, PROC.eps)) / 30
    tight = OdeConfig(rtol=1e-7, atol=1e-7)
    xs, logp = flow.sample(tight, 20, np.random.default_rng(3), with_logp=True)
    back = flow.log_likelihood(xs, tight)
    trip = np.abs(back.logp - logp) / 30
    ok = err.max() < 0.02 and trip.max() < 1e-3
    detail = f"max |ODE - closed form| {err.max():.4f} nats/dim (100 points); round trip {trip.max():.2e} nats/dim"
    report("5", ok, detail)
    assert ok, detail


def test_criterion_6_divergence_calibration(report):
    rng = np.random.default_rng(4)
    means = np.zeros((3, 4))
    means[:, :2] = [[-1.0, 0.5], [1.0, 1.0], [0.0, -1.0]]
    spec = GmmSpec([0.3, 0.3, 0.4], means, [0.3, 0.3, 0.3])
    data, _ = spec.sample(100_000, rng)
    chain = ExplicitChain([np.eye(4)[:, :2]])
    exact, _ = fisher_divergence(GmmScore(spec, PROC), chain, 1, 0, data, PROC, 0.3, 10_000, rng)
    zero, zse = fisher_divergence(ZeroScore(4), chain, 1, 0, data, PROC, 0.3, 10_000, rng)

    grid = np.linspace(0.05, 0.95, 50)
    h = grid[1] - grid[0]
    inv_err, inv_ok = 0.0, True
    for rate in (2.0, 4.0, 8.0):
        c = DivergenceCurve(1, 0, grid, np.exp(-rate * grid), np.zeros(50), 1)
        (t,) = select_transition_times([c], 0.2)
        err = abs(t + np.log(0.2) / rate)
        # linear interpolation of exp(-r t) over one cell is off by at most r h^2 e^{r h} / 8 in t
        inv_ok &= err <= rate * h**2 * np.exp(rate * h) / 8
        inv_err = max(inv_err, err)
    ok = exact < 1e-3 and abs(zero - 1) <= 0.05 and inv_ok
    detail = f"exact-Gaussian D_F {exact:.2e}; zero-score D_F {zero:.3f}+-{zse:.3f}; inversion error {inv_err:.1e}"
    report("6", ok, detail)
    assert ok, detail


def test_criterion_7_numerics(report):
    rng = np.random.default_rng(5)
    net = ScoreNet(3, PROC, hidden=(5, 4), seed=1)
    x0, t, z = rng.standard_normal((6, 3)), rng.uniform(PROC.eps, 1, 6), rng.standard_normal((6, 3))
    _, grads = net.dsm_loss_and_grad(x0, t, z)
    worst_grad = 0.0
    for p, g in zip(net.params, grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + 1e-5
            lp, _ = net.dsm_loss_and_grad(x0, t, z)
            p[idx] = orig - 1e-5
            lm, _ = net.dsm_loss_and_grad(x0, t, z)
            p[idx] = orig
            fd = (lp - lm) / 2e-5
            worst_grad = max(worst_grad, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-3))

    data = rng.standard_normal((300, 12)) * np.linspace(3, 0.2, 12)
    worst_orth = 0.0
    for chain in (downsampling_chain(ImageShape(8, 8, 3), 3), pca_chain(data, [7, 4, 1])):
        bases = [chain.basis(k) for k in range(chain.K + 1)]
        for j, uj in enumerate(bases):
            worst_orth = max(worst_orth, np.abs(uj.T @ uj - np.eye(uj.shape[1])).max())
            for uk in bases[j + 1:]:
                worst_orth = max(worst_orth, np.abs(uj @ uj.T @ uk - uk).max())

    # projecting the perturbed point = perturbing the projection with projected noise;
    # projected standard noise keeps unit covariance, so the kernel parameters agree
    chain = downsampling_chain(ImageShape(4, 4, 3), 1)
    u = chain.basis(1)
    xa, za = rng.standard_normal(48), rng.standard_normal(48)
    commute = np.abs(chain.project(PROC.perturb(xa, 0.6, za), 1)
                     - PROC.perturb(chain.project(xa, 1), 0.6, chain.project(za, 1))).max()
    commute = max(commute, np.abs(u.T @ u - np.eye(12)).max())

    shape = ImageShape(8, 8, 3)
    img = rng.standard_normal(shape.size)
    pooled = img.reshape(3, 4, 2, 4, 2).sum(axis=(2, 4)).ravel() / 2
    pool_err = np.abs(downsampling_chain(shape, 1).project(img, 1) - pooled).max()

    ok = worst_grad < 1e-5 and worst_orth < 1e-10 and commute < 1e-12 and pool_err < 1e-12
    detail = (f"grad rel err {worst_grad:.1e}; orthonormality/nesting {worst_orth:.1e}; "
              f"commutation {commute:.1e}; pooling {pool_err:.1e}")
    report("7", ok, detail)
    assert ok, detail


def test_criterion_8_runtime_accounting(report, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--train-size", "2000"]) == 0
    for dim in (30, 11):
        assert main(["train", "--data", str(tmp_path / "d" / "train.sdmx"), "--dim", str(dim), "--width", "8",
                     "--train-steps", "5", "--out", str(tmp_path / f"m{dim}.sdif")]) == 0
    out = tmp_path / "s.sdmx"
    assert main(["sample", "--ckpt", str(tmp_path / "m30.sdif"), "--ckpt", str(tmp_path / "m11.sdif"),
                 "--times", "0.52", "--count", "8", "--out", str(out)]) == 0
    man = json.loads((tmp_path / "s.sdmx.manifest.json").read_text())
    frac = man["results"]["full_dim_fraction"]
    expect = (0.52 - PROC.eps) / (1 - PROC.eps)
    ok = abs(frac - expect) <= 1 / 100 and sum(man["results"]["level_steps"]) == 100
    detail = f"full-dimension fraction {frac:.2f} vs {expect:.4f} (steps {man['results']['level_steps']})"
    report("8", ok, detail)
    assert ok, detail
