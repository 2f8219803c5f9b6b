"""Reverse-SDE predictor-corrector sampling with subspace projections."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from subdiff.sde import SubspaceSchedule, VEProcess


@dataclass(frozen=True)
class SamplerConfig:
    """``langevin_after_upsample`` is the number of corrector steps run right
    after each upsampling, with the model of the level just entered."""

    num_steps: int = 100
    corrector_snr: float = 0.2
    langevin_after_upsample: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.corrector_snr < 0:
            raise ValueError("corrector_snr must be >= 0")
        if self.langevin_after_upsample < 0:
            raise ValueError("langevin_after_upsample must be >= 0")


def time_grid(process: VEProcess, num_steps: int) -> np.ndarray:
    """Uniform grid from ``T`` down to ``eps`` with ``num_steps`` intervals."""
    return np.linspace(process.T, process.eps, num_steps + 1)


def check_bank(bank, schedule: SubspaceSchedule):
    dims = schedule.chain.dims
    if len(bank) != len(dims):
        raise ValueError(f"need {len(dims)} score models, got {len(bank)}")
    for k, (model, n) in enumerate(zip(bank, dims)):
        if model.dim != n:
            raise ValueError(f"model {k} has dimension {model.dim}, level {k} has {n}")


def em_reverse_step(process: VEProcess, score_fn, x, t, dt, rng):
    """One Euler-Maruyama step of the reverse SDE (``dt < 0``)."""
    if dt >= 0:
        raise ValueError("reverse steps need dt < 0")
    if t + dt < process.eps - 1e-12:
        raise ValueError("step would go below eps")
    g2 = process.g2(t)
    drift = process.f(t) * x - g2 * score_fn(x, t)
    z = rng.standard_normal(np.shape(x))
    return x + drift * dt + np.sqrt(g2 * -dt) * z


def langevin_correct(process: VEProcess, score_fn, x, t, snr, rng, per_sample=False):
    """One Langevin corrector step with step size set by ``snr``.

    The step is ``2 (snr |z| / |score|)^2`` with norms averaged over the batch.
    ``per_sample=True`` uses each row's own ratio instead; that rule is heavy
    tailed in low dimension (the score norm vanishes near a mode) and is kept
    only for comparison.
    """
    if snr < 0:
        raise ValueError("snr must be >= 0")
    if snr == 0:
        return x
    x = np.asarray(x, dtype=np.float64)
    s = score_fn(x, t)
    z = rng.standard_normal(x.shape)
    s_norm = np.linalg.norm(np.atleast_2d(s), axis=-1)
    z_norm = np.linalg.norm(np.atleast_2d(z), axis=-1)
    if not per_sample:
        s_norm, z_norm = s_norm.mean(keepdims=True), z_norm.mean(keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.where(s_norm > 0, 2.0 * (snr * z_norm / s_norm) ** 2, 0.0)
    eta = eta[0] if x.ndim == 1 or not per_sample else eta[:, None]
    return x + eta * s + np.sqrt(2.0 * eta) * z


def _injection_noise(schedule: SubspaceSchedule, k, shape, rng, t):
    chain = schedule.chain
    var = schedule.injection_variance(k, t)
    y = np.sqrt(var) * rng.standard_normal(shape[:-1] + (chain.dims[k - 1],))
    return chain.orthogonal_component(y, k, k - 1)


def upsample_inject(schedule: SubspaceSchedule, k: int, x_k, rng, t=None):
    """Lift level-``k`` coordinates to level ``k-1`` and add orthogonal noise.

    The noise variance is the injection variance at ``t`` (default ``t_k``).
    """
    schedule._check_level(k)
    x_k = np.asarray(x_k, dtype=np.float64)
    noise = _injection_noise(schedule, k, x_k.shape, rng, t)
    return schedule.chain.lift(x_k, k, k - 1) + noise


def grid_levels(schedule: SubspaceSchedule, num_steps: int) -> np.ndarray:
    grid = time_grid(schedule.process, num_steps)
    return np.array([schedule.level_at(t) for t in grid])


def level_step_counts(schedule: SubspaceSchedule, num_steps: int) -> list[int]:
    """Predictor evaluations spent at each level (index 0 = full dimension)."""
    levels = grid_levels(schedule, num_steps)[:-1]
    return [int(np.sum(levels == k)) for k in range(schedule.K + 1)]


def pc_sample(process: VEProcess, score_fn, dim: int, config: SamplerConfig, count: int, rng):
    """Plain predictor-corrector sampler in a single space."""
    grid = time_grid(process, config.num_steps)
    x = process.prior_sample(dim, rng, count)
    for t, t_next in zip(grid[:-1], grid[1:]):
        x = em_reverse_step(process, score_fn, x, t, t_next - t, rng)
        x = langevin_correct(process, score_fn, x, t_next, config.corrector_snr, rng)
    return x


def sample_subspace_diffusion(bank, schedule: SubspaceSchedule, config: SamplerConfig, count: int, rng):
    """Unconditional sampling through the chain, smallest subspace first.

    Each grid step runs with the model of the level active at its start
    time; when the next grid time falls at or below ``t_k`` the state is
    upsampled there and refined with ``langevin_after_upsample`` corrector
    steps. The total number of predictor steps is ``num_steps`` for any K.
    """
    check_bank(bank, schedule)
    process = schedule.process
    dims = schedule.chain.dims
    grid = time_grid(process, config.num_steps)
    levels = grid_levels(schedule, config.num_steps)
    k = int(levels[0])
    x = process.prior_sample(dims[k], rng, count)
    evals = np.zeros(len(dims), dtype=int)
    for i in range(config.num_steps):
        t, t_next = grid[i], grid[i + 1]
        assert x.shape[-1] == dims[k]
        x = em_reverse_step(process, bank[k], x, t, t_next - t, rng)
        evals[k] += 1
        x = langevin_correct(process, bank[k], x, t_next, config.corrector_snr, rng)
        while k > levels[i + 1]:
            x = upsample_inject(schedule, k, x, rng, t=t_next)
            k -= 1
            for _ in range(config.langevin_after_upsample):
                x = langevin_correct(process, bank[k], x, t_next, config.corrector_snr, rng)
    assert k == 0 and x.shape[-1] == dims[0]
    assert list(evals) == level_step_counts(schedule, config.num_steps)
    return x


def sample_blocks(fn, count: int, seed: int, block: int = 800, threads: int = 1):
    """Run ``fn(n, rng)`` over fixed-size blocks with per-block RNG streams.

    Output does not depend on ``threads``: block ``b`` always draws from the
    stream seeded by ``(seed, b)``.
    """
    sizes = [min(block, count - s) for s in range(0, count, block)]
    rngs = [np.random.default_rng([seed, b]) for b in range(len(sizes))]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(fn, sizes, rngs))
    else:
        parts = [fn(n, r) for n, r in zip(sizes, rngs)]
    return np.concatenate(parts, axis=0)


class FullScore:
    """Ambient-space score assembled from subspace models and Gaussian components."""

    def __init__(self, bank, schedule: SubspaceSchedule):
        check_bank(bank, schedule)
        self.bank = bank
        self.schedule = schedule
        self.dim = schedule.chain.ambient_dim

    def __call__(self, x, t, level=None):
        """Score at ``t``; ``level`` overrides the active level (used at interval ends)."""
        t = float(self.schedule.process.check_time(t))
        chain = self.schedule.chain
        x = np.asarray(x, dtype=np.float64)
        k = self.schedule.level_at(t) if level is None else level
        out = chain.lift(self.bank[k](chain.project(x, k), t), k)
        xj = x
        for j in range(k):
            perp = chain.orthogonal_component(xj, j + 1, j)
            out = out - chain.lift(perp, j) / self.schedule.injection_variance(j + 1, t)
            xj = chain.project(xj, j + 1, j)
        return out


def full_score(bank, schedule: SubspaceSchedule, x, t):
    return FullScore(bank, schedule)(x, t)


def inpaint(bank, schedule: SubspaceSchedule, config: SamplerConfig, known, mask, rng, count=None):
    """Replacement-conditioned sampling with the assembled full score.

    ``known`` holds the observed values (entries outside ``mask`` are
    ignored). Returns ``count`` rows, or one vector when ``count`` is None.
    """
    process = schedule.process
    known = np.asarray(known, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    d = schedule.chain.ambient_dim
    if known.shape[-1] != d or mask.shape != (d,):
        raise ValueError(f"known and mask must have last dimension {d}")
    n = 1 if count is None else count
    base = np.broadcast_to(known, (n, d))
    if mask.all():
        out = base.copy()
        return out[0] if count is None else out
    score = FullScore(bank, schedule)
    grid = time_grid(process, config.num_steps)
    x = process.prior_sample(d, rng, n)

    def replace(x, t):
        if mask.any():
            z = rng.standard_normal((n, int(mask.sum())))
            x[:, mask] = base[:, mask] + process.sigma(t) * z
        return x

    x = replace(x, grid[0])
    for t, t_next in zip(grid[:-1], grid[1:]):
        x = replace(em_reverse_step(process, score, x, t, t_next - t, rng), t_next)
        if config.corrector_snr > 0:
            x = replace(langevin_correct(process, score, x, t_next, config.corrector_snr, rng), t_next)
    x[:, mask] = base[:, mask]
    return x[0] if count is None else x
