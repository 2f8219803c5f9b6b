"""Orthogonal Fisher divergence and transition-time selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from subdiff.sde import VEProcess
from subdiff.subspace import SubspaceChain

DEFAULT_GRID = np.linspace(0.05, 0.95, 50)
DEFAULT_MC = 4096


class ThresholdUnattainable(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DivergenceCurve:
    level: int
    base: int
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    mc_samples: int

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")

    def rows(self):
        for t, v, se in zip(self.times, self.values, self.stderr):
            yield self.level, float(t), float(v), float(se), self.mc_samples


def orthogonal_variance(chain: SubspaceChain, process: VEProcess, energy: float, k, j, t):
    """Gaussian-approximation variance of ``x_perp_{k|j}`` at ``t`` from its data energy."""
    m = chain.dims[j] - chain.dims[k]
    return process.alpha(t) ** 2 * energy / m + process.sigma(t) ** 2


def fisher_divergence(score0, chain: SubspaceChain, k, j, data, process: VEProcess, t,
                      mc_samples, rng, energy=None):
    """Monte Carlo estimate of ``D_F(U_{k|j}; t)`` and its standard error.

    ``score0`` is a full-dimensional score model; ``energy`` defaults to the
    orthogonal energy of ``data``.
    """
    if not j < k:
        raise ValueError("need j < k")
    if mc_samples < 2:
        raise ValueError("need at least two Monte Carlo samples")
    process.check_time(t, lo=process.eps)
    data = np.asarray(data, dtype=np.float64)
    if energy is None:
        energy = chain.orthogonal_energy(data, k, j)
    var = orthogonal_variance(chain, process, energy, k, j, t)
    m = chain.dims[j] - chain.dims[k]
    x0 = data[rng.integers(0, data.shape[0], size=mc_samples)]
    xt = process.perturb(x0, t, rng.standard_normal(x0.shape))
    s_perp = chain.orthogonal_component(chain.project(score0(xt, t), j), k, j)
    x_perp = chain.orthogonal_component(chain.project(xt, j), k, j)
    r = s_perp + x_perp / var
    terms = np.sum(r * r, axis=1) * var / m
    return float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(mc_samples))


def divergence_curve(score0, chain: SubspaceChain, k, data, process: VEProcess,
                     grid=DEFAULT_GRID, mc_samples=DEFAULT_MC, seed=0) -> DivergenceCurve:
    """``D_F(U_{k|0}; t)`` over ``grid``; point ``i`` uses the RNG stream ``(seed, i)``."""
    grid = np.asarray(grid, dtype=np.float64)
    process.check_time(grid, lo=process.eps)
    energy = chain.orthogonal_energy(data, k, 0)
    vals, ses = [], []
    for i, t in enumerate(grid):
        v, se = fisher_divergence(score0, chain, k, 0, data, process, t, mc_samples,
                                  np.random.default_rng([seed, i]), energy=energy)
        vals.append(v)
        ses.append(se)
    return DivergenceCurve(k, 0, grid, np.array(vals), np.array(ses), mc_samples)


def select_transition_times(curves, threshold: float):
    """First time each curve falls to ``threshold``, linearly interpolated."""
    out = []
    for c in curves:
        below = np.nonzero(c.values <= threshold)[0]
        if below.size == 0:
            raise ThresholdUnattainable(
                f"divergence of level {c.level} never reaches {threshold:g} "
                f"(minimum {c.values.min():.3g})"
            )
        i = below[0]
        if i == 0:
            out.append(float(c.times[0]))
            continue
        t0, t1 = c.times[i - 1], c.times[i]
        v0, v1 = c.values[i - 1], c.values[i]
        out.append(float(t0 + (v0 - threshold) / (v0 - v1) * (t1 - t0)))
    return out


CSV_HEADER = ("level", "t", "D_F", "SE", "mc_samples")


def write_curves_csv(fh, curves):
    w = csv.writer(fh)
    w.writerow(CSV_HEADER)
    for c in curves:
        for row in c.rows():
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4]])


def read_curves_csv(fh):
    rows = list(csv.DictReader(fh))
    curves = []
    for level in sorted({int(r["level"]) for r in rows}):
        sel = [r for r in rows if int(r["level"]) == level]
        curves.append(DivergenceCurve(
            level, 0,
            np.array([float(r["t"]) for r in sel]),
            np.array([float(r["D_F"]) for r in sel]),
            np.array([float(r["SE"]) for r in sel]),
            int(sel[0]["mc_samples"]),
        ))
    return curves
