"""Variance-exploding diffusion and subspace schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from subdiff.subspace import SubspaceChain

EPS = 1e-3


@dataclass(frozen=True)
class VEProcess:
    """Variance-exploding SDE with geometric noise scale.

    ``sigma(t) = sigma_min * (sigma_max / sigma_min) ** (t / T)``, drift zero,
    ``g(t)^2 = d sigma^2 / dt``. ``eps`` is the smallest time ever queried by
    training or integration.
    """

    sigma_min: float = 0.01
    sigma_max: float = 50.0
    T: float = 1.0
    eps: float = EPS

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0 < self.eps < self.T:
            raise ValueError("need 0 < eps < T")

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))

    def sigma(self, t):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** (np.asarray(t) / self.T)

    def g2(self, t):
        return self.sigma(t) ** 2 * (2.0 * self.log_ratio / self.T)

    def g(self, t):
        return np.sqrt(self.g2(t))

    def f(self, t):
        return np.zeros_like(np.asarray(t, dtype=np.float64))

    def alpha(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def check_time(self, t, lo=0.0):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < lo) or np.any(t > self.T) or not np.all(np.isfinite(t)):
            raise ValueError(f"time outside [{lo}, {self.T}]")
        return t

    def perturb(self, x0, t, z):
        """Draw from the perturbation kernel given standard normal ``z``."""
        t = self.check_time(t)
        x0 = np.asarray(x0, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if x0.shape != z.shape:
            raise ValueError("x0 and z must have the same shape")
        scale = self.alpha(t)
        sig = self.sigma(t)
        if scale.ndim:
            scale, sig = scale[..., None], sig[..., None]
        return scale * x0 + sig * z

    def prior_sample(self, dim: int, rng: np.random.Generator, count: int | None = None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        shape = (dim,) if count is None else (count, dim)
        return self.sigma_max * rng.standard_normal(shape)

    def prior_logp(self, x):
        x = np.asarray(x)
        d = x.shape[-1]
        var = self.sigma_max**2
        return -0.5 * (d * np.log(2 * np.pi * var) + np.sum(x * x, axis=-1) / var)


@dataclass(frozen=True, eq=False)
class SubspaceSchedule:
    """Projection times and orthogonal data energies bound to a chain.

    ``energies[k-1]`` is the mean of ``||x_perp_{k|k-1}(0)||^2`` over the
    training data (raw second moment, no mean removed).
    """

    chain: SubspaceChain
    process: VEProcess
    times: tuple[float, ...]
    energies: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) != self.chain.K or len(self.energies) != self.chain.K:
            raise ValueError(f"need {self.chain.K} times and energies")
        _check_times(self.times, self.process)
        if any(e < 0 for e in self.energies):
            raise ValueError("orthogonal energies must be non-negative")

    @property
    def K(self) -> int:
        return self.chain.K

    def _check_level(self, k):
        if not 1 <= k <= self.K:
            raise IndexError(f"level {k} out of range 1..{self.K}")

    def injection_variance(self, k: int, t=None):
        """Per-dimension variance of ``x_perp_{k|k-1}`` at time ``t`` (default ``t_k``)."""
        self._check_level(k)
        if t is None:
            t = self.times[k - 1]
        dims = self.chain.dims
        data_term = self.energies[k - 1] / (dims[k - 1] - dims[k])
        return self.process.alpha(t) ** 2 * data_term + self.process.sigma(t) ** 2

    def energy_to(self, k: int, j: int = 0) -> float:
        """``E||x_perp_{k|j}(0)||^2``; nested levels make the energies additive."""
        return float(sum(self.energies[j:k]))

    def level_at(self, t) -> int:
        """Active level at time ``t``: number of projection times strictly below ``t``."""
        return int(np.searchsorted(np.asarray(self.times), t, side="left"))


def _check_times(times, process):
    ts = np.asarray(times, dtype=np.float64)
    if ts.size and (np.any(ts <= 0) or np.any(ts >= process.T)):
        raise ValueError("projection times must lie strictly inside (0, T)")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("projection times must be strictly increasing")


def make_schedule(chain: SubspaceChain, process: VEProcess, data, times) -> SubspaceSchedule:
    """Schedule with energies estimated from full-space training ``data``."""
    times = tuple(float(t) for t in times)
    if len(times) != chain.K:
        raise ValueError(f"chain has K={chain.K} proper subspaces but {len(times)} times given")
    _check_times(times, process)
    data = np.asarray(data, dtype=np.float64)
    energies = []
    x = data
    for k in range(1, chain.K + 1):
        perp = chain.orthogonal_component(x, k, k - 1)
        energies.append(float(np.mean(np.sum(perp * perp, axis=-1))))
        x = chain.project(x, k, k - 1)
    return SubspaceSchedule(chain, process, times, tuple(energies))
