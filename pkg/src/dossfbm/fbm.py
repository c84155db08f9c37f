"""Fractional Brownian motion sample paths on uniform grids.

Two exact-in-law generators are provided: a Cholesky factorisation of the
covariance of ``(B_{t_1}, ..., B_{t_N})`` (O(N^3) setup, capped), and the
Davies-Harte circulant embedding of fractional Gaussian noise (O(N log N)).

Gaussian variates come from a Philox stream keyed by the path seed and the
generator tag, so a path is a pure function of ``(N, T, hurst, seed, tag)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
from scipy.linalg import lapack

GeneratorTag = Literal["cholesky", "circulant"]

CHOLESKY_CAP = 4096
_TAG_STREAM = {"cholesky": 0, "circulant": 1}
_UINT64_MAX = 2**64 - 1


class FactorizationError(ArithmeticError):
    """Covariance matrix was not numerically positive definite."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"Cholesky factorisation failed at pivot {pivot}")


class NegativeEigenvalueError(ArithmeticError):
    """Circulant embedding produced a negative eigenvalue."""

    def __init__(self, eigenvalue: float):
        self.eigenvalue = eigenvalue
        super().__init__(f"circulant embedding has negative eigenvalue {eigenvalue:.6e}")


def _check_hurst(hurst: float) -> None:
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"hurst must lie in (0, 1), got {hurst}")


def _check_grid(N: int, T: float) -> None:
    if int(N) != N or N < 1:
        raise ValueError(f"grid size N must be a positive integer, got {N}")
    if not T > 0 or not np.isfinite(T):
        raise ValueError(f"horizon T must be positive and finite, got {T}")


def covariance(s, t, hurst: float):
    """Covariance ``E[B_s B_t] = (t^2H + s^2H - |t - s|^2H) / 2``.

    Accepts scalars or broadcastable arrays.
    """
    _check_hurst(hurst)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0) or not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise ValueError("covariance arguments must be finite and nonnegative")
    h2 = 2.0 * hurst
    out = 0.5 * (t**h2 + s**h2 - np.abs(t - s) ** h2)
    return float(out) if out.ndim == 0 else out


def stream(seed: int, tag: str = "cholesky") -> np.random.Generator:
    """Counter-based generator for one path.

    The Philox key is derived from ``seed`` with a spawn key per generator
    tag, so the two generators never share variates for the same seed.
    """
    seed = int(seed)
    if not 0 <= seed <= _UINT64_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=(_TAG_STREAM[tag],))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PathStats:
    """Discrete sup norm and (H - rho)-Hölder quotient of a path."""

    sup_norm: float
    holder_norm: float
    rho: float

    def inflate(self, factor: float) -> "PathStats":
        """Scale both norms by ``factor`` (slack for discretisation)."""
        if factor < 1.0:
            raise ValueError(f"inflation factor must be >= 1, got {factor}")
        return PathStats(self.sup_norm * factor, self.holder_norm * factor, self.rho)


@dataclass(frozen=True, eq=False)
class FbmPath:
    """An fBm sample on the grid ``t_i = i T / N``, ``i = 0..N``."""

    hurst: float
    horizon_T: float
    grid_size: int
    values: np.ndarray
    seed: int
    generator_tag: str
    times: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid_size + 1,):
            raise ValueError(f"expected {self.grid_size + 1} values, got shape {values.shape}")
        if values[0] != 0.0:
            raise ValueError("fBm paths start at zero")
        values.flags.writeable = False
        times = np.arange(self.grid_size + 1, dtype=float) * (self.horizon_T / self.grid_size)
        times.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", times)

    @property
    def dt(self) -> float:
        return self.horizon_T / self.grid_size

    @cached_property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def stats(self, rho: float) -> PathStats:
        return _cached_stats(self, float(rho))

    def subsample(self, stride: int) -> "FbmPath":
        """Every ``stride``-th node; the scheme grid of a finer simulation."""
        if self.grid_size % stride:
            raise ValueError(f"stride {stride} does not divide grid size {self.grid_size}")
        return FbmPath(
            self.hurst,
            self.horizon_T,
            self.grid_size // stride,
            self.values[::stride],
            self.seed,
            self.generator_tag,
        )

    def scaled(self, factor: float) -> "FbmPath":
        """Path with values multiplied by ``factor`` (used for self-similarity checks)."""
        return FbmPath(
            self.hurst, self.horizon_T, self.grid_size, self.values * factor, self.seed, self.generator_tag
        )

    def to_csv(self, path) -> None:
        write_path_csv(self, path)


@functools.lru_cache(maxsize=256)
def _cached_stats(path: FbmPath, rho: float) -> PathStats:
    return path_stats(path, rho)


def holder_quotient(values: np.ndarray, dt: float, exponent: float) -> float:
    """``max_{i<j} |v_j - v_i| / ((j - i) dt)^exponent`` by sweeping over lags."""
    values = np.asarray(values, dtype=float)
    best = 0.0
    for lag in range(1, values.size):
        incr = np.max(np.abs(values[lag:] - values[:-lag]))
        q = incr / (lag * dt) ** exponent
        if q > best:
            best = q
    return float(best)


def path_stats(path: FbmPath, rho: float) -> PathStats:
    """Sup norm and discrete ``(H - rho)``-Hölder quotient over the grid."""
    if not 0.0 < rho < path.hurst:
        raise ValueError(f"rho must lie in (0, hurst={path.hurst}), got {rho}")
    holder = holder_quotient(path.values, path.dt, path.hurst - rho)
    return PathStats(path.sup_norm, holder, rho)


@functools.lru_cache(maxsize=8)
def _cholesky_factor(N: int, T: float, hurst: float) -> np.ndarray:
    t = np.arange(1, N + 1, dtype=float) * (T / N)
    cov = covariance(t[:, None], t[None, :], hurst)
    factor, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(int(info))
    if info < 0:
        raise ValueError(f"dpotrf rejected argument {-info}")
    factor.flags.writeable = False
    return factor


def generate_cholesky(N: int, T: float, hurst: float, seed: int, cap: int = CHOLESKY_CAP) -> FbmPath:
    """Exact fBm path by Cholesky factorisation of the grid covariance."""
    _check_hurst(hurst)
    _check_grid(N, T)
    if N > cap:
        raise ValueError(f"N={N} exceeds the Cholesky cap {cap}; use the circulant generator")
    factor = _cholesky_factor(int(N), float(T), float(hurst))
    z = stream(seed, "cholesky").standard_normal(N)
    values = np.concatenate(([0.0], factor @ z))
    return FbmPath(hurst, T, int(N), values, int(seed), "cholesky")


@functools.lru_cache(maxsize=8)
def _circulant_sqrt_eigs(N: int, T: float, hurst: float) -> np.ndarray:
    k = np.arange(N + 1, dtype=float)
    h2 = 2.0 * hurst
    gamma = 0.5 * (np.abs(k + 1) ** h2 - 2.0 * k**h2 + np.abs(k - 1) ** h2) * (T / N) ** h2
    row = np.concatenate((gamma, gamma[-2:0:-1]))
    eigs = np.fft.fft(row).real
    worst = float(eigs.min())
    if worst < -1e-10 * float(eigs.max()):
        raise NegativeEigenvalueError(worst)
    out = np.sqrt(np.clip(eigs, 0.0, None) / row.size)
    out.flags.writeable = False
    return out


def generate_circulant(N: int, T: float, hurst: float, seed: int) -> FbmPath:
    """Exact fBm path by circulant embedding of fractional Gaussian noise."""
    _check_hurst(hurst)
    _check_grid(N, T)
    sq = _circulant_sqrt_eigs(int(N), float(T), float(hurst))
    z = stream(seed, "circulant").standard_normal((2, sq.size))
    noise = np.fft.fft(sq * (z[0] + 1j * z[1])).real[:N]
    values = np.concatenate(([0.0], np.cumsum(noise)))
    return FbmPath(hurst, T, int(N), values, int(seed), "circulant")


def generate(N: int, T: float, hurst: float, seed: int, method: GeneratorTag = "cholesky") -> FbmPath:
    if method == "cholesky":
        return generate_cholesky(N, T, hurst, seed)
    if method == "circulant":
        return generate_circulant(N, T, hurst, seed)
    raise ValueError(f"unknown generator {method!r}")


def sample_matrix(N: int, T: float, hurst: float, seeds: Iterable[int], method: GeneratorTag = "cholesky") -> np.ndarray:
    """Stack of path values, one row per seed."""
    return np.stack([generate(N, T, hurst, s, method).values for s in seeds])


def write_path_csv(path: FbmPath, dest) -> None:
    lines = ["t,B"]
    lines += [f"{t:.17g},{b:.17g}" for t, b in zip(path.times, path.values)]
    Path(dest).write_text("\n".join(lines) + "\n")


def read_path_csv(src, hurst: float, seed: int = 0, generator_tag: str = "cholesky") -> FbmPath:
    data = np.loadtxt(src, delimiter=",", skiprows=1, ndmin=2)
    N = data.shape[0] - 1
    return FbmPath(hurst, float(data[-1, 0]), N, data[:, 1], seed, generator_tag)
