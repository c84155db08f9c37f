"""Final approximation ``X^n = psi_n(Y^{n,n}, B)`` and the reference ``X = phi(Y, B)``."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fbm
from .coeffs import CoefficientPair, builtin_family
from .constants import ConstantSet, compute_constants
from .driver import Trajectory, scheme_y_batch, y_exact_batch
from .flow import PiecewiseFlow, flow_reference, make_flow

_TINY_RADIUS = 1e-300


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SchemeConfig:
    hurst: float
    n: int = 64
    q: int = 8
    T: float = 1.0
    x0: float = 0.0
    rho: float = 0.01
    seed: int = 0
    family: str = "trig"
    params: tuple = (1.0, 1.0)
    oracle_tol: float = 1e-10
    generator: str = "cholesky"
    level: int | None = None
    stats_inflation: float = 1.0
    substeps: int = 1
    bounds_override: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if int(self.q) != self.q or self.q < 2:
            raise ValueError(f"q must be an integer >= 2, got {self.q}")
        if not 0.0 < self.hurst < 1.0:
            raise ValueError(f"hurst must lie in (0, 1), got {self.hurst}")
        if not 0.0 < self.rho < self.hurst:
            raise ValueError(f"rho must lie in (0, hurst), got rho={self.rho}, hurst={self.hurst}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.level is not None and self.level < 1:
            raise ValueError(f"level must be positive, got {self.level}")
        if self.stats_inflation < 1.0:
            raise ValueError("stats_inflation must be >= 1")
        if not 0.25 < self.hurst < 0.5:
            warnings.warn(
                f"hurst={self.hurst} is outside (1/4, 1/2); no convergence rate is asserted there",
                stacklevel=3,
            )

    @property
    def flow_level(self) -> int:
        return self.level or self.n

    def coefficients(self) -> CoefficientPair:
        pair = builtin_family(self.family, *self.params)
        if self.bounds_override:
            pair = pair.with_bounds(check=False, **self.bounds_override)
        return pair

    def path(self, N: int | None = None) -> fbm.FbmPath:
        N = N or self.n * self.q
        method = self.generator if N <= fbm.CHOLESKY_CAP else "circulant"
        return fbm.generate(N, self.T, self.hurst, self.seed, method)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["params"] = list(self.params)
        return d


def path_constants(coeffs: CoefficientPair, path: fbm.FbmPath, x0: float, rho: float, inflation: float = 1.0) -> ConstantSet:
    stats = path.stats(rho)
    if inflation != 1.0:
        stats = stats.inflate(inflation)
    return compute_constants(coeffs.bounds, path.horizon_T, x0, stats, path.hurst)


def scheme_flow(coeffs: CoefficientPair, radius, level: int, truncation_M=np.inf) -> PiecewiseFlow:
    radius = np.maximum(np.asarray(radius, dtype=float), _TINY_RADIUS)
    return make_flow(coeffs, radius if radius.ndim else float(radius), level, truncation_M)


def scheme_x_batch(coeffs: CoefficientPair, B_sub, T: float, x0, n: int, q: int, radius, level: int | None = None, guard=None):
    """``(Y^{n,n}, X^n)`` at the scheme nodes for a batch of paths.

    ``B_sub`` is ``(batch, n q + 1)``; ``radius`` is each path's ``||B||_inf``
    (taken from the finest available grid).
    """
    B_sub = np.atleast_2d(np.asarray(B_sub, dtype=float))
    flow = scheme_flow(coeffs, radius, level or n)
    y, _ = scheme_y_batch(flow, B_sub, T, x0, n, q, guard)
    B_nodes = B_sub[:, ::q]
    r = np.asarray(flow.radius)
    x = flow.psi(y, B_nodes) if r.ndim == 0 else _psi_rows(flow, y, B_nodes)
    return y, x


def _psi_rows(flow: PiecewiseFlow, y, B_nodes):
    # per-path radius broadcasts along the time axis
    stacked = make_flow(flow.coeffs, np.asarray(flow.radius)[:, None], flow.level)
    return stacked.psi(y, B_nodes)


def reference_batch(coeffs: CoefficientPair, B, T: float, x0, tol: float = 1e-10, substeps: int = 1, guard=None):
    """Reference ``(Y, X)`` on the full grid of ``B`` (``(batch, N + 1)``)."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    y = y_exact_batch(coeffs, B, T, x0, tol, substeps, guard)
    x, _ = flow_reference(coeffs, y, B, tol)
    return y, x


def solve_x_scheme(cfg: SchemeConfig, path: fbm.FbmPath | None = None) -> Trajectory:
    """Run the full scheme on the seeded path of ``cfg``."""
    coeffs = cfg.coefficients()
    path = path or cfg.path()
    consts = path_constants(coeffs, path, cfg.x0, cfg.rho, cfg.stats_inflation)
    _, x = scheme_x_batch(
        coeffs, path.values[None, :], cfg.T, cfg.x0, cfg.n, cfg.q, path.sup_norm, cfg.flow_level, consts.M
    )
    return Trajectory(
        path.times[:: cfg.q], x[0], "X_n",
        {"coeffs": f"{coeffs.family_tag}{coeffs.params}", "seed": cfg.seed, "n": cfg.n, "l": cfg.flow_level, "q": cfg.q},
    )


def solve_x_reference(cfg: SchemeConfig, path: fbm.FbmPath | None = None) -> Trajectory:
    """Reference solution on the same seeded path, restricted to the scheme nodes."""
    coeffs = cfg.coefficients()
    path = path or cfg.path()
    consts = path_constants(coeffs, path, cfg.x0, cfg.rho, cfg.stats_inflation)
    _, x = reference_batch(coeffs, path.values[None, :], cfg.T, cfg.x0, cfg.oracle_tol, cfg.substeps, consts.M)
    stride = path.grid_size // cfg.n
    return Trajectory(
        path.times[::stride], x[0, ::stride], "X_exact",
        {"coeffs": f"{coeffs.family_tag}{coeffs.params}", "seed": cfg.seed, "tol": cfg.oracle_tol},
    )


def sup_error(a: Trajectory, b: Trajectory) -> float:
    """``max_k |a_k - b_k|`` over a shared time grid."""
    if np.shape(a.times) != np.shape(b.times) or not np.allclose(a.times, b.times, rtol=1e-12, atol=0.0):
        raise GridMismatch("trajectories live on different time grids")
    if len(a.values) == 0:
        return 0.0
    return float(np.max(np.abs(np.asarray(a.values) - np.asarray(b.values))))


def run_manifest(cfg: SchemeConfig, path: fbm.FbmPath | None = None) -> dict:
    coeffs = cfg.coefficients()
    path = path or cfg.path()
    stats = path.stats(cfg.rho)
    consts = path_constants(coeffs, path, cfg.x0, cfg.rho, cfg.stats_inflation)
    c = consts.as_dict()
    return {
        "config": cfg.as_dict(),
        "path": {
            "grid_size": path.grid_size,
            "generator": path.generator_tag,
            "sup_norm": stats.sup_norm,
            "holder_norm": stats.holder_norm,
            "stats_inflation": cfg.stats_inflation,
            "note": "norms are computed on the discrete simulation grid",
        },
        "bounds": coeffs.bounds.as_dict(),
        "constants": {k: c[k] for k in ("M", "C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8", "C_total", "log_C_total", "C1_variant", "C1_remark", "C1_proof", "C2_lemma")},
        "theorem_bound": consts.theorem_bound(cfg.n),
    }


def write_manifest(manifest: dict, dest) -> None:
    Path(dest).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
