"""Convergence studies and bound-verification suites.

All runs that share a simulation grid are batched through the vectorised
solvers; ``workers > 1`` splits the batch across processes.  Every batch
element is computed independently, so chunking never changes a result.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fbm
from .coeffs import CoefficientPair
from .constants import ConstantSet, compute_constants
from .driver import scheme_y_batch, y_exact_batch, y_l_batch
from .flow import flow_reference, make_flow
from .scheme import reference_batch, scheme_flow, scheme_x_batch

CSV_COLUMNS = ("H", "n", "seed", "q", "rho", "sup_error", "bound", "bound_ok", "wall_ms")
EXACT_TOL = 1e-12
# observed lemma quantities at or below this (relative) level are roundoff
ROUNDOFF = 1e-11
TAYLOR_SLACK = 1e-12


class HarnessError(ValueError):
    pass


# --- helpers -------------------------------------------------------------------


def fit_slope(resolutions: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of ``-log(error)`` against ``log(resolution)``.

    Returns ``nan`` when any error is zero (nothing to fit).
    """
    r = np.asarray(resolutions, dtype=float)
    e = np.asarray(errors, dtype=float)
    if np.any(e <= 0) or r.size < 2:
        return math.nan
    return float(-np.polyfit(np.log(r), np.log(e), 1)[0])


def _paths(N: int, T: float, hurst: float, seeds: Sequence[int], generator: str) -> list[fbm.FbmPath]:
    method = generator if N <= fbm.CHOLESKY_CAP else "circulant"
    return [fbm.generate(N, T, hurst, s, method) for s in seeds]


def _chunked(fn: Callable, B: np.ndarray, workers: int, *args):
    """Apply ``fn(B_chunk, *args)`` over row chunks, optionally in processes."""
    if workers <= 1 or B.shape[0] < 2:
        return fn(B, *args)
    chunks = np.array_split(np.arange(B.shape[0]), min(workers, B.shape[0]))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_call, [(fn, B[c], args) for c in chunks]))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p) for p in zip(*parts))
    return np.concatenate(parts)


def _call(job):
    fn, B, args = job
    return fn(B, *args)


def _reference_rows(B, coeffs, T, x0, tol, substeps):
    return reference_batch(coeffs, B, T, x0, tol, substeps)


# --- convergence -----------------------------------------------------------------


@dataclass
class RunRecord:
    H: float
    n: int
    seed: int
    q: int
    rho: float
    sup_error: float
    bound: float
    log_bound: float
    bound_ok: bool
    wall_ms: float

    def csv_row(self, timings: bool = False) -> list[str]:
        return [
            repr(self.H), str(self.n), str(self.seed), str(self.q), repr(self.rho),
            f"{self.sup_error:.17g}", f"{self.bound:.17g}", "1" if self.bound_ok else "0",
            f"{self.wall_ms:.3f}" if timings else "",
        ]


@dataclass
class ConvergenceReport:
    records: list[RunRecord]
    n_list: list[int]
    hurst_list: list[float]
    seeds: list[int]
    rho: float
    q: int
    n_ref: int
    slope_factor: float
    per_seed_slopes: dict = field(default_factory=dict)
    fitted_slope: dict = field(default_factory=dict)
    target_order: dict = field(default_factory=dict)
    exact_family: dict = field(default_factory=dict)
    median_errors: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def bounds_ok(self) -> bool:
        return all(r.bound_ok for r in self.records)

    def slope_ok(self, H: float) -> bool:
        if self.exact_family[H]:
            return True
        return self.fitted_slope[H] >= self.slope_factor * self.target_order[H]

    def monotone(self, H: float) -> bool:
        med = self.median_errors[H]
        if self.exact_family[H]:
            return True
        return all(b < a for a, b in zip(med, med[1:]))

    @property
    def passed(self) -> bool:
        return self.bounds_ok and all(self.slope_ok(H) for H in self.hurst_list)

    def csv_text(self, timings: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in sorted(self.records, key=lambda r: (r.H, r.n, r.seed)):
            w.writerow(r.csv_row(timings))
        return buf.getvalue()

    def summary(self) -> dict:
        out = {
            "passed": self.passed,
            "bounds_ok": self.bounds_ok,
            "violations": sum(not r.bound_ok for r in self.records),
            "slope_factor": self.slope_factor,
            "n_list": self.n_list,
            "n_ref": self.n_ref,
            "q": self.q,
            "rho": self.rho,
            "seeds": self.seeds,
            "per_hurst": {},
            "wall_times": self.wall_times,
            "wall_ms": {f"{r.H}/{r.n}/{r.seed}": r.wall_ms for r in sorted(self.records, key=lambda r: (r.H, r.n, r.seed))},
            "config": self.config,
        }
        for H in self.hurst_list:
            out["per_hurst"][repr(H)] = {
                "target_order": self.target_order[H],
                "threshold": self.slope_factor * self.target_order[H],
                "median_slope": None if self.exact_family[H] else self.fitted_slope[H],
                "per_seed_slopes": self.per_seed_slopes[H],
                "slope_ok": self.slope_ok(H),
                "median_errors": self.median_errors[H],
                "errors_decrease": self.monotone(H),
                "note": "exact family: slope fit skipped" if self.exact_family[H] else "",
            }
        return out

    def write(self, out_dir, timings: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "convergence.csv").write_text(self.csv_text(timings))
        (out / "convergence_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def run_convergence(
    coeffs: CoefficientPair,
    hurst_list: Sequence[float],
    n_list: Sequence[int],
    seeds: Sequence[int],
    T: float = 1.0,
    x0: float = 0.0,
    rho: float = 0.01,
    q: int = 8,
    n_ref: int | None = None,
    oracle_tol: float = 1e-10,
    substeps: int = 1,
    slope_factor: float = 0.9,
    generator: str = "cholesky",
    workers: int = 1,
) -> ConvergenceReport:
    """Pathwise errors of ``X^n`` against the reference on common paths.

    One path per ``(H, seed)`` is sampled at ``n_ref`` steps; each scheme run
    uses the subsampled grid of ``q n`` steps and the flow radius of the
    fine path.  The reference is computed once per path on the fine grid.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 4 or len(set(n_list)) != len(n_list):
        raise HarnessError("n_list needs at least 4 distinct values")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise HarnessError("n_list must be strictly increasing")
    if not seeds:
        raise HarnessError("at least one seed is required")
    n_ref = int(n_ref or max(8, q) * max(n_list))
    if n_ref < 8 * max(n_list):
        raise HarnessError(f"n_ref={n_ref} must be at least 8 * max(n_list)")
    for n in n_list:
        if n_ref % (q * n):
            raise HarnessError(f"reference grid {n_ref} is not aligned with q*n = {q * n}")
    hurst_list = [float(h) for h in hurst_list]
    seeds = [int(s) for s in seeds]

    report = ConvergenceReport([], n_list, hurst_list, seeds, rho, q, n_ref, slope_factor)
    # all (H, seed) paths share the fine grid, so the reference runs as one batch
    t0 = time.perf_counter()
    paths = {H: _paths(n_ref, T, H, seeds, generator) for H in hurst_list}
    B = np.concatenate([np.stack([p.values for p in paths[H]]) for H in hurst_list])
    report.wall_times["paths_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    _, x_ref = _chunked(_reference_rows, B, workers, coeffs, T, x0, oracle_tol, substeps)
    report.wall_times["reference_s"] = time.perf_counter() - t0

    for hi, H in enumerate(hurst_list):
        rows = slice(hi * len(seeds), (hi + 1) * len(seeds))
        consts = [
            compute_constants(coeffs.bounds, T, x0, p.stats(rho), H) for p in paths[H]
        ]
        radius = np.array([p.sup_norm for p in paths[H]])
        guard = np.array([c.M for c in consts])
        errs = np.empty((len(n_list), len(seeds)))
        for ni, n in enumerate(n_list):
            t0 = time.perf_counter()
            B_sub = B[rows, :: n_ref // (q * n)]
            _, x_n = scheme_x_batch(coeffs, B_sub, T, x0, n, q, radius, None, guard)
            elapsed_ms = 1e3 * (time.perf_counter() - t0) / len(seeds)
            ref_n = x_ref[rows, :: n_ref // n]
            errs[ni] = np.max(np.abs(x_n - ref_n), axis=1)
            excess = _excess(errs[ni], np.max(np.abs(ref_n), axis=1))
            for si, seed in enumerate(seeds):
                e = float(errs[ni, si])
                log_b = consts[si].log_theorem_bound(n)
                ok = excess[si] == 0.0 or math.log(excess[si]) <= log_b
                report.records.append(
                    RunRecord(H, n, seed, q, rho, e, consts[si].theorem_bound(n), log_b, ok, elapsed_ms)
                )
        exact = bool(np.all(errs <= EXACT_TOL))
        report.exact_family[H] = exact
        report.target_order[H] = 2.0 * (H - rho)
        report.median_errors[H] = [float(v) for v in np.median(errs, axis=1)]
        slopes = [] if exact else [fit_slope(n_list, errs[:, si]) for si in range(len(seeds))]
        report.per_seed_slopes[H] = slopes
        report.fitted_slope[H] = math.nan if exact else float(np.median(slopes))
    report.config = {
        "family": coeffs.family_tag, "params": list(coeffs.params), "T": T, "x0": x0,
        "oracle_tol": oracle_tol, "substeps": substeps, "generator": generator,
        "hurst_list": hurst_list,
    }
    return report


# --- lemma suite -------------------------------------------------------------------


@dataclass
class LemmaResult:
    name: str
    worst_ratio: float
    samples: int
    witness: dict = field(default_factory=dict)
    vacuous: bool = False

    @property
    def passed(self) -> bool:
        return self.worst_ratio <= 1.0


@dataclass
class LemmaReport:
    results: list[LemmaResult]
    config: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[LemmaResult]:
        return [r for r in self.results if not r.passed]

    def by_name(self, name: str) -> list[LemmaResult]:
        return [r for r in self.results if r.name == name]

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "results": [
                {**asdict(r), "passed": r.passed, "note": "vacuous pass" if r.vacuous and r.passed else ""}
                for r in self.results
            ],
            "config": self.config,
        }


def _excess(observed, scale) -> np.ndarray:
    """Observed discrepancy above the roundoff floor of values of size ``scale``."""
    return np.maximum(np.asarray(observed, dtype=float) - ROUNDOFF * (1.0 + np.abs(scale)), 0.0)


def _ratio(observed: np.ndarray, bound, scale) -> np.ndarray:
    """``observed / bound`` with roundoff-level observations counted as zero."""
    excess = _excess(observed, scale)
    bound = np.broadcast_to(np.asarray(bound, dtype=float), excess.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(excess == 0.0, 0.0, excess / bound)
    return r


def _worst(name, ratios, samples, vacuous=False, **coords) -> LemmaResult:
    ratios = np.asarray(ratios, dtype=float)
    i = int(np.argmax(ratios)) if ratios.size else 0
    witness = {k: float(np.asarray(v).ravel()[i]) for k, v in coords.items()}
    return LemmaResult(name, float(ratios.ravel()[i]) if ratios.size else 0.0, int(samples), witness, vacuous)


def flow_lemmas(coeffs: CoefficientPair, consts: ConstantSet, level: int, samples: int, rng: np.random.Generator, tol: float = 1e-12) -> list[LemmaResult]:
    """Lemmas on ``phi``, ``phi_l`` and ``psi_l`` over ``[-M, M] x [-R, R]``."""
    R, M = consts.inputs.sup_norm, consts.M
    flow = make_flow(coeffs, R, level)
    z = rng.uniform(-M, M, samples)
    u = rng.uniform(-R, R, samples)
    # always include the box corners and a node
    z[:3] = (M, -M, 0.0)
    u[:3] = (R, -R, R / level)
    z2 = rng.uniform(-M, M, samples)
    z2[0] = z[0]
    phi_ref, _ = flow_reference(coeffs, z, u, tol)
    phil = flow.phi(z, u)
    psil = flow.psi(z, u)
    b1, b2 = consts.lemma1_bound(level), consts.lemma2_bound(level)
    lip = consts.lipschitz_factor()
    dz = np.abs(z - z2)
    out = [
        _worst(f"Lemma 1 (l={level})", _ratio(np.abs(phi_ref - phil), b1, phi_ref), samples, b1 == 0.0, z=z, u=u),
        _worst(f"Lemma 2 (l={level})", _ratio(np.abs(phil - psil), b2, psil), samples, b2 == 0.0, z=z, u=u),
        _worst(f"Lemma 3 (l={level})", _ratio(np.abs(psil - flow.psi(z2, u)), dz * lip, psil), samples, False, z1=z, z2=z2, u=u),
        _worst(f"Lemma 4 (l={level})", _ratio(np.abs(phil - flow.phi(z2, u)), dz * lip, phil), samples, False, z1=z, z2=z2, u=u),
    ]
    return out


def trajectory_lemmas(
    coeffs: CoefficientPair,
    hurst: float,
    n: int,
    seeds: Sequence[int],
    T: float = 1.0,
    x0: float = 0.0,
    rho: float = 0.01,
    q: int = 8,
    tol: float = 1e-10,
    generator: str = "cholesky",
    workers: int = 1,
) -> list[LemmaResult]:
    """Lemmas on ``Y``, ``Y^n`` and ``Y^{n,n}`` along seeded paths on a ``q n`` grid."""
    N = q * n
    paths = _paths(N, T, hurst, seeds, generator)
    B = np.stack([p.values for p in paths])
    consts = [compute_constants(coeffs.bounds, T, x0, p.stats(rho), hurst) for p in paths]
    radius = np.array([max(p.sup_norm, 1e-300) for p in paths])
    guard = np.array([c.M for c in consts])
    y_ref = _chunked(_y_exact_rows, B, workers, coeffs, T, x0, tol)
    flow = make_flow(coeffs, radius, n)
    y_l = y_l_batch(flow, B, T, x0)
    y_nodes, y_sub = scheme_y_batch(scheme_flow(coeffs, radius, n), B, T, x0, n, q, guard, record_sub=True)

    seeds_arr = np.asarray(seeds, dtype=float)
    # Lemma 5: sup over the grid of |Y - Y^n|
    obs5 = np.max(np.abs(y_ref - y_l), axis=1)
    log_b5 = np.array([c.log_lemma5_bound(n) for c in consts])
    r5 = _log_ratio(obs5, log_b5, np.max(np.abs(y_ref), axis=1))
    # Lemma 6: increments of Y^{n,n} inside each step against C4 (s - t_k)
    dts = T / N
    k_of = np.arange(1, N + 1)
    anchor = ((k_of - 1) // q) * q
    incr = np.abs(y_sub[:, 1:] - y_sub[:, anchor])
    elapsed = (k_of - anchor) * dts
    c4 = np.array([c.C4 for c in consts])
    r6_all = _ratio(incr, c4[:, None] * elapsed[None, :], y_sub[:, 1:])
    r6 = np.max(r6_all, axis=1)
    # Lemma 7: |Y^n - Y^{n,n}| at the scheme nodes
    obs7 = np.max(np.abs(y_l[:, ::q] - y_nodes), axis=1)
    log_b7 = np.array([c.log_lemma7_bound(n) for c in consts])
    r7 = _log_ratio(obs7, log_b7, np.max(np.abs(y_nodes), axis=1))
    # trajectories stay in [-M, M]
    inside = np.max(np.abs(np.concatenate([y_ref, y_l, y_sub], axis=1)), axis=1) / guard
    return [
        _worst(f"Lemma 5 (n={n})", r5, len(seeds), bool(np.all(log_b5 == -np.inf)), seed=seeds_arr, observed=obs5),
        _worst(f"Lemma 6 (n={n})", r6, len(seeds) * N, bool(np.all(c4 == 0.0)), seed=seeds_arr),
        _worst(f"Lemma 7 (n={n})", r7, len(seeds), bool(np.all(log_b7 == -np.inf)), seed=seeds_arr, observed=obs7),
        _worst(f"Y bounded by M (n={n})", inside, len(seeds), seed=seeds_arr),
    ]


def _y_exact_rows(B, coeffs, T, x0, tol):
    return y_exact_batch(coeffs, B, T, x0, tol)


def _log_ratio(observed, log_bound, scale):
    excess = _excess(observed, scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(excess == 0.0, 0.0, np.exp(np.log(excess) - log_bound))


def run_lemma_suite(
    coeffs: CoefficientPair,
    hurst: float = 0.35,
    levels: Sequence[int] = (16, 64, 256),
    n_list: Sequence[int] = (64, 256),
    seeds: Sequence[int] = tuple(range(20)),
    samples: int = 1000,
    T: float = 1.0,
    x0: float = 0.1,
    rho: float = 0.01,
    q: int = 8,
    tol: float = 1e-10,
    flow_seed: int = 0,
    generator: str = "cholesky",
    workers: int = 1,
) -> LemmaReport:
    """Observed-over-bound ratios for every lemma; each must be at most 1.

    The flow lemmas use the radius and box of the ``flow_seed`` path sampled
    at the finest trajectory grid.
    """
    if samples < 100:
        raise HarnessError(f"at least 100 samples per lemma are required, got {samples}")
    rng = np.random.default_rng(np.random.SeedSequence(flow_seed, spawn_key=(7,)))
    N = q * max(n_list)
    method = generator if N <= fbm.CHOLESKY_CAP else "circulant"
    path = fbm.generate(N, T, hurst, flow_seed, method)
    consts = compute_constants(coeffs.bounds, T, x0, path.stats(rho), hurst)
    results: list[LemmaResult] = []
    for l in levels:
        results += flow_lemmas(coeffs, consts, l, samples, rng)
    for n in n_list:
        results += trajectory_lemmas(coeffs, hurst, n, seeds, T, x0, rho, q, tol, generator, workers)
    cfg = {
        "family": coeffs.family_tag, "params": list(coeffs.params), "bounds": coeffs.bounds.as_dict(),
        "hurst": hurst, "levels": list(levels), "n_list": list(n_list), "seeds": list(seeds),
        "samples": samples, "T": T, "x0": x0, "rho": rho, "q": q, "tol": tol, "flow_seed": flow_seed,
        "flow_radius": consts.inputs.sup_norm, "flow_box_M": consts.M,
    }
    return LemmaReport(results, cfg)


# --- piecewise Taylor inequality ----------------------------------------------------


@dataclass
class PiecewiseC2:
    """A continuous, piecewise ``C^2`` function on a partition.

    ``df_right`` gives ``f'(x+)`` everywhere (at nodes, the right limit);
    ``node_jumps[i] = |f'(u_i+) - f'(u_i-)|`` and ``curvature`` bounds
    ``|f''|`` on every cell.
    """

    f: Callable
    df_right: Callable
    nodes: np.ndarray
    node_jumps: np.ndarray
    curvature: float
    name: str = "f"


@dataclass
class TaylorReport:
    name: str
    samples: int
    worst_ratio: float
    max_ratio_witness: dict
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def check_taylor_lemma(spec: PiecewiseC2, samples: int = 1000, rng: np.random.Generator | None = None) -> TaylorReport:
    """Sample ``x <= y`` in cells ``j`` and ``j + k`` and test

    ``|f(y) - f(x) - f'(x+)(y - x)| <= C/2 (y - x)^2 + sum_p jump_{j+p} (y - u_{j+p})``.

    Comparisons allow a relative slack of ``1e-12`` for rounding, so exact
    equality cases pass.
    """
    nodes = np.asarray(spec.nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
        raise HarnessError("partition nodes must be strictly increasing")
    if len(spec.node_jumps) != nodes.size:
        raise HarnessError("node_jumps must have one entry per node")
    rng = rng or np.random.default_rng(0)
    cells = nodes.size - 1
    j = rng.integers(0, cells, samples)
    jy = np.array([rng.integers(a, cells) for a in j])
    x = nodes[j] + (nodes[j + 1] - nodes[j]) * (1.0 - rng.random(samples))
    y = nodes[jy] + (nodes[jy + 1] - nodes[jy]) * (1.0 - rng.random(samples))
    same = jy == j
    x[same], y[same] = np.minimum(x[same], y[same]), np.maximum(x[same], y[same])
    lhs = np.abs(spec.f(y) - spec.f(x) - spec.df_right(x) * (y - x))
    rhs = 0.5 * spec.curvature * (y - x) ** 2
    jumps = np.asarray(spec.node_jumps, dtype=float)
    for i in range(samples):
        p = np.arange(j[i] + 1, jy[i] + 1)
        rhs[i] += np.sum(jumps[p] * (y[i] - nodes[p]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lhs == 0.0, 0.0, lhs / rhs)
    slack = TAYLOR_SLACK * (np.abs(spec.f(y)) + np.abs(spec.f(x)) + np.abs(spec.df_right(x) * (y - x)) + rhs)
    bad = lhs > rhs + slack
    i = int(np.argmax(ratio))
    return TaylorReport(
        spec.name, int(samples), float(ratio[i]),
        {"x": float(x[i]), "y": float(y[i]), "lhs": float(lhs[i]), "rhs": float(rhs[i])},
        int(np.sum(bad)),
    )


def kink_function(R: float = 1.0, l: int = 8) -> PiecewiseC2:
    nodes = np.linspace(-R, R, 2 * l + 1)
    jumps = np.zeros(nodes.size)
    jumps[l] = 2.0
    return PiecewiseC2(np.abs, lambda x: np.where(x >= 0, 1.0, -1.0), nodes, jumps, 0.0, "|x|")


def smooth_function(R: float = 1.0, l: int = 8) -> PiecewiseC2:
    nodes = np.linspace(-R, R, 2 * l + 1)
    return PiecewiseC2(np.sin, np.cos, nodes, np.zeros(nodes.size), 1.0, "sin")


def psi_function(coeffs: CoefficientPair, z: float, R: float, l: int) -> PiecewiseC2:
    """``u -> psi_l(z, u)`` with its exact per-cell curvature and node jumps."""
    flow = make_flow(coeffs, R, l)
    nodes = flow.partition.nodes
    mids = 0.5 * (nodes[1:] + nodes[:-1])
    curvature = float(np.max(np.abs(flow.psi_d2u(np.full(mids.shape, z), mids))))
    zs = np.full(nodes.shape, z)
    jumps = np.abs(flow.psi_du(zs, nodes, "right") - flow.psi_du(zs, nodes, "left"))
    jumps[0] = jumps[-1] = 0.0
    return PiecewiseC2(
        lambda u: flow.psi(np.full(np.shape(u), z), u),
        lambda u: flow.psi_du(np.full(np.shape(u), z), u, "right"),
        nodes, jumps, curvature, f"psi_{l}({z:g}, .)",
    )


def run_taylor_suite(coeffs: CoefficientPair, z: float = 0.3, R: float = 1.0, l: int = 16, samples: int = 1000, seed: int = 0) -> list[TaylorReport]:
    rng = np.random.default_rng(seed)
    specs = [kink_function(R, l), smooth_function(R, l), psi_function(coeffs, z, R, l)]
    return [check_taylor_lemma(s, samples, rng) for s in specs]
