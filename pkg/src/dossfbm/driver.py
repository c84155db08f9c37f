"""The random ODE for ``Y`` and its approximations.

``Y' = exp(-Q(Y, B_t)) b(phi(Y, B_t))`` with ``Q(z, u) = int_0^u sigma'(phi(z, r)) dr``
is solved three ways:

* ``integrate_y_exact``: reference flow, classical RK4 in time;
* ``integrate_y_l``: same integrator with ``psi_l`` in place of ``phi`` (drift ``g_l``);
* ``step_scheme_y``: the derivative-corrected Euler rule
  ``Y_{k+1} = Y_k + dt g_l(B_k, Y_k) + h1_l(B_k, Y_k) int_{t_k}^{t_{k+1}} (B_s - B_k) ds``.

Between grid nodes ``B`` is the piecewise-linear interpolant of the sampled
path, so the time integral in the scheme is exact by the trapezoid rule on
the simulation sub-grid.  Batch functions take path values as a
``(batch, N + 1)`` array; the single-path wrappers return ``Trajectory``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .coeffs import CoefficientPair
from .fbm import FbmPath
from .flow import PiecewiseFlow, flow_reference

KINDS = ("Y_exact", "Y_l", "Y_nn", "X_exact", "X_n")


class BoundExceeded(ArithmeticError):
    """A trajectory left the box ``|Y| <= 10 M`` that it provably stays in."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)
    sub_times: np.ndarray | None = None
    sub_values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if np.shape(self.times) != np.shape(self.values):
            raise ValueError("times and values differ in length")

    def to_csv(self, dest) -> None:
        write_trajectory_csv(self, dest)

    def rows(self) -> list[str]:
        return [f"{t:.17g},{v:.17g}" for t, v in zip(self.times, self.values)]


def write_trajectory_csv(traj: Trajectory, dest) -> None:
    lines = [f"# kind={traj.kind}"]
    lines += [f"# {k}={v}" for k, v in sorted(traj.provenance.items())]
    lines.append("t,value")
    lines += traj.rows()
    Path(dest).write_text("\n".join(lines) + "\n")


def read_trajectory_csv(src) -> Trajectory:
    prov, kind, rows = {}, "Y_exact", []
    for line in Path(src).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key == "kind":
                kind = val
            else:
                prov[key] = val
        elif line and line != "t,value":
            rows.append([float(x) for x in line.split(",")])
    data = np.array(rows)
    return Trajectory(data[:, 0], data[:, 1], kind, prov)


def _with_coeffs(flow: PiecewiseFlow, coeffs: CoefficientPair | None) -> PiecewiseFlow:
    if coeffs is None or coeffs is flow.coeffs:
        return flow
    return replace(flow, coeffs=coeffs, node_cache=OrderedDict())


def g_l(coeffs: CoefficientPair | None, flow: PiecewiseFlow, B_s, z):
    """Approximate drift ``exp(-int_0^{B_s} sigma'(psi_l(z, u)) du) b(psi_l(z, B_s))``."""
    return _with_coeffs(flow, coeffs).drift_terms(z, B_s, with_h1=False)[0]


def h1_l(coeffs: CoefficientPair | None, flow: PiecewiseFlow, u, z):
    """``d g_l(u, z) / du`` using the right-sided ``d psi_l / du`` at nodes."""
    return _with_coeffs(flow, coeffs).drift_terms(z, u)[1]


def exact_drift(coeffs: CoefficientPair, B_s, z, tol: float = 1e-10):
    """Drift of the exact ``Y`` equation, via the reference flow."""
    phi, q = flow_reference(coeffs, z, B_s, tol)
    return np.exp(-q) * coeffs.b(phi)


# --- time integration ---------------------------------------------------------


def _check_guard(y, guard, where):
    if not np.all(np.isfinite(y)):
        raise BoundExceeded(f"non-finite state at {where}")
    if guard is not None and np.any(np.abs(y) > 10.0 * guard):
        raise BoundExceeded(f"|Y| exceeded 10 M at {where}")


def rk4_batch(drift, B: np.ndarray, T: float, x0, substeps: int = 1, guard=None) -> np.ndarray:
    """Classical RK4 for ``Y' = drift(B_t, Y)`` with piecewise-linear ``B``.

    ``B`` has shape ``(batch, N + 1)``; returns ``Y`` on the same grid.
    ``substeps`` RK4 steps are taken per grid cell.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    batch, npts = B.shape
    N = npts - 1
    h = T / N / substeps
    y = np.broadcast_to(np.asarray(x0, dtype=float), (batch,)).copy()
    out = np.empty((batch, npts))
    out[:, 0] = y
    for i in range(N):
        b0, b1 = B[:, i], B[:, i + 1]
        for j in range(substeps):
            lo = b0 + (b1 - b0) * (j / substeps)
            mid = b0 + (b1 - b0) * ((j + 0.5) / substeps)
            hi = b0 + (b1 - b0) * ((j + 1) / substeps) if j + 1 < substeps else b1
            k1 = drift(lo, y)
            k2 = drift(mid, y + 0.5 * h * k1)
            k3 = drift(mid, y + 0.5 * h * k2)
            k4 = drift(hi, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_guard(y, guard, f"grid node {i + 1}")
        out[:, i + 1] = y
    return out


def y_exact_batch(coeffs: CoefficientPair, B, T: float, x0, tol: float = 1e-10, substeps: int = 1, guard=None):
    return rk4_batch(lambda u, z: exact_drift(coeffs, u, z, tol), B, T, x0, substeps, guard)


def y_l_batch(flow: PiecewiseFlow, B, T: float, x0, substeps: int = 1, guard=None):
    return rk4_batch(lambda u, z: flow.drift_terms(z, u, with_h1=False)[0], B, T, x0, substeps, guard)


def bridge_integrals(B_sub: np.ndarray, T: float, n: int, q: int):
    """Cumulative trapezoid integrals of ``B_s - B_{t_k}`` inside each step.

    ``B_sub`` is ``(batch, n q + 1)``; returns ``(batch, n, q + 1)`` with the
    integral from ``t_k`` to each sub-node.
    """
    B_sub = np.atleast_2d(B_sub)
    batch = B_sub.shape[0]
    if B_sub.shape[1] != n * q + 1:
        raise ValueError(f"path has {B_sub.shape[1] - 1} steps, expected n*q = {n * q}")
    dts = T / (n * q)
    cells = np.empty((batch, n, q + 1))
    for k in range(n):
        cells[:, k, :] = B_sub[:, k * q : (k + 1) * q + 1]
    dev = cells - cells[:, :, :1]
    out = np.zeros_like(dev)
    out[:, :, 1:] = np.cumsum(0.5 * dts * (dev[:, :, 1:] + dev[:, :, :-1]), axis=2)
    return out


def scheme_y_batch(
    flow: PiecewiseFlow,
    B_sub,
    T: float,
    x0,
    n: int,
    q: int,
    guard=None,
    record_sub: bool = False,
    compensated: bool = False,
):
    """Derivative-corrected Euler scheme on ``n`` steps with ``q`` sub-nodes each.

    Returns ``Y`` at the scheme nodes, shape ``(batch, n + 1)``, and (when
    ``record_sub``) ``Y`` at every sub-node, shape ``(batch, n q + 1)``.
    """
    B_sub = np.atleast_2d(np.asarray(B_sub, dtype=float))
    batch = B_sub.shape[0]
    integ = bridge_integrals(B_sub, T, n, q)
    dt = T / n
    sub_dt = dt * np.arange(q + 1) / q
    y = np.broadcast_to(np.asarray(x0, dtype=float), (batch,)).copy()
    carry = np.zeros(batch)
    nodes = np.empty((batch, n + 1))
    nodes[:, 0] = y
    sub = np.empty((batch, n * q + 1)) if record_sub else None
    if record_sub:
        sub[:, 0] = y
    for k in range(n):
        g, h1 = flow.drift_terms(y, B_sub[:, k * q])
        if record_sub:
            sub[:, k * q + 1 : (k + 1) * q + 1] = y[:, None] + sub_dt[None, 1:] * g[:, None] + h1[:, None] * integ[:, k, 1:]
        incr = dt * g + h1 * integ[:, k, -1]
        if compensated:
            # Kahan summation of the increments
            yk = incr - carry
            t = y + yk
            carry = (t - y) - yk
            y = t
        else:
            y = y + incr
        _check_guard(y, guard, f"scheme step {k + 1}")
        nodes[:, k + 1] = y
    return nodes, sub


# --- single-path wrappers -------------------------------------------------------


def _provenance(coeffs, path, **extra):
    prov = {"coeffs": f"{coeffs.family_tag}{tuple(coeffs.params)}", "seed": path.seed, "hurst": path.hurst}
    prov.update(extra)
    return prov


def integrate_y_exact(coeffs: CoefficientPair, path: FbmPath, x0: float, tol: float = 1e-10, substeps: int = 1, guard=None) -> Trajectory:
    """Reference ``Y`` on the simulation grid of ``path``."""
    y = y_exact_batch(coeffs, path.values[None, :], path.horizon_T, x0, tol, substeps, guard)[0]
    return Trajectory(path.times, y, "Y_exact", _provenance(coeffs, path, tol=tol, N=path.grid_size))


def integrate_y_l(coeffs: CoefficientPair | None, flow: PiecewiseFlow, path: FbmPath, x0: float, tol: float | None = None, substeps: int = 1, guard=None) -> Trajectory:
    """``Y^l`` on the simulation grid; ``tol`` is accepted for symmetry and unused."""
    flow = _with_coeffs(flow, coeffs)
    y = y_l_batch(flow, path.values[None, :], path.horizon_T, x0, substeps, guard)[0]
    return Trajectory(path.times, y, "Y_l", _provenance(flow.coeffs, path, l=flow.level, N=path.grid_size))


def step_scheme_y(coeffs: CoefficientPair | None, flow: PiecewiseFlow, path: FbmPath, x0: float, n: int, q: int, guard=None, compensated: bool = False) -> Trajectory:
    """``Y^{l,n}`` at the nodes ``t_k = k T / n``; sub-node values are kept too."""
    if path.grid_size != n * q:
        raise ValueError(f"path grid size {path.grid_size} != n*q = {n * q}")
    flow = _with_coeffs(flow, coeffs)
    nodes, sub = scheme_y_batch(flow, path.values[None, :], path.horizon_T, x0, n, q, guard, True, compensated)
    return Trajectory(
        path.times[::q], nodes[0], "Y_nn",
        _provenance(flow.coeffs, path, n=n, l=flow.level, q=q),
        sub_times=path.times, sub_values=sub[0],
    )
