"""The diffusion flow ``phi`` and its piecewise approximations.

``phi(z, u)`` solves ``d phi / du = sigma(phi)``, ``phi(z, 0) = z``.  On the
uniform partition ``u_i = i R / l`` of ``[-R, R]`` two approximations are
built cell by cell, always anchored at the cell end nearer to zero:

* ``phi_l``: exact integral of ``sigma`` along the Euler line of the cell,
* ``psi_l``: first-order Taylor expansion of ``sigma`` along the cell, which
  integrates in closed form to
  ``psi(a) + d * (sigma(psi(a)) + sigma sigma'(psi(a)) * d / 2)``, ``d = u - a``.

All evaluators broadcast over ``z``, ``u`` and (for stacked flows) ``radius``.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .coeffs import CoefficientPair

DEFAULT_CACHE_SIZE = 2**16
# first trial step in normalised time; rejections shrink it per element
_FIRST_STEP = 1.0

_GL8_X, _GL8_W = np.polynomial.legendre.leggauss(8)
_GL8_X = 0.5 * (_GL8_X + 1.0)
_GL8_W = 0.5 * _GL8_W
_GL4_X, _GL4_W = np.polynomial.legendre.leggauss(4)
_GL4_X = 0.5 * (_GL4_X + 1.0)
_GL4_W = 0.5 * _GL4_W


class FlowDomainError(ValueError):
    """Evaluation requested outside ``[-R, R]``."""


class StepSizeUnderflow(ArithmeticError):
    pass


# --- reference flow ------------------------------------------------------

# Dormand-Prince 5(4) tableau.
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


def flow_reference(coeffs: CoefficientPair, z, u, tol: float = 1e-12, max_steps: int = 100_000):
    """Reference ``phi(z, u)`` and ``Q(z, u) = int_0^u sigma'(phi(z, s)) ds``.

    Solves the augmented system ``(phi, Q)' = (sigma(phi), sigma'(phi))`` with
    an embedded Dormand-Prince 5(4) pair in the rescaled variable
    ``tau = s / u`` on ``[0, 1]``, so negative ``u`` integrates backward.
    Every element carries its own step size; results do not depend on what
    else is in the batch.  The local error of each accepted step is at most
    ``tol * (1 + |y|)`` per component.
    """
    if not tol >= 1e-13:
        raise ValueError(f"tol must be >= 1e-13, got {tol}")
    z, u = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(u, dtype=float))
    shape = z.shape
    u = u.ravel().copy()
    phi = z.ravel().astype(float)
    q = np.zeros(u.size)
    tau = np.zeros(u.size)
    h = np.full(u.size, _FIRST_STEP)
    active = u != 0.0
    sig, dsig = coeffs.sigma, coeffs.dsigma
    weights = [(i, b) for i, b in enumerate(_DP_A[6]) if b]
    errw = [(i, e) for i, e in enumerate(_DP_E) if e]

    # only phi feeds back into the right-hand side; Q is a quadrature
    kp, kq = [u * sig(phi)], [u * dsig(phi)]
    steps = 0
    while active.any():
        steps += 1
        if steps > max_steps:
            raise StepSizeUnderflow("reference flow exceeded its step budget")
        # finished elements take zero-length steps, which leave them unchanged
        hh = np.where(active, np.minimum(h, 1.0 - tau), 0.0)
        kp, kq = kp[:1], kq[:1]
        for row in _DP_A[1:6]:
            incr = 0.0
            for a, k in zip(row, kp):
                if a:
                    incr = incr + a * k
            p = phi + hh * incr
            kp.append(u * sig(p))
            kq.append(u * dsig(p))
        dp = dq = 0.0
        for i, b in weights:
            dp = dp + b * kp[i]
            dq = dq + b * kq[i]
        phi5 = phi + hh * dp
        q5 = q + hh * dq
        kp.append(u * sig(phi5))
        kq.append(u * dsig(phi5))
        ep = eq = 0.0
        for i, e in errw:
            ep = ep + e * kp[i]
            eq = eq + e * kq[i]
        err_p = np.abs(hh * ep) / (tol * (1.0 + np.maximum(np.abs(phi), np.abs(phi5))))
        err_q = np.abs(hh * eq) / (tol * (1.0 + np.maximum(np.abs(q), np.abs(q5))))
        err = np.maximum(err_p, err_q)
        ok = (err <= 1.0) & active
        phi = np.where(ok, phi5, phi)
        q = np.where(ok, q5, q)
        kp[0] = np.where(ok, kp[6], kp[0])
        kq[0] = np.where(ok, kq[6], kq[0])
        new_tau = tau + hh
        done = ok & ((1.0 - new_tau) <= 1e-15)
        tau = np.where(ok, np.where(done, 1.0, new_tau), tau)
        with np.errstate(divide="ignore"):
            factor = np.clip(0.9 * err**-0.2, 0.2, 5.0)
        hn = hh * factor
        if np.any(active & ~ok & (hn < 1e-14)):
            raise StepSizeUnderflow("reference flow step size underflow")
        h = np.where(active, hn, h)
        active &= ~done
    return phi.reshape(shape), q.reshape(shape)


def solve_phi_reference(coeffs: CoefficientPair, z: float, u: float, tol: float = 1e-12) -> float:
    """Adaptive high-order reference for ``phi(z, u)``.

    Global accuracy is roughly ``100 * tol * |u|`` for ``C^2_b`` coefficients;
    ``phi(z, 0) == z`` exactly.
    """
    phi, _ = flow_reference(coeffs, z, u, tol)
    return float(phi)


def flow_log_derivative(coeffs: CoefficientPair, z, u, tol: float = 1e-12):
    """``log d phi / d z (z, u) = int_0^u sigma'(phi(z, s)) ds``."""
    return flow_reference(coeffs, z, u, tol)[1]


# --- partition -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlowPartition:
    """Uniform partition of ``[-R, R]`` into ``2 l`` cells.

    ``radius`` may be an array, in which case the partition describes a
    stack of flows (one per path) and ``nodes`` gains trailing axes.
    """

    radius: object
    level: int

    @property
    def width(self):
        return self.radius / self.level

    @cached_property
    def nodes(self) -> np.ndarray:
        l = self.level
        r = np.asarray(self.radius, dtype=float)
        i = np.arange(-l, l + 1, dtype=float).reshape((-1,) + (1,) * r.ndim)
        nodes = i * r / l
        nodes[0] = -r
        nodes[-1] = r
        nodes[l] = 0.0
        return nodes


def build_partition(R, l: int) -> FlowPartition:
    r = np.asarray(R, dtype=float)
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise ValueError(f"partition radius must be positive and finite, got {R}")
    if int(l) != l or l < 1:
        raise ValueError(f"level must be a positive integer, got {l}")
    return FlowPartition(float(r) if r.ndim == 0 else r, int(l))


# --- piecewise flows -------------------------------------------------------


def _psi_step(coeffs, p, d):
    s = coeffs.sigma(p)
    return p + d * (s + s * coeffs.dsigma(p) * d * 0.5)


def _phi_step(coeffs, p, d):
    s = coeffs.sigma(p)
    nd = max(np.ndim(p), np.ndim(d))
    x = _GL8_X.reshape((-1,) + (1,) * nd)
    w = _GL8_W.reshape((-1,) + (1,) * nd)
    return p + d * np.sum(w * coeffs.sigma(p + (d * x) * s), axis=0)


_STEPS = {"psi": _psi_step, "phi": _phi_step}


@dataclass(eq=False)
class PiecewiseFlow:
    """Level-``l`` piecewise flows ``psi_l`` and ``phi_l`` on a partition.

    Node values for scalar start points are cached per ``z`` (bounded LRU,
    guarded by a lock); array evaluations walk the recursion directly.
    ``truncation_M`` records the box ``[-M, M]`` the scheme must stay in.
    """

    partition: FlowPartition
    coeffs: CoefficientPair
    truncation_M: float = np.inf
    cache_size: int = DEFAULT_CACHE_SIZE
    node_cache: OrderedDict = field(default_factory=OrderedDict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def radius(self):
        return self.partition.radius

    @property
    def level(self) -> int:
        return self.partition.level

    @property
    def width(self):
        return self.partition.width

    # node bookkeeping

    def cached_nodes(self, z: float, kind: str = "psi") -> tuple[np.ndarray, np.ndarray]:
        """Node values at ``u_0 .. u_l`` and ``u_0 .. u_{-l}`` for one start point."""
        if np.ndim(self.radius):
            raise ValueError("node cache is only defined for a single path radius")
        key = (kind, float(z))
        with self._lock:
            hit = self.node_cache.get(key)
            if hit is not None:
                self.node_cache.move_to_end(key)
                return hit
        w = self.width
        entry = (self.walk(z, w, self.level, kind), self.walk(z, -w, self.level, kind))
        for arr in entry:
            arr.flags.writeable = False
        with self._lock:
            self.node_cache[key] = entry
            while len(self.node_cache) > self.cache_size:
                self.node_cache.popitem(last=False)
        return entry

    def walk(self, z, step, count: int, kind: str = "psi") -> np.ndarray:
        """Stack of ``count + 1`` successive node values with signed cell width ``step``."""
        advance = _STEPS[kind]
        step = np.asarray(step, dtype=float)
        shape = np.broadcast_shapes(np.shape(z), step.shape)
        p = np.array(np.broadcast_to(np.asarray(z, dtype=float), shape))
        out = np.empty((count + 1,) + shape)
        out[0] = p
        for i in range(count):
            p = advance(self.coeffs, p, step)
            out[i + 1] = p
        return out

    def _prepare(self, z, u):
        z, u, r = np.broadcast_arrays(
            np.asarray(z, dtype=float), np.asarray(u, dtype=float), np.asarray(self.radius, dtype=float)
        )
        if np.any(np.abs(u) > r) or not np.all(np.isfinite(u)):
            bad = u[np.abs(u) > r] if np.any(np.abs(u) > r) else u
            raise FlowDomainError(f"u={bad.ravel()[0]!r} outside the flow box [-R, R]")
        return z, u, r / self.level

    def _anchor_index(self, u, w, rule: str):
        au = np.abs(u) / w
        # points within a few ulp of a node count as the node
        k = np.rint(au)
        au = np.where(np.abs(au - k) <= 8 * np.finfo(float).eps * np.maximum(k, 1.0), k, au)
        if rule == "inward":
            m = np.ceil(au) - 1
        else:
            m = np.floor(au)
        return np.clip(m, 0, self.level - 1).astype(np.intp)

    def anchors(self, z, u, rules=("inward",), kind: str = "psi"):
        """Anchor node values and signed offsets ``d = u - anchor`` for each rule.

        ``inward`` picks the cell containing ``u`` as used for evaluation
        (``(u_{k-1}, u_k]`` for ``u > 0``); ``outward`` picks the neighbouring
        cell on the far side of ``u`` from zero.  Also returns the node walk,
        the per-element walk direction and the cell width.
        """
        z, u, w = self._prepare(z, u)
        direction = np.sign(u)
        ms = [self._anchor_index(u, w, r) for r in rules]
        count = int(max((m.max() for m in ms), default=0)) if u.size else 0
        if z.ndim == 0 and np.ndim(self.radius) == 0:
            pos, neg = self.cached_nodes(float(z), kind)
            nodes = (pos if u >= 0 else neg)[: count + 1].reshape((count + 1,))
        else:
            nodes = self.walk(z, direction * w, count, kind)
        out = []
        for m in ms:
            pa = np.take_along_axis(nodes, m[None, ...], axis=0)[0] if nodes.ndim > 1 else nodes[m]
            out.append((pa, u - direction * m * w, m))
        return out, nodes, direction, w

    # evaluators

    def psi(self, z, u):
        """``psi_l(z, u)``; raises ``FlowDomainError`` for ``|u| > R``."""
        ((pa, d, _),), *_ = self.anchors(z, u)
        return _scalar(_psi_step(self.coeffs, pa, d))

    def phi(self, z, u):
        ((pa, d, _),), *_ = self.anchors(z, u, kind="phi")
        return _scalar(_phi_step(self.coeffs, pa, d))

    def psi_du(self, z, u, side: str = "right"):
        """One-sided ``d psi_l / du``; the two sides differ at interior nodes."""
        if side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
        z, u = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(u, dtype=float))
        outward = (u >= 0) if side == "right" else (u <= 0)
        (pin, din, _), (pout, dout, _) = self.anchors(z, u, rules=("inward", "outward"))[0]
        pa = np.where(outward, pout, pin)
        d = np.where(outward, dout, din)
        s = self.coeffs.sigma(pa)
        return _scalar(s + s * self.coeffs.dsigma(pa) * d)

    def psi_d2u(self, z, u):
        """Second u-derivative of ``psi_l`` inside the (inward) cell: ``sigma sigma'`` at the anchor."""
        ((pa, _, _),), *_ = self.anchors(z, u)
        return _scalar(self.coeffs.sigma(pa) * self.coeffs.dsigma(pa))

    def drift_terms(self, z, u, with_h1: bool = True):
        """``g_l(u, z)`` and (optionally) ``h1_l(u, z) = d g_l / d u``.

        ``Q = int_0^u sigma'(psi_l(z, r)) dr`` is a composite 4-point
        Gauss-Legendre rule on panels aligned with the partition cells.
        """
        c = self.coeffs
        rules = ("inward", "outward") if with_h1 else ("inward",)
        anchors, nodes, direction, w = self.anchors(z, u, rules=rules)
        pin, din, m_in = anchors[0]
        if nodes.shape[0] > 1:
            full = nodes[:-1]
            step = direction * w
            x = _GL4_X.reshape((-1,) + (1,) * full.ndim)
            wt = _GL4_W.reshape((-1,) + (1,) * full.ndim)
            s = c.sigma(full)
            ss = s * c.dsigma(full)
            r = step * x
            cells = step * np.sum(wt * c.dsigma(full + r * (s + ss * r * 0.5)), axis=0)
            k = np.arange(full.shape[0]).reshape((-1,) + (1,) * (full.ndim - 1))
            q = np.sum(np.where(k < m_in, cells, 0.0), axis=0)
        else:
            q = np.zeros(np.shape(pin))
        s = c.sigma(pin)
        ss = s * c.dsigma(pin)
        x = _GL4_X.reshape((-1,) + (1,) * np.ndim(pin))
        wt = _GL4_W.reshape((-1,) + (1,) * np.ndim(pin))
        r = din * x
        q = q + din * np.sum(wt * c.dsigma(pin + r * (s + ss * r * 0.5)), axis=0)
        psi = pin + din * (s + ss * din * 0.5)
        e = np.exp(-q)
        g = e * c.b(psi)
        if not with_h1:
            return _scalar(g), None
        outward = direction >= 0
        pout, dout, _ = anchors[1]
        pa = np.where(outward, pout, pin)
        da = np.where(outward, dout, din)
        sa = c.sigma(pa)
        dpsi = sa + sa * c.dsigma(pa) * da
        h1 = -g * c.dsigma(psi) + e * c.db(psi) * dpsi
        return _scalar(g), _scalar(h1)


def _scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def make_flow(coeffs: CoefficientPair, R, l: int, truncation_M: float = np.inf, cache_size: int = DEFAULT_CACHE_SIZE) -> PiecewiseFlow:
    return PiecewiseFlow(build_partition(R, l), coeffs, truncation_M, cache_size)


def psi_l(flow: PiecewiseFlow, z, u):
    return flow.psi(z, u)


def phi_l(flow: PiecewiseFlow, z, u):
    return flow.phi(z, u)


def psi_l_du(flow: PiecewiseFlow, z, u, side: str = "right"):
    return flow.psi_du(z, u, side)
