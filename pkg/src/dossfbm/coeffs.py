"""SDE coefficients ``b`` and ``sigma`` with derivatives and declared bounds.

Bound names follow the usual convention for this scheme::

    |b| <= M1    |b'| <= M4    |b''| <= M6
    |s| <= M5    |s'| <= M2    |s''| <= M3

Bounds are declared by the caller and checked by dense sampling; nothing is
inferred.  Evaluators are numpy-vectorised and must be pure.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Callable

import numpy as np

Evaluator = Callable[[np.ndarray], np.ndarray]

BOUND_NAMES = ("M1", "M2", "M3", "M4", "M5", "M6")
FD_STEP = 1e-5
FD_TOL = 1e-6


class BoundViolation(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    M1: float = 0.0
    M2: float = 0.0
    M3: float = 0.0
    M4: float = 0.0
    M5: float = 0.0
    M6: float = 0.0

    def __post_init__(self):
        for name in BOUND_NAMES:
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"bound {name} must be finite and nonnegative, got {v}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ValidationReport:
    radius: float
    samples: int
    violation_margin: float
    worst_bound: str
    fd_mismatch: float
    worst_derivative: str

    @property
    def passed(self) -> bool:
        return self.violation_margin <= 0.0 and self.fd_mismatch <= FD_TOL


@dataclass(frozen=True, eq=False)
class CoefficientPair:
    b: Evaluator
    db: Evaluator
    d2b: Evaluator
    sigma: Evaluator
    dsigma: Evaluator
    d2sigma: Evaluator
    bounds: Bounds
    family_tag: str = "custom"
    params: tuple = field(default=())

    def with_bounds(self, check: bool = True, **overrides) -> "CoefficientPair":
        """Copy with some declared bounds replaced.

        ``check=False`` skips validation, which is how deliberately wrong
        bounds reach the verification harness.
        """
        pair = replace(self, bounds=replace(self.bounds, **overrides))
        if check:
            require_valid(pair)
        return pair

    @property
    def sigma_is_constant(self) -> bool:
        return self.bounds.M2 == 0.0 and self.bounds.M3 == 0.0

    @property
    def drift_is_zero(self) -> bool:
        return self.bounds.M1 == 0.0


# module-level callables keep built-in pairs picklable for worker processes
def _const_value(c, z):
    return np.zeros_like(np.asarray(z, dtype=float)) + c


def _times(fn, a, z):
    return a * fn(z)


def _constant(c: float) -> Evaluator:
    return partial(_const_value, c)


def _scaled(fn, a: float) -> Evaluator:
    return partial(_times, fn, a)


_zero = _constant(0.0)


def _neg_sin(z):
    return -np.sin(z)


def _neg_cos(z):
    return -np.cos(z)


def additive(c: float) -> CoefficientPair:
    """``b = 0``, ``sigma = c``: the noise enters additively and the scheme is exact."""
    c = float(c)
    return CoefficientPair(
        _zero, _zero, _zero, _constant(c), _zero, _zero,
        Bounds(M5=abs(c)), "additive", (c,),
    )


def trig(a_b: float, a_s: float) -> CoefficientPair:
    """``b = a_b sin``, ``sigma = a_s cos``."""
    a_b, a_s = float(a_b), float(a_s)
    A, S = abs(a_b), abs(a_s)
    return CoefficientPair(
        _scaled(np.sin, a_b), _scaled(np.cos, a_b), _scaled(_neg_sin, a_b),
        _scaled(np.cos, a_s), _scaled(_neg_sin, a_s), _scaled(_neg_cos, a_s),
        Bounds(M1=A, M2=S, M3=S, M4=A, M5=S, M6=A), "trig", (a_b, a_s),
    )


def gudermann(a: float) -> CoefficientPair:
    """``b = 0``, ``sigma = a cos``; the flow from 0 is ``gd(a u)``."""
    a = float(a)
    S = abs(a)
    return CoefficientPair(
        _zero, _zero, _zero,
        _scaled(np.cos, a), _scaled(_neg_sin, a), _scaled(_neg_cos, a),
        Bounds(M2=S, M3=S, M5=S), "gudermann", (a,),
    )


def zero_drift_trig(a_s: float) -> CoefficientPair:
    return replace(gudermann(a_s), family_tag="zero_drift_trig")


FAMILIES: dict[str, Callable[..., CoefficientPair]] = {
    "additive": additive,
    "trig": trig,
    "gudermann": gudermann,
    "zero_drift_trig": zero_drift_trig,
}


def builtin_family(name: str, *params: float) -> CoefficientPair:
    """Look up a built-in family by name and instantiate it with ``params``.

    Raises ``KeyError`` for an unknown name and ``TypeError`` for a wrong
    parameter count.
    """
    try:
        factory = FAMILIES[name]
    except KeyError:
        raise KeyError(f"unknown coefficient family {name!r}; known: {sorted(FAMILIES)}") from None
    if not all(np.isfinite(p) for p in params):
        raise ValueError(f"family parameters must be finite, got {params}")
    return factory(*params)


def validate_bounds(pair: CoefficientPair, interval_radius: float = 10.0, samples: int = 10_001) -> ValidationReport:
    """Sample all six evaluators on a uniform grid over ``[-r, r]``.

    The violation margin is ``max(sup|f| - bound)`` over the six functions
    (<= 0 passes).  The derivative mismatch is the worst
    ``|f' - central_difference(f)| / (1 + |f'|)`` at step ``1e-5``.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    z = np.linspace(-interval_radius, interval_radius, int(samples))
    checks = {
        "M1": pair.b, "M4": pair.db, "M6": pair.d2b,
        "M5": pair.sigma, "M2": pair.dsigma, "M3": pair.d2sigma,
    }
    margin, worst_bound = -np.inf, ""
    for name, fn in checks.items():
        m = float(np.max(np.abs(fn(z)))) - getattr(pair.bounds, name)
        if m > margin:
            margin, worst_bound = m, name
    h = FD_STEP
    pairs = {
        "b'": (pair.b, pair.db), "b''": (pair.db, pair.d2b),
        "sigma'": (pair.sigma, pair.dsigma), "sigma''": (pair.dsigma, pair.d2sigma),
    }
    mismatch, worst_deriv = 0.0, ""
    for name, (f, df) in pairs.items():
        exact = df(z)
        fd = (f(z + h) - f(z - h)) / (2 * h)
        err = float(np.max(np.abs(exact - fd) / (1.0 + np.abs(exact))))
        if err > mismatch:
            mismatch, worst_deriv = err, name
    return ValidationReport(float(interval_radius), int(samples), margin, worst_bound, mismatch, worst_deriv)


def require_valid(pair: CoefficientPair, interval_radius: float = 10.0, samples: int = 2001) -> None:
    report = validate_bounds(pair, interval_radius, samples)
    if not report.passed:
        raise BoundViolation(
            f"{pair.family_tag}: bound {report.worst_bound} exceeded by {report.violation_margin:.3e}, "
            f"derivative {report.worst_derivative or '-'} mismatch {report.fd_mismatch:.3e}"
        )


def custom(b, db, d2b, sigma, dsigma, d2sigma, bounds: Bounds, tag: str = "custom", check: bool = True) -> CoefficientPair:
    """Build a user-supplied pair; its declared bounds are verified unless ``check=False``."""
    pair = CoefficientPair(b, db, d2b, sigma, dsigma, d2sigma, bounds, tag)
    if check:
        require_valid(pair)
    return pair
