"""Truncation constant ``M`` and the error constants ``C1 .. C8``.

Every constant is a closed-form expression in the coefficient bounds
``M1 .. M6``, the horizon ``T``, and the path statistics ``R = ||B||_inf``
and ``K = ||B||_{H - rho}``.  The aggregate constant and the Gronwall-type
bounds contain ``exp(C1 T)`` and ``exp(C7 T)``, which overflow a double for
moderately large ``R``; those are therefore also carried as logarithms.

Two forms of ``C1`` are in circulation::

    "remark": (M4 + M1 M3 R) exp(M2 (R + T))
    "proof":  (M4 + M1 M3 R) exp(2 M2 R)

Both are kept; bound checks use the larger one.  ``C2`` likewise exists with
and without a factor ``T`` inside the bracket (``C2_lemma`` and ``C2``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .coeffs import Bounds
from .fbm import PathStats

_MAX_EXP = math.log(1.7976931348623157e308)


class ConstantOverflowError(OverflowError):
    def __init__(self, name: str, exponent: float):
        self.name = name
        self.exponent = exponent
        super().__init__(f"{name} overflows: exponent argument {exponent:.6g}")


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _logsumexp(*terms: float) -> float:
    top = max(terms)
    if top == -math.inf:
        return -math.inf
    return top + math.log(sum(math.exp(t - top) for t in terms))


def _exp(logx: float) -> float:
    return math.exp(logx) if logx < _MAX_EXP else math.inf


@dataclass(frozen=True)
class ConstantInputs:
    M1: float
    M2: float
    M3: float
    M4: float
    M5: float
    M6: float
    T: float
    x0: float
    sup_norm: float
    holder_norm: float
    rho: float
    hurst: float


@dataclass(frozen=True)
class ConstantSet:
    M: float
    C1: float
    C2: float
    C3: float
    C4: float
    C5: float
    C6: float
    C7: float
    C8: float
    C_total: float
    log_C_total: float
    C1_remark: float
    C1_proof: float
    C1_variant: str
    C2_lemma: float
    inputs: ConstantInputs

    @property
    def exponent(self) -> float:
        """Pathwise convergence rate ``2 (H - rho)``."""
        return 2.0 * (self.inputs.hurst - self.inputs.rho)

    def log_theorem_bound(self, n: int) -> float:
        return self.log_C_total - self.exponent * math.log(n)

    def theorem_bound(self, n: int) -> float:
        return _exp(self.log_theorem_bound(n))

    # individual lemma bounds, all as functions of the level / resolution

    def lemma1_bound(self, l: int) -> float:
        p, R = self.inputs, self.inputs.sup_norm
        return p.M2**2 * p.M5 * R**3 / (6 * l**2) * math.exp(p.M2 * R)

    def lemma2_bound(self, l: int) -> float:
        p, R = self.inputs, self.inputs.sup_norm
        return p.M3 * p.M5**2 * R**3 / (6 * l**2) * math.exp(2 * p.M2 * R)

    def lipschitz_factor(self) -> float:
        """Lipschitz constant in ``z`` of ``psi_l`` and ``phi_l``."""
        return math.exp(2 * self.inputs.M2 * self.inputs.sup_norm)

    def log_lemma5_bound(self, n: int) -> float:
        return self.C1 * self.inputs.T + _log(self.C2_lemma) - 2 * math.log(n)

    def lemma6_slope(self) -> float:
        return self.C4

    def log_lemma7_bound(self, n: int) -> float:
        T = self.inputs.T
        return _log(self.C6) + math.log(T) + self.exponent * math.log(T / n) + self.C7 * T

    def as_dict(self) -> dict:
        out = asdict(self)
        out["inputs"] = asdict(self.inputs)
        return out


def compute_constants(bounds: Bounds, T: float, x0: float, stats: PathStats, hurst: float, strict: bool = False) -> ConstantSet:
    """Evaluate ``M``, ``C1 .. C8`` and the aggregate ``C``.

    With ``strict=True`` an aggregate that does not fit in a double raises
    ``ConstantOverflowError`` naming the exponent; otherwise it is reported
    as ``inf`` while ``log_C_total`` stays exact.
    """
    M1, M2, M3, M4, M5, M6 = (bounds.M1, bounds.M2, bounds.M3, bounds.M4, bounds.M5, bounds.M6)
    R, K, rho = stats.sup_norm, stats.holder_norm, stats.rho
    if not (T > 0 and math.isfinite(T)):
        raise ValueError(f"T must be positive and finite, got {T}")
    if not 0 < rho < hurst:
        raise ValueError(f"rho must lie in (0, hurst), got rho={rho}, hurst={hurst}")
    if R < 0 or K < 0 or not (math.isfinite(R) and math.isfinite(K)):
        raise ValueError("path statistics must be finite and nonnegative")
    a = hurst - rho
    e1 = math.exp(M2 * R)
    e2 = math.exp(2 * M2 * R)
    e3 = math.exp(3 * M2 * R)
    lin = M4 + M1 * M3 * R
    flow1 = M2**2 * M5 * R**3 / 6
    flow2 = M3 * M5**2 * R**3 / 6

    C1_remark = lin * math.exp(M2 * (R + T))
    C1_proof = lin * e2
    if C1_remark >= C1_proof:
        C1, variant = C1_remark, "remark"
    else:
        C1, variant = C1_proof, "proof"
    C2 = e1 * lin * (flow1 * e1 + flow2 * e2)
    C2_lemma = T * C2
    C3 = M1 * M2 * e1 + M4 * e1 * M5 * R * (1 + M2)
    C4 = M1 * e1 + C3 * T**a * K
    C5 = e1 * (
        R * (1 + M2) * (M3 * M1 * M5 + M2 * M4 * M5 + M6 * M5 * R * (1 + M2))
        + M1 * M2
        + M4 * M5 * (1 + M2)
    )
    C8 = M4 * M2 * e1 * ((M5 + M5 * M2) * R + M5 * M2)
    C6 = C4 * e3 * lin * T ** (1 - 2 * a) + (C5 + C8) * K
    C7 = e3 * lin
    M = abs(x0) + T * (M1 * e1 + K * C3 * T**a)

    log_C = 2 * M2 * R + _logsumexp(
        _log(C2) + C1 * T,
        _log(flow1),
        _log(flow2),
        _log(C6 * T) + C7 * T,
    )
    C_total = _exp(log_C)
    if strict and not math.isfinite(C_total):
        worst = max(("exp(C1 T)", C1 * T), ("exp(C7 T)", C7 * T), key=lambda p: p[1])
        raise ConstantOverflowError(worst[0], worst[1])
    inputs = ConstantInputs(M1, M2, M3, M4, M5, M6, float(T), float(x0), R, K, rho, float(hurst))
    return ConstantSet(
        M=M, C1=C1, C2=C2, C3=C3, C4=C4, C5=C5, C6=C6, C7=C7, C8=C8,
        C_total=C_total, log_C_total=log_C,
        C1_remark=C1_remark, C1_proof=C1_proof, C1_variant=variant, C2_lemma=C2_lemma,
        inputs=inputs,
    )
