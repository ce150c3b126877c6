"""Closed-form complexity analytics for focal-point control.

Controlling every tile directly needs ``2 N**2`` continuous angles plus the
``K**L`` discrete assignment, while focal-point control needs ``3 L``
coordinates plus the same assignment. The ratio

    eta(K, L, N) = (K**L + 2 N**2) / (K**L + 3 L)

measures the reduction. ``K`` and ``L`` may be real-valued so that the
partial derivatives can be checked by finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .errors import InvalidArgument

# float(K**L) beyond this is treated as the saturated limit eta == 1
MAX_ASSIGNMENTS = 1e300


@dataclass(frozen=True)
class ComplexityPoint:
    K: float
    L: float
    N: float
    eta: float
    d_eta_dN: float
    d_eta_dL: float
    d_eta_dK: float
    regime: str
    saturated: bool = False

    def as_dict(self) -> dict:
        return {
            "K": self.K, "L": self.L, "N": self.N, "eta": self.eta, "d_eta_dN": self.d_eta_dN,
            "d_eta_dL": self.d_eta_dL, "d_eta_dK": self.d_eta_dK, "regime": self.regime, "saturated": self.saturated,
        }


def _check(K, L, N) -> None:
    for name, v in (("K", K), ("L", L), ("N", N)):
        if isinstance(v, bool) or not isinstance(v, (int, float, Fraction)):
            raise InvalidArgument(f"{name} must be a number, got {v!r}")
        if not math.isfinite(v) or v < 1:
            raise InvalidArgument(f"{name} must be >= 1, got {v!r}")


def _is_int(*vals) -> bool:
    return all(isinstance(v, int) for v in vals)


def assignments(K, L) -> float:
    """``K**L`` as a float, or ``inf`` when it is not representable."""
    try:
        a = float(K) ** float(L)
    except OverflowError:
        return math.inf
    return a if a <= MAX_ASSIGNMENTS else math.inf


def eta_exact(K: int, L: int, N: int) -> Fraction:
    """Exact rational value for integer arguments."""
    _check(K, L, N)
    if not _is_int(K, L, N):
        raise InvalidArgument("eta_exact needs integer K, L, N")
    a = K ** L
    return Fraction(a + 2 * N * N, a + 3 * L)


def eta(K, L, N) -> float:
    """Dimensionality reduction factor.

    Integer arguments are evaluated exactly before rounding once to float.
    When ``K**L`` is not representable the saturated limit ``1.0`` is
    returned; :func:`complexity_point` reports this through its flag.
    """
    _check(K, L, N)
    a = assignments(K, L)
    if math.isinf(a):
        return 1.0
    if _is_int(K, L, N):
        return float(eta_exact(K, L, N))
    return (a + 2.0 * N * N) / (a + 3.0 * L)


def eta_gradients(K, L, N) -> tuple[float, float, float]:
    """Partial derivatives ``(d/dN, d/dL, d/dK)`` of :func:`eta`.

    With ``A = K**L`` and ``D = A + 3L``:

    * ``d/dN = 4N / D``
    * ``d/dL = (A ln K (3L - 2N**2) - 3 (A + 2N**2)) / D**2``
    * ``d/dK = L K**(L-1) (3L - 2N**2) / D**2``

    All three vanish in the saturated limit.
    """
    _check(K, L, N)
    K, L, N = float(K), float(L), float(N)
    a = assignments(K, L)
    if math.isinf(a):
        return 0.0, 0.0, 0.0
    d = a + 3.0 * L
    n2 = 2.0 * N * N
    dN = 4.0 * N / d
    dL = (a * math.log(K) * (3.0 * L - n2) - 3.0 * (a + n2)) / (d * d)
    dK = L * K ** (L - 1.0) * (3.0 * L - n2) / (d * d)
    return dN, dL, dK


def regime(K, L, N) -> str:
    """``efficient`` when the tile term ``2N**2`` strictly exceeds ``K**L``."""
    _check(K, L, N)
    if _is_int(K, L, N) and not math.isinf(assignments(K, L)):
        return "efficient" if 2 * N * N > K ** L else "saturated"
    return "efficient" if 2.0 * N * N > assignments(K, L) else "saturated"


def complexity_point(K, L, N) -> ComplexityPoint:
    dN, dL, dK = eta_gradients(K, L, N)
    saturated = math.isinf(assignments(K, L))
    return ComplexityPoint(K, L, N, eta(K, L, N), dN, dL, dK, regime(K, L, N), saturated)


def complexity_table(Ks, Ls, Ns) -> list[ComplexityPoint]:
    """Evaluate every ``(K, L, N)`` combination, K slowest."""
    return [complexity_point(K, L, N) for K in Ks for L in Ls for N in Ns]


def finite_difference_gradients(K, L, N, h: float = 1e-3) -> tuple[float, float, float]:
    """Five-point central differences of :func:`eta` with relative step ``h``."""
    x = [float(K), float(L), float(N)]

    def f(v):
        a = assignments(v[0], v[1])
        return (a + 2.0 * v[2] * v[2]) / (a + 3.0 * v[1])

    def partial(i):
        s = h * x[i]

        def at(dx):
            v = list(x)
            v[i] += dx
            return f(v)

        return (-at(2 * s) + 8 * at(s) - 8 * at(-s) + at(-2 * s)) / (12 * s)

    return partial(2), partial(1), partial(0)
