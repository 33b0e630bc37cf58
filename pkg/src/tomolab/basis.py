"""Harmonic-oscillator wavefunctions: regular and irregular solutions.

The regular solutions ``psi_k`` are the usual normalized Hermite functions.
The irregular solutions ``phi_k`` solve the same stationary Schroedinger
equation at energy ``k + 1/2`` but are not square integrable; they grow like
``exp(x**2 / 2)``.  Their normalization is fixed by the Wronskian condition

    psi_k(x) * phi_k'(x) - psi_k'(x) * phi_k(x) = 2

together with parity opposite to ``psi_k``.  This is exactly the scaling that
makes the quadrature-data reconstruction identity of :mod:`tomolab.patterns`
hold with unit coefficient; the reconstruction tests are the authority for it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import solve_ivp

HARD_CAP = 512

# Absolute window cap: the irregular solutions reach the float64 overflow
# threshold exp(709) slightly above |x| = 37.
_WINDOW_CAP = 36.0

_ODE_RTOL = 1e-12
_ODE_ATOL = 1e-13


class BasisIndexError(ValueError):
    """Basis index above the configured hard cap."""


class EvaluationWindowError(ValueError):
    """Irregular solution requested outside its stable evaluation window."""


@lru_cache(maxsize=1)
def psi0_norm() -> float:
    """Normalization of the ground state, computed by quadrature.

    Equals ``pi**(-1/4)`` but is derived from the defining integral
    ``int psi_0(x)**2 dx = 1`` rather than hard-coded.
    """
    x = np.linspace(-40.0, 40.0, 80001)
    h0 = np.exp(-x * x)  # |H_0(x) exp(-x^2/2)|^2
    return 1.0 / np.sqrt(np.trapezoid(h0, x))


def stable_window(k: int) -> float:
    """Half-width of the reliable evaluation window for ``phi_k``."""
    return min(12.0 + np.sqrt(2.0 * k), _WINDOW_CAP)


def _check_index(k: int) -> None:
    if k < 0:
        raise BasisIndexError(f"basis index must be nonnegative, got {k}")
    if k > HARD_CAP:
        raise BasisIndexError(f"basis index overflow: {k} > hard cap {HARD_CAP}")


def psi_all(k_max: int, x) -> np.ndarray:
    """All regular solutions ``psi_0 .. psi_{k_max-1}`` at ``x``.

    Uses the stable upward three-term recurrence
    ``u_{k+1} = sqrt(2/(k+1)) x u_k - sqrt(k/(k+1)) u_{k-1}``.
    Returns an array of shape ``(k_max,) + shape(x)``.
    """
    _check_index(max(k_max - 1, 0))
    xs = np.asarray(x, dtype=float)
    out = np.empty((k_max,) + xs.shape, dtype=float)
    if k_max == 0:
        return out
    p_prev = psi0_norm() * np.exp(-0.5 * xs * xs)
    out[0] = p_prev
    if k_max == 1:
        return out
    p_cur = np.sqrt(2.0) * xs * p_prev
    out[1] = p_cur
    for k in range(1, k_max - 1):
        p_next = np.sqrt(2.0 / (k + 1)) * xs * p_cur - np.sqrt(k / (k + 1.0)) * p_prev
        out[k + 1] = p_next
        p_prev, p_cur = p_cur, p_next
    return out


def psi(k: int, x):
    """Regular (normalized Hermite-function) solution ``psi_k(x)``."""
    _check_index(k)
    return psi_all(k + 1, x)[k]


def _phi_seeds(k: int) -> tuple[float, float]:
    """Initial values ``(phi_k(0), phi_k'(0))`` from parity and the Wronskian."""
    at0 = psi_all(k + 1, 0.0)
    if k % 2 == 0:
        return 0.0, 2.0 / at0[k]
    # psi_k'(0) = sqrt(2k) psi_{k-1}(0) for odd k
    dpsi0 = np.sqrt(2.0 * k) * at0[k - 1]
    return -2.0 / dpsi0, 0.0


def _phi_on_axis(k: int, xs: np.ndarray) -> np.ndarray:
    """Integrate the oscillator equation outward for nonnegative ``xs``.

    Outward integration tracks the dominant (growing) solution in the
    classically forbidden region, so it is well conditioned precisely where
    the three-term recurrence in ``k`` is not.
    """
    xs = np.asarray(xs, dtype=float)
    ts, inverse = np.unique(xs, return_inverse=True)
    vals = np.empty_like(ts)
    u0, du0 = _phi_seeds(k)

    def rhs(t, y):
        return (y[1], (t * t - 2.0 * k - 1.0) * y[0])

    start = 0
    if ts.size and ts[0] == 0.0:
        vals[0] = u0
        start = 1
    if start < ts.size:
        sol = solve_ivp(
            rhs,
            (0.0, float(ts[-1])),
            (u0, du0),
            t_eval=ts[start:],
            method="DOP853",
            rtol=_ODE_RTOL,
            atol=_ODE_ATOL,
        )
        if not sol.success:  # pragma: no cover - integrator failure is fatal
            raise RuntimeError(f"irregular-solution integration failed at k={k}: {sol.message}")
        vals[start:] = sol.y[0]
    return vals[inverse]


def phi_all(k_max: int, x, *, check_window: bool = True) -> np.ndarray:
    """All irregular solutions ``phi_0 .. phi_{k_max-1}`` at ``x``.

    Points outside a given index's stable window are returned as ``nan``
    when ``check_window`` is false, and raise otherwise.
    """
    _check_index(max(k_max - 1, 0))
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.full((k_max,) + xs.shape, np.nan)
    for k in range(k_max):
        w = stable_window(k)
        inside = np.abs(xs) <= w
        if check_window and not inside.all():
            raise EvaluationWindowError(
                f"evaluation outside stable window |x| <= {w:.2f} for phi_{k}"
            )
        ax = np.abs(xs[inside])
        sign = np.where(xs[inside] < 0, (-1.0) ** (k + 1), 1.0)
        out[k, inside] = sign * _phi_on_axis(k, ax)
    if np.isscalar(x) or np.asarray(x).shape == ():
        return out[:, 0]
    return out


def phi(k: int, x: float) -> float:
    """Irregular solution ``phi_k(x)`` (Wronskian-normalized, see module doc)."""
    _check_index(k)
    w = stable_window(k)
    if abs(x) > w:
        raise EvaluationWindowError(
            f"evaluation outside stable window |x| <= {w:.2f} for phi_{k}"
        )
    val = _phi_on_axis(k, np.array([abs(x)]))[0]
    if x < 0:
        val *= (-1.0) ** (k + 1)
    return float(val)


@dataclass(frozen=True)
class BasisEvaluation:
    """Both solution families evaluated at one quadrature point."""

    k_max: int
    x: float
    psi: np.ndarray
    phi: np.ndarray


def basis_eval(k_max: int, x: float) -> BasisEvaluation:
    """Evaluate ``psi_0..psi_{k_max-1}`` and ``phi_0..phi_{k_max-1}`` at ``x``."""
    return BasisEvaluation(
        k_max=k_max,
        x=float(x),
        psi=psi_all(k_max, float(x)),
        phi=phi_all(k_max, float(x)),
    )
