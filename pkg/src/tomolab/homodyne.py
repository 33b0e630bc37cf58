"""Forward model of balanced homodyne detection.

``density`` is the joint sampling density on ``R x [0, pi]`` of the rescaled
photocurrent difference and the local-oscillator phase; the phase is uniform,
so the joint density equals ``(1/pi)`` times the conditional quadrature
density.  ``sample`` draws seeded i.i.d. records by grid inversion of the
conditional CDF, with optional Gaussian detection noise at efficiency
``eta < 1``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import psi_all
from .states import DensityMatrix, StateParameterError, bernoulli_transform

_BLOCK = 4096
_CDF_POINTS = 4096
_IM_TOL = 1e-10
_NEG_TOL = -1e-9


class UnphysicalStateError(ValueError):
    """The supplied matrix produced a significantly negative density."""


class QuadratureConvergenceError(RuntimeError):
    """Divergence quadrature failed to reach the requested tolerance."""


@dataclass(frozen=True)
class QuadratureSample:
    """One homodyne record: rescaled quadrature value and phase in [0, pi]."""

    x: float
    phi: float


@dataclass
class SampleSet:
    """Seeded i.i.d. homodyne records plus generation provenance."""

    x: np.ndarray
    phi: np.ndarray
    eta: float = 1.0
    seed: int = 0
    state_label: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.x.shape != self.phi.shape or self.x.ndim != 1:
            raise ValueError("x and phi must be 1-d arrays of equal length")
        if not np.isfinite(self.x).all():
            raise ValueError("non-finite quadrature values")
        if ((self.phi < 0) | (self.phi > np.pi)).any():
            raise ValueError("phases must lie in [0, pi]")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")

    @property
    def n(self) -> int:
        return self.x.size

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.x[idx], self.phi[idx], self.eta, self.seed, self.state_label)

    def save_csv(self, path, sidecar: bool = True) -> None:
        path = Path(path)
        lines = ["x,phi"]
        lines += [f"{repr(float(a))},{repr(float(b))}" for a, b in zip(self.x, self.phi)]
        path.write_text("\n".join(lines) + "\n")
        if sidecar:
            meta = {
                "n": int(self.n),
                "eta": float(self.eta),
                "seed": int(self.seed),
                "state_label": self.state_label,
            }
            path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load_csv(cls, path) -> "SampleSet":
        path = Path(path)
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta = {}
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
        return cls(
            raw[:, 0],
            raw[:, 1],
            eta=float(meta.get("eta", 1.0)),
            seed=int(meta.get("seed", 0)),
            state_label=str(meta.get("state_label", "")),
        )


def _diagonal_components(rho: DensityMatrix, xs: np.ndarray) -> np.ndarray:
    """Stack of functions g_d(x) such that p(x|phi) = Re sum_d w_d e^{-i d phi} g_d.

    ``w_0 = 1`` and ``w_d = 2`` for ``d >= 1`` (Hermiticity folds negative d).
    """
    n = rho.dim
    psi = psi_all(n, xs)
    out = np.empty((n, xs.size), dtype=complex)
    r = rho.entries
    for d in range(n):
        # sum over j - k = d of rho[j, k] psi_k psi_j
        coef = np.diagonal(r, offset=-d)  # rho[k + d, k]
        out[d] = np.einsum("k,kx,kx->x", coef, psi[: n - d], psi[d:])
    return out


def conditional_density(rho: DensityMatrix, x, phi) -> np.ndarray:
    """Quadrature density ``p(x | phi)`` (normalized in x for each phase)."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    ps = np.broadcast_to(np.asarray(phi, dtype=float), xs.shape)
    n = rho.dim
    psi = psi_all(n, xs)
    phases = np.exp(1j * np.outer(np.arange(n), ps))
    v = psi * phases
    vals = np.einsum("jx,jk,kx->x", v.conj(), rho.entries, v)
    resid = np.abs(vals.imag).max(initial=0.0)
    if resid > _IM_TOL:
        raise UnphysicalStateError(f"imaginary density residue {resid:.3e}")
    out = vals.real
    if out.min(initial=0.0) < _NEG_TOL:
        raise UnphysicalStateError(f"unphysical state: density reaches {out.min():.3e}")
    out = np.clip(out, 0.0, None)
    if np.isscalar(x) or np.asarray(x).shape == ():
        return float(out[0])
    return out


def density(rho: DensityMatrix, x, phi):
    """Joint sampling density on ``R x [0, pi]``: ``(1/pi) p(x | phi)``."""
    return conditional_density(rho, x, phi) / np.pi


def noisy_density(rho: DensityMatrix, y, phi, eta: float):
    """Sampling density under detector efficiency ``eta``.

    Computed by thinning the state with the binomial-loss map and evaluating
    the ideal density on the result; the direct Gaussian-convolution route is
    kept in the test suite as an independent check.
    """
    if not 0.0 < eta <= 1.0:
        raise StateParameterError(f"efficiency must be in (0, 1], got {eta}")
    if eta == 1.0:
        return density(rho, y, phi)
    return density(bernoulli_transform(rho, eta), y, phi)


def _sample_grid(rho: DensityMatrix) -> np.ndarray:
    half = 6.0 + 2.0 * np.sqrt(2.0 * rho.mean_photons() + 1.0)
    return np.linspace(-half, half, _CDF_POINTS)


def sample(
    rho: DensityMatrix,
    n: int,
    eta: float = 1.0,
    seed: int = 0,
    state_label: str | None = None,
) -> SampleSet:
    """Draw ``n`` seeded homodyne records from a state.

    Phases are uniform on ``[0, pi]``; quadrature values are drawn from the
    conditional density by inverse-CDF on a dense grid.  For ``eta < 1`` each
    ideal draw ``X`` is degraded to ``sqrt(eta) X + sqrt((1-eta)/2) xi`` with
    standard Gaussian ``xi``.  Generation is blocked with per-block
    substreams, so results are independent of how blocks are dispatched.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    if not 0.0 < eta <= 1.0:
        raise StateParameterError(f"efficiency must be in (0, 1], got {eta}")
    xs = _sample_grid(rho)
    comps = _diagonal_components(rho, xs)
    weights = np.full(rho.dim, 2.0)
    weights[0] = 1.0

    all_x = np.empty(n)
    all_phi = np.empty(n)
    d = np.arange(rho.dim)
    for block, start in enumerate(range(0, n, _BLOCK)):
        nb = min(_BLOCK, n - start)
        rng = np.random.default_rng(np.random.SeedSequence((seed, block)))
        phis = rng.uniform(0.0, np.pi, nb)
        u = rng.random(nb)
        phases = weights * np.exp(-1j * np.outer(phis, d))
        rows = (phases @ comps).real
        rows = np.clip(rows, 0.0, None)
        cdf = np.cumsum((rows[:, 1:] + rows[:, :-1]) * 0.5 * np.diff(xs), axis=1)
        cdf /= cdf[:, -1:]
        # index of first grid cell whose cumulative mass exceeds u
        idx = np.sum(cdf < u[:, None], axis=1)
        idx = np.minimum(idx, cdf.shape[1] - 1)
        lo = np.where(idx > 0, cdf[np.arange(nb), idx - 1], 0.0)
        hi = cdf[np.arange(nb), idx]
        frac = np.where(hi > lo, (u - lo) / np.maximum(hi - lo, 1e-300), 0.5)
        draws = xs[idx] + frac * np.diff(xs)[0]
        if eta < 1.0:
            draws = np.sqrt(eta) * draws + np.sqrt((1.0 - eta) / 2.0) * rng.standard_normal(nb)
        all_x[start : start + nb] = draws
        all_phi[start : start + nb] = phis
    return SampleSet(
        all_x,
        all_phi,
        eta=eta,
        seed=seed,
        state_label=state_label if state_label is not None else getattr(rho, "label", ""),
    )


def _joint_evaluator(obj):
    if isinstance(obj, DensityMatrix):
        half = 6.0 + 2.0 * np.sqrt(2.0 * obj.mean_photons() + 1.0)

        def f(x, phi):
            return density(obj, x, phi)

        return f, half
    if callable(obj):
        return obj, None
    raise TypeError("expected a DensityMatrix or a callable joint density")


def divergences(p, q, x_max: float | None = None, tol: float = 1e-6) -> dict:
    """Hellinger, total-variation and chi-squared divergences of two models.

    Both arguments may be states or callables ``f(x, phi)`` returning the
    joint density.  Quadrature on a tensor grid is refined by doubling until
    the relative change of every finite statistic drops below ``tol``.
    """
    fp, hp = _joint_evaluator(p)
    fq, hq = _joint_evaluator(q)
    halves = [h for h in (hp, hq, x_max) if h is not None]
    half = max(halves) if halves else 12.0

    def compute(nx: int, nphi: int) -> dict:
        xs = np.linspace(-half, half, nx)
        phis = np.linspace(0.0, np.pi, nphi)
        X = np.repeat(xs, nphi)
        PH = np.tile(phis, nx)
        pv = np.asarray(fp(X, PH)).reshape(nx, nphi)
        qv = np.asarray(fq(X, PH)).reshape(nx, nphi)

        def integ(values):
            return np.trapezoid(np.trapezoid(values, phis, axis=1), xs)

        hell2 = integ((np.sqrt(pv) - np.sqrt(qv)) ** 2)
        tv = 0.5 * integ(np.abs(pv - qv))
        bad = qv < 1e-300
        stray = integ(np.where(bad, pv, 0.0))
        if stray > 1e-12:
            chi2 = np.inf
        else:
            chi2 = integ(np.where(bad, 0.0, (pv - qv) ** 2 / np.where(bad, 1.0, qv)))
        return {
            "hellinger": float(np.sqrt(max(hell2, 0.0))),
            "total_variation": float(tv),
            "chi_squared": float(chi2),
        }

    nx, nphi = 4097, 513
    prev = compute(nx, nphi)
    for _ in range(3):
        cur = compute(2 * nx - 1, nphi)
        drift = max(
            abs(cur[k] - prev[k]) / max(abs(cur[k]), 1e-12)
            for k in ("hellinger", "total_variation")
            if np.isfinite(cur[k])
        )
        if drift < tol:
            return cur
        nx = 2 * nx - 1
        prev = cur
    raise QuadratureConvergenceError(
        f"divergence quadrature did not converge; last relative change {drift:.3e}"
    )
