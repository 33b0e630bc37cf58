"""Pattern kernels and the projection estimator built from them.

The kernel ``f_{k,j}`` is the bounded, real, symmetric function whose average
against quadrature data returns the matrix entry ``rho_{k,j}``.  For
``j >= k`` it equals the derivative of ``psi_k * phi_j`` (regular solution of
the lower index times irregular solution of the higher index), evaluated via
the ladder identity

    f_{k,j}(x) = 2 x psi_k phi_j - sqrt(2(k+1)) psi_{k+1} phi_j
                 - sqrt(2(j+1)) psi_k phi_{j+1}.

With the index roles swapped the same three-term expression still satisfies
the reconstruction identity but grows polynomially for ``|k - j| >= 2``; the
ordering above is the one with finite sup norm and ``x**(-2-|k-j|)`` tails.

Beyond the stable evaluation window of the irregular solutions the kernel is
replaced by its fitted power-law tail.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline

from .basis import phi_all, psi_all, stable_window
from .homodyne import SampleSet
from .states import DensityMatrix, RawMatrix

_REDUCE_BLOCK = 4096
_SPLINE_CHUNK = 64


class EfficiencyError(ValueError):
    """Projection estimation requested on noise-degraded data."""


def worker_count(explicit: int | None = None) -> int:
    """Worker cap: explicit argument, else TOMOLAB_THREADS, else 1."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("TOMOLAB_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def pattern_window(k: int, j: int) -> float:
    """Half-width of the direct-evaluation window for the kernel ``f_{k,j}``."""
    return stable_window(max(k, j))


def _raw_rows(psi: np.ndarray, phi: np.ndarray, k: int, j: int, xs: np.ndarray) -> np.ndarray:
    """Three-term kernel formula for ``j >= k`` from precomputed basis rows."""
    return (
        2.0 * xs * psi[k] * phi[j]
        - np.sqrt(2.0 * (k + 1)) * psi[k + 1] * phi[j]
        - np.sqrt(2.0 * (j + 1)) * psi[k] * phi[j + 1]
    )


def _tail_amplitude(k: int, j: int, psi: np.ndarray, phi: np.ndarray, xs: np.ndarray) -> float:
    """Fit ``a`` in ``f ~ a x**-(2+|k-j|)`` on the outer decade of the window."""
    d = j - k
    w = pattern_window(k, j)
    onset = max(1.25 * np.sqrt(2.0 * j + 1.0) + 1.0, 0.6 * w)
    sel = (xs >= onset) & (xs <= 0.97 * w)
    if not sel.any():
        return 0.0
    vals = _raw_rows(psi, phi, k, j, xs[sel])
    return float(np.median(vals * xs[sel] ** (2 + d)))


@dataclass
class PatternTable:
    """Kernels precomputed on a symmetric grid, plus fitted tail models.

    ``values[k, j]`` holds ``f_{k,j}`` at the grid nodes (direct evaluation
    inside the pair's window, the fitted tail beyond), ``tail_amplitudes``
    the fitted coefficient of ``x**-(2+|k-j|)`` and ``tail_exponents`` the
    free log-log slope fitted to the outer window as a diagnostic.
    """

    dim: int
    grid: np.ndarray
    values: np.ndarray
    tail_amplitudes: np.ndarray
    tail_exponents: np.ndarray

    @classmethod
    def build(cls, dim: int, grid: np.ndarray | None = None) -> "PatternTable":
        if grid is None:
            half = stable_window(dim)
            npts = int(round(2 * half / 0.005)) | 1
            grid = np.linspace(-half, half, npts)
        grid = np.asarray(grid, dtype=float)
        pos = np.abs(grid)
        psi = psi_all(dim + 1, pos)
        phi = phi_all(dim + 1, pos, check_window=False)
        values = np.empty((dim, dim, grid.size))
        amp = np.zeros((dim, dim))
        expo = np.zeros((dim, dim))
        parity_neg = grid < 0.0
        for k in range(dim):
            for j in range(k, dim):
                w = pattern_window(k, j)
                inside = pos <= w
                row = np.empty(grid.size)
                row[inside] = _raw_rows(psi, phi, k, j, pos[inside])
                a = _tail_amplitude(k, j, psi, phi, pos[np.unique(pos) is None or slice(None)][inside & (pos > 0)]) if False else _tail_amplitude(k, j, psi, phi, pos[inside])
                amp[k, j] = amp[j, k] = a
                row[~inside] = a * pos[~inside] ** (-(2.0 + j - k))
                if (k + j) % 2 == 1:
                    row[parity_neg] *= -1.0
                values[k, j] = values[j, k] = row
                expo[k, j] = expo[j, k] = _fit_exponent(pos, row, k, j)
        return cls(dim=dim, grid=grid, values=values, tail_amplitudes=amp, tail_exponents=expo)

    def rows_at(self, pairs: list[tuple[int, int]], xs: np.ndarray) -> np.ndarray:
        """Cubic-interpolated kernel values for the given index pairs at ``xs``."""
        out = np.empty((len(pairs), xs.size))
        for start in range(0, len(pairs), _SPLINE_CHUNK):
            chunk = pairs[start : start + _SPLINE_CHUNK]
            block = np.stack([self.values[k, j] for k, j in chunk])
            spline = CubicSpline(self.grid, block, axis=1)
            out[start : start + len(chunk)] = spline(np.clip(xs, self.grid[0], self.grid[-1]))
        return out


def _fit_exponent(pos: np.ndarray, row: np.ndarray, k: int, j: int) -> float:
    w = pattern_window(k, j)
    onset = max(1.25 * np.sqrt(2.0 * max(k, j) + 1.0) + 1.0, 0.6 * w)
    sel = (pos >= onset) & (pos <= 0.97 * w) & (np.abs(row) > 0)
    if sel.sum() < 8:
        return np.nan
    slope, _ = np.polyfit(np.log(pos[sel]), np.log(np.abs(row[sel])), 1)
    return float(slope)


@lru_cache(maxsize=4)
def default_table(dim: int) -> PatternTable:
    return PatternTable.build(dim)


def pattern(k: int, j: int, x) -> float | np.ndarray:
    """Direct kernel evaluation (no table), tail model beyond the window."""
    if j < k:
        return pattern(j, k, x)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    pos = np.abs(xs)
    w = pattern_window(k, j)
    inside = pos <= w
    out = np.empty(xs.shape)
    if inside.any():
        psi = psi_all(k + 2, pos[inside])
        phi = phi_all(j + 2, pos[inside], check_window=False)[j:]
        out[inside] = (
            2.0 * pos[inside] * psi[k] * phi[0]
            - np.sqrt(2.0 * (k + 1)) * psi[k + 1] * phi[0]
            - np.sqrt(2.0 * (j + 1)) * psi[k] * phi[1]
        )
    if (~inside).any():
        fit_x = np.linspace(max(1.25 * np.sqrt(2.0 * j + 1.0) + 1.0, 0.6 * w), 0.97 * w, 48)
        psi_f = psi_all(k + 2, fit_x)
        phi_f = phi_all(j + 2, fit_x, check_window=False)[j:]
        vals = (
            2.0 * fit_x * psi_f[k] * phi_f[0]
            - np.sqrt(2.0 * (k + 1)) * psi_f[k + 1] * phi_f[0]
            - np.sqrt(2.0 * (j + 1)) * psi_f[k] * phi_f[1]
        )
        a = float(np.median(vals * fit_x ** (2 + j - k)))
        out[~inside] = a * pos[~inside] ** (-(2.0 + j - k))
    if (k + j) % 2 == 1:
        out[xs < 0] *= -1.0
    if np.isscalar(x) or np.asarray(x).shape == ():
        return float(out[0])
    return out


def _upper_pairs(n: int) -> list[tuple[int, int]]:
    return [(k, j) for k in range(n) for j in range(k, n)]


def _block_sums(fvals: np.ndarray, phases: np.ndarray, want_sq: bool) -> tuple:
    s1 = fvals.astype(complex) @ phases.T if phases.ndim == 2 else (fvals * phases).sum(axis=1)
    s2 = (fvals**2).sum(axis=1) if want_sq else None
    return s1, s2


def _accumulate(
    table: PatternTable,
    pairs: list[tuple[int, int]],
    data: SampleSet,
    want_sq: bool,
    workers: int | None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Ordered block reduction of kernel sums over the sample set.

    Returns ``sum_l f(X_l) e^{-i(j-k) Phi_l}`` per pair and, optionally,
    ``sum_l f(X_l)**2``.  Blocks are fixed-size, so the combination order
    (and hence the float result) does not depend on the worker count.
    """
    blocks = [
        (start, min(start + _REDUCE_BLOCK, data.n)) for start in range(0, data.n, _REDUCE_BLOCK)
    ]
    diffs = np.array([j - k for k, j in pairs])

    def one_block(bounds):
        lo, hi = bounds
        xs = data.x[lo:hi]
        fs = table.rows_at(pairs, xs)
        phases = np.exp(-1j * np.outer(diffs, data.phi[lo:hi]))
        s1 = np.einsum("px,px->p", fs.astype(complex), phases)
        s2 = np.einsum("px,px->p", fs, fs) if want_sq else None
        return s1, s2

    nw = worker_count(workers)
    if nw == 1 or len(blocks) == 1:
        results = [one_block(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(one_block, blocks))
    total1 = np.zeros(len(pairs), dtype=complex)
    total2 = np.zeros(len(pairs)) if want_sq else None
    for s1, s2 in results:
        total1 += s1
        if want_sq:
            total2 += s2
    return total1, total2


def estimate_pfp(
    data: SampleSet,
    N: int,
    table: PatternTable | None = None,
    workers: int | None = None,
) -> RawMatrix:
    """Projection estimate of the truncated density matrix from ideal data.

    Entry ``(k, j)`` is the empirical average of
    ``f_{k,j}(X) exp(-i (j-k) Phi)``; the result is Hermitian by construction
    but need not be positive or normalized.
    """
    if N < 1:
        raise ValueError("need N >= 1")
    if data.eta < 1.0:
        raise EfficiencyError(
            "efficiency-corrected pattern functions out of scope; use SML with noise model"
        )
    if table is None or table.dim < N:
        table = default_table(N)
    pairs = _upper_pairs(N)
    sums, _ = _accumulate(table, pairs, data, want_sq=False, workers=workers)
    out = np.zeros((N, N), dtype=complex)
    for (k, j), s in zip(pairs, sums):
        out[k, j] = s / data.n
        out[j, k] = np.conj(out[k, j])
    return RawMatrix(out)


@dataclass
class CrossValidation:
    """Risk-surrogate curve over truncation dimensions and its minimizer."""

    N_star: int
    risk_curve: np.ndarray  # column 0: N, column 1: J_hat(N)

    def save_csv(self, path, header_lines: list[str] | None = None) -> None:
        lines = list(header_lines or [])
        lines.append("N,J_hat")
        lines += [f"{int(n)},{repr(float(j))}" for n, j in self.risk_curve]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def cross_validate(
    data: SampleSet,
    N_max: int,
    table: PatternTable | None = None,
    workers: int | None = None,
) -> CrossValidation:
    """Unbiased empirical risk surrogate over truncation dimensions.

    For each dimension ``N`` the surrogate sums ``|rho_hat|^2 - 2 u_hat``
    over the estimated block, where ``u_hat`` is the unbiased estimate of
    ``|rho_{k,j}|^2`` built from the same kernel sums.  Up to a constant it
    is an unbiased estimate of the squared L2 risk; ties break to the
    smallest minimizing dimension.
    """
    if N_max < 1:
        raise ValueError("need N_max >= 1")
    n = data.n
    if n < 2:
        raise ValueError("cross-validation needs at least 2 samples")
    if table is None or table.dim < N_max:
        table = default_table(N_max)
    pairs = _upper_pairs(N_max)
    s1, s2 = _accumulate(table, pairs, data, want_sq=True, workers=workers)
    rho_sq = np.abs(s1 / n) ** 2
    u_hat = (n**2 * rho_sq - s2) / (n * (n - 1.0))
    term = rho_sq - 2.0 * u_hat
    # off-diagonal pairs appear twice in the full double sum
    weight = np.array([1.0 if k == j else 2.0 for k, j in pairs])
    curve = np.empty((N_max, 2))
    for N in range(1, N_max + 1):
        sel = np.array([j < N for _, j in pairs])
        curve[N - 1] = (N, np.sum(weight[sel] * term[sel]))
    best = int(np.argmin(curve[:, 1]))
    return CrossValidation(N_star=int(curve[best, 0]), risk_curve=curve)


def mise_decomposition(
    rho_true: DensityMatrix, estimates: list[RawMatrix], N: int
) -> dict[str, float]:
    """Empirical bias/variance split of repeated estimates at fixed ``(n, N)``.

    The bias term combines the discarded true mass outside the estimated
    block with the squared distance of the mean estimate from the restricted
    truth; the variance term is the mean squared scatter around that mean.
    """
    if len(estimates) < 2:
        raise ValueError("need at least 2 independent estimates")
    stack = np.stack([e.entries[:N, :N] for e in estimates])
    mean = stack.mean(axis=0)
    truth = rho_true.entries
    restricted = truth[:N, :N] if truth.shape[0] >= N else _pad(truth, N)
    tail = 0.0
    if truth.shape[0] > N:
        tail = float(np.sum(np.abs(truth[N:, N:]) ** 2))
    bias2 = tail + float(np.sum(np.abs(mean - restricted) ** 2))
    variance = float(np.mean(np.sum(np.abs(stack - mean) ** 2, axis=(1, 2))))
    return {"bias2": bias2, "variance": variance}


def _pad(m: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n), dtype=complex)
    out[: m.shape[0], : m.shape[0]] = m
    return out
