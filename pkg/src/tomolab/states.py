"""Density matrices: reference states, distances, physicality, detector loss.

Conventions
-----------
Matrix entry ``entries[k][j]`` holds the coefficient that multiplies
``psi_k(x) psi_j(x) exp(-i (j - k) phi)`` in the quadrature sampling density,
i.e. for a pure state with number-basis amplitudes ``t`` it equals
``conj(t_k) t_j``.

The displaced reference states (coherent, squeezed) are parameterized so that
their phase-space quasi-densities match the closed forms used throughout the
package: ``coherent(N)`` peaks at ``(sqrt(N), 0)`` and ``squeezed(N, xi)`` at
``(exp(xi) * sqrt(N - sinh(xi)**2), 0)`` with level-set aspect ratio
``exp(2 xi)``.  Equivalently, ``coherent(N)`` carries amplitude
``beta = sqrt(N / 2)`` in the number basis.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .basis import psi_all

_HERM_TOL = 1e-12
_TRACE_TOL = 1e-9
_EIG_TOL = 1e-9
_EIG_ZERO_SNAP = 1e-12

_LOST_MASS_WARN = 1e-6
_LOST_MASS_ERROR = 1e-3

_MAX_AUTO_DIM = 256


class StateParameterError(ValueError):
    """Invalid parameters for a state factory or transform."""


class ContractViolationError(ValueError):
    """Input violates a documented precondition (e.g. non-Hermitian matrix)."""


class TruncationError(ValueError):
    """Truncation discards too much state mass (strict mode)."""


class TruncationWarning(UserWarning):
    """Truncation discards a noticeable amount of state mass."""


def _as_hermitian(entries: np.ndarray) -> np.ndarray:
    m = np.ascontiguousarray(entries, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractViolationError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.conj().T, rtol=0.0, atol=_HERM_TOL * max(1.0, np.abs(m).max())):
        raise ContractViolationError("matrix is not Hermitian")
    # force exact Hermiticity so entries[k][j] == conj(entries[j][k]) bit for bit
    m = 0.5 * (m + m.conj().T)
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class RawMatrix:
    """Hermitian matrix without positivity or trace constraints.

    This is the natural output type of the linear projection estimator, which
    need not be positive or normalized.
    """

    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _as_hermitian(self.entries))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "re": self.entries.real.tolist(),
            "im": self.entries.imag.tolist(),
            "physical": False,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RawMatrix":
        m = np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)
        return cls(m)


@dataclass(frozen=True)
class DensityMatrix:
    """Finite truncation of a quantum state: Hermitian, PSD, unit trace."""

    entries: np.ndarray
    lost_mass: float = 0.0
    label: str = ""

    def __post_init__(self):
        m = _as_hermitian(self.entries)
        tr = np.trace(m).real
        if abs(tr - 1.0) > _TRACE_TOL:
            raise ContractViolationError(f"trace is {tr!r}, expected 1")
        if self.dim_of(m) > 1:
            lo = np.linalg.eigvalsh(m)[0]
        else:
            lo = m[0, 0].real
        if lo < -_EIG_TOL:
            raise ContractViolationError(f"minimum eigenvalue {lo:.3e} below -{_EIG_TOL}")
        object.__setattr__(self, "entries", m)

    @staticmethod
    def dim_of(m: np.ndarray) -> int:
        return m.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def photon_distribution(self) -> np.ndarray:
        return self.entries.diagonal().real.copy()

    def mean_photons(self) -> float:
        return float(np.dot(np.arange(self.dim), self.photon_distribution()))

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "re": self.entries.real.tolist(),
            "im": self.entries.imag.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict, label: str = "") -> "DensityMatrix":
        m = np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)
        return cls(m, label=label)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "DensityMatrix":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def pure_state(amplitudes: np.ndarray, lost_mass: float = 0.0, label: str = "") -> DensityMatrix:
    """Density matrix of a pure state given number-basis amplitudes."""
    t = np.asarray(amplitudes, dtype=complex)
    norm = np.linalg.norm(t)
    if norm == 0.0:
        raise StateParameterError("zero amplitude vector")
    t = t / norm
    return DensityMatrix(np.outer(t.conj(), t), lost_mass=lost_mass, label=label)


def _handle_truncation(lost: float, label: str, strict: bool) -> float:
    lost = max(float(lost), 0.0)
    if lost > _LOST_MASS_ERROR and strict:
        raise TruncationError(
            f"{label}: truncation discards {lost:.3e} of the state mass (strict mode)"
        )
    if lost > _LOST_MASS_WARN:
        warnings.warn(
            f"{label}: truncation discards {lost:.3e} of the state mass",
            TruncationWarning,
            stacklevel=3,
        )
    return lost


def vacuum_state(dim: int = 4) -> DensityMatrix:
    if dim < 1:
        raise StateParameterError("dim must be >= 1")
    t = np.zeros(dim)
    t[0] = 1.0
    return pure_state(t, label="vacuum")


def fock_state(k: int, dim: int | None = None) -> DensityMatrix:
    if k < 0:
        raise StateParameterError("photon number must be >= 0")
    if dim is None:
        dim = k + 1
    if dim <= k:
        raise StateParameterError(f"dim {dim} too small for fock({k})")
    t = np.zeros(dim)
    t[k] = 1.0
    return pure_state(t, label=f"fock:k={k}")


def thermal_state(beta: float, dim: int = 16, strict: bool = False) -> DensityMatrix:
    if beta <= 0:
        raise StateParameterError("thermal state requires beta > 0")
    w = np.exp(-beta)
    diag = (1.0 - w) * w ** np.arange(dim)
    lost = _handle_truncation(w**dim, f"thermal(beta={beta})", strict)
    diag = diag / diag.sum()
    return DensityMatrix(np.diag(diag).astype(complex), lost_mass=lost, label=f"thermal:beta={beta}")


def coherent_state(n_mean: float, dim: int = 16, strict: bool = False) -> DensityMatrix:
    """Coherent state whose phase-space Gaussian is centered at ``(sqrt(N), 0)``."""
    if n_mean < 0:
        raise StateParameterError("coherent state requires N >= 0")
    beta = np.sqrt(n_mean / 2.0)
    k = np.arange(dim)
    log_t = -0.5 * beta**2 + k * np.log(beta if beta > 0 else 1.0) - 0.5 * gammaln(k + 1.0)
    t = np.exp(log_t) if beta > 0 else np.eye(1, dim, 0)[0]
    if beta > 0:
        held = float(np.sum(t**2))
    else:
        held = 1.0
    lost = _handle_truncation(1.0 - held, f"coherent(N={n_mean})", strict)
    return pure_state(t, lost_mass=lost, label=f"coherent:N={n_mean}")


def squeezed_state(n_mean: float, xi: float, dim: int = 24, strict: bool = False) -> DensityMatrix:
    """Squeezed state with phase-space center ``(alpha, 0)`` and aspect ``exp(2 xi)``.

    ``alpha = exp(xi) * sqrt(N - sinh(xi)**2)``; the parameters must satisfy
    ``N >= sinh(xi)**2``.  Number-basis amplitudes are computed by quadrature
    overlap with the explicit Gaussian wavefunction and renormalized after
    truncation (the overall constant is never needed in closed form).
    """
    sh2 = np.sinh(xi) ** 2
    if n_mean < sh2:
        raise StateParameterError(
            f"squeezed state requires N >= sinh(xi)^2 = {sh2:.6f}, got N = {n_mean}"
        )
    alpha = np.exp(xi) * np.sqrt(n_mean - sh2)
    # wavefunction with q-variance exp(-2 xi)/2, mean alpha, zero momentum
    a = np.exp(2.0 * xi)
    half = alpha + 9.0 * max(1.0, np.exp(-xi))
    xs = np.linspace(alpha - half, alpha + half, 8001)
    wf = (a / np.pi) ** 0.25 * np.exp(-0.5 * a * (xs - alpha) ** 2)
    t = np.trapezoid(psi_all(dim, xs) * wf, xs, axis=1)
    held = float(np.sum(t**2))
    lost = _handle_truncation(1.0 - held, f"squeezed(N={n_mean}, xi={xi})", strict)
    return pure_state(t, lost_mass=lost, label=f"squeezed:N={n_mean},xi={xi}")


_STATE_KINDS = ("vacuum", "fock", "thermal", "coherent", "squeezed")


def make_state(spec: str, dim: int | None = None, strict: bool = False) -> DensityMatrix:
    """Build a reference state from a ``kind:key=val,...`` spec string.

    Examples: ``"vacuum"``, ``"fock:k=1"``, ``"thermal:beta=1.0"``,
    ``"coherent:N=1.0"``, ``"squeezed:N=1.2,xi=0.4"``.  When ``dim`` is
    omitted the smallest dimension holding all but 1e-6 of the state mass
    is used.
    """
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if kind not in _STATE_KINDS:
        raise StateParameterError(f"unknown state kind {kind!r}; expected one of {_STATE_KINDS}")
    params: dict[str, float] = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            if not _:
                raise StateParameterError(f"malformed state parameter {item!r}")
            try:
                params[key.strip()] = float(val)
            except ValueError as exc:
                raise StateParameterError(f"malformed state parameter {item!r}") from exc

    def build(d: int) -> DensityMatrix:
        if kind == "vacuum":
            return vacuum_state(d)
        if kind == "fock":
            return fock_state(int(params.get("k", 0)), d)
        if kind == "thermal":
            return thermal_state(params["beta"], d, strict=strict)
        if kind == "coherent":
            return coherent_state(params["N"], d, strict=strict)
        return squeezed_state(params["N"], params["xi"], d, strict=strict)

    if dim is not None:
        return build(dim)
    if kind == "vacuum":
        return vacuum_state(1)
    if kind == "fock":
        return fock_state(int(params.get("k", 0)))
    d = 2
    while d <= _MAX_AUTO_DIM:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            state = build(d)
        if state.lost_mass <= 1e-6:
            return state
        d = d + max(2, d // 2)
    raise StateParameterError(f"no dimension up to {_MAX_AUTO_DIM} holds the state mass")


def _padded_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = max(a.shape[0], b.shape[0])
    out = []
    for m in (a, b):
        if m.shape[0] < n:
            p = np.zeros((n, n), dtype=complex)
            p[: m.shape[0], : m.shape[0]] = m
            out.append(p)
        else:
            out.append(m)
    return out[0], out[1]


def distance(a, b, norm: str = "trace") -> float:
    """Trace-norm or Frobenius distance between two Hermitian matrices.

    Inputs of unequal dimension are zero-padded to the larger one.
    """
    ma = _as_hermitian(getattr(a, "entries", a))
    mb = _as_hermitian(getattr(b, "entries", b))
    ma, mb = _padded_pair(ma, mb)
    diff = ma - mb
    if norm == "frobenius":
        return float(np.sqrt(np.sum(np.abs(diff) ** 2)))
    if norm == "trace":
        eig = np.linalg.eigvalsh(diff)
        eig[np.abs(eig) < _EIG_ZERO_SNAP] = 0.0
        return float(np.sum(np.abs(eig)))
    raise ValueError(f"unknown norm {norm!r}")


def project_physical(m) -> DensityMatrix:
    """Project a Hermitian matrix to the closest physical state.

    Eigenvalues are clipped at zero and the spectrum renormalized to unit
    trace.  Idempotent on physical inputs.
    """
    entries = _as_hermitian(getattr(m, "entries", m))
    eig, vec = np.linalg.eigh(entries)
    eig = np.where(eig > 0.0, eig, 0.0)
    total = eig.sum()
    if total <= 0.0:
        raise ValueError("no positive mass: clipped spectrum is zero")
    eig = eig / total
    out = (vec * eig) @ vec.conj().T
    return DensityMatrix(out)


def _bernoulli_kernel(entries: np.ndarray, eta: float) -> np.ndarray:
    """Apply the photon-loss (binomial thinning) kernel with parameter ``eta``.

    ``eta`` may exceed 1, which realizes the inverse map; the ``(1-eta)**p``
    factor is then a signed power.
    """
    n = entries.shape[0]
    j = np.arange(n)
    s = 1.0 - eta
    out = np.zeros_like(entries)
    for p in range(n):
        # g_j = sqrt(C(j+p, j) * eta^j), so the (j,k) weight is g_j g_k s^p
        idx = j[: n - p]
        logc = gammaln(idx + p + 1.0) - gammaln(idx + 1.0) - gammaln(p + 1.0)
        g = np.exp(0.5 * (logc + idx * np.log(eta)))
        out[: n - p, : n - p] += (s**p) * np.outer(g, g) * entries[p:, p:]
    return out


def bernoulli_transform(rho: DensityMatrix, eta: float, pad: int = 32) -> DensityMatrix:
    """Detector-efficiency (binomial loss) map applied to a state.

    Each photon survives independently with probability ``eta``.  The input
    is embedded in a matrix padded by ``pad`` extra rows so the internal sum
    is exact for truncated states.
    """
    if not 0.0 < eta <= 1.0:
        raise StateParameterError(f"efficiency must be in (0, 1], got {eta}")
    if eta == 1.0:
        return rho
    n = rho.dim
    src = np.zeros((n + pad, n + pad), dtype=complex)
    src[:n, :n] = rho.entries
    out = _bernoulli_kernel(src, eta)[:n, :n]
    out = 0.5 * (out + out.conj().T)
    out /= np.trace(out).real
    return DensityMatrix(out, label=rho.label)


def inverse_bernoulli_transform(rho: DensityMatrix, eta: float, pad: int = 32) -> DensityMatrix:
    """Inverse of :func:`bernoulli_transform`; requires ``eta > 1/2``.

    For ``eta <= 1/2`` the defining power series diverges.
    """
    if not 0.0 < eta <= 1.0:
        raise StateParameterError(f"efficiency must be in (0, 1], got {eta}")
    if eta <= 0.5:
        raise StateParameterError("divergent inverse: efficiency must exceed 1/2")
    if eta == 1.0:
        return rho
    n = rho.dim
    src = np.zeros((n + pad, n + pad), dtype=complex)
    src[:n, :n] = rho.entries
    out = _bernoulli_kernel(src, 1.0 / eta)[:n, :n]
    out = 0.5 * (out + out.conj().T)
    out /= np.trace(out).real
    return DensityMatrix(out, label=rho.label)
