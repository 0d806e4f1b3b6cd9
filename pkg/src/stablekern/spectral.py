"""Spectral analysis of the kernel families.

Every family factors (exactly, for the closed forms; to series tolerance for
the higher orders) as an exponential envelope times a stationary kernel:

    K[t, s] = env**((t + s) / 2) * w(|t - s|),   env = beta (gamma**3 for SS).

``stationary_part`` extracts and certifies ``w``; ``psd`` evaluates the
truncated cosine-series power spectral density of ``w``; and
``low_frequency_mass`` quantifies how the prior's statistical power splits
across frequency, which is the quantity the family orderings are stated in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz

from .errors import DecompositionError, DimensionError, ParameterError
from .kernels import KernelSpec, build_kernel

__all__ = [
    "StationaryKernel",
    "PSD",
    "stationary_part",
    "psd",
    "low_frequency_mass",
]

#: Default working length for spectral computations; the stationary
#: autocovariance decays geometrically, so the series tail is negligible here.
SPECTRAL_T = 200

#: Stationarity spread tolerances (relative to the autocovariance scale).
SPREAD_TOL_CLOSED = 1e-10
SPREAD_TOL_SERIES = 1e-7


@dataclass(frozen=True)
class StationaryKernel:
    """Autocovariance ``w(tau)``, ``tau = 0 .. T-1``, of the stationary part.

    ``spec`` records the originating kernel (``None`` for synthetic
    sequences); ``spread`` is the certified relative variation of the
    rescaled kernel across diagonal positions.
    """

    w: np.ndarray
    spec: KernelSpec | None = None
    spread: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if w.ndim != 1 or w.size < 1:
            raise DimensionError("autocovariance must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(w)):
            raise ParameterError("autocovariance contains non-finite values")
        if not w[0] > 0:
            raise ParameterError(f"w(0) must be positive; got {w[0]}")
        eigs = np.linalg.eigvalsh(toeplitz(w))
        if eigs[0] < -1e-8 * w[0]:
            raise ParameterError(
                f"autocovariance matrix is not PSD (min eigenvalue {eigs[0]:.3e})"
            )
        w.setflags(write=False)


@dataclass(frozen=True)
class PSD:
    """Power spectral density samples ``phi`` on a uniform grid in [0, pi]."""

    theta: np.ndarray
    phi: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.theta.shape != self.phi.shape or self.theta.ndim != 1:
            raise DimensionError("theta and phi must be equal-length 1-d arrays")
        if not np.all(np.isfinite(self.phi)):
            raise ParameterError("phi contains non-finite values")
        if self.normalized and abs(self.phi.max() - 1.0) > 1e-12:
            raise ParameterError("normalized PSD must have maximum 1")
        self.theta.setflags(write=False)
        self.phi.setflags(write=False)

    def to_csv(self, path_or_file) -> None:
        np.savetxt(
            path_or_file,
            np.column_stack([self.theta, self.phi]),
            fmt="%.16e",
            delimiter=",",
            header="theta,phi",
            comments="",
        )


def _envelope(spec: KernelSpec) -> float:
    return spec.gamma ** 3 if spec.family == "SS" else spec.beta


def stationary_part(spec: KernelSpec, T: int = SPECTRAL_T,
                    envelope: float | None = None) -> StationaryKernel:
    """Extract ``w(tau) = env**(-(t+s)/2) * K[t, t+tau]`` and certify that it
    does not depend on the diagonal position ``t``.

    The envelope defaults to the family's own decay rate (``gamma**3`` for
    SS); passing a different one raises a decomposition error as soon as the
    rescaled kernel stops being stationary, which is the symptom of a wrong
    envelope.  Rescaling runs in log space so steep envelopes at large ``T``
    do not overflow.
    """
    T = int(T)
    if T < 1:
        raise DimensionError(f"working length must be >= 1; got {T}")
    env = _envelope(spec) if envelope is None else float(envelope)
    if not 0.0 < env < 1.0:
        raise ParameterError(f"envelope must lie in (0, 1); got {env}")
    K = build_kernel(spec, T)
    if np.any(np.diag(K) == 0.0):
        raise DecompositionError(
            "kernel entries underflow at this working length; reduce T"
        )
    t = np.arange(1, T + 1)
    halfsum = np.add.outer(t, t) / 2.0
    with np.errstate(divide="ignore"):
        logmag = np.where(K == 0.0, -np.inf, np.log(np.abs(K)))
    wmat = np.sign(K) * np.exp(logmag - halfsum * np.log(env))

    w = np.empty(T)
    scale = 0.0
    spreads = np.empty(T)
    for tau in range(T):
        vals = np.diag(wmat, tau)
        w[tau] = vals.mean()
        spreads[tau] = vals.max() - vals.min()
        scale = max(scale, np.max(np.abs(vals)))
    spread = float(np.max(spreads) / scale)
    bw = spec.bandwidth
    tol = SPREAD_TOL_CLOSED if (bw is None or bw <= 2) else SPREAD_TOL_SERIES
    if spread > tol:
        raise DecompositionError(
            f"rescaled kernel is not stationary (spread {spread:.3e} > {tol:.0e}); "
            "the envelope does not match the family"
        )
    return StationaryKernel(w, spec=spec, spread=spread)


def psd(w: StationaryKernel, M: int = 512, normalize: bool = False) -> PSD:
    """Cosine-series PSD ``phi(theta_j) = w(0) + 2 sum_tau w(tau) cos(theta_j tau)``
    on the grid ``theta_j = j pi / (M - 1)``.

    Truncation can produce small negative values; they are reported raw here
    and only clipped inside :func:`low_frequency_mass` integrals.
    """
    M = int(M)
    if M < 2:
        raise DimensionError(f"grid size must be >= 2; got {M}")
    theta = np.linspace(0.0, np.pi, M)
    coeffs = w.w
    tau = np.arange(1, coeffs.size)
    phi = coeffs[0] + 2.0 * np.cos(np.outer(theta, tau)) @ coeffs[1:]
    if normalize:
        peak = phi.max()
        if peak <= 0:
            raise ParameterError("PSD maximum is not positive; cannot normalize")
        phi = phi / peak
    return PSD(theta, phi, normalized=normalize)


def low_frequency_mass(spectrum: PSD, cutoff: float) -> float:
    """Fraction of spectral mass below ``cutoff``: trapezoidal
    ``int_0^cutoff phi / int_0^pi phi`` with negative values clipped inside
    the integrals and the cutoff ordinate linearly interpolated."""
    theta, phi = spectrum.theta, np.clip(spectrum.phi, 0.0, None)
    total = np.trapezoid(phi, theta)
    if total <= 0:
        raise ParameterError("PSD has no positive mass")
    if cutoff <= 0:
        return 0.0
    if cutoff >= np.pi:
        return 1.0
    j = int(np.searchsorted(theta, cutoff))
    part = np.trapezoid(phi[:j], theta[:j])
    if j > 0 and theta[j - 1] < cutoff:
        phic = np.interp(cutoff, theta, phi)
        part += 0.5 * (phi[j - 1] + phic) * (cutoff - theta[j - 1])
    return float(part / total)
