"""Maximum-entropy band extension.

Given the entries of a symmetric matrix within a band ``|t-s| <= m``, the
band extension problem asks for a positive-definite completion; among all
completions, the maximum-entropy one maximizes ``log det`` and is the unique
completion whose inverse is again banded with bandwidth ``m``.  It is built
entry by entry: each unknown entry is the "one-step" extension of the
principal submatrix spanning its row/column range, filled outward one
super-diagonal at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionError, InfeasibleExtensionError, ParameterError

__all__ = [
    "BandSpec",
    "CompletionResult",
    "one_step_extension",
    "maxent_completion",
    "check_feasibility",
]

#: Relative eigenvalue tolerance for positive definiteness of sliding blocks;
#: matches where double-precision Cholesky starts to break down.
PD_TOL = 1e-12


@dataclass(frozen=True)
class BandSpec:
    """Band data ``c[t, s]`` for ``|t - s| <= bandwidth`` of a ``dim x dim``
    symmetric matrix.

    ``data[d, t]`` holds the entry ``c[t+1, t+1+d]`` (1-based), i.e. row
    ``d`` of the storage is the ``d``-th super-diagonal; entries past
    ``dim - d`` are ignored.  Symmetry is implicit in the storage.
    """

    dim: int
    bandwidth: int
    data: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError(f"dim must be >= 1; got {self.dim}")
        if not 0 <= self.bandwidth < self.dim:
            raise ParameterError(
                f"bandwidth must satisfy 0 <= m < dim; got m={self.bandwidth}, dim={self.dim}"
            )
        if self.data.shape != (self.bandwidth + 1, self.dim):
            raise DimensionError(
                f"band storage must have shape {(self.bandwidth + 1, self.dim)}; "
                f"got {self.data.shape}"
            )
        self.data.setflags(write=False)

    @classmethod
    def from_matrix(cls, M, bandwidth: int) -> "BandSpec":
        """Extract the bands of a symmetric matrix."""
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DimensionError(f"expected a square matrix; got shape {M.shape}")
        T = M.shape[0]
        m = int(bandwidth)
        if not 0 <= m < T:
            raise ParameterError(f"bandwidth must satisfy 0 <= m < dim; got {m}")
        data = np.zeros((m + 1, T))
        for d in range(m + 1):
            diag = np.diag(M, d)
            if d > 0 and not np.allclose(diag, np.diag(M, -d), rtol=1e-12, atol=0):
                raise ParameterError("matrix is not symmetric within the band")
            data[d, : T - d] = diag
        return cls(T, m, data)

    def entry(self, t: int, s: int) -> float:
        """Band entry with 1-based indices; raises outside the band."""
        d = abs(t - s)
        if d > self.bandwidth:
            raise ParameterError(f"entry ({t}, {s}) lies outside bandwidth {self.bandwidth}")
        return float(self.data[d, min(t, s) - 1])

    def to_matrix(self, fill: float = 0.0) -> np.ndarray:
        """Dense symmetric matrix with unknown entries set to ``fill``."""
        M = np.full((self.dim, self.dim), fill)
        for d in range(self.bandwidth + 1):
            idx = np.arange(self.dim - d)
            M[idx, idx + d] = self.data[d, : self.dim - d]
            M[idx + d, idx] = self.data[d, : self.dim - d]
        return M

    # -- serialization: CSV triples (t, s, value), 1-based upper triangle ---

    def to_csv(self, path_or_file) -> None:
        rows = []
        for d in range(self.bandwidth + 1):
            for t in range(self.dim - d):
                rows.append((t + 1, t + 1 + d, self.data[d, t]))
        arr = np.array(rows, dtype=float)
        np.savetxt(path_or_file, arr, fmt=["%d", "%d", "%.16e"], delimiter=",")

    @classmethod
    def from_csv(cls, path_or_file) -> "BandSpec":
        arr = np.loadtxt(path_or_file, delimiter=",", ndmin=2)
        if arr.shape[1] != 3:
            raise ParameterError("band CSV must have rows (t, s, value)")
        t = arr[:, 0].astype(int)
        s = arr[:, 1].astype(int)
        v = arr[:, 2]
        T = int(max(t.max(), s.max()))
        m = int(np.abs(t - s).max())
        data = np.full((m + 1, T), np.nan)
        for ti, si, vi in zip(t, s, v):
            d = abs(ti - si)
            lo = min(ti, si) - 1
            if np.isfinite(data[d, lo]) and data[d, lo] != vi:
                raise ParameterError(f"conflicting values for entry ({ti}, {si})")
            data[d, lo] = vi
        for d in range(m + 1):
            if not np.all(np.isfinite(data[d, : T - d])):
                raise ParameterError(f"band CSV leaves diagonal {d} incomplete")
            data[d, T - d :] = 0.0
        return cls(T, m, data)


@dataclass(frozen=True)
class CompletionResult:
    """Completed matrix and its entropy (``log det``)."""

    matrix: np.ndarray
    entropy: float

    def __post_init__(self):
        self.matrix.setflags(write=False)


def one_step_extension(partial) -> float:
    """Maximum-entropy value of the unknown corner ``(1, T)`` of a symmetric
    matrix whose other entries are known.

    With ``L`` the leading ``(T-1) x (T-1)`` block and ``y = L^{-1} e_1``,

        x = -(1 / y_1) * sum_{j=2}^{T-1} c_{T,j} y_j .

    The corner entries of ``partial`` are ignored.  Raises
    :class:`InfeasibleExtensionError` when ``L`` is not positive definite.
    """
    C = np.asarray(partial, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError(f"expected a square matrix; got shape {C.shape}")
    T = C.shape[0]
    if T < 2:
        raise DimensionError("one-step extension needs a matrix of dimension >= 2")
    L = C[: T - 1, : T - 1]
    try:
        factor = cho_factor(L, lower=True)
    except np.linalg.LinAlgError:
        raise InfeasibleExtensionError(
            "leading principal submatrix is not positive definite"
        ) from None
    e1 = np.zeros(T - 1)
    e1[0] = 1.0
    y = cho_solve(factor, e1)
    # y[0] = (L^{-1})_{11} > 0 whenever L is PD
    return float(-(C[T - 1, 1 : T - 1] @ y[1:]) / y[0])


def check_feasibility(band: BandSpec) -> tuple[bool, int | None]:
    """Positive definiteness of every sliding ``(m+1) x (m+1)`` block.

    Returns ``(True, None)`` when feasible, else ``(False, t)`` with the
    1-based index of the first failing block.  A block passes when its
    smallest eigenvalue exceeds ``PD_TOL`` times its spectral norm.
    """
    M = band.to_matrix()
    m = band.bandwidth
    for t in range(band.dim - m):
        block = M[t : t + m + 1, t : t + m + 1]
        eigs = np.linalg.eigvalsh(block)
        if eigs[0] <= PD_TOL * max(np.abs(eigs[0]), np.abs(eigs[-1])):
            return False, t + 1
    return True, None


def maxent_completion(band: BandSpec) -> CompletionResult:
    """Fill the unknown entries of a band specification by maximum entropy.

    Unknown super-diagonals are filled outward (``|t-s| = m+1``, then
    ``m+2``, ...), left to right within each diagonal; every new entry is the
    one-step extension of the principal submatrix on its row/column range.
    The fill order is a determinism convention only: each entry's value does
    not depend on the order within its diagonal.

    Raises :class:`InfeasibleExtensionError` (carrying the 1-based index of
    the first failing sliding block) when the band data are infeasible.
    """
    ok, first_bad = check_feasibility(band)
    if not ok:
        raise InfeasibleExtensionError(
            f"band data infeasible: sliding block at index {first_bad} "
            "is not positive definite",
            index=first_bad,
        )
    T = band.dim
    M = band.to_matrix()
    for d in range(band.bandwidth + 1, T):
        for t in range(T - d):
            window = M[t : t + d + 1, t : t + d + 1]
            x = one_step_extension(window)
            M[t, t + d] = x
            M[t + d, t] = x
    sign, entropy = np.linalg.slogdet(M)
    if sign <= 0:
        raise InfeasibleExtensionError("completed matrix is not positive definite")
    return CompletionResult(M, float(entropy))
