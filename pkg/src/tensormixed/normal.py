"""Array-normal (tensor normal) distribution with Kronecker-separable covariance.

``vec(Y) ~ N(vec(M), Omega kron Psi kron Sigma)`` where Sigma, Psi and Omega
are the mode-1, mode-2 and mode-3 covariance factors.  Densities are
evaluated factor-wise; the JKL x JKL covariance is never formed.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .tensor import as_batch, as_tensor3, matricize, multi_mode_product

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_FLOOR_RATIO = 1e-10


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpdMatrix:
    """Symmetric positive-definite matrix with its Cholesky factor cached."""

    values: np.ndarray
    chol: np.ndarray = field(repr=False)
    logdet: float

    @classmethod
    def from_array(cls, m, sym_tol=1e-12):
        m = np.array(m, dtype=float, ndmin=2)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"covariance must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NotPositiveDefiniteError("covariance has non-finite entries")
        scale = max(np.abs(m).max(), np.finfo(float).tiny)
        if np.abs(m - m.T).max() > sym_tol * scale:
            raise NotPositiveDefiniteError("covariance is not symmetric")
        m = 0.5 * (m + m.T)
        try:
            c = linalg.cholesky(m, lower=True)
        except linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(str(exc)) from None
        d = np.diag(c)
        if np.any(d <= 0):
            raise NotPositiveDefiniteError("Cholesky factor has a non-positive pivot")
        m.setflags(write=False)
        c.setflags(write=False)
        return cls(m, c, float(2.0 * np.log(d).sum()))

    @classmethod
    def identity(cls, n):
        return cls.from_array(np.eye(n))

    @property
    def dim(self):
        return self.values.shape[0]

    def inv_chol(self):
        """Inverse of the lower Cholesky factor, ``L^{-1}``."""
        return linalg.solve_triangular(self.chol, np.eye(self.dim), lower=True)

    def inverse(self):
        return linalg.cho_solve((self.chol, True), np.eye(self.dim))

    def solve(self, b):
        return linalg.cho_solve((self.chol, True), b)

    def scaled(self, c):
        return SpdMatrix.from_array(c * self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def spd_project(m, floor_ratio=DEFAULT_FLOOR_RATIO, reference=None):
    """Nearest-in-spirit SPD matrix: symmetrize, then floor the eigenvalues.

    The floor is ``floor_ratio * trace(m) / dim``.  When that level is not
    positive (for example a zero matrix) ``reference`` supplies the scale,
    falling back to 1.
    """
    return spd_project_flagged(m, floor_ratio, reference)[0]


def spd_project_flagged(m, floor_ratio=DEFAULT_FLOOR_RATIO, reference=None):
    """Like :func:`spd_project`, also reporting whether the floor was applied."""
    m = np.array(m, dtype=float, ndmin=2)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"spd_project needs a square matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    sym = 0.5 * (m + m.T)
    n = sym.shape[0]
    level = np.trace(sym) / n
    if not level > 0:
        level = reference if reference is not None and reference > 0 else 1.0
    floor = floor_ratio * level
    w, v = np.linalg.eigh(sym)
    if w.min() >= floor:
        try:
            return SpdMatrix.from_array(sym), False
        except NotPositiveDefiniteError:
            pass
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return SpdMatrix.from_array(0.5 * (out + out.T)), True


def as_spd(m):
    return m if isinstance(m, SpdMatrix) else SpdMatrix.from_array(m)


def kron_logdet(factors):
    """log|Omega kron Psi kron Sigma| for a (Sigma, Psi, Omega) triple."""
    dims = [f.dim for f in factors]
    total = int(np.prod(dims))
    return sum(total // d * f.logdet for d, f in zip(dims, factors))


def whiten(e, factors, skip=None):
    """Apply ``L_k^{-1}`` along every mode except ``skip`` (1-based)."""
    mats = [None if k + 1 == skip else f.inv_chol() for k, f in enumerate(factors)]
    return multi_mode_product(e, mats)


@dataclass(frozen=True, eq=False)
class TensorNormal3:
    mean: np.ndarray
    sigma: SpdMatrix
    psi: SpdMatrix
    omega: SpdMatrix

    def __post_init__(self):
        mean = as_tensor3(self.mean, "mean")
        object.__setattr__(self, "mean", mean)
        for name in ("sigma", "psi", "omega"):
            object.__setattr__(self, name, as_spd(getattr(self, name)))
        if (self.sigma.dim, self.psi.dim, self.omega.dim) != mean.shape:
            raise ValueError("covariance factor sizes do not match the mean tensor")

    @property
    def factors(self):
        return (self.sigma, self.psi, self.omega)

    @property
    def dims(self):
        return self.mean.shape


def log_density(d, y, mode=None):
    """Exact log-density of ``y`` (a tensor or a batch) under ``d``.

    ``mode=None`` whitens along all three modes at once.  ``mode=k`` uses the
    matrix-normal form of the mode-k unfolding instead: the two other modes
    are whitened and the quadratic form is finished with a solve against the
    mode-k factor.  All forms agree up to rounding.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 3
    batch = as_batch(y)
    if batch.shape[1:] != d.dims:
        raise ValueError(f"sample dims {batch.shape[1:]} do not match {d.dims}")
    e = batch - d.mean
    n_el = int(np.prod(d.dims))
    const = -0.5 * n_el * LOG_2PI - 0.5 * kron_logdet(d.factors)
    if mode is None:
        w = whiten(e, d.factors)
        quad = np.einsum("nijk,nijk->n", w, w)
    else:
        w = whiten(e, d.factors, skip=mode)
        fac = d.factors[mode - 1]
        quad = np.empty(len(e))
        for i, wi in enumerate(w):
            m = matricize(wi, mode)
            quad[i] = np.trace(fac.solve(m @ m.T))
    out = const - 0.5 * quad
    return float(out[0]) if single else out


def sample(d, n, rng):
    """Draw ``n`` tensors as ``mean + Z x1 L_sigma x2 L_psi x3 L_omega``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z = rng.standard_normal((n,) + d.dims)
    return d.mean + multi_mode_product(z, [f.chol for f in d.factors])
