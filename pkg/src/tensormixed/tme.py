"""Tensor mixed effects model and its double Flip-Flop estimator.

The model for the i-th response is

    Y_i = [[F; A1, A2, A3]] + [[R_i; B1, B2, B3]] + E_i

with R_i and E_i tensor normal.  Estimation runs two loops.  The first
alternates Flip-Flop sweeps of the total covariance factors with the
generalized least squares core ``F``.  The second, with ``F`` held fixed,
alternates conditional means of the random-effect cores with factor-wise
updates of the residual and random covariance triples (an ECM iteration
for the marginal likelihood of the mixed model).

Covariance triples are ordered ``(mode-1, mode-2, mode-3)``, i.e.
``(Sigma, Psi, Omega)``.
"""

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .normal import (
    DEFAULT_FLOOR_RATIO,
    LOG_2PI,
    SpdMatrix,
    TensorNormal3,
    as_spd,
    kron_logdet,
    log_density,
    spd_project_flagged,
    whiten,
)
from .tensor import as_batch, kron3, multi_mode_product, tucker_apply, unvec, vec
from .tucker import hooi


class TmeError(Exception):
    pass


class ExistenceError(TmeError):
    def __init__(self, verdict):
        super().__init__(verdict.message)
        self.verdict = verdict


class RankDeficiencyError(TmeError):
    def __init__(self, mode, detail=""):
        super().__init__(f"fixed-effects normal matrix is singular along mode {mode}{detail}")
        self.mode = mode


class CovarianceCollapseError(TmeError):
    def __init__(self, loop, iteration):
        super().__init__(
            f"non-finite log-likelihood in loop {loop} at iteration {iteration}: "
            "covariance estimates collapsed"
        )
        self.loop = loop
        self.iteration = iteration


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


def _orthonormal(m, name, tol=1e-8):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[1] > m.shape[0]:
        raise ValueError(f"{name} must be a tall matrix, got shape {m.shape}")
    gram = m.T @ m
    if np.abs(gram - np.eye(m.shape[1])).max() > tol:
        raise ValueError(f"{name} does not have orthonormal columns")
    return m


@dataclass(frozen=True, eq=False)
class TmeDesign:
    """Orthonormal-column design matrices for the fixed and random parts."""

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        for name in ("a1", "a2", "a3", "b1", "b2", "b3"):
            object.__setattr__(self, name, _orthonormal(getattr(self, name), name))
        dims_a = tuple(a.shape[0] for a in self.a)
        dims_b = tuple(b.shape[0] for b in self.b)
        if dims_a != dims_b:
            raise ValueError(f"A and B designs disagree on tensor dims: {dims_a} vs {dims_b}")

    @classmethod
    def from_factors(cls, factors, random_ranks=None, b_columns=None):
        """B matrices as column subsets of the A matrices (leading columns by default)."""
        factors = [np.asarray(f, dtype=float) for f in factors]
        if b_columns is None:
            if random_ranks is None:
                raise ValueError("need random_ranks or b_columns")
            b_columns = [range(r) for r in random_ranks]
        bs = []
        for k, (a, cols) in enumerate(zip(factors, b_columns), start=1):
            cols = list(cols)
            if not cols or max(cols) >= a.shape[1] or len(set(cols)) != len(cols):
                raise ValueError(f"invalid random-effect columns {cols} for mode {k}")
            bs.append(a[:, cols])
        return cls(*factors, *bs)

    @property
    def a(self):
        return (self.a1, self.a2, self.a3)

    @property
    def b(self):
        return (self.b1, self.b2, self.b3)

    @property
    def dims(self):
        return tuple(a.shape[0] for a in self.a)

    @property
    def ranks(self):
        return tuple(a.shape[1] for a in self.a)

    @property
    def random_ranks(self):
        return tuple(b.shape[1] for b in self.b)


STRUCTURE_PRESETS = {
    "full": ("full", "full", "full"),
    "diagonal": ("diagonal", "diagonal", "diagonal"),
    "isotropic_pair": ("diagonal", "isotropic", "isotropic"),
}
_STRUCTURE_KINDS = ("full", "diagonal", "isotropic")


def parse_structure(spec):
    """Normalize a residual-structure spec to a 3-tuple.

    Each entry is ``"full"``, ``"diagonal"``, ``"isotropic"`` or a 1-D array
    holding a fixed diagonal profile.  A preset name or a comma-separated
    string such as ``"diagonal,isotropic,isotropic"`` is also accepted.
    """
    if isinstance(spec, str):
        if spec in STRUCTURE_PRESETS:
            return STRUCTURE_PRESETS[spec]
        parts = tuple(p.strip() for p in spec.split(","))
        if len(parts) == 1:
            parts = parts * 3
        spec = parts
    spec = tuple(spec)
    if len(spec) != 3:
        raise ValueError("residual structure needs one entry per mode")
    out = []
    for s in spec:
        if isinstance(s, str):
            if s not in _STRUCTURE_KINDS:
                raise ValueError(f"unknown residual structure {s!r}")
            out.append(s)
        else:
            p = np.asarray(s, dtype=float)
            if p.ndim != 1 or np.any(p <= 0) or not np.all(np.isfinite(p)):
                raise ValueError("given diagonal profile must be a positive vector")
            out.append(p)
    return tuple(out)


@dataclass(frozen=True)
class TmeConfig:
    ranks: tuple = None
    random_ranks: tuple = None
    b_columns: tuple = None
    loop1_tol: float = 1e-4
    loop2_tol: float = 1e-4
    loop1_max: int = 100
    loop2_max: int = 100
    residual_structure: tuple = ("diagonal", "diagonal", "diagonal")
    normalization: str = "trace"
    eigen_floor_ratio: float = DEFAULT_FLOOR_RATIO
    centering: str = "model"
    hooi_max_iter: int = 50
    hooi_tol: float = 1e-8

    def __post_init__(self):
        if not (self.loop1_tol > 0 and self.loop2_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.loop1_max < 1 or self.loop2_max < 1:
            raise ValueError("maximum iteration counts must be at least 1")
        if self.normalization not in ("trace", "determinant"):
            raise ValueError("normalization must be 'trace' or 'determinant'")
        if self.centering not in ("model", "mean"):
            raise ValueError("centering must be 'model' or 'mean'")
        object.__setattr__(self, "residual_structure", parse_structure(self.residual_structure))


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    index_sigma: float
    index_psi: float
    index_omega: float
    loglik: float
    seconds: float
    projected: bool = False

    @property
    def indices(self):
        return (self.index_sigma, self.index_psi, self.index_omega)


@dataclass(frozen=True)
class ConvergenceTrace:
    records: tuple = ()
    initial_loglik: float = float("nan")
    converged: bool = False

    @property
    def iterations(self):
        return len(self.records)

    @property
    def logliks(self):
        return [self.initial_loglik] + [r.loglik for r in self.records]

    def mean_seconds(self):
        if not self.records:
            return 0.0
        return float(np.mean([r.seconds for r in self.records]))


@dataclass(frozen=True, eq=False)
class TmeFit:
    f_hat: np.ndarray
    design: TmeDesign
    total: tuple
    residual: tuple
    random: tuple
    r_hat: np.ndarray
    trace1: ConvergenceTrace
    trace2: ConvergenceTrace
    loglik: float
    config: TmeConfig = field(default=None, repr=False)

    @property
    def f_full(self):
        return tucker_apply(self.f_hat, *self.design.a)

    @property
    def r_full(self):
        return multi_mode_product(self.r_hat, self.design.b)

    @property
    def converged(self):
        return self.trace1.converged and self.trace2.converged


# ---------------------------------------------------------------------------
# Existence and identifiability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExistenceVerdict:
    status: str  # "ok" | "necessary_violated" | "sufficient_unmet"
    necessary_bound: float
    message: str

    @property
    def ok(self):
        return self.status == "ok"


def existence_check(J, K, L, N, structure=None):
    """Sample-size conditions for the covariance MLEs to exist.

    Below ``max(J/KL, K/JL, L/JK) + 1`` they cannot exist.  ``N >= JKL`` is
    sufficient in general; with a diagonal mode-1 structure
    ``N >= max(KL, bound)`` is sufficient.  Between the two, existence is
    not guaranteed and a warning verdict is returned.
    """
    J, K, L, N = int(J), int(K), int(L), int(N)
    if min(J, K, L) < 1:
        raise ValueError("dimensions must be positive")
    bound = max(J / (K * L), K / (J * L), L / (J * K)) + 1
    if N < bound:
        return ExistenceVerdict(
            "necessary_violated",
            bound,
            f"N={N} is below the necessary sample size {bound:.6g} for {J}x{K}x{L} tensors",
        )
    if N >= J * K * L:
        return ExistenceVerdict("ok", bound, f"N={N} >= JKL={J * K * L}: estimates exist")
    diagonal = False
    if structure is not None:
        first = parse_structure(structure)[0]
        diagonal = not (isinstance(first, str) and first == "full")
    if diagonal and N >= max(K * L, bound):
        return ExistenceVerdict(
            "ok", bound, f"N={N} >= max(KL={K * L}, {bound:.6g}) with diagonal mode-1 covariance"
        )
    return ExistenceVerdict(
        "sufficient_unmet", bound, f"N={N}: existence of the covariance estimates not guaranteed"
    )


def normalize_identifiability(triple, mode="trace"):
    """Fix the Kronecker scale gauge.

    ``trace``: mode-2 factor rescaled to trace K and mode-3 factor to trace L.
    ``determinant``: both rescaled to determinant 1.  The scale goes into the
    mode-1 factor, so the Kronecker product is unchanged.
    """
    sigma, psi, omega = (as_spd(m) for m in triple)
    if mode == "trace":
        a = psi.dim / np.trace(psi.values)
        b = omega.dim / np.trace(omega.values)
    elif mode in ("determinant", "det"):
        a = math.exp(-psi.logdet / psi.dim)
        b = math.exp(-omega.logdet / omega.dim)
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return (sigma.scaled(1.0 / (a * b)), psi.scaled(a), omega.scaled(b))


def convergence_indices(new, old):
    """Entrywise L1 change of each factor divided by dim * dim."""
    return tuple(
        float(np.abs(n.values - o.values).sum() / n.dim**2) for n, o in zip(new, old)
    )


# ---------------------------------------------------------------------------
# Estimation steps
# ---------------------------------------------------------------------------


def _as_triple(triple):
    return tuple(as_spd(m) for m in triple)


def apply_structure(s, structure):
    """Constrained maximizer of the factor likelihood given the scatter ``s``."""
    if isinstance(structure, str):
        if structure == "full":
            return s
        if structure == "diagonal":
            return np.diag(np.diag(s))
        if structure == "isotropic":
            return np.trace(s) / s.shape[0] * np.eye(s.shape[0])
        raise ValueError(f"unknown residual structure {structure!r}")
    profile = np.asarray(structure, dtype=float)
    if profile.shape != (s.shape[0],):
        raise ValueError(
            f"diagonal profile of length {profile.size} does not match dimension {s.shape[0]}"
        )
    scale = max(float(np.mean(np.diag(s) / profile)), 0.0)
    return scale * np.diag(profile)


def flipflop_sweep(e, current, structure=None, floor_ratio=DEFAULT_FLOOR_RATIO, normalization="trace"):
    """One cyclic sweep of factor updates for centered data ``e`` (N, J, K, L).

    Mode k is re-estimated as the scatter of the mode-k unfolding whitened
    by the freshest other two factors, divided by N times their sizes.
    Returns the normalized triple and whether any eigen-floor was applied.
    """
    factors = list(_as_triple(current))
    structure = structure or ("full", "full", "full")
    projected = False
    for k in range(3):
        w = whiten(e, factors, skip=k + 1)
        m = np.moveaxis(w, k + 1, 0).reshape(w.shape[k + 1], -1)
        s = (m @ m.T) / m.shape[1]
        s = apply_structure(s, structure[k])
        reference = np.trace(factors[k].values) / factors[k].dim
        factors[k], hit = spd_project_flagged(s, floor_ratio, reference)
        projected |= hit
    return normalize_identifiability(factors, normalization), projected


def update_total_cov(y, center, current, floor_ratio=DEFAULT_FLOOR_RATIO, normalization="trace", with_flag=False):
    """Flip-Flop sweep for the total covariance triple.

    ``center`` is either the fitted fixed effect [[F; A]] or the sample mean
    tensor; a batch of per-sample centers is also accepted.
    """
    y = as_batch(y)
    n, J, K, L = y.shape
    verdict = existence_check(J, K, L, n)
    if verdict.status == "necessary_violated":
        raise ExistenceError(verdict)
    triple, hit = flipflop_sweep(y - center, current, None, floor_ratio, normalization)
    return (triple, hit) if with_flag else triple


def _shared(design, total):
    return isinstance(design, TmeDesign) and not isinstance(total, list)


def estimate_fixed(y, design, total):
    """Generalized least squares core of the fixed effects.

    ``design`` and ``total`` are either shared by all samples or given as
    lists with one entry per sample.
    """
    y = as_batch(y)
    n = y.shape[0]
    designs = [design] * n if isinstance(design, TmeDesign) else list(design)
    totals = [total] * n if not isinstance(total, list) else list(total)
    if len(designs) != n or len(totals) != n:
        raise ValueError("per-sample designs/covariances must match the number of samples")
    ranks = designs[0].ranks
    size = int(np.prod(ranks))

    def blocks(d, t):
        t = _as_triple(t)
        h = [a.T @ f.inverse() for a, f in zip(d.a, t)]  # A' S^{-1}
        g = [hk @ a for hk, a in zip(h, d.a)]  # A' S^{-1} A
        return h, g

    if _shared(design, total):
        h, g = blocks(design, total)
        g_sum = g
        normal = n * kron3(g[2], g[1], g[0])
        rhs = vec(multi_mode_product(y.sum(axis=0), h))
    else:
        normal = np.zeros((size, size))
        rhs = np.zeros(size)
        g_sum = [np.zeros((r, r)) for r in ranks]
        for yi, d, t in zip(y, designs, totals):
            if d.ranks != ranks:
                raise ValueError("all per-sample designs need the same fixed-effect ranks")
            h, g = blocks(d, t)
            normal += kron3(g[2], g[1], g[0])
            rhs += vec(multi_mode_product(yi, h))
            for k in range(3):
                g_sum[k] += g[k]
    for k, gk in enumerate(g_sum, start=1):
        w = np.linalg.eigvalsh(0.5 * (gk + gk.T))
        if w.min() <= 1e-12 * max(w.max(), np.finfo(float).tiny):
            raise RankDeficiencyError(k)
    try:
        c = linalg.cho_factor(0.5 * (normal + normal.T), lower=True)
    except linalg.LinAlgError:
        raise RankDeficiencyError(0, " (assembled system)") from None
    return unvec(linalg.cho_solve(c, rhs), ranks)


def gains(design, random, total):
    """Conditional-mean gain per mode: ``S_r B' S_total^{-1}``."""
    random, total = _as_triple(random), _as_triple(total)
    return [t.solve(b @ r.values).T for b, r, t in zip(design.b, random, total)]


def estimate_random_effects(y, f_full, design, random, total):
    """Conditional means of the random-effect cores for one sample or a batch."""
    y = np.asarray(y, dtype=float)
    if y.shape[-3:] != design.dims:
        raise ValueError(f"sample dims {y.shape[-3:]} do not match design {design.dims}")
    return multi_mode_product(y - f_full, gains(design, random, total))


def update_residual_cov(
    y,
    f_full,
    r_full,
    current,
    structure=("diagonal", "diagonal", "diagonal"),
    floor_ratio=DEFAULT_FLOOR_RATIO,
    normalization="trace",
    with_flag=False,
):
    """Flip-Flop sweep for the residual triple with residuals ``y - F~ - R~_i``.

    Each factor is projected onto the declared structure right after its
    update.
    """
    y = as_batch(y)
    structure = parse_structure(structure)
    for k, s in enumerate(structure):
        if not isinstance(s, str) and s.size != y.shape[k + 1]:
            raise ValueError(f"diagonal profile for mode {k + 1} has the wrong length")
    triple, hit = flipflop_sweep(y - f_full - r_full, current, structure, floor_ratio, normalization)
    return (triple, hit) if with_flag else triple


def recover_random_cov(total, residual, design, floor_ratio=DEFAULT_FLOOR_RATIO, align_gauge=True):
    """Random-effect factors ``B'(S_total - c S_resid)B``, projected to SPD.

    The total and residual triples are normalized independently, so their
    per-mode scales need not agree.  With ``align_gauge`` the residual factor
    is rescaled by ``c`` so both carry the same mass on the orthogonal
    complement of ``B``, where the random effects contribute nothing.  When
    the triples already satisfy ``S_total = B S_r B' + S_resid`` then
    ``c = 1``.
    """
    total, residual = _as_triple(total), _as_triple(residual)
    out = []
    for b, t, r in zip(design.b, total, residual):
        c = 1.0
        if align_gauge and b.shape[1] < b.shape[0]:
            perp_r = np.trace(r.values) - np.trace(b.T @ r.values @ b)
            perp_t = np.trace(t.values) - np.trace(b.T @ t.values @ b)
            if perp_r > 0 and perp_t > 0:
                c = perp_t / perp_r
        proj_t = b.T @ t.values @ b
        m = proj_t - c * (b.T @ r.values @ b)
        reference = np.trace(proj_t) / b.shape[1]
        out.append(spd_project_flagged(m, floor_ratio, reference)[0])
    return tuple(out)


def _vec_batch(t):
    """Canonical vectorization of every tensor in a (N, a, b, c) batch."""
    return np.ascontiguousarray(t.transpose(0, 3, 2, 1)).reshape(t.shape[0], -1)


def _unvec_batch(v, dims):
    return v.reshape((v.shape[0],) + tuple(dims[::-1])).transpose(0, 3, 2, 1)


def posterior_cov(design, random, residual):
    """Conditional covariance of vec(R_i) given Y_i, plus log|its inverse|.

    ``(C_r^{-1} + B' C_e^{-1} B)^{-1}`` with Kronecker ``C_r`` and ``C_e``;
    the matrix is only P2*Q2*R2 on a side.
    """
    random, residual = _as_triple(random), _as_triple(residual)
    prior = kron3(*[r.inverse() for r in random[::-1]])
    proj = [b.T @ e.solve(b) for b, e in zip(design.b, residual)]
    prec = prior + kron3(proj[2], proj[1], proj[0])
    c = linalg.cho_factor(0.5 * (prec + prec.T), lower=True)
    p = linalg.cho_solve(c, np.eye(prec.shape[0]))
    return 0.5 * (p + p.T), float(2.0 * np.log(np.diag(c[0])).sum())


def conditional_mean(y, f_full, design, random, residual, post=None):
    """Exact E[R_i | Y_i] when Y_i - F~ = [[R_i; B]] + E_i, both tensor normal.

    Uses the mixed-model normal equations, so the JKL x JKL covariance of
    ``Y_i`` is never formed.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 3
    y = as_batch(y)
    if y.shape[1:] != design.dims:
        raise ValueError(f"sample dims {y.shape[1:]} do not match design {design.dims}")
    residual = _as_triple(residual)
    p = post[0] if post is not None else posterior_cov(design, random, residual)[0]
    u = multi_mode_product(y - f_full, [e.solve(b).T for b, e in zip(design.b, residual)])
    r = _unvec_batch(_vec_batch(u) @ p, design.random_ranks)
    return r[0] if single else r


def mixed_loglik(y, f_full, design, random, residual, post=None):
    """Marginal log-likelihood with covariance ``B C_r B' + C_e`` (Kronecker C_r, C_e)."""
    y = as_batch(y)
    random, residual = _as_triple(random), _as_triple(residual)
    p, logdet_prec = post if post is not None else posterior_cov(design, random, residual)
    x = y - f_full
    w = whiten(x, residual)
    u = _vec_batch(multi_mode_product(x, [e.solve(b).T for b, e in zip(design.b, residual)]))
    quad = np.einsum("nijk,nijk->n", w, w) - np.einsum("ni,ij,nj->n", u, p, u)
    n_el = int(np.prod(y.shape[1:]))
    logdet = kron_logdet(residual) + kron_logdet(random) + logdet_prec
    return float(np.sum(-0.5 * (n_el * LOG_2PI + logdet + quad)))


def expected_mode_scatter(p, dims, mode, weights):
    """``E[Z_(k) W Z_(k)']`` for ``vec(Z) ~ N(0, p)``, ``W`` the Kronecker of
    the two other-mode ``weights`` (1-based ``mode``)."""
    p6 = np.asarray(p).reshape(tuple(dims) * 2, order="F")
    idx_i, idx_j = "abc", "def"
    terms = [p6]
    subs = [idx_i + idx_j]
    for k in range(3):
        if k + 1 != mode:
            terms.append(weights[k])
            subs.append(idx_i[k] + idx_j[k])
    out = idx_i[mode - 1] + idx_j[mode - 1]
    return np.einsum(",".join(subs) + "->" + out, *terms)


def _scatter(t, factors, k):
    w = whiten(t, factors, skip=k + 1)
    m = np.moveaxis(w, k + 1, 0).reshape(w.shape[k + 1], -1)
    return m @ m.T


def ecm_step(y, f_full, design, random, residual, structure, floor_ratio=DEFAULT_FLOOR_RATIO,
             normalization="trace"):
    """One expectation / conditional-maximization cycle for loop 2.

    The E-step gives the conditional means and the shared conditional
    covariance of the random cores.  Each residual factor, then each random
    factor, is set to its maximizer with the other factors held at their
    freshest values.  Returns ``(random, residual, r_hat, projected)``.
    """
    y = as_batch(y)
    n = y.shape[0]
    random, residual = list(_as_triple(random)), list(_as_triple(residual))
    structure = parse_structure(structure)
    p, _ = posterior_cov(design, random, residual)
    r_hat = conditional_mean(y, f_full, design, random, residual, (p, None))
    e_hat = y - f_full - multi_mode_product(r_hat, design.b)
    rdims = design.random_ranks
    projected = False
    for k in range(3):
        weights = [b.T @ e.solve(b) for b, e in zip(design.b, residual)]
        extra = design.b[k] @ expected_mode_scatter(p, rdims, k + 1, weights) @ design.b[k].T
        others = int(np.prod(y.shape[1:])) // y.shape[k + 1]
        s = (_scatter(e_hat, residual, k) + n * extra) / (n * others)
        s = apply_structure(0.5 * (s + s.T), structure[k])
        ref = np.trace(residual[k].values) / residual[k].dim
        residual[k], hit = spd_project_flagged(s, floor_ratio, ref)
        projected |= hit
    for k in range(3):
        weights = [r.inverse() for r in random]
        others = int(np.prod(rdims)) // rdims[k]
        s = (_scatter(r_hat, random, k) + n * expected_mode_scatter(p, rdims, k + 1, weights)) / (n * others)
        ref = np.trace(random[k].values) / random[k].dim
        random[k], hit = spd_project_flagged(0.5 * (s + s.T), floor_ratio, ref)
        projected |= hit
    residual = normalize_identifiability(residual, normalization)
    random = normalize_identifiability(random, normalization)
    return random, residual, r_hat, projected


def loglik(y, f_full, triple):
    """Total log-likelihood of the samples under a tensor normal with mean ``f_full``."""
    y = as_batch(y)
    f_full = np.asarray(f_full, dtype=float)
    triple = _as_triple(triple)
    if f_full.ndim == 4:
        d = TensorNormal3(np.zeros(y.shape[1:]), *triple)
        return float(np.sum(log_density(d, y - f_full)))
    d = TensorNormal3(f_full, *triple)
    return float(np.sum(log_density(d, y)))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def identity_triple(dims):
    return tuple(SpdMatrix.identity(d) for d in dims)


def initial_design(y, config):
    """Tucker decomposition of the mean response: design and starting core."""
    if config.ranks is None:
        raise ValueError("config.ranks is required when the design is 'auto'")
    ybar = as_batch(y).mean(axis=0)
    dec = hooi(ybar, config.ranks, max_iter=config.hooi_max_iter, tol=config.hooi_tol)
    random_ranks = config.random_ranks
    if config.b_columns is None and random_ranks is None:
        raise ValueError("config.random_ranks or config.b_columns is required")
    if random_ranks is not None and any(r > p for r, p in zip(random_ranks, dec.ranks)):
        raise ValueError(f"random ranks {random_ranks} exceed fixed ranks {dec.ranks}")
    design = TmeDesign.from_factors(dec.factors, random_ranks, config.b_columns)
    return design, dec.core


def _check_finite(value, loop, iteration):
    if not np.isfinite(value):
        raise CovarianceCollapseError(loop, iteration)


def fixed_effects_loop(y, design, f0, config, loop=1):
    """Alternate total-covariance sweeps with the GLS core until convergence.

    Returns ``(f_hat, total_triple, trace)``.
    """
    dims = design.dims
    total = identity_triple(dims)
    f_hat = f0
    f_full = tucker_apply(f_hat, *design.a)
    ybar = y.mean(axis=0) if config.centering == "mean" else None
    ll0 = loglik(y, f_full, total)
    _check_finite(ll0, loop, 0)
    records = []
    converged = False
    for k in range(1, config.loop1_max + 1):
        t0 = time.perf_counter()
        center = ybar if ybar is not None else f_full
        new_total, hit = update_total_cov(
            y, center, total, config.eigen_floor_ratio, config.normalization, with_flag=True
        )
        f_hat = estimate_fixed(y, design, new_total)
        f_full = tucker_apply(f_hat, *design.a)
        ll = loglik(y, f_full, new_total)
        _check_finite(ll, loop, k)
        idx = convergence_indices(new_total, total)
        total = new_total
        records.append(TraceRecord(k, *idx, ll, time.perf_counter() - t0, hit))
        if max(idx) < config.loop1_tol:
            converged = True
            break
    return f_hat, total, ConvergenceTrace(tuple(records), ll0, converged)


def initial_loop2(y, f_full, design, total, config, sweeps=3):
    """Starting residual and random triples for loop 2.

    The residual starts at the total triple projected onto the declared
    structure.  The random triple starts at a Flip-Flop fit of the data
    projected onto the random-effect subspace, ``(Y_i - F~) x_k B_k'``,
    whose covariance is the random one plus the projected noise.  Both
    start above their targets, which keeps the first E-steps away from the
    degenerate zero-variance corner.
    """
    floor = config.eigen_floor_ratio
    structure = config.residual_structure
    residual = []
    for t, s in zip(total, structure):
        residual.append(spd_project_flagged(apply_structure(t.values, s), floor)[0])
    residual = normalize_identifiability(residual, config.normalization)
    z = multi_mode_product(as_batch(y) - f_full, [b.T for b in design.b])
    random = identity_triple(design.random_ranks)
    for _ in range(sweeps):
        random, _ = flipflop_sweep(z, random, None, floor, config.normalization)
    return residual, random


def fit_tme(y, design="auto", config=None):
    """Fit the tensor mixed effects model by the double Flip-Flop algorithm.

    ``design`` is a :class:`TmeDesign` or ``"auto"``; in the latter case the
    fixed-effect designs come from HOOI on the mean response tensor and the
    random-effect designs are column subsets of them.
    """
    config = config or TmeConfig()
    y = as_batch(y)
    n, J, K, L = y.shape
    verdict = existence_check(J, K, L, n, config.residual_structure)
    if verdict.status == "necessary_violated":
        raise ExistenceError(verdict)
    if verdict.status == "sufficient_unmet":
        warnings.warn(verdict.message, RuntimeWarning, stacklevel=2)

    if isinstance(design, str):
        if design != "auto":
            raise ValueError(f"design must be a TmeDesign or 'auto', got {design!r}")
        design, f0 = initial_design(y, config)
    else:
        if design.dims != (J, K, L):
            raise ValueError(f"design dims {design.dims} do not match samples {(J, K, L)}")
        f0 = estimate_fixed(y, design, identity_triple(design.dims))

    # Loop 1: fixed effects and total covariances.
    f_hat, total, trace1 = fixed_effects_loop(y, design, f0, config, loop=1)
    f_full = tucker_apply(f_hat, *design.a)

    # Loop 2: random effects and residual covariances.
    floor = config.eigen_floor_ratio
    residual, random = initial_loop2(y, f_full, design, total, config)
    post = posterior_cov(design, random, residual)
    r_hat = conditional_mean(y, f_full, design, random, residual, post)
    ll0 = mixed_loglik(y, f_full, design, random, residual, post)
    _check_finite(ll0, 2, 0)
    records = []
    converged = False
    for t in range(1, config.loop2_max + 1):
        t0 = time.perf_counter()
        new_random, new_residual, _, hit = ecm_step(
            y, f_full, design, random, residual, config.residual_structure, floor, config.normalization
        )
        post = posterior_cov(design, new_random, new_residual)
        r_hat = conditional_mean(y, f_full, design, new_random, new_residual, post)
        ll = mixed_loglik(y, f_full, design, new_random, new_residual, post)
        _check_finite(ll, 2, t)
        idx = convergence_indices(new_residual, residual)
        residual, random = new_residual, new_random
        records.append(TraceRecord(t, *idx, ll, time.perf_counter() - t0, hit))
        if max(idx) < config.loop2_tol:
            converged = True
            break
    trace2 = ConvergenceTrace(tuple(records), ll0, converged)

    return TmeFit(
        f_hat=f_hat,
        design=design,
        total=total,
        residual=residual,
        random=random,
        r_hat=r_hat,
        trace1=trace1,
        trace2=trace2,
        loglik=trace2.logliks[-1],
        config=config,
    )
