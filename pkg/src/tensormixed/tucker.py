"""Rank-(P, Q, R) Tucker decomposition by HOSVD and HOOI, plus rank selection."""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import MODES, as_tensor3, frob_norm, matricize, multi_mode_product, tucker_apply


class NoAdmissibleRankError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TuckerDecomp:
    core: np.ndarray
    factors: tuple
    rel_error: float
    history: tuple = field(default=(), repr=False)

    @property
    def ranks(self):
        return self.core.shape

    def full(self):
        return tucker_apply(self.core, *self.factors)


@dataclass(frozen=True)
class RankSelection:
    chosen: tuple
    sparsity_threshold: float
    # (ranks, rel_error, min row L1 mass of the mode-1 core unfolding, passed)
    candidates_evaluated: tuple
    decomposition: TuckerDecomp = field(repr=False, compare=False, default=None)


def fix_signs(u):
    """Flip columns so each column's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def leading_left_singular(m, r):
    u, _, _ = np.linalg.svd(m, full_matrices=False)
    return fix_signs(u[:, :r])


def _check_ranks(dims, ranks):
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 3:
        raise ValueError("ranks must have three entries")
    for k, (r, d) in enumerate(zip(ranks, dims), start=1):
        if not 1 <= r <= d:
            raise ValueError(f"rank {r} infeasible for mode {k} of size {d}")
    return ranks


def _rel_error(t, core, factors, norm_t):
    # The shortcut sqrt(||t||^2 - ||G||^2) cancels badly near exact fits.
    if norm_t == 0:
        return 0.0
    return frob_norm(t - tucker_apply(core, *factors)) / norm_t


def hosvd(t, ranks):
    t = as_tensor3(t)
    ranks = _check_ranks(t.shape, ranks)
    factors = tuple(leading_left_singular(matricize(t, k), r) for k, r in zip(MODES, ranks))
    core = multi_mode_product(t, [f.T for f in factors])
    return TuckerDecomp(core, factors, _rel_error(t, core, factors, frob_norm(t)))


def hooi(t, ranks, max_iter=50, tol=1e-8):
    """Higher-order orthogonal iteration started from HOSVD.

    Stops once the relative error improves by less than ``tol`` or after
    ``max_iter`` sweeps.  ``history`` holds the error after every sweep,
    starting with the HOSVD value.
    """
    t = as_tensor3(t)
    start = hosvd(t, ranks)
    ranks = start.ranks
    norm_t = frob_norm(t)
    factors = list(start.factors)
    err = start.rel_error
    history = [err]
    core = start.core
    for _ in range(max_iter):
        for k in range(3):
            proj = [None if j == k else factors[j].T for j in range(3)]
            y = multi_mode_product(t, proj)
            factors[k] = leading_left_singular(matricize(y, k + 1), ranks[k])
        new_core = multi_mode_product(t, [f.T for f in factors])
        new_err = _rel_error(t, new_core, factors, norm_t)
        improvement = err - new_err
        core, err = new_core, new_err
        history.append(err)
        if improvement < tol:
            break
    return TuckerDecomp(core, tuple(factors), err, tuple(history))


def core_row_mass(core):
    """L1 mass of every row of the mode-1 unfolding of a core tensor."""
    return np.abs(matricize(core, 1)).sum(axis=1)


def rank_select(t, candidate_ranks, sparsity_threshold, max_iter=50, tol=1e-8):
    """Pick the largest admissible Tucker ranks.

    A candidate passes when every mode-1 row of its HOOI core has L1 mass
    above ``sparsity_threshold``.  Among passing candidates the one with
    the largest ``P + Q + R`` wins; ties go to the smaller relative error,
    then to the lexicographically smaller ranks.
    """
    cands = [tuple(int(r) for r in c) for c in candidate_ranks]
    if not cands:
        raise ValueError("candidate_ranks is empty")
    t = as_tensor3(t)
    table = []
    fits = {}
    for ranks in cands:
        dec = hooi(t, ranks, max_iter=max_iter, tol=tol)
        mass = core_row_mass(dec.core)
        passed = bool(np.all(mass > sparsity_threshold))
        table.append((ranks, dec.rel_error, float(mass.min()), passed))
        fits[ranks] = dec
    passing = [row for row in table if row[3]]
    if not passing:
        raise NoAdmissibleRankError(
            f"no candidate rank passes the sparsity threshold {sparsity_threshold}"
        )
    best = min(passing, key=lambda row: (-sum(row[0]), row[1], row[0]))
    return RankSelection(best[0], float(sparsity_threshold), tuple(table), fits[best[0]])


def proportional_ranks(dims, fractions):
    """Candidate ranks keeping P:Q:R close to J:K:L, one per fraction in (0, 1]."""
    out = []
    for f in fractions:
        cand = tuple(min(d, max(1, round(f * d))) for d in dims)
        if cand not in out:
            out.append(cand)
    return out


def rank_grid(max_ranks, min_ranks=(1, 1, 1)):
    """Full product grid of candidate ranks between ``min_ranks`` and ``max_ranks``."""
    ranges = [range(lo, hi + 1) for lo, hi in zip(min_ranks, max_ranks)]
    return list(itertools.product(*ranges))
