"""Ground-truth generators, accuracy metrics and the replication harness."""

import dataclasses
import io
import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .benchmarks import fit_td, fit_tfe, mse, predict
from .normal import SpdMatrix, TensorNormal3, sample, spd_project
from .tensor import frob_norm, multi_mode_product, tucker_apply
from .tme import TmeConfig, TmeDesign, fit_tme, normalize_identifiability
from .tucker import fix_signs, hosvd

METHODS = ("TME", "TFE", "TD")


@dataclass(frozen=True)
class SimConfig:
    """Simulation design.

    ``random_var`` and ``noise_var`` are the average per-entry variances of
    the random-effect and residual terms; ``fixed_scale`` is the standard
    deviation of the fixed-effect core entries.  ``noise`` selects the
    residual recipe: ``"generic"`` (general PD mode-1 factor, isotropic
    mode-2/3 factors) or ``"raman"`` (diagonal signal-dependent mode-1
    factor, identity mode-2/3 factors).
    """

    dims: tuple = (30, 5, 5)
    ranks: tuple = (8, 3, 3)
    random_ranks: tuple = (3, 2, 2)
    n: int = 1000
    replicates: int = 20
    seed: int = 0
    noise: str = "generic"
    signal_profile: np.ndarray = field(default=None, repr=False, compare=False)
    fixed_scale: float = 100.0
    random_var: float = 2.5
    noise_var: float = 10.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        ranks = tuple(int(r) for r in self.ranks)
        rranks = tuple(int(r) for r in self.random_ranks)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "ranks", ranks)
        object.__setattr__(self, "random_ranks", rranks)
        if len(dims) != 3 or len(ranks) != 3 or len(rranks) != 3:
            raise ValueError("dims and ranks need three entries")
        for d, p, q in zip(dims, ranks, rranks):
            if not 1 <= q <= p <= d:
                raise ValueError(f"infeasible dims/ranks: {dims}, {ranks}, {rranks}")
        if self.n < 1 or self.replicates < 1:
            raise ValueError("n and replicates must be at least 1")
        if self.noise not in ("generic", "raman"):
            raise ValueError(f"unknown noise recipe {self.noise!r}")
        if self.noise == "raman":
            profile = self.signal_profile
            if profile is None:
                profile = raman_profile(dims[0])
            profile = np.asarray(profile, dtype=float)
            if profile.shape != (dims[0],) or np.any(profile <= 0):
                raise ValueError("signal_profile must be a positive vector of length J")
            object.__setattr__(self, "signal_profile", profile)
        if self.fixed_scale < 0 or self.random_var < 0 or self.noise_var <= 0:
            raise ValueError("scales must be non-negative (noise_var positive)")

    @classmethod
    def reference(cls, **overrides):
        """30x5x5 responses, 8x3x3 fixed and 3x2x2 random cores."""
        return cls(**overrides)

    @classmethod
    def surrogate(cls, **overrides):
        """256x5x5 Raman-like responses, 8x3x3 fixed and 4x2x2 random cores."""
        base = dict(dims=(256, 5, 5), ranks=(8, 3, 3), random_ranks=(4, 2, 2), noise="raman")
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class SimTruth:
    design: TmeDesign
    f: np.ndarray
    random: tuple
    residual: tuple
    samples: np.ndarray
    r: np.ndarray = field(repr=False, default=None)

    @property
    def f_full(self):
        return tucker_apply(self.f, *self.design.a)

    @property
    def total(self):
        """Per-mode ``B S_r B' + S_resid``."""
        return tuple(
            SpdMatrix.from_array(b @ r.values @ b.T + e.values)
            for b, r, e in zip(self.design.b, self.random, self.residual)
        )


def raman_profile(J, baseline=1.0, gain=4.0):
    """Signal-dependent noise variances for a synthetic Raman-like spectrum.

    The spectrum is a sum of Lorentzian bands on a flat baseline; variance
    grows linearly with intensity, as for shot-noise-limited detectors.
    """
    x = np.linspace(0.0, 1.0, J)
    bands = [(0.18, 0.020, 0.35), (0.47, 0.012, 1.0), (0.55, 0.010, 0.25), (0.86, 0.025, 0.6)]
    signal = np.zeros(J)
    for center, width, height in bands:
        signal += height / (1.0 + ((x - center) / width) ** 2)
    return baseline + gain * signal


def _random_orthonormal(rng, n, r):
    q, rr = np.linalg.qr(rng.standard_normal((n, r)))
    return q * np.sign(np.diag(rr))


def _random_spd(rng, n):
    g = rng.standard_normal((n, 2 * n))
    return spd_project(g @ g.T / n).values


def _scale_to(mats, target):
    """Rescale the mode-1 matrix so the product of traces equals ``target``."""
    prod = float(np.prod([np.trace(m) for m in mats]))
    mats = list(mats)
    mats[0] = mats[0] * (target / prod)
    return tuple(SpdMatrix.from_array(m) for m in mats)


def gen_truth(cfg, rng):
    """Draw a ground truth and ``cfg.n`` samples from the mixed effects model.

    The fixed core is rotated to its all-orthogonal form, so the design
    columns are ordered by the energy of the mean response and the random
    designs (leading columns) are the ones a Tucker fit of the mean recovers.
    """
    J, K, L = cfg.dims
    n_el = J * K * L
    a = [_random_orthonormal(rng, d, r) for d, r in zip(cfg.dims, cfg.ranks)]
    f = cfg.fixed_scale * rng.standard_normal(cfg.ranks)
    if cfg.fixed_scale > 0:
        rot = hosvd(f, f.shape)
        f = rot.core
        a = [ak @ u for ak, u in zip(a, rot.factors)]
    # Same sign convention as the fitted factors.
    signed = [fix_signs(ak) for ak in a]
    flips = [np.sign(np.sum(s * ak, axis=0)) for s, ak in zip(signed, a)]
    f = multi_mode_product(f, [np.diag(fl) for fl in flips])
    design = TmeDesign.from_factors(signed, cfg.random_ranks)

    if cfg.noise == "raman":
        rand = [0.5 * np.diag(rng.uniform(0.0, 2.0, r)) + 0.5 * np.eye(r) for r in cfg.random_ranks]
        resid = [np.diag(cfg.signal_profile), np.eye(K), np.eye(L)]
    else:
        rand = [_random_spd(rng, r) for r in cfg.random_ranks]
        resid = [_random_spd(rng, J), np.eye(K), np.eye(L)]
    floor = 1e-300
    random = _scale_to(rand, max(cfg.random_var * n_el, floor))
    residual = _scale_to(resid, cfg.noise_var * n_el)

    f_full = tucker_apply(f, *design.a)
    r = sample(TensorNormal3(np.zeros(cfg.random_ranks), *random), cfg.n, rng)
    e = sample(TensorNormal3(np.zeros(cfg.dims), *residual), cfg.n, rng)
    samples = f_full + multi_mode_product(r, design.b) + e
    return SimTruth(design, f, random, residual, samples, r)


def metric_D(estimate, truth):
    """Relative Frobenius error ||estimate - truth|| / ||truth||."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    denom = frob_norm(tru)
    if denom == 0:
        raise ValueError("truth has zero norm")
    return frob_norm(est - tru) / denom


def metric_D_triple(estimate, truth, normalization="trace"):
    """Per-mode relative errors after fixing the scale gauge on both sides."""
    est = normalize_identifiability(estimate, normalization)
    tru = normalize_identifiability(truth, normalization)
    return tuple(metric_D(e.values, t.values) for e, t in zip(est, tru))


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

ACCURACY_COLUMNS = (
    "n", "replicates", "failures",
    "iter1_mean", "iter1_sd", "iter2_mean", "iter2_sd",
    "D_F_mean", "D_F_sd",
    "D_Sigma_i_mean", "D_Sigma_i_sd", "D_Psi_i_mean", "D_Psi_i_sd", "D_Omega_i_mean", "D_Omega_i_sd",
    "D_Sigma_e_mean", "D_Sigma_e_sd", "D_Psi_e_mean", "D_Psi_e_sd", "D_Omega_e_mean", "D_Omega_e_sd",
)
TIMING_COLUMNS = ("n", "method", "time1_mean", "time1_sd", "time2_mean", "time2_sd", "total_mean")
_T2_FIELDS = (
    "iter1", "iter2", "D_F", "D_Sigma_i", "D_Psi_i", "D_Omega_i", "D_Sigma_e", "D_Psi_e", "D_Omega_e",
)


def replicate_seed(seed, n, rep):
    return np.random.default_rng([int(seed), int(n), int(rep)])


def run_replicate(cfg, n, rep, methods=METHODS, tme_config=None):
    """One replicate at sample size ``n``: fresh truth, every method fitted.

    Returns a list of per-method record dicts.  Fit errors are recorded in
    the ``error`` field instead of being raised.
    """
    rng = replicate_seed(cfg.seed, n, rep)
    truth = gen_truth(dataclasses.replace(cfg, n=n), rng)
    y = truth.samples
    tme_config = tme_config or TmeConfig(ranks=cfg.ranks, random_ranks=cfg.random_ranks)
    f_true = truth.f_full
    out = []
    for method in methods:
        rec = {"n": n, "rep": rep, "method": method, "error": ""}
        t0 = time.perf_counter()
        try:
            if method == "TME":
                fit = fit_tme(y, "auto", tme_config)
                rec["iter1"] = fit.trace1.iterations
                rec["iter2"] = fit.trace2.iterations
                rec["converged"] = fit.converged
                rec["D_F"] = metric_D(fit.f_full, f_true)
                rec["D_Sigma_i"], rec["D_Psi_i"], rec["D_Omega_i"] = metric_D_triple(
                    fit.total, truth.total, tme_config.normalization
                )
                rec["D_Sigma_e"], rec["D_Psi_e"], rec["D_Omega_e"] = metric_D_triple(
                    fit.residual, truth.residual, tme_config.normalization
                )
                rec["time1"] = fit.trace1.mean_seconds()
                rec["time2"] = fit.trace2.mean_seconds()
                rec["logliks1"] = fit.trace1.logliks
            elif method == "TFE":
                fit = fit_tfe(y, "auto", tme_config)
                rec["iter1"] = fit.trace.iterations
                rec["D_F"] = metric_D(fit.f_full, f_true)
                rec["time1"] = fit.trace.mean_seconds()
            elif method == "TD":
                fit = fit_td(y, cfg.ranks)
                rec["D_F"] = metric_D(fit.f_full, f_true)
            else:
                raise ValueError(f"unknown method {method!r}")
            rec["mse"] = float(np.mean(mse(y, predict(fit))))
        except Exception as exc:  # recorded per cell, the study goes on
            rec["error"] = f"{type(exc).__name__}: {exc}"
        rec["seconds"] = time.perf_counter() - t0
        out.append(rec)
    return out


def _mean_sd(values):
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


def _fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.6g}"


@dataclass
class StudyReport:
    """Per-replicate records of a study plus table-shaped aggregates."""

    sizes: tuple
    methods: tuple
    replicates: int
    records: list = field(default_factory=list)

    def select(self, n=None, method=None, ok=True):
        return [
            r for r in self.records
            if (n is None or r["n"] == n)
            and (method is None or r["method"] == method)
            and (not ok or not r["error"])
        ]

    def stat(self, n, method, key):
        return _mean_sd([r.get(key) for r in self.select(n, method)])

    def wins(self, n, better="TME", worse="TFE"):
        """Replicates where ``better`` has strictly lower MSE than ``worse``."""
        a = {r["rep"]: r["mse"] for r in self.select(n, better)}
        b = {r["rep"]: r["mse"] for r in self.select(n, worse)}
        return sum(1 for rep in a if rep in b and a[rep] < b[rep])

    def accuracy_rows(self):
        rows = []
        for n in self.sizes:
            recs = self.select(n, "TME")
            failures = len(self.select(n, "TME", ok=False)) - len(recs)
            row = [n, self.replicates, failures]
            for key in _T2_FIELDS:
                row.extend(self.stat(n, "TME", key))
            rows.append(row)
        return rows

    def prediction_columns(self):
        cols = ["n"]
        for m in self.methods:
            cols += [f"mse_{m.lower()}_mean", f"mse_{m.lower()}_sd"]
        if "TME" in self.methods and "TFE" in self.methods:
            cols += ["tme_wins", "tme_beats_tfe"]
        return cols

    def prediction_rows(self):
        rows = []
        for n in self.sizes:
            row = [n]
            for m in self.methods:
                row.extend(self.stat(n, m, "mse"))
            if "TME" in self.methods and "TFE" in self.methods:
                w = self.wins(n)
                row += [w, "PASS" if w >= 0.8 * self.replicates else "FAIL"]
            rows.append(row)
        return rows

    def timing_rows(self):
        rows = []
        for n in self.sizes:
            for m in self.methods:
                t1 = self.stat(n, m, "time1")
                t2 = self.stat(n, m, "time2")
                rows.append([n, m, *t1, *t2, self.stat(n, m, "seconds")[0]])
        return rows

    @staticmethod
    def _csv(columns, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def accuracy_csv(self):
        return self._csv(ACCURACY_COLUMNS, self.accuracy_rows())

    def prediction_csv(self):
        return self._csv(self.prediction_columns(), self.prediction_rows())

    def timings_csv(self):
        return self._csv(TIMING_COLUMNS, self.timing_rows())


def run_study(cfg, sizes, replicates=None, methods=METHODS, tme_config=None, n_jobs=1):
    """Replicate the simulation over a grid of sample sizes.

    Every (size, replicate) cell draws its own truth from a seed derived from
    ``cfg.seed``, so the report is a pure function of the inputs apart from
    the timing fields.
    """
    sizes = tuple(int(n) for n in sizes)
    if not sizes:
        raise ValueError("sample-size grid is empty")
    replicates = int(replicates or cfg.replicates)
    methods = tuple(m.upper() for m in methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    cells = [(n, rep) for n in sizes for rep in range(replicates)]
    if n_jobs == 1:
        results = [run_replicate(cfg, n, rep, methods, tme_config) for n, rep in cells]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(run_replicate, cfg, n, rep, methods, tme_config) for n, rep in cells]
            results = [f.result() for f in futures]
    report = StudyReport(sizes, methods, replicates)
    for recs in results:
        report.records.extend(recs)
    return report
