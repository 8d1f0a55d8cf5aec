"""Comparison estimators: tensor fixed effects (TFE) and Tucker of the mean (TD)."""

import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import as_batch, multi_mode_product, tucker_apply
from .tme import (
    ConvergenceTrace,
    TmeConfig,
    TmeDesign,
    TmeFit,
    estimate_fixed,
    conditional_mean,
    existence_check,
    ExistenceError,
    fixed_effects_loop,
    identity_triple,
)
from .tucker import hooi


@dataclass(frozen=True, eq=False)
class BenchFit:
    kind: str  # "TFE" | "TD"
    f_hat: np.ndarray
    factors: tuple
    residual: tuple = None
    seconds: float = 0.0
    trace: ConvergenceTrace = field(default=None, repr=False)

    @property
    def f_full(self):
        return tucker_apply(self.f_hat, *self.factors)


def fit_tfe(y, design="auto", config=None):
    """Tensor normal model with a Tucker-structured mean and no random effects.

    Runs the same alternating scheme as the first loop of :func:`fit_tme`,
    with the residual covariance triple in place of the total one.
    """
    config = config or TmeConfig()
    t0 = time.perf_counter()
    y = as_batch(y)
    n, J, K, L = y.shape
    verdict = existence_check(J, K, L, n)
    if verdict.status == "necessary_violated":
        raise ExistenceError(verdict)
    if isinstance(design, str):
        if config.ranks is None:
            raise ValueError("config.ranks is required when the design is 'auto'")
        dec = hooi(y.mean(axis=0), config.ranks, config.hooi_max_iter, config.hooi_tol)
        # B plays no role here; keep the full A so the container validates.
        design = TmeDesign.from_factors(dec.factors, dec.ranks)
        f0 = dec.core
    else:
        f0 = estimate_fixed(y, design, identity_triple(design.dims))
    f_hat, residual, trace = fixed_effects_loop(y, design, f0, config)
    return BenchFit("TFE", f_hat, design.a, residual, time.perf_counter() - t0, trace)


def fit_td(y, ranks, max_iter=50, tol=1e-8):
    """HOOI of the mean response tensor; every sample is predicted by its reconstruction."""
    t0 = time.perf_counter()
    y = as_batch(y)
    dec = hooi(y.mean(axis=0), ranks, max_iter=max_iter, tol=tol)
    return BenchFit("TD", dec.core, dec.factors, None, time.perf_counter() - t0)


def predict(fit, y=None, include_random=True):
    """Fitted responses.

    TFE and TD predict the fixed effect for every sample.  A TME fit adds the
    conditional-mean random effects: for ``y=None`` the in-sample estimates
    stored on the fit, otherwise those computed for the supplied samples.
    With ``include_random=False`` TME also predicts the fixed effect only.
    """
    f_full = fit.f_full
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape[-3:] != f_full.shape:
            raise ValueError(f"sample dims {y.shape[-3:]} do not match model {f_full.shape}")
    if isinstance(fit, TmeFit) and include_random:
        if y is None:
            return f_full + fit.r_full
        r_hat = conditional_mean(y, f_full, fit.design, fit.random, fit.residual)
        return f_full + multi_mode_product(r_hat, fit.design.b)
    if y is None:
        return f_full
    return np.broadcast_to(f_full, y.shape).copy()


def mse(y, y_hat):
    """Mean squared error per sample: ||Y_i - Yhat_i||_F^2 / JKL.

    Returns a float for a single tensor and an array for a batch.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        y_hat = np.broadcast_to(y_hat, y.shape) if y_hat.shape == y.shape[-3:] else y_hat
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    d = (y - y_hat) ** 2
    out = d.reshape(d.shape[: d.ndim - 3] + (-1,)).mean(axis=-1)
    return float(out) if y.ndim == 3 else out
