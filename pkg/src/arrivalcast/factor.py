"""Constrained dynamic latent factor model for hourly count intensities.

The nonstationary intensity matrix is modeled on the log scale as a small
number of smooth intraday factor curves weighted by per-day loadings.  The
loadings are optionally constrained through calendar incidence (a
piecewise-constant day-of-week effect plus a cyclic week-of-year effect),
and both factors and week effects can be spline-smoothed.

Estimation alternates two Poisson regressions (loadings given factors,
factors given loadings) with an SVD renormalization in between, starting
from an SVD of the zero-guarded log counts, until the relative change of
the fitted log intensity matrix is small.

Identifiability notes:

* factor columns are kept orthonormal by the SVD step, with each column's
  sign flipped so its largest-magnitude entry is positive;
* within each factor, a constant can shift freely between the day-of-week
  and week-of-year effects, so the week effect is constrained to sum to
  zero over the 53 week knots, and the day-of-week block carries the level.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .data import CalendarDesign, HOURS_PER_DAY
from .spline import (BasisSpec, IrlsControl, PenalizedDesign, PenaltyBlock,
                     evaluate_basis, fit_penalized_poisson, make_basis)

VARIANTS = ("plain", "constrained", "constrained_smoothed")

# week w of one year wraps smoothly into week 1 of the next: knots at
# 1..54 with position 54 identified with position 1, one value per week
WEEK_BASIS = BasisSpec("cyclic_cubic", dim=53, domain=(1.0, 54.0))
HOUR_BASIS = BasisSpec("cubic", dim=10, domain=(1.0, float(HOURS_PER_DAY)))

N_DOW = 7
N_WOY = 53
N_CONSTRAINTS = N_DOW + N_WOY


class FactorModelError(ValueError):
    """Invalid factor-model inputs or unusable model state."""


def _deviance(y: np.ndarray, mu: np.ndarray) -> float:
    return float(2.0 * np.sum(xlogy(y, y / mu) - (y - mu)))


def _center_basis() -> np.ndarray:
    """Orthonormal basis of the sum-to-zero subspace of week values."""
    q, _ = np.linalg.qr(np.ones((N_WOY, 1)), mode="complete")
    return q[:, 1:]


_Z = _center_basis()              # 53 x 52
_WEEK_EVAL, _WEEK_PEN = make_basis(WEEK_BASIS, np.arange(1.0, N_WOY + 1.0))
_WEEK_PEN_C = _Z.T @ _WEEK_PEN @ _Z


@dataclass(frozen=True)
class FactorModel:
    """Fitted factor model: log(mu) = L F' with L = H B under constraints."""

    K: int
    variant: str
    F: np.ndarray                  # hours x K, orthonormal columns
    B: np.ndarray                  # (7+53) x K, or days x K for "plain"
    L: np.ndarray                  # days x K
    mu: np.ndarray                 # days x hours fitted intensity
    loading_lams: tuple[float, ...] | None = None   # week-block smoothing per factor
    factor_lams: tuple[float, ...] | None = None    # hour-block smoothing per factor

    @property
    def dow_effects(self) -> np.ndarray:
        if self.variant == "plain":
            raise FactorModelError("plain model has no calendar effects")
        return self.B[:N_DOW]

    @property
    def week_effects(self) -> np.ndarray:
        if self.variant == "plain":
            raise FactorModelError("plain model has no calendar effects")
        return self.B[N_DOW:]


@dataclass(frozen=True)
class FitReport:
    iterations: int
    deviance_trace: tuple[float, ...]
    rel_change_trace: tuple[float, ...]
    converged: bool


@dataclass(frozen=True)
class FactorControl:
    tol: float = 1e-6          # relative Frobenius change of log(M)
    max_iter: int = 50
    c: float = 0.5             # zero guard in the SVD initialization
    irls: IrlsControl = field(default_factory=IrlsControl)


def init_svd(Y: np.ndarray, c: float, K: int) -> tuple[np.ndarray, np.ndarray]:
    """SVD initialization on log(Y v c); no smoothing, no constraints."""
    Y = np.asarray(Y, dtype=float)
    d, m = Y.shape
    if not 0.0 < c < 1.0:
        raise FactorModelError("zero guard c must lie in (0, 1)")
    if not 1 <= K <= min(d, m):
        raise FactorModelError(f"K={K} outside 1..min(d, m)={min(d, m)}")
    logY = np.log(np.maximum(Y, c))
    U, s, Vt = np.linalg.svd(logY, full_matrices=False)
    if s[K - 1] <= max(d, m) * np.finfo(float).eps * max(s[0], 1e-300):
        raise FactorModelError(f"K={K} exceeds the numeric rank of log counts")
    L0 = U[:, :K] * s[:K]
    F0 = Vt[:K].T
    L0, F0 = _fix_signs(L0, F0)
    return L0, F0


def _fix_signs(B: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # make the largest-magnitude entry of each factor column positive
    B = B.copy()
    F = F.copy()
    for k in range(F.shape[1]):
        idx = int(np.argmax(np.abs(F[:, k])))
        if F[idx, k] < 0:
            F[:, k] = -F[:, k]
            B[:, k] = -B[:, k]
    return B, F


def orthonormalize(B: np.ndarray, F_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SVD renormalization: B F_raw' = U D V', return (U D, V).

    Preserves the product while restoring orthonormal factor columns.
    """
    B = np.asarray(B, dtype=float)
    F_raw = np.asarray(F_raw, dtype=float)
    K = B.shape[1]
    if F_raw.shape[1] != K:
        raise FactorModelError("loading and factor column counts differ")
    U, s, Vt = np.linalg.svd(B @ F_raw.T, full_matrices=False)
    if s[K - 1] < 1e-12 * max(s[0], 1e-300):
        raise FactorModelError(
            f"rank collapse in renormalization (singular value {s[K-1]:.2e}); "
            "consider a smaller K")
    return _fix_signs(U[:, :K] * s[:K], Vt[:K].T)


def _loading_design(F: np.ndarray, design: CalendarDesign,
                    smoothing: bool, lams: np.ndarray) -> PenalizedDesign:
    d = design.n_days
    m, K = F.shape
    n = d * m
    width = N_DOW + (N_WOY - 1)    # week block is centered: 52 free columns
    X = np.empty((n, K * width))
    dow_rows = np.repeat(design.H1, m, axis=0)
    week_rows = np.repeat(_Z[design.woy - 1], m, axis=0)
    blocks = []
    for k in range(K):
        a = k * width
        fk = np.tile(F[:, k], d)[:, None]
        X[:, a:a + N_DOW] = dow_rows * fk
        X[:, a + N_DOW:a + width] = week_rows * fk
        blocks.append(PenaltyBlock(a + N_DOW, a + width, _WEEK_PEN_C,
                                   lam=float(lams[k]) if smoothing else 0.0,
                                   optimize=smoothing))
    return PenalizedDesign(X=X, blocks=tuple(blocks))


def update_loadings(Y: np.ndarray, F: np.ndarray,
                    design: CalendarDesign | None, smoothing: bool,
                    lams: np.ndarray | None = None,
                    warm: np.ndarray | None = None,
                    irls: IrlsControl = IrlsControl()):
    """Fit loadings given fixed factors.

    With calendar constraints this is one Poisson regression whose
    per-factor covariates are the factor value times a day-of-week
    indicator (unpenalized) and times a cyclic week-of-year basis
    (penalized when smoothing).  Returns (B, lams) where B stacks the 7
    day-of-week rows over the 53 week rows per factor.

    Without a design (plain variant) each day's loading vector is a
    separate unpenalized Poisson fit on the factor curves, and the
    returned B is the days x K loading matrix itself.
    """
    Y = np.asarray(Y, dtype=float)
    d, m = Y.shape
    K = F.shape[1]

    if design is None:
        B = np.empty((d, K))
        for i in range(d):
            b0 = warm[i] if warm is not None else None
            fit = fit_penalized_poisson(PenalizedDesign(X=F), Y[i],
                                        control=irls, beta0=b0)
            B[i] = fit.coefficients
        return B, None

    lams = np.ones(K) if lams is None else lams
    pdesign = _loading_design(F, design, smoothing, lams)
    beta0 = None
    if warm is not None:
        width = N_DOW + (N_WOY - 1)
        beta0 = np.empty(K * width)
        for k in range(K):
            a = k * width
            beta0[a:a + N_DOW] = warm[:N_DOW, k]
            beta0[a + N_DOW:a + width] = _Z.T @ warm[N_DOW:, k]
    fit = fit_penalized_poisson(pdesign, Y.reshape(-1), control=irls, beta0=beta0)

    width = N_DOW + (N_WOY - 1)
    B = np.empty((N_CONSTRAINTS, K))
    out_lams = np.empty(K)
    for k in range(K):
        a = k * width
        B[:N_DOW, k] = fit.coefficients[a:a + N_DOW]
        B[N_DOW:, k] = _Z @ fit.coefficients[a + N_DOW:a + width]
        out_lams[k] = fit.smoothing[k]
    return B, out_lams


def update_factors(Y: np.ndarray, L: np.ndarray, smoothing: bool,
                   lams: np.ndarray | None = None,
                   warm: np.ndarray | None = None,
                   irls: IrlsControl = IrlsControl()):
    """Fit factor curves given fixed loadings.

    Each factor is a function of the hour index (a 10-dimensional cubic
    spline when smoothing, otherwise one free coefficient per hour),
    entering the linear predictor multiplied by its per-day loading.
    Returns (F_raw, lams) with F_raw evaluated at hours 1..24.
    """
    Y = np.asarray(Y, dtype=float)
    d, m = Y.shape
    K = L.shape[1]
    hours = np.arange(1.0, m + 1.0)
    if smoothing:
        basis, S = make_basis(HOUR_BASIS, hours)
    else:
        basis, S = np.eye(m), None
    dim = basis.shape[1]
    lams = np.ones(K) if lams is None else lams

    n = d * m
    X = np.empty((n, K * dim))
    tiled = np.tile(basis, (d, 1))
    blocks = []
    for k in range(K):
        a = k * dim
        X[:, a:a + dim] = tiled * np.repeat(L[:, k], m)[:, None]
        if smoothing:
            blocks.append(PenaltyBlock(a, a + dim, S, lam=float(lams[k]),
                                       optimize=True))
    beta0 = None
    if warm is not None:
        # project the previous factor curves onto the basis
        coef = np.linalg.lstsq(basis, warm, rcond=None)[0]
        beta0 = coef.T.reshape(-1)
    fit = fit_penalized_poisson(PenalizedDesign(X=X, blocks=tuple(blocks)),
                                Y.reshape(-1), control=irls, beta0=beta0)
    coefs = fit.coefficients.reshape(K, dim).T
    F_raw = basis @ coefs
    out_lams = np.array(fit.smoothing) if smoothing else None
    return F_raw, out_lams


def fit_factor_model(Y: np.ndarray, design: CalendarDesign | None, K: int,
                     smoothing: bool = False,
                     control: FactorControl = FactorControl()
                     ) -> tuple[FactorModel, FitReport]:
    """Alternating estimation of the factor model.

    ``design=None`` fits the unconstrained (plain) variant with one free
    loading vector per day; smoothing requires constraints.  Iterates
    loadings / factors / SVD renormalization from the SVD initialization
    until the relative Frobenius change of log(M) drops below
    ``control.tol`` or ``control.max_iter`` is reached.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise FactorModelError("Y must be a days x hours matrix")
    d, m = Y.shape
    if design is None:
        if smoothing:
            raise FactorModelError("smoothing requires calendar constraints")
        variant = "plain"
    else:
        if design.n_days != d:
            raise FactorModelError("design and count matrix disagree on days")
        variant = "constrained_smoothed" if smoothing else "constrained"

    L, F = init_svd(Y, control.c, K)
    logM = L @ F.T
    load_lams = np.ones(K)
    fact_lams = np.ones(K)
    warm_B = None
    warm_F = None

    dev_trace: list[float] = []
    rel_trace: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, control.max_iter + 1):
        if design is None:
            B, _ = update_loadings(Y, F, None, False, warm=warm_B,
                                   irls=control.irls)
            L_star = B
        else:
            B, load_lams = update_loadings(Y, F, design, smoothing,
                                           lams=load_lams, warm=warm_B,
                                           irls=control.irls)
            L_star = design.H @ B
        F_raw, fl = update_factors(Y, L_star, smoothing, lams=fact_lams,
                                   warm=warm_F, irls=control.irls)
        if fl is not None:
            fact_lams = fl
        B, F = orthonormalize(B, F_raw)
        L = design.H @ B if design is not None else B
        logM_new = L @ F.T

        rel = float(np.linalg.norm(logM_new - logM) /
                    max(np.linalg.norm(logM), 1e-12))
        mu = np.exp(logM_new)
        dev_trace.append(_deviance(Y.reshape(-1), mu.reshape(-1)))
        rel_trace.append(rel)
        logM = logM_new
        warm_B, warm_F = B, F
        if rel < control.tol:
            converged = True
            break

    if not converged:
        warnings.warn(f"factor model did not converge in {iterations} iterations "
                      f"(last relative change {rel_trace[-1]:.2e})",
                      stacklevel=2)
    model = FactorModel(
        K=K, variant=variant, F=F, B=B, L=L, mu=np.exp(logM),
        loading_lams=tuple(load_lams) if (design is not None and smoothing) else None,
        factor_lams=tuple(fact_lams) if smoothing else None,
    )
    report = FitReport(iterations=iterations,
                       deviance_trace=tuple(dev_trace),
                       rel_change_trace=tuple(rel_trace),
                       converged=converged)
    return model, report


def predict_mu(model: FactorModel, covariates) -> np.ndarray:
    """Intensity forecasts for days given (day-of-week, week-of-year).

    ``covariates`` is an (n, 2) integer array with day-of-week 1..7 and
    week-of-year 1..53 per day; rows matching a training day reproduce
    that day's fitted intensities exactly.
    """
    if model.variant == "plain":
        raise FactorModelError("unconstrained model has no out-of-sample loadings")
    cov = np.asarray(covariates, dtype=np.int64).reshape(-1, 2)
    if cov.size == 0:
        return np.zeros((0, model.F.shape[0]))
    dow, woy = cov[:, 0], cov[:, 1]
    if np.any((dow < 1) | (dow > N_DOW)):
        raise FactorModelError("day-of-week outside 1..7")
    if np.any((woy < 1) | (woy > N_WOY)):
        raise FactorModelError("week-of-year outside 1..53")
    L_new = model.dow_effects[dow - 1] + model.week_effects[woy - 1]
    return np.exp(L_new @ model.F.T)


def predict_mu_at_weeks(model: FactorModel, dow: np.ndarray,
                        week_positions: np.ndarray) -> np.ndarray:
    """Like :func:`predict_mu` but week positions may be fractional.

    Week effects are read off the fitted cyclic week spline, enabling
    continuity checks between adjacent weeks.
    """
    if model.variant == "plain":
        raise FactorModelError("unconstrained model has no out-of-sample loadings")
    rows = evaluate_basis(WEEK_BASIS, np.asarray(week_positions, dtype=float))
    L_new = model.dow_effects[np.asarray(dow) - 1] + rows @ model.week_effects
    return np.exp(L_new @ model.F.T)
