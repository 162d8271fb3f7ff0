"""Penalized cubic regression splines and Poisson IRLS with GCV.

Bases are parameterized by the function values at the knots, so evaluating
a basis exactly at a knot returns an incidence row.  That makes the same
code path serve both smoothed fits (curvature penalty, GCV-chosen lambda)
and raw per-level coefficient fits (lambda fixed at zero).

The cyclic variant identifies the two domain endpoints: any coefficient
vector describes a curve with equal value and first/second derivative at
domain.min and domain.max.

Smoothing parameters are re-selected inside every IRLS step (performance
iteration) by minimizing the working-model GCV score n * Dw / (n - edf)^2,
one penalty block at a time, over a log-spaced grid refined by golden
section.  Convergence of the coupled iteration is not guaranteed in
general; the best iterate is returned with ``converged=False`` when the
loop cycles or stalls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import xlogy


class SplineError(ValueError):
    """Invalid basis specification or covariate values."""


class NumericalError(RuntimeError):
    """IRLS could not make progress (overflow or singular system)."""


@dataclass(frozen=True)
class BasisSpec:
    """A 1-D spline basis: kind, dimension and covariate domain."""

    kind: str  # "cubic" or "cyclic_cubic"
    dim: int
    domain: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("cubic", "cyclic_cubic"):
            raise SplineError(f"unknown basis kind {self.kind!r}")
        if self.dim < 4:
            raise SplineError("basis dimension must be at least 4")
        lo, hi = self.domain
        if not lo < hi:
            raise SplineError("domain must be a nondegenerate interval")

    def knots(self) -> np.ndarray:
        lo, hi = self.domain
        # cyclic: one extra knot position; the wrap point carries no
        # coefficient of its own (its value equals the first knot's)
        n = self.dim + 1 if self.kind == "cyclic_cubic" else self.dim
        return np.linspace(lo, hi, n)


def _natural_crs(knots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second-derivative map and curvature penalty for a natural CRS.

    Returns (Ffull, S): Ffull maps knot values to second derivatives at
    all knots (zero at the ends), S = D' B^{-1} D is the integrated
    squared second derivative penalty in the value basis.
    """
    k = knots.size
    h = np.diff(knots)
    B = np.zeros((k - 2, k - 2))
    D = np.zeros((k - 2, k))
    for a in range(k - 2):
        B[a, a] = (h[a] + h[a + 1]) / 3.0
        if a + 1 < k - 2:
            B[a, a + 1] = B[a + 1, a] = h[a + 1] / 6.0
        D[a, a] = 1.0 / h[a]
        D[a, a + 1] = -1.0 / h[a] - 1.0 / h[a + 1]
        D[a, a + 2] = 1.0 / h[a + 1]
    F = scipy.linalg.solve(B, D, assume_a="pos")
    Ffull = np.vstack([np.zeros(k), F, np.zeros(k)])
    S = D.T @ F
    return Ffull, (S + S.T) / 2.0


def _cyclic_crs(knots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same as :func:`_natural_crs` for the periodic case.

    ``knots`` has dim+1 positions; coefficients are the values at the
    first dim knots, the last position wrapping to the first.
    """
    n = knots.size - 1
    h = np.diff(knots)
    B = np.zeros((n, n))
    D = np.zeros((n, n))
    for i in range(n):
        im = (i - 1) % n
        ip = (i + 1) % n
        B[i, i] = (h[im] + h[i]) / 3.0
        B[i, ip] += h[i] / 6.0
        B[i, im] += h[im] / 6.0
        D[i, i] = -(1.0 / h[im] + 1.0 / h[i])
        D[i, ip] += 1.0 / h[i]
        D[i, im] += 1.0 / h[im]
    BD = scipy.linalg.solve(B, D, assume_a="pos")
    S = D.T @ BD
    return BD, (S + S.T) / 2.0


def make_basis(spec: BasisSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the basis at ``x`` and return (model matrix, penalty).

    The model matrix is len(x) x dim; the penalty is the dim x dim PSD
    curvature matrix.  ``x`` must lie inside the domain, and (since this
    entry point is for building fit designs) the basis dimension may not
    exceed the number of distinct covariate values; use
    :func:`evaluate_basis` to evaluate a fitted curve at arbitrary points.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.unique(x).size < spec.dim:
        raise SplineError(
            f"basis dimension {spec.dim} exceeds {np.unique(x).size} distinct covariate values")
    X = evaluate_basis(spec, x)
    knots = spec.knots()
    if spec.kind == "cyclic_cubic":
        _, S = _cyclic_crs(knots)
    else:
        _, S = _natural_crs(knots)
    return X, S


def evaluate_basis(spec: BasisSpec, x) -> np.ndarray:
    """Model-matrix rows of the basis at arbitrary in-domain points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = spec.domain
    if np.any(x < lo) or np.any(x > hi):
        raise SplineError(f"covariate values outside domain [{lo}, {hi}]")
    knots = spec.knots()
    h = np.diff(knots)
    cyclic = spec.kind == "cyclic_cubic"
    curve, _ = _cyclic_crs(knots) if cyclic else _natural_crs(knots)

    n_int = knots.size - 1
    j = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, n_int - 1)
    hj = h[j]
    xm = x - knots[j]
    xp = knots[j + 1] - x
    a_lo = xp / hj
    a_hi = xm / hj
    c_lo = (xp ** 3 / hj - hj * xp) / 6.0
    c_hi = (xm ** 3 / hj - hj * xm) / 6.0
    j_hi = (j + 1) % spec.dim if cyclic else j + 1

    X = c_lo[:, None] * curve[j] + c_hi[:, None] * curve[j_hi]
    rows = np.arange(x.size)
    X[rows, j] += a_lo
    X[rows, j_hi] += a_hi
    return X


@dataclass(frozen=True)
class PenaltyBlock:
    """A penalized span of design columns: beta' S beta times lam."""

    start: int
    stop: int
    matrix: np.ndarray
    lam: float = 1.0
    optimize: bool = True  # re-select lam by GCV each IRLS step

    def __post_init__(self):
        S = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", S)
        size = self.stop - self.start
        if S.shape != (size, size):
            raise SplineError("penalty matrix does not match the column range")
        if not np.allclose(S, S.T, atol=1e-10):
            raise SplineError("penalty matrix must be symmetric")
        if self.lam < 0:
            raise SplineError("smoothing parameter must be nonnegative")


@dataclass(frozen=True)
class PenalizedDesign:
    """GLM design: model matrix, log-scale offset, penalty blocks."""

    X: np.ndarray
    blocks: tuple[PenaltyBlock, ...] = ()
    offset: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "blocks", tuple(self.blocks))
        spans = sorted((b.start, b.stop) for b in self.blocks)
        for (s1, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise SplineError("penalty blocks overlap")
        for b in self.blocks:
            if b.start < 0 or b.stop > X.shape[1]:
                raise SplineError("penalty block outside design columns")
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=float)
            if off.shape != (X.shape[0],):
                raise SplineError("offset length does not match design rows")
            object.__setattr__(self, "offset", off)


@dataclass(frozen=True)
class PenalizedFit:
    coefficients: np.ndarray
    smoothing: tuple[float, ...]
    edf: float
    gcv: float
    deviance: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class IrlsControl:
    max_iter: int = 200
    tol: float = 1e-7
    max_halvings: int = 10


def _poisson_dev(y: np.ndarray, mu: np.ndarray) -> float:
    # xlogy makes the y=0 term exactly zero
    return float(2.0 * np.sum(xlogy(y, y / mu) - (y - mu)))


def _penalty_value(beta: np.ndarray, blocks, lams) -> float:
    v = 0.0
    for b, lam in zip(blocks, lams):
        if lam:
            seg = beta[b.start:b.stop]
            v += lam * float(seg @ b.matrix @ seg)
    return v


def _assemble(XtWX: np.ndarray, blocks, lams) -> np.ndarray:
    A = XtWX.copy()
    for b, lam in zip(blocks, lams):
        if lam:
            A[b.start:b.stop, b.start:b.stop] += lam * b.matrix
    return A


def _solve_working(XtWX, XtWz, blocks, lams):
    """Solve the penalized normal equations; returns (beta, edf)."""
    A = _assemble(XtWX, blocks, lams)
    try:
        c = scipy.linalg.cho_factor(A, check_finite=False)
    except scipy.linalg.LinAlgError:
        # rank-deficient working system: nudge with a relative ridge
        ridge = 1e-10 * (np.trace(A) / A.shape[0] + 1.0)
        try:
            c = scipy.linalg.cho_factor(A + ridge * np.eye(A.shape[0]),
                                        check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError("singular penalized system") from exc
    beta = scipy.linalg.cho_solve(c, XtWz, check_finite=False)
    edf = float(np.trace(scipy.linalg.cho_solve(c, XtWX, check_finite=False)))
    return beta, edf


def _gcv_from_parts(n, rss, edf) -> float:
    if edf >= n:
        return math.inf
    return n * rss / (n - edf) ** 2


def gcv_score(z, w, X, blocks, lams) -> float:
    """Working-model GCV of the weighted penalized least squares problem.

    ``z`` and ``w`` are the IRLS working response and weights.  Returns
    n * Dw / (n - edf)^2 where Dw is the weighted residual sum of squares,
    or +inf when edf reaches the sample size.
    """
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    X = np.asarray(X, dtype=float)
    if np.any(w <= 0):
        raise SplineError("working weights must be positive")
    XtWX = X.T @ (w[:, None] * X)
    XtWz = X.T @ (w * z)
    beta, edf = _solve_working(XtWX, XtWz, tuple(blocks), list(lams))
    rss = float(w @ (z - X @ beta) ** 2)
    return _gcv_from_parts(z.size, rss, edf)


_GRID_DECADES = 2.0   # search this many decades either side of current lam
_GRID_POINTS = 21
_LAM_FLOOR = 1e-8
_LAM_CEIL = 1e12


def _gcv_profile(XtWX, XtWz, z, w, X, blocks, lams, bi):
    """Cheap per-lambda GCV evaluator for one block, others fixed.

    Reparameterizes the working problem through the Cholesky factor of the
    lambda-free part and an eigendecomposition of the transformed block
    penalty: beta(lam) and edf(lam) then follow from elementwise shrinkage

        edf(lam) = sum_i G_ii / (1 + lam * ev_i)

    while the residual sum of squares is formed explicitly from beta (the
    quadratic-form shortcut cancels catastrophically at large lambda).
    Returns a callable score(lam), or None when the lambda-free part is
    not positive definite (caller falls back to direct solves).
    """
    p = XtWX.shape[0]
    base = list(lams)
    base[bi] = 0.0
    C = _assemble(XtWX, blocks, base)
    try:
        R = scipy.linalg.cholesky(C, lower=False, check_finite=False)
    except scipy.linalg.LinAlgError:
        return None
    b = blocks[bi]
    S_emb = np.zeros((p, p))
    S_emb[b.start:b.stop, b.start:b.stop] = b.matrix

    def left_whiten(Mat):
        # returns R^{-T} @ Mat
        return scipy.linalg.solve_triangular(R, Mat, trans="T", lower=False,
                                             check_finite=False)

    M = left_whiten(left_whiten(S_emb).T)
    M = (M + M.T) / 2.0
    ev, Q = np.linalg.eigh(M)
    ev = np.maximum(ev, 0.0)
    P = left_whiten(left_whiten(XtWX).T)
    G = Q.T @ P @ Q
    gdiag = np.diag(G).copy()
    u = Q.T @ left_whiten(XtWz)
    RinvQ = scipy.linalg.solve_triangular(R, Q, lower=False, check_finite=False)
    n = z.size

    def score(lam: float) -> float:
        shrink = 1.0 / (1.0 + lam * ev)
        edf = float(gdiag @ shrink)
        beta = RinvQ @ (u * shrink)
        rss = float(w @ (z - X @ beta) ** 2)
        return _gcv_from_parts(n, rss, edf)

    return score


def _select_lambda(XtWX, XtWz, z, w, X, blocks, lams, bi, wide=False):
    """GCV-minimizing lambda for block ``bi`` with the others held fixed.

    Log-spaced grid around the current value, then golden-section
    refinement inside the bracketing grid cells.  The current value is
    kept unless a candidate strictly improves the score, so a flat GCV
    profile cannot make the surrounding iteration dither.

    ``wide=True`` (used for a block's first selection within a fit) scans
    a broad absolute grid centered on the scale-balance point
    tr(XtWX_bb) / tr(S_b); the local grid around a stale value cannot
    escape a distant basin on its own.
    """
    n = z.size
    score = _gcv_profile(XtWX, XtWz, z, w, X, blocks, lams, bi)
    if score is None:
        def score(lam: float) -> float:  # rank-deficient fallback
            trial = list(lams)
            trial[bi] = lam
            beta, edf = _solve_working(XtWX, XtWz, blocks, trial)
            rss = float(w @ (z - X @ beta) ** 2)
            return _gcv_from_parts(n, rss, edf)

    current = min(max(lams[bi], _LAM_FLOOR), _LAM_CEIL)
    if wide:
        b = blocks[bi]
        balance = (np.trace(XtWX[b.start:b.stop, b.start:b.stop]) /
                   max(np.trace(b.matrix), 1e-300))
        center = min(max(balance, _LAM_FLOOR), _LAM_CEIL)
        grid = center * np.power(10.0, np.linspace(-7.0, 7.0, 29))
    else:
        grid = current * np.power(10.0, np.linspace(-_GRID_DECADES, _GRID_DECADES,
                                                    _GRID_POINTS))
    grid = np.clip(grid, _LAM_FLOOR, _LAM_CEIL)
    scores = [score(g) for g in grid]
    k = int(np.argmin(scores))

    lo = math.log10(grid[max(k - 1, 0)])
    hi = math.log10(grid[min(k + 1, grid.size - 1)])
    best_lam, best_score = float(grid[k]), scores[k]
    if hi - lo > 1e-12:
        # golden section on log10(lambda)
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = lo, hi
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc, fd = score(10.0 ** c), score(10.0 ** d)
        for _ in range(12):
            if fc <= fd:
                b, d, fd = d, c, fc
                c = b - invphi * (b - a)
                fc = score(10.0 ** c)
            else:
                a, c, fc = c, d, fd
                d = a + invphi * (b - a)
                fd = score(10.0 ** d)
        if min(fc, fd) < best_score:
            best_lam = 10.0 ** (c if fc <= fd else d)
            best_score = min(fc, fd)

    # sticky rule: only move if the improvement is material
    if score(current) <= best_score * (1.0 + 1e-9):
        return float(current)
    return float(best_lam)


def fit_penalized_poisson(design: PenalizedDesign, y,
                          control: IrlsControl = IrlsControl(),
                          beta0: np.ndarray | None = None) -> PenalizedFit:
    """Penalized Poisson regression with log link.

    Smoothing parameters of blocks flagged ``optimize`` are re-selected by
    GCV inside each IRLS step; blocks with ``optimize=False`` keep their
    fixed ``lam`` (zero means unpenalized).  Step-halving enforces a
    non-increasing penalized deviance.  ``beta0`` warm-starts the
    coefficients.
    """
    X = design.X
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise SplineError("response length does not match design rows")
    if np.any(y < 0):
        raise SplineError("counts must be nonnegative")
    if y.sum() == 0:
        raise NumericalError("response is identically zero; the log-link MLE is degenerate")
    offset = design.offset if design.offset is not None else np.zeros(n)
    blocks = design.blocks
    lams = [b.lam for b in blocks]

    if beta0 is not None:
        beta = np.asarray(beta0, dtype=float).copy()
        eta = X @ beta
        mu = np.exp(np.clip(eta + offset, -700, 700))
        prev_obj = _poisson_dev(y, mu) + _penalty_value(beta, blocks, lams)
    else:
        beta = None
        mu = y + 0.5
        eta = np.log(mu) - offset
        prev_obj = math.inf

    converged = False
    iterations = 0
    w = z = XtWX = XtWz = None
    fresh = [b.optimize for b in blocks]
    # the ad-hoc starting mu is not a fit: its working model carries no
    # information about smoothness, so lambda selection waits one step
    selecting = beta0 is not None
    for iterations in range(1, control.max_iter + 1):
        w = mu
        z = eta + (y - mu) / mu
        XtWX = X.T @ (w[:, None] * X)
        XtWz = X.T @ (w * z)
        if selecting:
            for bi, b in enumerate(blocks):
                if b.optimize:
                    lams[bi] = _select_lambda(XtWX, XtWz, z, w, X, blocks, lams,
                                              bi, wide=fresh[bi])
                    fresh[bi] = False
        selecting = True
        if beta is not None:
            # re-anchor the objective at the freshly selected lambdas so the
            # monotonicity test below compares steps at a fixed penalty
            prev_obj = _poisson_dev(y, mu) + _penalty_value(beta, blocks, lams)
        beta_new, _ = _solve_working(XtWX, XtWz, blocks, lams)

        # step-halve towards the previous iterate until the penalized
        # deviance stops increasing (and everything stays finite)
        step = 1.0
        accepted = None
        for halving in range(control.max_halvings + 1):
            trial = beta_new if beta is None else beta + step * (beta_new - beta)
            eta_t = X @ trial
            with np.errstate(over="ignore"):
                mu_t = np.exp(eta_t + offset)
            if np.all(np.isfinite(mu_t)) and np.all(mu_t > 0):
                obj = _poisson_dev(y, mu_t) + _penalty_value(trial, blocks, lams)
                if beta is None or obj <= prev_obj + 1e-8 * (1.0 + abs(prev_obj)):
                    accepted = (trial, eta_t, mu_t, obj)
                    break
            elif beta is None:
                raise NumericalError("fitted means overflow at the initial step")
            step /= 2.0
        if accepted is None:
            if not np.all(np.isfinite(np.exp(np.clip(X @ beta_new + offset, -700, 700)))):
                raise NumericalError("fitted means overflow persists after step-halving")
            break  # objective plateau: keep the previous iterate

        trial, eta_t, mu_t, obj = accepted
        rel = (np.linalg.norm(trial - beta) / max(np.linalg.norm(beta), 1e-12)
               if beta is not None else math.inf)
        beta, eta, mu, prev_obj = trial, eta_t, mu_t, obj
        if rel < control.tol:
            converged = True
            break

    # final working-model diagnostics at the accepted iterate
    w = mu
    z = eta + (y - mu) / mu
    XtWX = X.T @ (w[:, None] * X)
    XtWz = X.T @ (w * z)
    _, edf = _solve_working(XtWX, XtWz, blocks, lams)
    rss = float(w @ (z - X @ beta) ** 2)
    return PenalizedFit(
        coefficients=beta,
        smoothing=tuple(lams),
        edf=edf,
        gcv=_gcv_from_parts(n, rss, edf),
        deviance=_poisson_dev(y, mu),
        converged=converged,
        iterations=iterations,
    )
