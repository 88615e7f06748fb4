"""Two-component REML: y ~ N(X b, sA * Z K Z' + sE * R0).

The fit works in a rotated basis in which the covariance is diagonal,
``V = diag(sA * d + sE)``.  For individual-level data (R0 = I) the basis
comes from the n x n eigendecomposition of ``D^1/2 K D^1/2`` (D holds the
replicate counts) completed by within-genotype contrasts; for genotypic
means it is the generalized eigenbasis of (K, R).  A dense Cholesky
evaluation is kept for checking.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .design import matrix_rank
from .errors import ConvergenceError, DataError, ModelError

log = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)
H2_MIN, H2_MAX = 1e-6, 1 - 1e-6
MONOTONE_H2 = 1 - 1e-4


@dataclass(frozen=True)
class RemlOptions:
    max_iter: int = 100
    tol_loglik: float = 1e-8
    tol_param: float = 1e-6
    floor: float = 1e-10
    max_halvings: int = 30
    grid_points: int = 99
    start: tuple | None = None


@dataclass(frozen=True)
class VarianceModel:
    """Response, fixed design and the two covariance structures.

    ``Z`` is an N x n incidence matrix (``None`` means one record per
    genotype) and ``R`` the residual structure (``None`` means identity).
    """

    y: np.ndarray
    X: np.ndarray
    K: np.ndarray
    Z: np.ndarray | None = None
    R: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        K = np.asarray(self.K, dtype=float)
        N = len(y)
        if X.shape[0] != N:
            raise DataError(f"X has {X.shape[0]} rows for {N} observations")
        if not np.isfinite(y).all():
            raise DataError("response contains non-finite values")
        n = K.shape[0]
        if K.shape != (n, n):
            raise DataError("K must be square")
        if self.Z is None:
            if n != N:
                raise DataError(f"K is {n} x {n} but there are {N} observations")
            Z = None
        else:
            Z = np.asarray(self.Z, dtype=float)
            if Z.shape != (N, n):
                raise DataError(f"Z has shape {Z.shape}, expected {(N, n)}")
        R = None
        if self.R is not None:
            R = np.asarray(self.R, dtype=float)
            if R.shape != (N, N):
                raise DataError(f"R has shape {R.shape}, expected {(N, N)}")
            if np.abs(R - R.T).max() > 1e-10 * np.abs(R).max():
                raise DataError("R is not symmetric")
        if N <= X.shape[1]:
            raise DataError(f"need more observations ({N}) than fixed effects ({X.shape[1]})")
        if matrix_rank(X) < X.shape[1]:
            raise DataError("fixed-effect design X is not of full column rank")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "R", R)

    @property
    def N(self):
        return len(self.y)

    @property
    def q(self):
        return self.X.shape[1]

    @property
    def stage(self):
        return "individual" if self.R is None else "means"

    def G0(self):
        return self.K if self.Z is None else self.Z @ self.K @ self.Z.T

    def R0(self):
        return np.eye(self.N) if self.R is None else self.R

    def with_y(self, y):
        return replace(self, y=y)


def _incidence_codes(Z):
    """Genotype index per row if Z is a 0/1 incidence matrix, else None."""
    if not np.isin(Z, (0.0, 1.0)).all() or not (Z.sum(axis=1) == 1).all():
        return None
    return np.argmax(Z, axis=1)


def _clip_eigenvalues(lam, what):
    top = max(float(np.abs(lam).max()), 1e-300)
    low = float(lam.min())
    if low < -1e-8 * top:
        log.warning("%s has negative eigenvalue %.3g; clipped to zero", what, low)
    return np.clip(lam, 0.0, None)


class IndividualBasis:
    """Orthogonal basis diagonalizing ``Z K Z'`` for incidence ``Z``.

    The first n rotated coordinates are ``Q' D^-1/2 Z' v`` with
    ``D^1/2 K D^1/2 = Q diag(lam) Q'``; the remaining N - n coordinates are
    Helmert contrasts within genotypes, for which ``d = 0``.
    """

    def __init__(self, K, codes):
        codes = np.asarray(codes, dtype=int)
        n = K.shape[0]
        r = np.bincount(codes, minlength=n).astype(float)
        if (r == 0).any():
            raise DataError("every genotype in K needs at least one record")
        self.n, self.N = n, len(codes)
        self.codes = codes
        self.sqrt_r = np.sqrt(r)
        M = self.sqrt_r[:, None] * K * self.sqrt_r[None, :]
        lam, Q = linalg.eigh(M)
        self.lam = _clip_eigenvalues(lam, "kinship")
        self.Q = Q
        self.d = np.concatenate([self.lam, np.zeros(self.N - n)])
        self.logdet_offset = 0.0
        # contrast bookkeeping: records grouped by genotype, groups by size
        order = np.argsort(codes, kind="stable")
        starts = np.concatenate([[0], np.cumsum(r.astype(int))])
        self._groups = {}
        for g in range(n):
            size = int(r[g])
            if size > 1:
                self._groups.setdefault(size, []).append(order[starts[g]:starts[g + 1]])
        self._groups = {s: np.array(v) for s, v in sorted(self._groups.items())}
        self._helmert = {s: linalg.helmert(s) for s in self._groups}

    def genotype_coords(self, v):
        """Rotate a genotype-level vector/matrix (expanded by Z) into the basis.

        Returns only the first n coordinates; the contrasts of ``Z v`` are 0.
        """
        v = np.asarray(v, dtype=float)
        return self.Q.T @ (self.sqrt_r.reshape((-1,) + (1,) * (v.ndim - 1)) * v)

    def rotate(self, v):
        v = np.asarray(v, dtype=float)
        vec = v.ndim == 1
        v2 = v[:, None] if vec else v
        sums = np.zeros((self.n, v2.shape[1]))
        np.add.at(sums, self.codes, v2)
        head = self.Q.T @ (sums / self.sqrt_r[:, None])
        tails = [head]
        for size, idx in self._groups.items():
            block = v2[idx]                      # (groups, size, k)
            H = self._helmert[size]              # (size-1, size)
            tails.append(np.einsum("ts,gsk->gtk", H, block).reshape(-1, v2.shape[1]))
        out = np.vstack(tails)
        return out[:, 0] if vec else out

    def unrotate_genotype(self, w):
        """Map first-n rotated coordinates back to genotype scale ``D^-1/2 Q w``."""
        return (self.Q @ w) / self.sqrt_r.reshape((-1,) + (1,) * (np.ndim(w) - 1))


class GeneralizedBasis:
    """Generalized eigenbasis with ``W' R W = I`` and ``W' G0 W = diag(d)``."""

    def __init__(self, G0, R0):
        try:
            cR = linalg.cholesky(R0, lower=True)
        except linalg.LinAlgError:
            raise ModelError("residual structure R is not positive definite") from None
        self.logdet_offset = 2.0 * float(np.log(np.diag(cR)).sum())
        lam, W = linalg.eigh(G0, R0)
        self.d = _clip_eigenvalues(lam, "kinship (relative to R)")
        self.W = W
        self.n = self.N = G0.shape[0]

    def rotate(self, v):
        return self.W.T @ np.asarray(v, dtype=float)

    genotype_coords = rotate


@dataclass(frozen=True)
class RotatedModel:
    """Model with diagonal covariance ``diag(sA * d + sE)`` after rotation."""

    y: np.ndarray
    X: np.ndarray
    d: np.ndarray
    logdet_offset: float = 0.0

    @property
    def N(self):
        return len(self.y)

    @property
    def q(self):
        return self.X.shape[1]


def make_basis(model):
    if model.R is None:
        codes = np.arange(model.N) if model.Z is None else _incidence_codes(model.Z)
        if codes is not None:
            return IndividualBasis(model.K, codes)
    return GeneralizedBasis(model.G0(), model.R0())


def spectral_prepare(model, basis=None):
    """Rotate ``y`` and ``X`` so that V becomes diagonal."""
    basis = make_basis(model) if basis is None else basis
    return RotatedModel(basis.rotate(model.y), basis.rotate(model.X), basis.d,
                        basis.logdet_offset)


# --- likelihood pieces in the rotated basis ----------------------------------

class _Eval:
    """Quantities at one (sA, sE) point of a rotated model."""

    def __init__(self, rm, sA, sE):
        v = sA * rm.d + sE
        if (v <= 0).any():
            raise ModelError("covariance matrix is not positive definite")
        self.rm, self.v = rm, v
        self.B = rm.X / v[:, None]
        C = rm.X.T @ self.B
        try:
            self.cC = linalg.cho_factor(C)
        except linalg.LinAlgError:
            raise ModelError("X' V^-1 X is singular") from None
        self.beta = linalg.cho_solve(self.cC, self.B.T @ rm.y)
        self.Py = (rm.y - rm.X @ self.beta) / v
        self.yPy = float(rm.y @ self.Py)
        self.logdetC = 2.0 * float(np.log(np.diag(self.cC[0])).sum())
        self.loglik = -0.5 * (np.log(v).sum() + rm.logdet_offset + self.logdetC
                              + self.yPy + (rm.N - rm.q) * LOG2PI)

    def P(self, u):
        v = self.v if u.ndim == 1 else self.v[:, None]
        return u / v - self.B @ linalg.cho_solve(self.cC, self.B.T @ u)

    def diagP(self):
        CiBt = linalg.cho_solve(self.cC, self.B.T)
        return 1.0 / self.v - np.einsum("ij,ji->i", self.B, CiBt)

    def score(self):
        dP = self.diagP()
        d = self.rm.d
        Py = self.Py
        return np.array([-0.5 * (dP @ d - Py @ (d * Py)), -0.5 * (dP.sum() - Py @ Py)])

    def ai(self):
        u = np.column_stack([self.rm.d * self.Py, self.Py])
        return 0.5 * u.T @ self.P(u)

    def expected_information(self):
        """``1/2 tr(P V_k P V_l)`` for V_A = diag(d), V_E = I."""
        d, lam = self.rm.d, 1.0 / self.v
        D = (d, np.ones_like(d))
        B = self.B
        Ci = linalg.cho_solve(self.cC, np.eye(self.rm.q))
        E = [B.T @ (Dk[:, None] * B) for Dk in D]
        out = np.empty((2, 2))
        for k in range(2):
            for l in range(2):
                t1 = np.sum(lam * D[k] * lam * D[l])
                F = B.T @ ((D[k] * lam * D[l])[:, None] * B)
                t2 = 2.0 * np.trace(Ci @ F)
                t3 = np.trace(Ci @ E[k] @ Ci @ E[l])
                out[k, l] = 0.5 * (t1 - t2 + t3)
        return out


def restricted_loglik(rm, sA, sE):
    """Restricted log-likelihood at (sA, sE), without the ``1/2 log|X'X|`` term."""
    return _Eval(rm, sA, sE).loglik


def restricted_loglik_dense(model, sA, sE):
    """Same likelihood from a Cholesky factor of the full N x N matrix V."""
    V = sA * model.G0() + sE * model.R0()
    try:
        cV = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError:
        raise ModelError("V is not positive definite") from None
    X, y = model.X, model.y
    ViX = linalg.cho_solve(cV, X)
    C = X.T @ ViX
    beta = linalg.solve(C, ViX.T @ y, assume_a="pos")
    e = y - X @ beta
    yPy = float(e @ linalg.cho_solve(cV, e))
    logdetV = 2.0 * float(np.log(np.diag(cV[0])).sum())
    logdetC = float(np.linalg.slogdet(C)[1])
    return -0.5 * (logdetV + logdetC + yPy + (model.N - model.q) * LOG2PI)


def _profile_point(rm, h2):
    vh = h2 * rm.d + (1.0 - h2)
    ev = _Eval(rm, h2, 1.0 - h2)
    s2 = ev.yPy / (rm.N - rm.q)
    if s2 <= 0:
        return -math.inf, 0.0
    ll = -0.5 * ((rm.N - rm.q) * (math.log(s2) + 1.0 + LOG2PI) + np.log(vh).sum()
                 + rm.logdet_offset + ev.logdetC)
    return ll, s2


def profile_loglik(model, h2_grid):
    """Restricted log-likelihood over h2 with the common scale profiled out.

    ``model`` may be a VarianceModel or an already rotated model.
    """
    rm = model if isinstance(model, RotatedModel) else spectral_prepare(model)
    h2_grid = np.asarray(h2_grid, dtype=float)
    if ((h2_grid <= 0) | (h2_grid >= 1)).any():
        raise DataError("profile grid values must lie in (0, 1)")
    return np.array([_profile_point(rm, h)[0] for h in h2_grid])


def profile_sigma2(rm, h2):
    """Profiled common scale sigma^2 at heritability ``h2``."""
    return _profile_point(rm, h2)[1]


@dataclass(frozen=True)
class RemlFit:
    """REML estimates of the two variance components.

    ``ai_matrix`` is the inverse average-information matrix, used as the
    covariance of (sigma_A2, sigma_E2).  ``boundary`` is ``"A"`` or ``"E"``
    when that component ended at its floor (for monotone fits, the h2 = 1 - eps
    boundary).
    """

    sigma_A2: float
    sigma_E2: float
    ai_matrix: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    monotone: bool = False
    boundary: str | None = None
    degenerate: bool = False
    identifiable: bool = True
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    score: np.ndarray = field(default_factory=lambda: np.zeros(2))
    n_obs: int = 0
    n_fixed: int = 0
    stage: str = "individual"

    @property
    def h2(self):
        tot = self.sigma_A2 + self.sigma_E2
        if self.monotone:
            return 1.0
        return self.sigma_A2 / tot if tot > 0 else math.nan

    @property
    def delta(self):
        if self.sigma_E2 <= 0:
            return math.inf
        return self.sigma_A2 / self.sigma_E2


def _safe_inverse(A):
    try:
        if np.linalg.cond(A) > 1e14:
            raise np.linalg.LinAlgError
        Ai = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        return np.full((2, 2), np.nan)
    return 0.5 * (Ai + Ai.T)


def _ai_iterate(rm, theta, floor, opts):
    """AI-REML iterations from ``theta``; returns (theta, eval, iterations, converged)."""
    theta = np.maximum(np.asarray(theta, dtype=float), floor)
    ev = _Eval(rm, *theta)
    for it in range(1, opts.max_iter + 1):
        s = ev.score()
        try:
            with warnings.catch_warnings():
                # near-singular AI on flat profiles; the line search copes
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                step = linalg.solve(ev.ai(), s, assume_a="sym")
        except linalg.LinAlgError:
            step = s * (theta.sum() ** 2) / max(rm.N, 1)
        t = 1.0
        accepted = None
        for _ in range(opts.max_halvings):
            cand = np.maximum(theta + t * step, floor)
            try:
                cev = _Eval(rm, *cand)
            except ModelError:
                t *= 0.5
                continue
            if cev.loglik >= ev.loglik - 1e-12 * abs(ev.loglik):
                accepted = cand, cev
                break
            t *= 0.5
        if accepted is None:
            # no ascent direction left: stationary or pinned at a floor
            return theta, ev, it, True
        cand, cev = accepted
        dll = cev.loglik - ev.loglik
        dpar = np.abs(cand - theta).max() / max(cand.sum(), floor)
        theta, ev = cand, cev
        if abs(dll) < opts.tol_loglik and dpar < opts.tol_param:
            theta, ev = _polish(rm, theta, ev, floor)
            return theta, ev, it, True
    return theta, ev, opts.max_iter, False


def _polish(rm, theta, ev, floor, max_steps=25):
    # a few extra undamped AI steps so that the reported point does not depend
    # on rounding in the path taken to reach it (shift/scale invariance)
    for _ in range(max_steps):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                step = linalg.solve(ev.ai(), ev.score(), assume_a="sym")
            cand = np.maximum(theta + step, floor)
            cev = _Eval(rm, *cand)
        except (linalg.LinAlgError, ModelError):
            break
        if not cev.loglik >= ev.loglik - 1e-10 * max(1.0, abs(ev.loglik)):
            break
        done = np.abs(cand - theta).max() <= 1e-13 * cand.sum()
        theta, ev = cand, cev
        if done:
            break
    return theta, ev


def _nondecreasing(values, tol):
    return bool((np.diff(values) >= -tol).all())


def reml_fit(model, opts=None, basis=None, rotated=None):
    """Average-information REML fit of the two variance components."""
    opts = RemlOptions() if opts is None else opts
    rm = rotated if rotated is not None else spectral_prepare(model, basis)
    N, q = rm.N, rm.q
    if N <= q:
        raise DataError("need more observations than fixed effects")
    y = rm.y
    # residual variance after projecting out X; invariant under the orthogonal part
    resid = y - rm.X @ np.linalg.lstsq(rm.X, y, rcond=None)[0]
    var_y = float(np.var(model.y if model is not None else y, ddof=1))
    stage = model.stage if model is not None else "individual"
    if var_y <= 0 or float(resid @ resid) <= 1e-24 * max(float(y @ y), 1e-300):
        log.warning("response has no variation beyond the fixed effects")
        return RemlFit(0.0, 0.0, np.full((2, 2), np.nan), math.nan, 0, True,
                       degenerate=True, identifiable=False, beta=np.zeros(q),
                       n_obs=N, n_fixed=q, stage=stage)
    floor = opts.floor * var_y
    grid = np.linspace(0.01, 0.99, opts.grid_points)
    prof = np.array([_profile_point(rm, h)[0] for h in grid])
    edges = np.array([_profile_point(rm, h)[0] for h in (H2_MIN, H2_MAX)])
    flat = float(prof.max() - prof.min()) <= 1e-8 * max(1.0, abs(float(prof.max())))
    iters, converged, monotone = 0, True, flat
    if not flat:
        start = opts.start if opts.start is not None else (var_y / 2, var_y / 2)
        theta, ev, iters, converged = _ai_iterate(rm, start, floor, opts)
        # guard against a local optimum of the AI path using the profile grid
        best = int(np.argmax(prof))
        if prof[best] > ev.loglik + 1e-6:
            h = grid[best]
            s2 = profile_sigma2(rm, h)
            log.info("AI-REML restarted from profile grid point h2=%.3f", h)
            theta, ev, more, converged = _ai_iterate(rm, (h * s2, (1 - h) * s2), floor, opts)
            iters += more
        if not converged:
            raise ConvergenceError(f"AI-REML did not converge in {opts.max_iter} iterations")
        tol = 1e-9 * max(1.0, abs(float(prof.max())))
        h2_hat = theta[0] / theta.sum()
        rising = _nondecreasing(np.concatenate([prof, edges[1:]]), tol)
        monotone = rising and (h2_hat >= MONOTONE_H2 or edges[1] >= ev.loglik - tol)
    if monotone:
        ll, s2 = _profile_point(rm, H2_MAX)
        # boundary components at h2 = 1 - eps; an even smaller sigma_E2 only
        # amplifies round-off in the near-null directions of K
        theta = np.array([H2_MAX * s2, (1 - H2_MAX) * s2])
        ev = _Eval(rm, *theta)
        if flat:
            log.warning("profile likelihood is flat in h2: heritability is not identifiable")
        else:
            log.warning("restricted likelihood increases up to h2 = 1 (monotone)")
    boundary = None
    if monotone or theta[1] <= floor * (1 + 1e-9):
        boundary = "E"
    elif theta[0] <= floor * (1 + 1e-9):
        boundary = "A"
    ai_cov = _safe_inverse(ev.ai())
    return RemlFit(float(theta[0]), float(theta[1]), ai_cov, float(ev.loglik), iters,
                   converged, monotone=monotone, boundary=boundary,
                   identifiable=not flat, beta=ev.beta, score=ev.score(), n_obs=N,
                   n_fixed=q, stage=stage)


def information_matrices(rm, sA, sE):
    """Average and expected information (2 x 2) at a parameter point."""
    ev = _Eval(rm, sA, sE)
    return ev.ai(), ev.expected_information()


def numerical_hessian(rm, sA, sE, rel_step=1e-4):
    """Central-difference Hessian of the restricted log-likelihood."""
    theta = np.array([sA, sE], dtype=float)
    h = rel_step * theta.sum()
    H = np.empty((2, 2))
    f = lambda t: restricted_loglik(rm, *t)
    for i in range(2):
        for j in range(2):
            ei = np.eye(2)[i] * h
            ej = np.eye(2)[j] * h
            H[i, j] = (f(theta + ei + ej) - f(theta + ei - ej)
                       - f(theta - ei + ej) + f(theta - ei - ej)) / (4 * h * h)
    return 0.5 * (H + H.T)


def write_profile_csv(h2_grid, values, path):
    with open(path, "w") as fh:
        fh.write("h2,loglik\n")
        for h, v in zip(h2_grid, values):
            fh.write(f"{h:.10g},{v:.10g}\n")
