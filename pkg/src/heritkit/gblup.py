"""G-BLUP prediction of genetic values, prediction-error variances and cross-validation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .design import compute_blues
from .errors import DataError, EstimabilityError, ModelError
from .herit import individual_model, means_model, phenotype_order
from .reml import _incidence_codes, reml_fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlupFit:
    """Predicted genetic effects ``G_hat = delta * K @ weights``.

    ``weights`` is ``Z' V_H^-1 (y - X beta)`` with ``V_H = V / sigma_E2``,
    which is all that is needed to predict related, unobserved genotypes.
    """

    G_hat: np.ndarray
    beta_hat: np.ndarray
    delta: float
    stage: str
    weights: np.ndarray
    sigma_A2: float = math.nan
    sigma_E2: float = math.nan
    genotype_ids: tuple = ()


@dataclass(frozen=True)
class PredictionSet:
    K_pred_obs: np.ndarray
    K_pred_pred: np.ndarray | None = None
    G_pred_hat: np.ndarray | None = None
    pev: np.ndarray | None = None
    pev_assumption: str = "variance components treated as known"


def _components(varcomps):
    if hasattr(varcomps, "sigma_A2"):
        return float(varcomps.sigma_A2), float(varcomps.sigma_E2)
    sA, sE = varcomps
    return float(sA), float(sE)


def _delta(sA, sE):
    if sA < 0 or sE < 0:
        raise DataError("variance components must be nonnegative")
    if sE == 0:
        raise ModelError("sigma_E2 = 0 gives an infinite shrinkage ratio")
    return sA / sE


class _VH:
    """Solves with ``V_H = delta Z K Z' + R0`` without forming K^-1."""

    def __init__(self, model, delta):
        self.model, self.delta = model, delta
        codes = None
        if model.R is None:
            codes = np.arange(model.N) if model.Z is None else _incidence_codes(model.Z)
        if codes is not None:
            n = model.K.shape[0]
            self.codes = codes
            self.r = np.bincount(codes, minlength=n).astype(float)
            sr = np.sqrt(self.r)
            M = sr[:, None] * model.K * sr[None, :]
            self.sr = sr
            self.chol = linalg.cho_factor(np.eye(n) + delta * M)
            self.kind = "incidence"
        else:
            V = delta * model.G0() + model.R0()
            try:
                self.chol = linalg.cho_factor(V)
            except linalg.LinAlgError:
                raise ModelError("V is not positive definite") from None
            self.kind = "dense"

    def solve(self, u):
        """``V_H^-1 u``."""
        if self.kind == "dense":
            return linalg.cho_solve(self.chol, u)
        # V_H^-1 = I - U U' + U (I + delta M)^-1 U'  with U = Z D^-1/2
        Ut = self._Ut(u)
        inner = linalg.cho_solve(self.chol, Ut) - Ut
        return u + self._U(inner)

    def weights(self, e):
        """``Z' V_H^-1 e`` for a residual vector."""
        if self.kind == "dense":
            Zt = self.model.Z.T if self.model.Z is not None else None
            s = linalg.cho_solve(self.chol, e)
            return s if Zt is None else Zt @ s
        return self.sr * linalg.cho_solve(self.chol, self._Ut(e))

    def _Ut(self, u):
        u2 = u if u.ndim > 1 else u[:, None]
        sums = np.zeros((len(self.r), u2.shape[1]))
        np.add.at(sums, self.codes, u2)
        out = sums / self.sr[:, None]
        return out if u.ndim > 1 else out[:, 0]

    def _U(self, w):
        w2 = w if w.ndim > 1 else w[:, None]
        out = w2[self.codes] / self.sr[self.codes, None]
        return out if w.ndim > 1 else out[:, 0]


def fit_blup(model, varcomps, genotype_ids=()):
    """BLUP of the genetic effects and GLS fixed effects for given components.

    ``model.X`` may have zero columns (known zero mean).
    """
    sA, sE = _components(varcomps)
    delta = _delta(sA, sE)
    vh = _VH(model, delta)
    X, y = model.X, model.y
    if X.shape[1]:
        ViX = vh.solve(X)
        C = X.T @ ViX
        try:
            beta = linalg.solve(C, ViX.T @ y, assume_a="pos")
        except linalg.LinAlgError:
            raise ModelError("X' V^-1 X is singular") from None
    else:
        beta = np.zeros(0)
    e = y - X @ beta
    a = vh.weights(e)
    G_hat = delta * (model.K @ a)
    stage = model.stage
    return BlupFit(G_hat, beta, delta, stage, a, sA, sE, tuple(genotype_ids))


def predict_unobserved(fit, pred):
    """Conditional-mean prediction ``delta * K_pred_obs @ weights``."""
    K_po = np.atleast_2d(np.asarray(pred.K_pred_obs, dtype=float))
    if K_po.shape[1] != len(fit.weights):
        raise DataError(f"cross-kinship has {K_po.shape[1]} columns for "
                        f"{len(fit.weights)} training genotypes")
    return replace(pred, K_pred_obs=K_po, G_pred_hat=fit.delta * (K_po @ fit.weights))


def predict_observations(fit, X_pred, Z_pred, G=None):
    """``X_pred beta + Z_pred G``; G defaults to the training predictions."""
    G = fit.G_hat if G is None else np.asarray(G, dtype=float)
    X_pred = np.asarray(X_pred, dtype=float).reshape(len(Z_pred), -1)
    if X_pred.shape[1] != len(fit.beta_hat):
        raise DataError(f"X_pred has {X_pred.shape[1]} columns, fit has {len(fit.beta_hat)} fixed effects")
    return X_pred @ fit.beta_hat + np.asarray(Z_pred, dtype=float) @ G


def _Pmat_cross(model, sA, sE):
    """``Z' P Z`` with ``P = V^-1 - V^-1 X (X'V^-1X)^-1 X'V^-1`` at (sA, sE)."""
    delta = _delta(sA, sE) if sA > 0 else 0.0
    vh = _VH(model, delta)
    Z = model.Z if model.Z is not None else np.eye(model.N)
    ViZ = vh.solve(Z) / sE
    ZViZ = Z.T @ ViZ
    X = model.X
    if X.shape[1] == 0:
        return ZViZ
    ViX = vh.solve(X) / sE
    C = X.T @ ViX
    T = Z.T @ ViX
    return ZViZ - T @ linalg.solve(C, T.T, assume_a="pos")


def prediction_error_variance(model, varcomps, K_pred_obs=None, K_pred_pred=None):
    """Covariance of ``G_hat - G`` with the components treated as known.

    Without a prediction set this is the training-set PEV
    ``sA K - sA^2 K Z'PZ K``; with ``K_pred_obs``/``K_pred_pred`` it is the
    PEV of the unobserved genotypes, ``sA K_pp - sA^2 K_po Z'PZ K_po'``.
    Both equal the usual mixed-model-equation expressions but need no K^-1.
    """
    sA, sE = _components(varcomps)
    if sA == 0:
        K = model.K if K_pred_obs is None else np.asarray(K_pred_pred)
        return np.zeros_like(K)
    if K_pred_obs is None:
        stable = _training_pev(model, sA, sE)
        if stable is not None:
            return stable
        K = model.K
        ZPZ = _Pmat_cross(model, sA, sE)
        pev = sA * K - sA ** 2 * K @ ZPZ @ K
    else:
        ZPZ = _Pmat_cross(model, sA, sE)
        if K_pred_pred is None:
            raise DataError("validation PEV needs K_pred_pred")
        K_po = np.asarray(K_pred_obs, dtype=float)
        pev = sA * np.asarray(K_pred_pred) - sA ** 2 * K_po @ ZPZ @ K_po.T
    return 0.5 * (pev + pev.T)


def _training_pev(model, sA, sE):
    """Training PEV without the cancellation in ``sA K - sA^2 K Z'PZ K``.

    With ``L = delta K Z' V_H^-1 X`` the PEV is ``P0 + sE L (X'V_H^-1X)^-1 L'``
    where ``P0`` (mean known) is ``sE D^-1/2 M delta (I + delta M)^-1 D^-1/2``
    for replicate data (``M = D^1/2 K D^1/2``) or ``sE delta K (delta K + R)^-1 R``
    for means.  Returns None for layouts not covered.
    """
    delta = _delta(sA, sE)
    vh = _VH(model, delta)
    K = model.K
    if vh.kind == "incidence":
        if (vh.r == 0).any():
            return None
        lam, U = linalg.eigh(vh.sr[:, None] * K * vh.sr[None, :])
        lam = np.clip(lam, 0, None)
        W = U / vh.sr[:, None]
        P0 = sE * (W * (delta * lam / (1 + delta * lam))) @ W.T
        Z = model.Z if model.Z is not None else np.eye(model.N)
    elif model.Z is None:
        R = model.R0()
        B = linalg.solve(delta * K + R, delta * K, assume_a="pos").T
        P0 = sE * B @ R
        Z = None
    else:
        return None
    X = model.X
    if X.shape[1]:
        ViX = vh.solve(X)
        L = delta * K @ (ViX if Z is None else Z.T @ ViX)
        C = X.T @ ViX
        P0 = P0 + sE * L @ linalg.solve(C, L.T, assume_a="pos")
    return 0.5 * (P0 + P0.T)


def pev_henderson(model, varcomps):
    """Training PEV from the inverse of the mixed-model coefficient matrix.

    ``sE (Z'R^-1Z + K^-1/delta - Z'R^-1X (X'R^-1X)^-1 X'R^-1Z)^-1``; needs an
    invertible K and delta > 0.
    """
    sA, sE = _components(varcomps)
    delta = _delta(sA, sE)
    Z = model.Z if model.Z is not None else np.eye(model.N)
    Ri = linalg.inv(model.R0())
    try:
        Ki = linalg.inv(model.K)
    except linalg.LinAlgError:
        raise ModelError("K is singular") from None
    C = Z.T @ Ri @ Z + Ki / delta
    X = model.X
    if X.shape[1]:
        T = Z.T @ Ri @ X
        C = C - T @ linalg.solve(X.T @ Ri @ X, T.T)
    return sE * linalg.inv(C)


def pev_validation_henderson(model, varcomps, K_pred_obs, K_pred_pred):
    """Two-term validation PEV through ``K_pred_obs K^-1``."""
    sA, _ = _components(varcomps)
    A = linalg.solve(model.K, np.asarray(K_pred_obs).T, assume_a="sym").T
    return A @ pev_henderson(model, varcomps) @ A.T + sA * (K_pred_pred - A @ np.asarray(K_pred_obs).T)


def pev_misspecified(K, R, delta_hat, sigma_A2, sigma_E2):
    """Covariance of ``G_hat - G`` for means-level BLUP with a wrong shrinkage.

    Zero mean assumed; ``G_hat = B g`` with ``B = delta_hat K (delta_hat K + R)^-1``
    and true ``Var(g) = sigma_A2 K + sigma_E2 R``.  ``delta_hat = inf`` gives
    ``B = I`` (no shrinkage).
    """
    K = np.asarray(K, dtype=float)
    R = np.asarray(R, dtype=float)
    n = K.shape[0]
    if delta_hat == 0:
        B = np.zeros((n, n))
    elif math.isinf(delta_hat):
        B = np.eye(n)
    else:
        A = delta_hat * K
        B = linalg.solve((A + R).T, A.T).T
    Sy = sigma_A2 * K + sigma_E2 * R
    SK = sigma_A2 * K
    out = SK - B @ SK - SK @ B.T + B @ Sy @ B.T
    return 0.5 * (out + out.T)


# --- cross-validation ---------------------------------------------------------

def _corr(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


def _partition(ids, folds, rng):
    perm = rng.permutation(len(ids))
    parts = np.array_split(perm, folds)
    valid = set(ids[i] for i in parts[0])
    return [g for g in ids if g not in valid], [g for g in ids if g in valid]


def cross_validate(pheno, kin, covariate_spec=(), folds=5, repeats=10, seed=0,
                   true_G=None, opts=None, stages=("one", "two")):
    """Repeated random genotype-level train/validation splits.

    Each repeat holds out one of ``folds`` random parts of the genotypes
    (20% for five folds), refits both stages on the rest and correlates the
    predictions with the held-out records.  When ``true_G`` (a dict or a
    vector in kinship order) is given, correlations are against the true
    genetic values instead.  Returns a list of dict records.
    """
    if folds < 2:
        raise DataError("need at least two folds")
    ids = np.array(phenotype_order(pheno, kin))
    if len(ids) // folds < 2 or len(ids) - len(ids) // folds < 2:
        raise DataError("each side of a split needs at least two genotypes")
    if true_G is not None and not isinstance(true_G, dict):
        true_G = dict(zip(kin.accession_ids, np.asarray(true_G, float)))
    rng = np.random.default_rng(seed)
    records = []
    for rep in range(repeats):
        train, valid = _partition(ids, folds, rng)
        tmask = np.isin(pheno.genotype, train)
        ptrain, pvalid = pheno.subset(tmask), pheno.subset(~tmask)
        K_po = kin.cross(valid, train)
        for stage in stages:
            try:
                rec = _cv_one(stage, ptrain, pvalid, kin, train, valid, K_po,
                              covariate_spec, true_G, opts)
            except EstimabilityError as exc:
                raise EstimabilityError(f"repeat {rep}: {exc}") from None
            rec["repeat"] = rep
            records.append(rec)
    return records


def _cv_one(stage, ptrain, pvalid, kin, train, valid, K_po, covariate_spec, true_G, opts):
    if stage == "one":
        model, des = individual_model(ptrain, kin, covariate_spec)
        fit = reml_fit(model, opts)
        blup = fit_blup(model, fit, train)
        beta_cov = blup.beta_hat[1:]
        mu = blup.beta_hat[0]
        coder = des.coder
    elif stage == "two":
        means = compute_blues(ptrain, covariate_spec, train)
        model = means_model(means, kin)
        fit = reml_fit(model, opts)
        blup = fit_blup(model, fit, train)
        # covariate effects come from the first stage; the means carry the intercept
        beta_cov = means.beta_hat
        mu = blup.beta_hat[0]
        coder = means.coder
    else:
        raise DataError(f"unknown stage {stage!r}")
    Gp = predict_unobserved(blup, PredictionSet(K_po)).G_pred_hat
    if true_G is not None:
        r_train = _corr(blup.G_hat, [true_G[g] for g in train])
        r_valid = _corr(Gp, [true_G[g] for g in valid])
    else:
        idx = {g: i for i, g in enumerate(train)}
        fitted_train = (mu + blup.G_hat[[idx[g] for g in ptrain.genotype]]
                        + _cov_part(coder, ptrain, beta_cov)[0])
        r_train = _corr(fitted_train, ptrain.value)
        vidx = {g: i for i, g in enumerate(valid)}
        cov, ok = _cov_part(coder, pvalid, beta_cov, strict=False)
        if not ok.all():
            log.warning("dropping %d validation records with covariate levels unseen in training",
                        int((~ok).sum()))
        pred = mu + Gp[[vidx[g] for g in pvalid.genotype]] + cov
        r_valid = _corr(pred[ok], pvalid.value[ok])
    h2 = fit.h2
    return {"stage": stage, "h2_hat": h2, "r_train": r_train, "r_valid": r_valid}


def _cov_part(coder, pheno, beta, strict=True):
    Xc, ok = coder.encode(pheno.covariates, strict=strict)
    if ok is None:
        ok = np.ones(pheno.N, dtype=bool)
    if Xc.shape[1] == 0:
        return np.zeros(pheno.N), ok
    return Xc @ beta, ok
