"""Heritability estimators, their confidence intervals and asymptotic sd."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .design import anova_summary, build_design, compute_blues
from .errors import DataError, ModelError
from .geno import KinshipMatrix
from .reml import (GeneralizedBasis, IndividualBasis, RotatedModel, VarianceModel,
                   _Eval, reml_fit)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeritabilityEstimate:
    """Point estimate and intervals for one estimator.

    For the means-based estimator ``sigma_E2`` is on the per-plant scale:
    the residual covariance of the means is ``sigma_E2 * R``.  The
    broad-sense estimator fills ``sigma_G2``/``sigma_Env2`` and carries the
    F-based interval in ``ci_standard``.
    """

    method: str
    h2: float
    ci_standard: tuple
    ci_log: tuple | None = None
    sigma_A2: float | None = None
    sigma_E2: float | None = None
    sigma_G2: float | None = None
    sigma_Env2: float | None = None
    monotone: bool = False
    log_fallback: bool = False
    fit: object = None
    alpha: float = 0.05

    def row(self):
        """Flat record in the column order of the estimate CSV."""
        lo, hi = self.ci_standard
        llo, lhi = self.ci_log if self.ci_log is not None else (math.nan, math.nan)
        sa = self.sigma_A2 if self.sigma_A2 is not None else self.sigma_G2
        se = self.sigma_E2 if self.sigma_E2 is not None else self.sigma_Env2
        return {"method": self.method, "h2": self.h2, "sigma_A2": sa, "sigma_E2": se,
                "ci_std_lo": lo, "ci_std_hi": hi, "ci_log_lo": llo, "ci_log_hi": lhi,
                "monotone": self.monotone}


def _z(alpha):
    if not 0 < alpha < 1:
        raise DataError("alpha must lie in (0, 1)")
    return float(stats.norm.ppf(1 - alpha / 2))


def _clip(lo, hi):
    return (float(min(max(lo, 0.0), 1.0)), float(min(max(hi, 0.0), 1.0)))


def _h2_gradient(sA, sE):
    tot = sA + sE
    return np.array([sE, -sA]) / tot ** 2


def delta_sd(fit):
    """Delta-method sd of h2 from the AI covariance of the components."""
    b = _h2_gradient(fit.sigma_A2, fit.sigma_E2)
    var = float(b @ fit.ai_matrix @ b)
    return math.sqrt(var) if var >= 0 else math.nan


def ci_delta_standard(fit, alpha=0.05):
    """``h2 +/- z sd``, clipped to [0, 1]; [0, 1] for monotone fits."""
    z = _z(alpha)
    if fit.monotone:
        return (0.0, 1.0)
    h2 = fit.h2
    cov = fit.ai_matrix
    if not np.isfinite(cov).all() or np.linalg.eigvalsh(cov)[0] <= 0:
        log.warning("AI covariance is not positive definite: degenerate interval")
        return (h2, h2)
    sd = delta_sd(fit)
    return _clip(h2 - z * sd, h2 + z * sd)


def ci_delta_log(fit, alpha=0.05):
    """Interval for log(sA/sE) mapped back through the logistic function.

    Returns ``(interval, fell_back)``; when a component sits at its floor
    the log is undefined and the standard interval is returned instead.
    """
    if fit.monotone:
        return (0.0, 1.0), False
    if fit.boundary is not None or fit.sigma_A2 <= 0 or fit.sigma_E2 <= 0:
        return ci_delta_standard(fit, alpha), True
    cov = fit.ai_matrix
    if not np.isfinite(cov).all() or np.linalg.eigvalsh(cov)[0] <= 0:
        return ci_delta_standard(fit, alpha), True
    z = _z(alpha)
    g = np.array([1.0 / fit.sigma_A2, -1.0 / fit.sigma_E2])
    sd = math.sqrt(float(g @ cov @ g))
    t = math.log(fit.sigma_A2 / fit.sigma_E2)
    expit = lambda u: 1.0 / (1.0 + math.exp(-u)) if u > -700 else 0.0
    return (expit(t - z * sd), expit(t + z * sd)), False


def ci_broad_sense(MS_G, MS_Env, df_G, df_Env, r_eff, alpha=0.05):
    """F-based interval for the intra-class correlation.

    With ``F = MS_G/MS_Env`` the endpoints are ``(F/F_q - 1)/(F/F_q + r - 1)``
    at the upper (for the lower end) and lower ``alpha/2`` quantiles.
    """
    if df_G <= 0 or df_Env <= 0:
        raise DataError("F interval needs positive degrees of freedom")
    if MS_Env <= 0:
        raise DataError("F interval needs MS_Env > 0")
    F = MS_G / MS_Env
    f_hi = stats.f.ppf(1 - alpha / 2, df_G, df_Env)
    f_lo = stats.f.ppf(alpha / 2, df_G, df_Env)
    ends = []
    for fq in (f_hi, f_lo):
        u = F / fq
        ends.append((u - 1) / (u + r_eff - 1))
    return _clip(*ends)


def _align(kin, ids):
    if isinstance(kin, KinshipMatrix):
        return kin.subset(ids).K
    raise DataError("kinship must be a KinshipMatrix")


def phenotype_order(pheno, kin):
    """Phenotyped genotypes in kinship-file order; missing ids are an error."""
    have = set(kin.accession_ids)
    for g in pheno.genotype:
        if g not in have:
            raise DataError(f"genotype {str(g)!r} is not present in the kinship matrix")
    present = set(pheno.genotype)
    return tuple(a for a in kin.accession_ids if a in present)


def individual_model(pheno, kin, covariate_spec=()):
    """Replicate-level model: intercept and covariates fixed, ``Z K Z'`` genetic."""
    order = phenotype_order(pheno, kin)
    des = build_design(pheno, covariate_spec, order)
    X = np.hstack([np.ones((pheno.N, 1)), des.X_C])
    return VarianceModel(pheno.value, X, kin.subset(order).K, Z=des.Z), des


def means_model(means, kin):
    """Means model with intercept, covariance ``sA K + sE R``."""
    K = _align(kin, means.genotype_ids)
    n = len(means.g_hat)
    return VarianceModel(means.g_hat, np.ones((n, 1)), K, R=means.R)


def _from_fit(method, fit, alpha):
    if fit.degenerate:
        raise ModelError("phenotypes show no variation: heritability undefined")
    ci = ci_delta_standard(fit, alpha)
    ci_log, fell_back = ci_delta_log(fit, alpha)
    if fit.monotone:
        log.warning("%s: monotone likelihood, h2 set to 1 with interval [0, 1]", method)
    return HeritabilityEstimate(method, float(fit.h2), ci, ci_log, fit.sigma_A2,
                                fit.sigma_E2, monotone=fit.monotone,
                                log_fallback=fell_back, fit=fit, alpha=alpha)


def h2_replicates(pheno, kin, covariate_spec=(), alpha=0.05, opts=None):
    """Marker-based h2 fitted directly on the replicate-level records."""
    model, _ = individual_model(pheno, kin, covariate_spec)
    return _from_fit("replicates", reml_fit(model, opts), alpha)


def h2_means(means, kin, alpha=0.05, opts=None):
    """Marker-based h2 from genotypic means carrying their covariance R."""
    if np.linalg.eigvalsh(means.R)[0] <= 0:
        raise ModelError("R is not positive definite")
    return _from_fit("means", reml_fit(means_model(means, kin), opts), alpha)


def broad_sense_h2(pheno, covariate_spec=(), alpha=0.05):
    """ANOVA estimator ``sG / (sG + sEnv)`` with ``sG = max(0, (MS_G - MS_Env)/r_eff)``."""
    a = anova_summary(pheno, covariate_spec)
    if a.MS_G == 0 and a.MS_Env == 0:
        raise ModelError("MS_G = MS_Env = 0: broad-sense heritability undefined")
    sG = max(0.0, (a.MS_G - a.MS_Env) / a.r_eff)
    sE = a.MS_Env
    H2 = sG / (sG + sE)
    if sE > 0:
        ci = ci_broad_sense(a.MS_G, a.MS_Env, a.df_G, a.df_Env, a.r_eff, alpha)
    else:
        ci = (1.0, 1.0)
    return HeritabilityEstimate("broad_sense", float(H2), ci, None, sigma_G2=sG,
                                sigma_Env2=sE, fit=a, alpha=alpha)


def estimate_all(pheno, kin, covariate_spec=(), alpha=0.05, methods=("replicates", "means", "anova"), opts=None):
    out = []
    for m in methods:
        if m == "replicates":
            out.append(h2_replicates(pheno, kin, covariate_spec, alpha, opts))
        elif m == "means":
            order = phenotype_order(pheno, kin)
            means = compute_blues(pheno, covariate_spec, order)
            out.append(h2_means(means, kin, alpha, opts))
        elif m in ("anova", "broad_sense"):
            out.append(broad_sense_h2(pheno, covariate_spec, alpha))
        else:
            raise DataError(f"unknown method {m!r}")
    return out


# --- asymptotic variance ------------------------------------------------------

@dataclass(frozen=True)
class AsymptoticQuery:
    K: np.ndarray
    r: object
    h2: float
    stage: str = "individual"

    def __post_init__(self):
        if not 0 < self.h2 < 1:
            raise DataError("h2 must lie in (0, 1)")
        if self.stage not in ("individual", "means"):
            raise DataError(f"unknown stage {self.stage!r}")
        if np.any(np.asarray(self.r) < 1):
            raise DataError("replicates must be at least 1")


def _replicates(r, n):
    r = np.asarray(r, dtype=int)
    return np.full(n, int(r)) if r.ndim == 0 else r


def asymptotic_information(K, r, h2, stage, sigma2=1.0):
    """Expected information ``1/2 tr(P V_k P V_l)`` at ``(h2, 1-h2) * sigma2``."""
    K = K.K if isinstance(K, KinshipMatrix) else np.asarray(K, dtype=float)
    n = K.shape[0]
    reps = _replicates(r, n)
    if stage == "individual":
        basis = IndividualBasis(K, np.repeat(np.arange(n), reps))
        X = basis.rotate(np.ones(basis.N))[:, None]
    else:
        basis = GeneralizedBasis(K, np.diag(1.0 / reps))
        X = basis.rotate(np.ones(n))[:, None]
    rm = RotatedModel(np.zeros(len(basis.d)), X, basis.d, basis.logdet_offset)
    return _Eval(rm, h2 * sigma2, (1 - h2) * sigma2).expected_information()


def asymptotic_sd(q, sigma2=1.0):
    """Asymptotic sd of the h2 estimator for a kinship, design and true h2.

    The component covariance is ``2 [tr(P V_k P V_l)]^-1``; the delta
    gradient of ``sA/(sA+sE)`` maps it to h2.
    """
    info = asymptotic_information(q.K, q.r, q.h2, q.stage, sigma2)
    if np.linalg.cond(info) > 1e13:
        raise ModelError("trace matrix is singular (compound-symmetric kinship?)")
    cov = np.linalg.inv(info)
    b = _h2_gradient(q.h2 * sigma2, (1 - q.h2) * sigma2)
    return math.sqrt(float(b @ cov @ b))


def asymptotic_table(K, reps=(1, 2, 3, 4), h2s=(0.2, 0.5, 0.8)):
    """Rows of (r, h2, sd_individual, sd_means, ratio)."""
    rows = []
    for r in reps:
        for h in h2s:
            s_i = asymptotic_sd(AsymptoticQuery(K, r, h, "individual"))
            s_m = asymptotic_sd(AsymptoticQuery(K, r, h, "means"))
            rows.append({"r": r, "h2": h, "sd_individual": s_i, "sd_means": s_m,
                         "ratio": s_i / s_m})
    return rows
