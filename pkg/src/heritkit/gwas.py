"""GLS marker scans with variance components fixed from a null model."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from scipy.integrate import trapezoid

from .design import compute_blues
from .errors import DataError
from .geno import GenotypeMatrix, raw_frequencies
from .herit import individual_model, means_model, phenotype_order
from .reml import IndividualBasis, RemlFit, RotatedModel, make_basis, reml_fit

log = logging.getLogger(__name__)

SCAN_BLOCK = 2000


@dataclass(frozen=True)
class NullModel:
    """No-marker fit plus the rotation reused for every marker."""

    fit: object
    rotated: RotatedModel
    basis: object
    stage: str
    genotype_ids: tuple


def fit_null(data, kin, covariate_spec=(), stage="one", opts=None):
    """Variance components of the model without markers.

    ``data`` is a PhenotypeTable; the two-stage scan first reduces it to
    adjusted genotypic means.
    """
    order = phenotype_order(data, kin)
    if stage == "one":
        model, _ = individual_model(data, kin, covariate_spec)
    elif stage == "two":
        model = means_model(compute_blues(data, covariate_spec, order), kin)
    else:
        raise DataError(f"stage must be 'one' or 'two', got {stage!r}")
    basis = make_basis(model)
    rm = RotatedModel(basis.rotate(model.y), basis.rotate(model.X), basis.d,
                      basis.logdet_offset)
    fit = reml_fit(model, opts, rotated=rm)
    if fit.monotone:
        log.warning("null model likelihood is monotone; scanning with boundary components")
    return NullModel(fit, rm, basis, stage, order)


def null_from_components(model, sigma_A2, sigma_E2, stage, genotype_ids=()):
    """Null model with supplied components (no REML fit)."""
    basis = make_basis(model)
    rm = RotatedModel(basis.rotate(model.y), basis.rotate(model.X), basis.d,
                      basis.logdet_offset)
    fit = RemlFit(float(sigma_A2), float(sigma_E2), np.full((2, 2), np.nan), math.nan, 0,
                  True, n_obs=model.N, n_fixed=model.q, stage=model.stage)
    return NullModel(fit, rm, basis, stage, tuple(genotype_ids))


@dataclass(frozen=True)
class ScanResult:
    marker_ids: tuple
    maf: np.ndarray
    effect: np.ndarray
    se: np.ndarray
    F: np.ndarray
    p: np.ndarray
    testable: np.ndarray
    stage: str
    sigma_A2: float
    sigma_E2: float
    df: int
    meta: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["marker", "maf", "effect", "se", "F", "p", "testable"])
            for i, m in enumerate(self.marker_ids):
                w.writerow([m, f"{self.maf[i]:.6g}", f"{self.effect[i]:.10g}",
                            f"{self.se[i]:.10g}", f"{self.F[i]:.10g}", f"{self.p[i]:.10g}",
                            int(self.testable[i])])


def _marker_coords(null, x):
    """Rotated marker columns; individual-stage contrast rows are identically zero."""
    return null.basis.genotype_coords(x)


class GlsScanner:
    """Marker tests against a fixed diagonal covariance in the rotated basis.

    Works with ``sqrt(w)``-scaled columns and a QR factor of the weighted
    fixed design, which stays accurate when the weights span many orders of
    magnitude (components at a floor).  Only the first ``head`` rotated rows
    of a marker can be nonzero.
    """

    def __init__(self, rm, w, head):
        self.head = head
        sw = np.sqrt(w)
        Q, _ = np.linalg.qr(sw[:, None] * rm.X)
        self.Q_h = Q[:head]
        Q_t = Q[head:]
        self.T = Q_t.T @ Q_t
        yw = sw * rm.y
        self.ry_h = (yw - Q @ (Q.T @ yw))[:head]
        ry = yw - Q @ (Q.T @ yw)
        self.rss0 = float(ry @ ry)
        self.sw_h = sw[:head]
        self.df = rm.N - rm.q - 1

    def scan(self, Mstar):
        Mw = self.sw_h[:, None] * Mstar
        c = self.Q_h.T @ Mw
        R_h = Mw - self.Q_h @ c
        s = np.einsum("ij,ij->j", R_h, R_h) + np.einsum("ij,ij->j", c, self.T @ c)
        smm = np.einsum("ij,ij->j", Mw, Mw)
        num = self.ry_h @ Mw
        ok = s > 1e-10 * np.maximum(smm, 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma = np.where(ok, num / s, np.nan)
            rss = np.maximum(self.rss0 - num ** 2 / s, 0.0)
            se = np.where(ok, np.sqrt(rss / self.df / s), np.nan)
            F = (gamma / se) ** 2
        return gamma, se, F, ok


def gls_scan(null, G, maf_min=0.05, threads=1, exact=False, block=SCAN_BLOCK):
    """Per-marker F tests of ``y ~ X + marker`` with V fixed at the null components.

    The marker enters as its allele count; ``sigma^2`` scaling of V is
    re-estimated from each marker's GLS residual, and the F statistic has
    (1, N - q - 1) degrees of freedom.  Markers that are monomorphic,
    below ``maf_min`` or collinear with the covariates are kept and flagged
    untestable with NaN statistics.
    """
    if not isinstance(G, GenotypeMatrix):
        raise DataError("genotypes must be a GenotypeMatrix")
    Gs = G.select_accessions(null.genotype_ids)
    x = Gs.calls
    f = raw_frequencies(Gs)
    maf = np.minimum(f, 1 - f)
    rm = null.rotated
    sA, sE = null.fit.sigma_A2, null.fit.sigma_E2
    df = rm.N - rm.q - 1
    if df < 1:
        raise DataError("no residual degrees of freedom for the marker test")
    if exact:
        return _exact_scan(null, Gs, maf, maf_min, df)
    w = 1.0 / (sA * rm.d + sE)
    head = len(null.genotype_ids) if isinstance(null.basis, IndividualBasis) else rm.N
    scanner = GlsScanner(rm, w, head)
    starts = list(range(0, Gs.p, block))

    def run(start):
        Mstar = _marker_coords(null, x[:, start:start + block])
        return scanner.scan(Mstar)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    gamma, se, F, ok = (np.concatenate([p[i] for p in parts]) if parts else np.zeros(0)
                        for i in range(4))
    ok = ok.astype(bool) & (maf > 0) & (maf >= maf_min)
    return _result(Gs, maf, gamma, se, F, ok, null, df, {"mode": "fixed components"})


def _result(Gs, maf, gamma, se, F, ok, null, df, meta):
    gamma, se, F = (np.where(ok, a, np.nan) for a in (gamma, se, F))
    p = np.where(ok, stats.f.sf(np.where(ok, F, 0.0), 1, df), np.nan)
    p = np.where(ok, np.clip(p, np.finfo(float).tiny, 1.0), np.nan)
    meta = dict(meta, denominator_df=df)
    return ScanResult(Gs.marker_ids, maf, gamma, se, F, p, ok, null.stage,
                      null.fit.sigma_A2, null.fit.sigma_E2, df, meta)


def _exact_scan(null, Gs, maf, maf_min, df):
    """Re-estimates the variance components with each marker in the model."""
    rm = null.rotated
    p = Gs.p
    gamma, se, F = (np.full(p, np.nan) for _ in range(3))
    ok = (maf > 0) & (maf >= maf_min)
    for j in range(p):
        if not ok[j]:
            continue
        col = np.zeros(rm.N)
        mc = _marker_coords(null, Gs.calls[:, j])
        col[:len(mc)] = mc
        X1 = np.column_stack([rm.X, col])
        if np.linalg.matrix_rank(X1) <= rm.q:
            ok[j] = False
            continue
        rmj = RotatedModel(rm.y, X1, rm.d, rm.logdet_offset)
        fitj = reml_fit(None, rotated=rmj)
        w = 1.0 / (fitj.sigma_A2 * rm.d + fitj.sigma_E2)
        C = X1.T @ (w[:, None] * X1)
        beta = linalg.solve(C, X1.T @ (w * rm.y), assume_a="pos")
        e = rm.y - X1 @ beta
        s2 = float(e @ (w * e)) / df
        gamma[j] = beta[-1]
        se[j] = math.sqrt(s2 * linalg.inv(C)[-1, -1])
        F[j] = (gamma[j] / se[j]) ** 2
    return _result(Gs, maf, gamma, se, F, ok, null, df, {"mode": "exact refit"})


# --- ROC ----------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fp: np.ndarray
    tp: np.ndarray
    n_negative: int
    n_positive: int

    def rates(self):
        fpr = self.fp / self.n_negative if self.n_negative else np.zeros_like(self.fp, float)
        tpr = self.tp / self.n_positive if self.n_positive else np.zeros_like(self.tp, float)
        return fpr, tpr

    def auc(self):
        fpr, tpr = self.rates()
        x = np.concatenate([fpr, [1.0]])
        y = np.concatenate([tpr, [tpr[-1] if len(tpr) else 0.0]])
        return float(trapezoid(y, x))


def _labels(marker_ids, true_ids, window):
    true_ids = set(true_ids)
    hits = np.array([m in true_ids for m in marker_ids])
    if window > 0:
        idx = np.flatnonzero(hits)
        near = np.zeros_like(hits)
        for i in idx:
            near[max(0, i - window):i + window + 1] = True
        hits = near
    return hits


def roc_from_labels(pvalues, labels):
    """(FP, TP) counts at every distinct p-value threshold, from the origin."""
    p = np.where(np.isnan(pvalues), 1.0, np.asarray(pvalues, float))
    labels = np.asarray(labels, bool)
    order = np.argsort(p, kind="stable")
    ps, ls = p[order], labels[order]
    tp = np.cumsum(ls)
    fp = np.cumsum(~ls)
    last = np.r_[ps[1:] != ps[:-1], True]     # only count ties together
    thr = np.r_[0.0, ps[last]]
    return RocCurve(thr, np.r_[0, fp[last]], np.r_[0, tp[last]],
                    int((~labels).sum()), int(labels.sum()))


def roc_curve(scan, true_qtl_ids, window=0):
    """ROC points for one scan; QTL hits are exact id matches by default."""
    return roc_from_labels(scan.p, _labels(scan.marker_ids, true_qtl_ids, window))


def pooled_roc(scans_and_qtls, window=0):
    """ROC with counts summed over several simulated scans at common thresholds."""
    ps, ls = [], []
    for scan, qtls in scans_and_qtls:
        ps.append(scan.p)
        ls.append(_labels(scan.marker_ids, qtls, window))
    if not ps:
        return RocCurve(np.zeros(1), np.zeros(1, int), np.zeros(1, int), 0, 0)
    return roc_from_labels(np.concatenate(ps), np.concatenate(ls))
