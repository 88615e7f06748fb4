"""First-stage fixed-effect designs, genotypic means (BLUEs) and ANOVA."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DataError, EstimabilityError, ModelError

log = logging.getLogger(__name__)

_MISSING = {"", "na", "nan"}


@dataclass(frozen=True)
class PhenotypeTable:
    """Long-format observations: one record per plant or plot.

    ``covariates`` maps a covariate name to a length-N array.  Arrays of
    strings are treated as factors, numeric arrays as numeric covariates.
    """

    genotype: np.ndarray
    value: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        geno = np.asarray(self.genotype).astype(str)
        value = np.asarray(self.value, dtype=float)
        if geno.ndim != 1 or value.shape != geno.shape:
            raise DataError("genotype and value must be vectors of equal length")
        if len(value) == 0:
            raise DataError("phenotype table has no records")
        if not np.isfinite(value).all():
            i = int(np.argmax(~np.isfinite(value)))
            raise DataError(f"non-finite phenotype value in record {i} ({geno[i]})")
        covs = {}
        for name, col in dict(self.covariates).items():
            col = np.asarray(col)
            if col.shape != value.shape:
                raise DataError(f"covariate {name!r} has {col.size} values, expected {value.size}")
            if col.dtype.kind in "fiub":
                col = col.astype(float)
                if not np.isfinite(col).all():
                    raise DataError(f"numeric covariate {name!r} has missing values")
            else:
                col = col.astype(str)
            col.setflags(write=False)
            covs[name] = col
        geno.setflags(write=False)
        value.setflags(write=False)
        object.__setattr__(self, "genotype", geno)
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "covariates", covs)

    @property
    def N(self):
        return len(self.value)

    def genotype_ids(self):
        """Genotype ids in sorted order."""
        return tuple(sorted(set(self.genotype)))

    def replicate_counts(self, order=None):
        order = self.genotype_ids() if order is None else order
        ids, counts = np.unique(self.genotype, return_counts=True)
        lookup = dict(zip(ids, counts))
        return np.array([lookup.get(g, 0) for g in order], dtype=int)

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return PhenotypeTable(self.genotype[mask], self.value[mask],
                              {k: v[mask] for k, v in self.covariates.items()})

    def with_values(self, value):
        return PhenotypeTable(self.genotype, value, self.covariates)


def read_phenotype_csv(path, factors=()):
    """Read ``genotype,value[,cov...]``.

    Columns listed in ``factors`` are kept as labels, the others must be
    numeric.  Rows with a missing value are dropped; a genotype left without
    any record is an error.
    """
    factors = set(factors)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise DataError(f"{path}: phenotype file has no data rows")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["genotype", "value"]:
        raise DataError(f"{path}: header must start with 'genotype,value'")
    unknown = factors - set(header[2:])
    if unknown:
        raise DataError(f"{path}: factor column {sorted(unknown)[0]!r} not in header")
    geno, value, covs = [], [], {h: [] for h in header[2:]}
    seen, kept = set(), set()
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(r)} fields, expected {len(header)}")
        g = r[0].strip()
        seen.add(g)
        if r[1].strip().lower() in _MISSING:
            continue
        try:
            v = float(r[1])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: value {r[1]!r} is not a number") from None
        geno.append(g)
        value.append(v)
        kept.add(g)
        for h, cell in zip(header[2:], r[2:]):
            cell = cell.strip()
            if h in factors:
                if cell.lower() in _MISSING:
                    raise DataError(f"{path}: line {lineno}: factor {h!r} is missing")
                covs[h].append(cell)
            else:
                try:
                    covs[h].append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: covariate {h!r} value "
                                    f"{cell!r} is not numeric (declare it as a factor?)") from None
    empty = sorted(seen - kept)
    if empty:
        raise DataError(f"{path}: genotype {empty[0]!r} has no non-missing records")
    cov_arrays = {h: np.array(c, dtype=str if h in factors else float) for h, c in covs.items()}
    return PhenotypeTable(np.array(geno), np.array(value), cov_arrays)


@dataclass(frozen=True)
class CovariateCoder:
    """Column layout of the covariate design, reusable on new records."""

    names: tuple
    levels: dict
    columns: tuple

    def encode(self, covariates, strict=True):
        """Covariate design rows for ``covariates`` (name -> array).

        Returns the matrix and a boolean mask of rows whose factor levels
        were all seen during coding; with ``strict`` an unseen level raises.
        """
        n = None
        blocks = []
        ok = None
        for name in self.names:
            col = np.asarray(covariates[name])
            n = len(col)
            ok = np.ones(n, dtype=bool) if ok is None else ok
            if name in self.levels:
                col = col.astype(str)
                lv = self.levels[name]
                known = np.isin(col, lv)
                if strict and not known.all():
                    bad = col[~known][0]
                    raise EstimabilityError(f"level {bad!r} of factor {name!r} has no training estimate")
                ok &= known
                blocks.append(np.column_stack([col == lvl for lvl in lv[1:]]).astype(float)
                              if len(lv) > 1 else np.zeros((n, 0)))
            else:
                blocks.append(col.astype(float)[:, None])
        if not blocks:
            return np.zeros((0 if n is None else n, 0)), ok
        return np.hstack(blocks), ok


def _coder(pheno, covariate_spec):
    levels, columns = {}, []
    for name in covariate_spec:
        if name not in pheno.covariates:
            raise DataError(f"covariate {name!r} not present in phenotype records")
        col = pheno.covariates[name]
        if col.dtype.kind == "U":
            lv = tuple(sorted(set(col)))
            levels[name] = lv
            columns += [f"{name}[{lvl}]" for lvl in lv[1:]]
        else:
            columns.append(name)
    return CovariateCoder(tuple(covariate_spec), levels, tuple(columns))


def matrix_rank(A, rtol=1e-10):
    """Numerical rank from a column-pivoted QR decomposition."""
    if A.shape[1] == 0:
        return 0
    R = linalg.qr(A, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0:
        return 0
    return int((d > rtol * d[0] * max(A.shape)).sum())


@dataclass(frozen=True)
class DesignMatrices:
    """Genotype incidence ``X_G`` (intercept absorbed) and covariate design ``X_C``."""

    genotype_ids: tuple
    X_G: np.ndarray
    X_C: np.ndarray
    coder: CovariateCoder
    rank: int

    @property
    def Z(self):
        # incidence of the random genetic effects is the same as X_G
        return self.X_G

    @property
    def X(self):
        return np.hstack([self.X_G, self.X_C])


def build_design(pheno, covariate_spec=(), genotype_order=None):
    """Dummy-code genotypes and covariates.

    Genotype columns follow sorted ids unless ``genotype_order`` is given;
    factor covariates drop their first (sorted) level.
    """
    ids = pheno.genotype_ids() if genotype_order is None else tuple(genotype_order)
    present = set(pheno.genotype)
    if genotype_order is not None:
        missing = [g for g in ids if g not in present]
        if missing:
            raise DataError(f"genotype {str(missing[0])!r} has no phenotype records")
        extra = sorted(present - set(ids))
        if extra:
            raise DataError(f"genotype {extra[0]!r} is not in the requested genotype set")
    index = {g: i for i, g in enumerate(ids)}
    X_G = np.zeros((pheno.N, len(ids)))
    X_G[np.arange(pheno.N), [index[g] for g in pheno.genotype]] = 1.0
    coder = _coder(pheno, list(covariate_spec))
    X_C, _ = coder.encode(pheno.covariates)
    X_C = X_C.reshape(pheno.N, -1)
    full = np.hstack([X_G, X_C])
    rank = matrix_rank(full)
    if rank < full.shape[1]:
        raise EstimabilityError(
            f"design has rank {rank} < {full.shape[1]} columns: genotype effects are "
            "confounded with covariates"
        )
    return DesignMatrices(ids, X_G, X_C, coder, rank)


@dataclass(frozen=True)
class GenotypicMeans:
    """Adjusted genotypic means with ``Var(g_hat) = R * sigma_E2``."""

    genotype_ids: tuple
    g_hat: np.ndarray
    R: np.ndarray
    sigma_E2_stage1: float
    replicates: np.ndarray
    beta_hat: np.ndarray
    coder: CovariateCoder

    def subset(self, ids):
        index = {g: i for i, g in enumerate(self.genotype_ids)}
        missing = [g for g in ids if g not in index]
        if missing:
            raise DataError(f"genotype {str(missing[0])!r} has no genotypic mean")
        rows = np.array([index[g] for g in ids], dtype=int)
        return GenotypicMeans(tuple(ids), self.g_hat[rows], self.R[np.ix_(rows, rows)],
                              self.sigma_E2_stage1, self.replicates[rows], self.beta_hat,
                              self.coder)


def compute_blues(pheno, covariate_spec=(), genotype_order=None):
    """Least-squares genotypic means of the first-stage fixed-effects model.

    ``R = (X_G'X_G - X_G'X_C (X_C'X_C)^-1 X_C'X_G)^-1``, the genotype block
    of ``(X'X)^-1``.  Under complete randomization without covariates this
    is ``diag(1/r_i)`` and ``g_hat`` are the arithmetic means.
    """
    des = build_design(pheno, covariate_spec, genotype_order)
    y = pheno.value
    XG, XC = des.X_G, des.X_C
    n = XG.shape[1]
    if XC.shape[1] == 0:
        r = XG.sum(axis=0)
        g_hat = (XG.T @ y) / r
        R = np.diag(1.0 / r)
        beta = np.zeros(0)
    else:
        # Schur complement of the covariate block in X'X
        cfac = linalg.cho_factor(XC.T @ XC)
        A = linalg.cho_solve(cfac, XC.T @ XG)
        S = XG.T @ XG - (XC.T @ XG).T @ A
        try:
            sfac = linalg.cho_factor(S)
        except linalg.LinAlgError:
            raise ModelError("normal equations are singular") from None
        R = linalg.cho_solve(sfac, np.eye(n))
        R = 0.5 * (R + R.T)
        yc = linalg.cho_solve(cfac, XC.T @ y)
        g_hat = linalg.cho_solve(sfac, XG.T @ y - XG.T @ (XC @ yc))
        beta = yc - A @ g_hat
    resid = y - XG @ g_hat - XC @ beta
    df = pheno.N - des.rank
    sigma = float(resid @ resid / df) if df > 0 else math.nan
    if df == 0:
        log.warning("first-stage model has no residual degrees of freedom")
    return GenotypicMeans(des.genotype_ids, g_hat, R, sigma,
                          pheno.replicate_counts(des.genotype_ids), beta, des.coder)


def effective_replicates(r):
    """Effective number of replicates ``(n-1)^-1 [sum r - sum r^2 / sum r]``."""
    r = np.asarray(r, dtype=float)
    if r.size < 2:
        raise DataError("effective replicates need at least two genotypes")
    if (r < 1).any():
        raise DataError("replicate counts must be at least 1")
    s = r.sum()
    return float((s - (r ** 2).sum() / s) / (r.size - 1))


@dataclass(frozen=True)
class AnovaSummary:
    MS_G: float
    MS_Env: float
    df_G: int
    df_Env: int
    r_eff: float


def _rss(X, y):
    if X.shape[1] == 0:
        return float(y @ y)
    beta, *_ = linalg.lstsq(X, y)
    e = y - X @ beta
    return float(e @ e)


def anova_summary(pheno, covariate_spec=()):
    """Sequential ANOVA: covariates (with intercept) first, then genotype."""
    des = build_design(pheno, covariate_spec)
    y = pheno.value
    base = np.hstack([np.ones((pheno.N, 1)), des.X_C])
    rss0 = _rss(base, y)
    rss1 = _rss(des.X, y)
    df_G = des.rank - matrix_rank(base)
    df_Env = pheno.N - des.rank
    if df_Env <= 0:
        raise DataError("no residual degrees of freedom: every genotype has a single record")
    if df_G <= 0:
        raise DataError("need at least two genotypes for an ANOVA")
    ss_G = max(rss0 - rss1, 0.0)
    ss_E = max(rss1, 0.0)
    # round-off guard for exactly fitted data
    scale = max(float(((y - y.mean()) ** 2).sum()), 1e-16 * float(y @ y), 1e-300)
    if ss_E < 1e-14 * scale:
        ss_E = 0.0
    if ss_G < 1e-14 * scale:
        ss_G = 0.0
    r_eff = effective_replicates(pheno.replicate_counts(des.genotype_ids))
    return AnovaSummary(ss_G / df_G, ss_E / df_Env, int(df_G), int(df_Env), r_eff)


def write_means_csv(means, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["genotype", "mean", "replicates"])
        for g, m, r in zip(means.genotype_ids, means.g_hat, means.replicates):
            w.writerow([g, f"{m:.10g}", int(r)])


def write_matrix_csv(ids, M, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ids)
        for row in M:
            w.writerow([f"{v:.10g}" for v in row])
