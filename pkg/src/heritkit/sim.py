"""Simulated populations and replicated traits, and simulation studies.

Traits follow ``y_ij = sum_m x_im a_m + g_i + e_ij`` with ``g ~ N(0, s_a K)``.
The total additive variance is calibrated from the target heritability and
split between ``q`` QTLs (share ``gamma``) and the polygenic background.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .design import PhenotypeTable, anova_summary
from .errors import DataError, HeritkitError, ModelError
from .geno import GenotypeMatrix, KinshipMatrix, kinship_from_genotypes, raw_frequencies
from .gblup import fit_blup
from .gwas import GlsScanner, roc_from_labels
from .herit import ci_broad_sense, ci_delta_log, ci_delta_standard
from .reml import GeneralizedBasis, IndividualBasis, RotatedModel, VarianceModel, reml_fit

log = logging.getLogger(__name__)

MAX_QTL_ATTEMPTS = 10_000


# --- populations -------------------------------------------------------------

def balding_nichols(n_per_pop, n_markers, fst, rng, mode="inbred", freq_range=(0.05, 0.95)):
    """Genotypes from the Balding-Nichols model.

    Ancestral frequencies are uniform on ``freq_range``; each subpopulation
    draws ``Beta(p (1-F)/F, (1-p)(1-F)/F)`` frequencies.  Inbred lines carry
    0 or 2 copies, outbred genotypes are binomial(2, p).  With ``fst = 0``
    all subpopulations share the ancestral frequencies.
    """
    n_per_pop = [int(k) for k in np.atleast_1d(n_per_pop)]
    if not 0 <= fst < 1:
        raise DataError("fst must lie in [0, 1)")
    p0 = rng.uniform(*freq_range, size=n_markers)
    blocks, labels = [], []
    for k, nk in enumerate(n_per_pop):
        if fst > 0:
            a = p0 * (1 - fst) / fst
            b = (1 - p0) * (1 - fst) / fst
            pk = rng.beta(a, b)
        else:
            pk = p0
        if mode == "inbred":
            x = 2.0 * (rng.random((nk, n_markers)) < pk)
        else:
            x = rng.binomial(2, pk, size=(nk, n_markers)).astype(float)
        blocks.append(x)
        labels += [k] * nk
    calls = np.vstack(blocks)
    ids = [f"acc{i:04d}" for i in range(calls.shape[0])]
    marker_ids = [f"snp{j:05d}" for j in range(n_markers)]
    G = GenotypeMatrix.from_array(calls, ids, marker_ids, mode)
    return G, np.array(labels)


@dataclass(frozen=True)
class Population:
    """Training accessions first, then validation accessions."""

    G: GenotypeMatrix | None
    kinship: KinshipMatrix
    n_train: int
    labels: np.ndarray | None = None

    @property
    def n_total(self):
        return self.kinship.n

    @property
    def train_ids(self):
        return self.kinship.accession_ids[:self.n_train]

    @property
    def valid_ids(self):
        return self.kinship.accession_ids[self.n_train:]


def make_population(kind, n, m=0, markers=2000, fst=0.1, subpops=2, rng=None,
                    mode="inbred"):
    """Population fixture: ``structured`` (several subpopulations),
    ``weak`` (single population) or ``identity`` (K = I, no markers).

    Training and validation accessions are interleaved over subpopulations
    before splitting so both sets see every subpopulation.
    """
    rng = np.random.default_rng() if rng is None else rng
    total = n + m
    if kind == "identity":
        ids = tuple(f"acc{i:04d}" for i in range(total))
        return Population(None, KinshipMatrix(ids, np.eye(total), True, 1.0), n)
    if kind == "structured":
        sizes = [len(s) for s in np.array_split(np.arange(total), subpops)]
        G, labels = balding_nichols(sizes, markers, fst, rng, mode)
    elif kind == "weak":
        G, labels = balding_nichols([total], markers, 0.0, rng, mode)
    else:
        raise DataError(f"unknown population kind {kind!r}")
    order = rng.permutation(total)
    G = G.select_accessions([G.accession_ids[i] for i in order])
    labels = labels[order]
    kin = kinship_from_genotypes(G, mode)
    return Population(G, kin, n, labels)


# --- traits --------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    n: int = 200
    m: int = 0
    r: int = 3
    q: int = 20
    gamma: float = 0.5
    h2_target: float = 0.5
    maf_min: float = 0.10
    le_ratio: float = 0.97
    sigma_e2: float = 1.0
    seed: int | None = None
    max_attempts: int = MAX_QTL_ATTEMPTS

    def __post_init__(self):
        if self.n < 2:
            raise DataError("need at least two training genotypes")
        if not 0 <= self.gamma <= 1:
            raise DataError("gamma must lie in [0, 1]")
        if not 0 < self.h2_target < 1:
            raise DataError("h2_target must lie in (0, 1)")
        if self.r < 1:
            raise DataError("need at least one replicate")
        if self.gamma > 0 and self.q < 1:
            raise DataError("gamma > 0 needs at least one QTL")

    @property
    def sigma_A2(self):
        """Total additive variance ``h2 (n-1) / ((1-h2) n)`` times sigma_e2."""
        h = self.h2_target
        return self.sigma_e2 * h * (self.n - 1) / ((1 - h) * self.n)


@dataclass(frozen=True)
class QtlSet:
    columns: np.ndarray
    marker_ids: tuple
    effects: np.ndarray
    v1: float
    v2: float
    attempts: int


def qtl_variances(x, effects, mode="inbred"):
    """``v1 = c sum f(1-f) a^2`` and ``v2 = a' Cov(x) a`` for QTL scores ``x``.

    For inbred lines (c = 4) ``Cov(x) = 4 Cov(x/2)`` so v2 matches the
    allele-indicator form; covariances use the population (1/n) scaling.
    """
    c = 4.0 if mode == "inbred" else 2.0
    f = x.mean(axis=0) / 2.0
    v1 = c * float(np.sum(f * (1 - f) * effects ** 2))
    xc = x - x.mean(axis=0)
    S = xc.T @ xc / x.shape[0]
    v2 = float(effects @ S @ effects)
    return v1, v2


def sample_qtls(G, cfg, rng, sigma_A2=None):
    """Draw QTL markers and equal-variance effects, redrawing until the
    QTLs are close to linkage equilibrium.
    """
    sigma_A2 = cfg.sigma_A2 if sigma_A2 is None else sigma_A2
    if cfg.gamma == 0:
        return QtlSet(np.zeros(0, int), (), np.zeros(0), 0.0, 0.0, 0)
    f = raw_frequencies(G)
    maf = np.minimum(f, 1 - f)
    eligible = np.flatnonzero(maf > cfg.maf_min)
    if len(eligible) < cfg.q:
        raise DataError(f"only {len(eligible)} markers with maf > {cfg.maf_min} for {cfg.q} QTLs")
    c = 4.0 if G.mode == "inbred" else 2.0
    for attempt in range(1, cfg.max_attempts + 1):
        cols = np.sort(rng.choice(eligible, size=cfg.q, replace=False))
        fm = f[cols]
        size = np.sqrt(cfg.gamma * sigma_A2 / (c * cfg.q * fm * (1 - fm)))
        effects = size * rng.choice((-1.0, 1.0), size=cfg.q)
        v1, v2 = qtl_variances(G.calls[:, cols], effects, G.mode)
        if min(v1, v2) / max(v1, v2) > cfg.le_ratio:
            return QtlSet(cols, tuple(G.marker_ids[j] for j in cols), effects, v1, v2, attempt)
    raise ModelError(f"no QTL set met the linkage-equilibrium ratio {cfg.le_ratio} "
                     f"in {cfg.max_attempts} attempts")


def kinship_factor(K):
    """Symmetric square root of K, clipping round-off negative eigenvalues."""
    K = K.K if isinstance(K, KinshipMatrix) else np.asarray(K, dtype=float)
    lam, U = linalg.eigh(K)
    top = max(float(np.abs(lam).max()), 1e-300)
    if lam.min() < -1e-8 * top:
        raise ModelError(f"K_total is not positive semi-definite (eigenvalue {lam.min():.3g})")
    return (U * np.sqrt(np.clip(lam, 0, None))) @ U.T


@dataclass(frozen=True)
class SimulatedTrait:
    phenotypes: PhenotypeTable
    true_G: np.ndarray
    qtls: QtlSet
    sigma_A2: float
    polygenic: np.ndarray


def simulate_trait(pop, cfg, rng, factor=None):
    """One replicated trait on the training accessions of ``pop``.

    True genetic values (QTL sum plus polygenic effect) are returned for
    training and validation accessions; phenotypes only for training ones,
    ``r`` replicates each under complete randomization, mean zero.
    """
    n, total = pop.n_train, pop.n_total
    if cfg.n != n:
        raise DataError(f"config has n={cfg.n} but population has {n} training accessions")
    sA = cfg.sigma_A2
    if cfg.gamma > 0:
        if pop.G is None:
            raise DataError("QTL effects need a genotype matrix")
        train = pop.G.select_accessions(pop.train_ids)
        qtls = sample_qtls(train, cfg, rng, sA)
        qtl_part = pop.G.calls[:, qtls.columns] @ qtls.effects
    else:
        qtls = sample_qtls(None, cfg, rng, sA)
        qtl_part = np.zeros(total)
    sa = (1 - cfg.gamma) * sA
    factor = kinship_factor(pop.kinship) if factor is None else factor
    poly = math.sqrt(sa) * (factor @ rng.standard_normal(total))
    true_G = qtl_part + poly
    codes = np.repeat(np.arange(n), cfg.r)
    y = true_G[codes] + math.sqrt(cfg.sigma_e2) * rng.standard_normal(n * cfg.r)
    ids = np.array(pop.train_ids)[codes]
    return SimulatedTrait(PhenotypeTable(ids, y), true_G, qtls, sA, poly)


# --- scenario and study ------------------------------------------------------------

def _floats(text):
    return tuple(float(t) for t in str(text).replace(";", ",").split(",") if t.strip())


def _names(text):
    return tuple(t.strip() for t in str(text).split(",") if t.strip())


@dataclass(frozen=True)
class Scenario:
    kind: str = "structured"
    n: int = 200
    m: int = 0
    markers: int = 2000
    fst: float = 0.1
    subpops: int = 2
    mode: str = "inbred"
    q: int = 20
    gamma: float = 0.5
    h2: tuple = (0.2, 0.5, 0.8)
    r: int = 3
    maf_min: float = 0.10
    le_ratio: float = 0.97
    sigma_e2: float = 1.0
    n_sims: int = 100
    estimators: tuple = ("replicates", "means", "anova")
    seed: int = 1
    alpha: float = 0.05
    scan_maf_min: float = 0.05
    threads: int = 1

    @classmethod
    def from_file(cls, path):
        """Read ``[population]``, ``[trait]`` and ``[study]`` sections (key = value)."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise DataError(f"cannot read scenario file {path}")
        kw = {}
        pop = cp["population"] if cp.has_section("population") else {}
        trait = cp["trait"] if cp.has_section("trait") else {}
        study = cp["study"] if cp.has_section("study") else {}
        conv = {"kind": str, "n": int, "m": int, "markers": int, "fst": float,
                "subpops": int, "mode": str, "q": int, "gamma": float, "h2": _floats,
                "r": int, "maf_min": float, "le_ratio": float, "sigma_e2": float,
                "n_sims": int, "estimators": _names, "seed": int, "alpha": float,
                "scan_maf_min": float, "threads": int}
        for section in (pop, trait, study):
            for key, val in section.items():
                if key not in conv:
                    raise DataError(f"{path}: unknown scenario key {key!r}")
                try:
                    kw[key] = conv[key](val)
                except ValueError:
                    raise DataError(f"{path}: bad value for {key}: {val!r}") from None
        return cls(**kw)

    def config(self, h2):
        return SimConfig(n=self.n, m=self.m, r=self.r, q=self.q, gamma=self.gamma,
                         h2_target=h2, maf_min=self.maf_min, le_ratio=self.le_ratio,
                         sigma_e2=self.sigma_e2)


ESTIMATORS = ("replicates", "means", "anova", "blup", "gwas")


class StudyContext:
    """Per-population quantities shared by all simulated traits."""

    def __init__(self, pop, r, scan_maf_min=0.05):
        self.pop = pop
        n = pop.n_train
        self.n, self.r = n, r
        Kt = pop.kinship.K
        self.K = Kt[:n, :n]
        self.K_po = Kt[n:, :n]
        self.factor = kinship_factor(Kt)
        self.codes = np.repeat(np.arange(n), r)
        self.ind_basis = IndividualBasis(self.K, self.codes)
        self.X_ind = self.ind_basis.rotate(np.ones(n * r))[:, None]
        self.R = np.eye(n) / r
        self.mean_basis = GeneralizedBasis(self.K, self.R)
        self.X_mean = self.mean_basis.rotate(np.ones(n))[:, None]
        self.Z = np.eye(n)[self.codes]
        self.markers = None
        if pop.G is not None:
            G = pop.G.select_accessions(pop.train_ids)
            f = raw_frequencies(G)
            maf = np.minimum(f, 1 - f)
            self.marker_ids = G.marker_ids
            self.scan_ok = (maf > 0) & (maf >= scan_maf_min)
            x = G.calls
            self.markers = {"one": self.ind_basis.genotype_coords(x),
                            "two": self.mean_basis.rotate(x)}

    def fit_individual(self, y):
        rm = RotatedModel(self.ind_basis.rotate(y), self.X_ind, self.ind_basis.d, 0.0)
        return reml_fit(_Shim(y), rotated=rm), rm

    def fit_means(self, ybar):
        b = self.mean_basis
        rm = RotatedModel(b.rotate(ybar), self.X_mean, b.d, b.logdet_offset)
        return reml_fit(_Shim(ybar, "means"), rotated=rm), rm


class _Shim:
    """Minimal stand-in for a VarianceModel when the rotation is precomputed."""

    def __init__(self, y, stage="individual"):
        self.y, self.stage = y, stage


def _scan_stats(rm, fit, Mstar, head, ok):
    scanner = GlsScanner(rm, 1.0 / (fit.sigma_A2 * rm.d + fit.sigma_E2), head)
    gamma, se, F, good = scanner.scan(Mstar)
    good = good & ok
    return np.where(good, stats.f.sf(np.where(good, F, 0.0), 1, scanner.df), np.nan)


def _nanmean(a):
    a = np.asarray(a, float)
    a = a[~np.isnan(a)]
    return float(a.mean()) if len(a) else math.nan


def _corr(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


def evaluate_trait(ctx, trait, estimators, alpha=0.05, h2_target=None):
    """Apply the requested estimators to one simulated trait.

    Returns a dict of per-estimator results; GWAS p-values are included
    under ``"gwas"`` for ROC pooling.
    """
    n, r = ctx.n, ctx.r
    y = trait.phenotypes.value
    ybar = np.bincount(ctx.codes, weights=y, minlength=n) / r
    out = {}
    fits = {}
    if {"replicates", "blup", "gwas"} & set(estimators):
        fits["one"] = ctx.fit_individual(y)
    if {"means", "blup", "gwas"} & set(estimators):
        fits["two"] = ctx.fit_means(ybar)
    for name, stage in (("replicates", "one"), ("means", "two")):
        if name in estimators:
            fit = fits[stage][0]
            ci = ci_delta_standard(fit, alpha)
            cil, fell = ci_delta_log(fit, alpha)
            out[name] = {"h2_hat": fit.h2, "ci_lo": ci[0], "ci_hi": ci[1],
                         "ci_log_lo": cil[0], "ci_log_hi": cil[1], "monotone": fit.monotone,
                         "sigma_A2": fit.sigma_A2, "sigma_E2": fit.sigma_E2}
    if "anova" in estimators:
        a = anova_summary(trait.phenotypes)
        sG = max(0.0, (a.MS_G - a.MS_Env) / a.r_eff)
        H2 = sG / (sG + a.MS_Env)
        ci = ci_broad_sense(a.MS_G, a.MS_Env, a.df_G, a.df_Env, a.r_eff, alpha)
        out["anova"] = {"h2_hat": H2, "ci_lo": ci[0], "ci_hi": ci[1],
                        "ci_log_lo": math.nan, "ci_log_hi": math.nan, "monotone": False,
                        "sigma_A2": sG, "sigma_E2": a.MS_Env}
    if "blup" in estimators:
        G_valid = trait.true_G[n:]
        G_train = trait.true_G[:n]
        for stage in ("one", "two"):
            fit = fits[stage][0]
            if stage == "one":
                model = VarianceModel(y, np.ones(n * r), ctx.K, Z=ctx.Z)
            else:
                model = VarianceModel(ybar, np.ones(n), ctx.K, R=ctx.R)
            sE = max(fit.sigma_E2, 1e-12 * max(fit.sigma_A2, 1e-300))
            blup = fit_blup(model, (fit.sigma_A2, sE))
            rec = {"h2_hat": fit.h2, "r_train": _corr(blup.G_hat, G_train)}
            if len(G_valid) >= 2:
                rec["r_valid"] = _corr(blup.delta * (ctx.K_po @ blup.weights), G_valid)
            else:
                rec["r_valid"] = math.nan
            out[f"blup_{stage}"] = rec
    if "gwas" in estimators and ctx.markers is not None:
        res = {}
        for stage in ("one", "two"):
            fit, rm = fits[stage]
            head = n if stage == "one" else rm.N
            res[stage] = _scan_stats(rm, fit, ctx.markers[stage], head, ctx.scan_ok)
        res["qtls"] = trait.qtls.marker_ids
        out["gwas"] = res
    return out


@dataclass
class StudyReport:
    scenario: Scenario
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    gwas: dict = field(default_factory=dict)
    population: Population | None = None

    def values(self, estimator, key, h2=None):
        return np.array([r[key] for r in self.records
                         if r["estimator"] == estimator and (h2 is None or r["h2_target"] == h2)],
                        dtype=float)

    def table_estimates(self):
        """Mean, bias, sd and sd relative to the replicate-level estimator."""
        rows = []
        for h in self.scenario.h2:
            ref = self.values("replicates", "h2_hat", h)
            sd_ref = ref.std(ddof=1) if len(ref) > 1 else math.nan
            for est in ("replicates", "means", "anova"):
                v = self.values(est, "h2_hat", h)
                if len(v) == 0:
                    continue
                sd = v.std(ddof=1) if len(v) > 1 else math.nan
                rows.append({"h2": h, "estimator": est, "n": len(v), "mean": v.mean(),
                             "bias": v.mean() - h, "sd": sd,
                             "relative_sd": sd / sd_ref if sd_ref and sd_ref > 0 else math.nan,
                             "frac_above_0.99": float(np.mean(v > 0.99))})
        return rows

    def table_coverage(self):
        """Coverage and mean width of the intervals per estimator."""
        rows = []
        for h in self.scenario.h2:
            for est, kinds in (("replicates", ("std", "log")), ("means", ("std", "log")),
                               ("anova", ("F",))):
                for kind in kinds:
                    lo_key, hi_key = ("ci_log_lo", "ci_log_hi") if kind == "log" else ("ci_lo", "ci_hi")
                    lo = self.values(est, lo_key, h)
                    hi = self.values(est, hi_key, h)
                    if len(lo) == 0:
                        continue
                    rows.append({"h2": h, "estimator": est, "interval": kind, "n": len(lo),
                                 "coverage": float(np.mean((lo <= h) & (h <= hi))),
                                 "width": float(np.mean(hi - lo))})
        return rows

    def table_accuracy(self, low=0.3):
        """Mean validation correlation per stage, overall and for traits whose
        means-based estimate fell below ``low``."""
        rows = []
        for h in self.scenario.h2:
            hm = {r["sim"]: r["h2_hat"] for r in self.records
                  if r["estimator"] == "means" and r["h2_target"] == h}
            for stage in ("one", "two"):
                recs = [r for r in self.records
                        if r["estimator"] == f"blup_{stage}" and r["h2_target"] == h]
                if not recs:
                    continue
                rv = np.array([r["r_valid"] for r in recs], float)
                sims = [r["sim"] for r in recs]
                low_mask = np.array([hm.get(s, math.nan) < low for s in sims])
                rows.append({"h2": h, "stage": stage, "n": len(recs),
                             "r_train": _nanmean([r["r_train"] for r in recs]),
                             "r_valid": _nanmean(rv),
                             "n_low": int(low_mask.sum()),
                             "r_valid_low": _nanmean(rv[low_mask])})
        return rows

    def table_gwas(self):
        rows = []
        for h, res in sorted(self.gwas.items()):
            for stage in ("one", "two"):
                ps = [p for p, _ in res[stage]]
                if not ps:
                    continue
                labels = [lab for _, lab in res[stage]]
                p = np.concatenate(ps)
                lab = np.concatenate(labels)
                roc = roc_from_labels(p, lab)
                neg = (~lab) & ~np.isnan(p)
                rows.append({"h2": h, "stage": stage, "n_sims": len(ps),
                             "auc": roc.auc() if roc.n_positive and roc.n_negative else math.nan,
                             "frac_nonqtl_p_below_alpha": float(np.mean(p[neg] < self.scenario.alpha))
                             if neg.any() else math.nan})
        return rows

    def roc(self, h2, stage):
        res = self.gwas[h2][stage]
        return roc_from_labels(np.concatenate([p for p, _ in res]),
                               np.concatenate([lab for _, lab in res]))

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        tables = {"estimates.csv": self.table_estimates(), "coverage.csv": self.table_coverage(),
                  "accuracy.csv": self.table_accuracy(), "gwas.csv": self.table_gwas(),
                  "traits.csv": self.records, "failures.csv": self.failures}
        for name, rows in tables.items():
            path = os.path.join(out_dir, name)
            write_rows(rows, path)
            paths.append(path)
        return paths


def write_rows(rows, path, columns=None):
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{v:.10g}"
    return v


def run_study(scenario, population=None, keep_traits=None, progress=None):
    """Simulate ``n_sims`` traits per heritability level and evaluate them.

    The population (and its kinship) is drawn once from the first child of
    the seed; each trait uses its own spawned stream, so results do not
    depend on the number of threads.  Per-trait failures are recorded and
    do not stop the study.
    """
    sc = scenario
    unknown = set(sc.estimators) - set(ESTIMATORS)
    if unknown:
        raise DataError(f"unknown estimator {sorted(unknown)[0]!r}")
    root = np.random.SeedSequence(sc.seed)
    pop_seq, trait_seq = root.spawn(2)
    report = StudyReport(sc)
    if sc.n_sims == 0:
        return report
    if population is None:
        population = make_population(sc.kind, sc.n, sc.m, sc.markers, sc.fst, sc.subpops,
                                     np.random.default_rng(pop_seq), sc.mode)
    report.population = population
    ctx = StudyContext(population, sc.r, sc.scan_maf_min)
    seeds = trait_seq.spawn(len(sc.h2) * sc.n_sims)
    jobs = [(h, s, seeds[i * sc.n_sims + s]) for i, h in enumerate(sc.h2) for s in range(sc.n_sims)]

    def job(args):
        h, s, seq = args
        cfg = sc.config(h)
        rng = np.random.default_rng(seq)
        try:
            trait = simulate_trait(population, cfg, rng, ctx.factor)
            res = evaluate_trait(ctx, trait, sc.estimators, sc.alpha, h)
        except HeritkitError as exc:
            return h, s, None, str(exc)
        if keep_traits:
            path = os.path.join(keep_traits, f"trait_h{h:g}_{s:05d}.csv")
            write_rows([{"genotype": g, "value": v} for g, v in
                        zip(trait.phenotypes.genotype, trait.phenotypes.value)], path)
        return h, s, res, None

    if keep_traits:
        os.makedirs(keep_traits, exist_ok=True)
    if sc.threads > 1:
        with ThreadPoolExecutor(max_workers=sc.threads) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = []
        for k, jb in enumerate(jobs):
            results.append(job(jb))
            if progress:
                progress(k + 1, len(jobs))
    for h, s, res, err in results:
        if err is not None:
            report.failures.append({"h2_target": h, "sim": s, "error": err})
            continue
        for est, rec in res.items():
            if est == "gwas":
                qtl = set(rec["qtls"])
                labels = np.array([m in qtl for m in ctx.marker_ids])
                slot = report.gwas.setdefault(h, {"one": [], "two": []})
                for stage in ("one", "two"):
                    slot[stage].append((rec[stage], labels))
                continue
            row = {"h2_target": h, "sim": s, "estimator": est}
            row.update(rec)
            report.records.append(row)
    return report
