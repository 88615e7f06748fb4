"""Command-line interface: ``heritkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .design import compute_blues, read_phenotype_csv, write_matrix_csv, write_means_csv
from .errors import HeritkitError
from .geno import (kinship_from_genotypes, read_genotype_csv, read_kinship_csv,
                   write_kinship_csv)

log = logging.getLogger("heritkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _float_list(text):
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _int_list(text):
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, argv, inputs, seed, started):
    """Provenance record ``<out>.manifest.json`` next to an output."""
    manifest = {
        "command_line": ["heritkit", *argv],
        "inputs": {p: sha256(p) for p in inputs if p and os.path.isfile(p)},
        "seed": seed,
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out_path.rstrip("/\\") + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_rows(path, columns, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return f"{v:.10g}"
    return v


# --- subcommands ---------------------------------------------------------------

def cmd_kinship(a):
    G = read_genotype_csv(a.geno, a.mode, a.markers_as_rows, a.impute_mean)
    kin = kinship_from_genotypes(G, a.mode, a.maf_min, scale=not a.no_scale, threads=a.threads)
    write_kinship_csv(kin, a.out)
    return [a.out], [a.geno]


def cmd_means(a):
    pheno = read_phenotype_csv(a.pheno, a.factors)
    means = compute_blues(pheno, a.factors + a.covariates)
    write_means_csv(means, a.out_means)
    write_matrix_csv(means.genotype_ids, means.R, a.out_R)
    return [a.out_means, a.out_R], [a.pheno]


def _pheno_kin(a):
    pheno = read_phenotype_csv(a.pheno, a.factors)
    kin = read_kinship_csv(a.kinship)
    return pheno, kin


def cmd_estimate(a):
    from .herit import estimate_all, individual_model, means_model, phenotype_order
    from .reml import profile_loglik
    pheno, kin = _pheno_kin(a)
    cov = a.factors + a.covariates
    methods = ("replicates", "means", "anova") if a.method == "all" else (a.method,)
    ests = estimate_all(pheno, kin, cov, a.alpha, methods)
    cols = ["method", "h2", "sigma_A2", "sigma_E2", "ci_std_lo", "ci_std_hi",
            "ci_log_lo", "ci_log_hi", "monotone"]
    _write_rows(a.out, cols, [e.row() for e in ests])
    outs = [a.out]
    if a.dump_profile:
        grid = np.linspace(0.01, 0.99, 99)
        rows = []
        for m in methods:
            if m == "replicates":
                model = individual_model(pheno, kin, cov)[0]
            elif m == "means":
                model = means_model(compute_blues(pheno, cov, phenotype_order(pheno, kin)), kin)
            else:
                continue
            for h, v in zip(grid, profile_loglik(model, grid)):
                rows.append({"method": m, "h2": h, "loglik": v})
        _write_rows(a.dump_profile, ["method", "h2", "loglik"], rows)
        outs.append(a.dump_profile)
    return outs, [a.pheno, a.kinship]


def cmd_asympt(a):
    from .herit import asymptotic_table
    kin = read_kinship_csv(a.kinship)
    if not kin.scaled:
        log.warning("kinship is not scaled to tr(PKP) = n - 1; results assume the given scale")
    rows = asymptotic_table(kin.K, a.reps, a.h2)
    _write_rows(a.out, ["r", "h2", "sd_individual", "sd_means", "ratio"], rows)
    return [a.out], [a.kinship]


def _read_ids(spec):
    if spec and os.path.isfile(spec):
        with open(spec) as fh:
            return [line.strip().split(",")[0] for line in fh if line.strip()]
    return _csv_list(spec)


def cmd_gblup(a):
    from .gblup import PredictionSet, fit_blup, predict_unobserved, prediction_error_variance
    from .herit import individual_model, means_model, phenotype_order
    from .reml import reml_fit
    pheno, kin = _pheno_kin(a)
    cov = a.factors + a.covariates
    order = phenotype_order(pheno, kin)
    if a.stage == "one":
        model = individual_model(pheno, kin, cov)[0]
    else:
        model = means_model(compute_blues(pheno, cov, order), kin)
    fit = reml_fit(model)
    if fit.monotone:
        log.warning("monotone likelihood: shrinkage set from the boundary estimate")
    comps = (fit.sigma_A2, fit.sigma_E2)
    blup = fit_blup(model, comps, order)
    pev = np.diag(prediction_error_variance(model, comps))
    rows = [{"accession": g, "role": "train", "G_hat": v, "pev": p}
            for g, v, p in zip(order, blup.G_hat, pev)]
    pred_ids = _read_ids(a.predict)
    if pred_ids:
        train = set(order)
        missing = [g for g in pred_ids if g not in set(kin.accession_ids)]
        if missing:
            raise HeritkitError(f"accession {str(missing[0])!r} is not present in the kinship matrix")
        pred_ids = [g for g in pred_ids if g not in train]
        K_po = kin.cross(pred_ids, order)
        K_pp = kin.cross(pred_ids, pred_ids)
        ps = predict_unobserved(blup, PredictionSet(K_po, K_pp))
        pv = np.diag(prediction_error_variance(model, comps, K_po, K_pp))
        rows += [{"accession": g, "role": "predict", "G_hat": v, "pev": p}
                 for g, v, p in zip(pred_ids, ps.G_pred_hat, pv)]
    _write_rows(a.out, ["accession", "role", "G_hat", "pev"], rows)
    return [a.out], [a.pheno, a.kinship]


def cmd_cv(a):
    from .gblup import cross_validate
    pheno, kin = _pheno_kin(a)
    seed = 0 if a.seed is None else a.seed
    recs = cross_validate(pheno, kin, a.factors + a.covariates, a.folds, a.repeats, seed)
    _write_rows(a.out, ["repeat", "stage", "h2_hat", "r_train", "r_valid"], recs)
    return [a.out], [a.pheno, a.kinship]


def cmd_gwas(a):
    from .gwas import fit_null, gls_scan
    pheno, kin = _pheno_kin(a)
    G = read_genotype_csv(a.geno, a.mode, a.markers_as_rows, a.impute_mean)
    null = fit_null(pheno, kin, a.factors + a.covariates, a.stage)
    scan = gls_scan(null, G, a.maf_min, threads=a.threads, exact=a.exact)
    scan.write_csv(a.out)
    return [a.out], [a.pheno, a.geno, a.kinship]


def cmd_simulate(a):
    from dataclasses import replace
    from .sim import Scenario, run_study
    sc = Scenario.from_file(a.scenario)
    if a.seed is not None:
        sc = replace(sc, seed=a.seed)
    if a.threads:
        sc = replace(sc, threads=a.threads)
    keep = os.path.join(a.out_dir, "traits") if a.keep_traits else None
    report = run_study(sc, keep_traits=keep)
    os.makedirs(a.out_dir, exist_ok=True)
    report.write(a.out_dir)
    if report.failures:
        log.warning("%d simulated traits failed; see failures.csv", len(report.failures))
    return [a.out_dir], [a.scenario]


# --- parser -------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--verbose", "-v", action="store_true")

    p = _Parser(prog="heritkit", description=__doc__)
    p.add_argument("--version", action="version", version=f"heritkit {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    def geno_flags(sp):
        sp.add_argument("--mode", choices=("inbred", "outbred"), default="inbred")
        sp.add_argument("--markers-as-rows", action="store_true")
        sp.add_argument("--impute-mean", action="store_true")

    def pheno_flags(sp, kinship=True):
        sp.add_argument("--pheno", required=True)
        if kinship:
            sp.add_argument("--kinship", required=True)
        sp.add_argument("--factors", type=_csv_list, default=[],
                        help="comma-separated covariates coded as factors")
        sp.add_argument("--covariates", type=_csv_list, default=[],
                        help="comma-separated numeric covariates")

    sp = add("kinship", cmd_kinship, "marker-based kinship from a genotype CSV")
    sp.add_argument("--geno", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-scale", action="store_true")
    sp.add_argument("--maf-min", type=float, default=0.0)
    geno_flags(sp)

    sp = add("means", cmd_means, "genotypic means (BLUEs) and their R matrix")
    pheno_flags(sp, kinship=False)
    sp.add_argument("--out-means", required=True)
    sp.add_argument("--out-R", required=True)

    sp = add("estimate", cmd_estimate, "heritability estimates with confidence intervals")
    pheno_flags(sp)
    sp.add_argument("--method", choices=("replicates", "means", "anova", "all"), default="all")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-profile", default=None)

    sp = add("asympt", cmd_asympt, "asymptotic sd of the marker-based estimators")
    sp.add_argument("--kinship", required=True)
    sp.add_argument("--reps", type=_int_list, default=[1, 2, 3, 4])
    sp.add_argument("--h2", type=_float_list, default=[0.2, 0.5, 0.8])
    sp.add_argument("--out", required=True)

    sp = add("gblup", cmd_gblup, "G-BLUP for training and unobserved accessions")
    pheno_flags(sp)
    sp.add_argument("--predict", default=None, help="file or comma list of accessions to predict")
    sp.add_argument("--stage", choices=("one", "two"), default="one")
    sp.add_argument("--out", required=True)

    sp = add("cv", cmd_cv, "repeated genotype-level cross-validation")
    pheno_flags(sp)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--repeats", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("gwas", cmd_gwas, "GLS association scan")
    pheno_flags(sp)
    sp.add_argument("--geno", required=True)
    sp.add_argument("--stage", choices=("one", "two"), default="one")
    sp.add_argument("--maf-min", type=float, default=0.05)
    sp.add_argument("--exact", action="store_true", help="re-estimate components per marker")
    sp.add_argument("--out", required=True)
    geno_flags(sp)

    sp = add("simulate", cmd_simulate, "simulation study from a scenario file")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--keep-traits", action="store_true")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    started = time.perf_counter()
    try:
        outputs, inputs = args.func(args)
    except HeritkitError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"ERROR: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_DATA
    for out in outputs:
        write_manifest(out, argv, inputs, args.seed, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
