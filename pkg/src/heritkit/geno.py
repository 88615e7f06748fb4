"""Genotype ingestion, allele frequencies and marker-based kinship."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ModelError

log = logging.getLogger(__name__)

PLOIDY_MODES = ("inbred", "outbred")
_ALLOWED_CALLS = {"inbred": (0, 2), "outbred": (0, 1, 2)}
# per-marker variance constant: 4 f(1-f) for inbred lines, 2 f(1-f) under HWE
_VARIANCE_CONSTANT = {"inbred": 4.0, "outbred": 2.0}
KINSHIP_BLOCK = 10_000


def _check_mode(mode):
    if mode not in PLOIDY_MODES:
        raise DataError(f"ploidy mode must be one of {PLOIDY_MODES}, got {mode!r}")


def _unique_ids(ids, what):
    ids = tuple(str(i) for i in ids)
    seen = set()
    for i in ids:
        if i in seen:
            raise DataError(f"duplicate {what} id {i!r}")
        seen.add(i)
    return ids


@dataclass(frozen=True)
class GenotypeMatrix:
    """Accessions x markers allele-count matrix without missing calls."""

    accession_ids: tuple
    marker_ids: tuple
    calls: np.ndarray
    mode: str = "inbred"

    def __post_init__(self):
        _check_mode(self.mode)
        acc = _unique_ids(self.accession_ids, "accession")
        mrk = _unique_ids(self.marker_ids, "marker")
        calls = np.asarray(self.calls, dtype=float)
        if calls.ndim != 2 or calls.shape != (len(acc), len(mrk)):
            raise DataError(
                f"calls has shape {calls.shape}, expected {(len(acc), len(mrk))}"
            )
        if np.isnan(calls).any():
            raise DataError("genotype matrix contains missing calls")
        bad = ~np.isin(calls, _ALLOWED_CALLS[self.mode])
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataError(
                f"call {calls[i, j]:g} for accession {acc[i]!r}, marker {mrk[j]!r} "
                f"not allowed in {self.mode} mode"
            )
        calls.setflags(write=False)
        object.__setattr__(self, "accession_ids", acc)
        object.__setattr__(self, "marker_ids", mrk)
        object.__setattr__(self, "calls", calls)

    @property
    def n(self):
        return len(self.accession_ids)

    @property
    def p(self):
        return len(self.marker_ids)

    @classmethod
    def from_array(cls, calls, accession_ids=None, marker_ids=None, mode="inbred",
                   impute_mean=False):
        """Build a matrix from an array that may contain NaN for missing calls.

        Missing calls are rejected with a row/column report unless
        ``impute_mean`` is set, in which case they are replaced by the
        column mean of the observed calls (2 f).
        """
        calls = np.array(calls, dtype=float)
        if calls.ndim != 2:
            raise DataError("genotype calls must be a 2-d array")
        n, p = calls.shape
        if accession_ids is None:
            accession_ids = [f"acc{i}" for i in range(n)]
        if marker_ids is None:
            marker_ids = [f"m{j}" for j in range(p)]
        missing = np.isnan(calls)
        if missing.any():
            if not impute_mean:
                rows, cols = np.nonzero(missing)
                report = ", ".join(
                    f"({accession_ids[i]}, {marker_ids[j]})"
                    for i, j in list(zip(rows, cols))[:10]
                )
                raise DataError(
                    f"{missing.sum()} missing genotype calls, first: {report}; "
                    "use impute_mean to fill them"
                )
            observed = np.where(missing, 0.0, calls)
            counts = (~missing).sum(axis=0)
            if (counts == 0).any():
                j = int(np.argmax(counts == 0))
                raise DataError(f"marker {marker_ids[j]!r} has no observed calls")
            col_mean = observed.sum(axis=0) / counts
            calls = np.where(missing, col_mean[None, :], calls)
            # imputed values are not valid allele counts; skip the call-set check
            return _unchecked(accession_ids, marker_ids, calls, mode)
        return cls(tuple(accession_ids), tuple(marker_ids), calls, mode)

    def select_accessions(self, ids):
        index = {a: i for i, a in enumerate(self.accession_ids)}
        missing = [a for a in ids if a not in index]
        if missing:
            raise DataError(f"accession {str(missing[0])!r} not present in genotype data")
        rows = [index[a] for a in ids]
        return _unchecked(tuple(ids), self.marker_ids, self.calls[rows], self.mode)

    def select_markers(self, columns):
        columns = np.asarray(columns)
        if columns.dtype == bool:
            columns = np.flatnonzero(columns)
        ids = tuple(self.marker_ids[j] for j in columns)
        return _unchecked(self.accession_ids, ids, self.calls[:, columns], self.mode)


def _unchecked(accession_ids, marker_ids, calls, mode):
    # bypasses the call-set validation for derived (already validated or imputed) data
    obj = object.__new__(GenotypeMatrix)
    calls = np.array(calls, dtype=float)
    calls.setflags(write=False)
    object.__setattr__(obj, "accession_ids", _unique_ids(accession_ids, "accession"))
    object.__setattr__(obj, "marker_ids", _unique_ids(marker_ids, "marker"))
    object.__setattr__(obj, "calls", calls)
    object.__setattr__(obj, "mode", mode)
    return obj


@dataclass(frozen=True)
class AlleleFrequencies:
    """Minor allele frequencies of the retained markers.

    ``flipped`` marks columns whose counted allele was the major one; those
    columns are recoded ``x -> 2 - x`` before use.  ``dropped`` lists the
    monomorphic or sub-threshold markers that were removed.
    """

    marker_ids: tuple
    f: np.ndarray
    flipped: np.ndarray
    dropped: tuple = field(default=())

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        if f.shape != (len(self.marker_ids),):
            raise DataError("allele frequency vector does not match marker ids")
        if ((f <= 0) | (f >= 1)).any():
            raise DataError("retained allele frequencies must lie in (0, 1)")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "flipped", np.asarray(self.flipped, dtype=bool))


def raw_frequencies(G):
    """Frequency of the counted allele per marker, ``sum_i x_il / 2n``."""
    return G.calls.sum(axis=0) / (2.0 * G.n)


def allele_frequencies(G, mode=None, maf_min=0.0):
    """Fold allele frequencies to the minor allele and filter markers.

    Markers with minor allele frequency 0 (monomorphic) or below
    ``maf_min`` are dropped and counted in the log.
    """
    mode = G.mode if mode is None else mode
    _check_mode(mode)
    if G.n == 0 or G.p == 0:
        raise DataError("empty genotype matrix")
    if mode != G.mode:
        bad = ~np.isin(G.calls, _ALLOWED_CALLS[mode])
        if bad.any():
            raise DataError(f"calls outside {_ALLOWED_CALLS[mode]} for {mode} mode")
    f = raw_frequencies(G)
    flipped = f > 0.5
    maf = np.where(flipped, 1.0 - f, f)
    keep = (maf > 0) & (maf >= maf_min)
    dropped = tuple(m for m, k in zip(G.marker_ids, keep) if not k)
    if dropped:
        log.info("dropping %d of %d markers (monomorphic or maf < %g)",
                 len(dropped), G.p, maf_min)
    ids = tuple(m for m, k in zip(G.marker_ids, keep) if k)
    return AlleleFrequencies(ids, maf[keep], flipped[keep], dropped)


@dataclass(frozen=True)
class KinshipMatrix:
    """Symmetric n x n relatedness matrix with its scaling metadata."""

    accession_ids: tuple
    K: np.ndarray
    scaled: bool = False
    scale_factor: float = 1.0

    def __post_init__(self):
        ids = _unique_ids(self.accession_ids, "accession")
        K = np.array(self.K, dtype=float)
        if K.shape != (len(ids), len(ids)):
            raise DataError(f"kinship has shape {K.shape} for {len(ids)} accessions")
        if not np.isfinite(K).all():
            raise DataError("kinship matrix contains non-finite values")
        scale = max(np.abs(K).max(), 1e-300)
        if np.abs(K - K.T).max() > 1e-10 * scale:
            raise DataError("kinship matrix is not symmetric")
        K = 0.5 * (K + K.T)
        K.setflags(write=False)
        object.__setattr__(self, "accession_ids", ids)
        object.__setattr__(self, "K", K)

    @property
    def n(self):
        return len(self.accession_ids)

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.K)[0])

    def is_psd(self, rtol=1e-8):
        return self.min_eigenvalue() >= -rtol * np.linalg.norm(self.K, 2)

    def subset(self, ids):
        """Kinship restricted to ``ids``, in the order given."""
        index = {a: i for i, a in enumerate(self.accession_ids)}
        missing = [a for a in ids if a not in index]
        if missing:
            raise DataError(f"accession {str(missing[0])!r} not present in kinship")
        rows = np.array([index[a] for a in ids], dtype=int)
        return KinshipMatrix(tuple(ids), self.K[np.ix_(rows, rows)], self.scaled,
                             self.scale_factor)

    def cross(self, row_ids, col_ids):
        """Rectangular block K[row_ids, col_ids]."""
        index = {a: i for i, a in enumerate(self.accession_ids)}
        for a in list(row_ids) + list(col_ids):
            if a not in index:
                raise DataError(f"accession {str(a)!r} not present in kinship")
        rows = [index[a] for a in row_ids]
        cols = [index[a] for a in col_ids]
        return self.K[np.ix_(rows, cols)].copy()


def _pairwise_sum(parts):
    # fixed-order tree reduction; bounds rounding growth over many blocks
    parts = list(parts)
    while len(parts) > 1:
        merged = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def standardized_scores(G, freqs, mode=None):
    """Centred and scaled marker scores ``(x - 2f) / sqrt(c f (1 - f))``."""
    mode = G.mode if mode is None else mode
    index = {m: j for j, m in enumerate(G.marker_ids)}
    try:
        cols = np.array([index[m] for m in freqs.marker_ids], dtype=int)
    except KeyError as exc:
        raise DataError(f"marker {exc.args[0]!r} missing from genotype matrix") from None
    x = G.calls[:, cols]
    x = np.where(freqs.flipped[None, :], 2.0 - x, x)
    f = freqs.f
    return (x - 2.0 * f) / np.sqrt(_VARIANCE_CONSTANT[mode] * f * (1.0 - f))


def compute_kinship(G, freqs, mode=None, block_size=KINSHIP_BLOCK, threads=1):
    """Marker-based kinship, averaged over the retained markers.

    ``K_ij = (1/p) sum_l (x_il - 2f_l)(x_jl - 2f_l) / (c f_l (1 - f_l))`` with
    ``c = 4`` for inbred lines and ``c = 2`` for outbred (HWE) genotypes.
    The result is unscaled.
    """
    mode = G.mode if mode is None else mode
    _check_mode(mode)
    if len(freqs.marker_ids) == 0:
        raise DataError("no polymorphic markers left: all markers are monomorphic")
    f = freqs.f
    if ((f <= 0) | (f >= 1)).any():
        raise DataError("allele frequencies must lie strictly inside (0, 1)")
    p = len(freqs.marker_ids)
    starts = range(0, p, block_size)

    def block(start):
        sub = AlleleFrequencies(freqs.marker_ids[start:start + block_size],
                                f[start:start + block_size],
                                freqs.flipped[start:start + block_size])
        w = standardized_scores(G, sub, mode)
        return w @ w.T

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(s) for s in starts]
    K = _pairwise_sum(parts) / p
    return KinshipMatrix(G.accession_ids, 0.5 * (K + K.T), scaled=False, scale_factor=1.0)


def centered_trace(K):
    """``tr(P K P)`` for the centring projector ``P = I - 11'/n``."""
    K = np.asarray(K)
    n = K.shape[0]
    return float(np.trace(K) - K.sum() / n)


def scale_kinship(kin):
    """Divide K by ``tr(PKP)/(n-1)`` so that ``tr(PKP) = n - 1``."""
    n = kin.n
    if n < 2:
        raise DataError("scaling needs at least two accessions")
    tr = centered_trace(kin.K)
    if tr <= 1e-12:
        raise ModelError("tr(PKP) is zero: all accessions identical under K")
    factor = tr / (n - 1)
    return KinshipMatrix(kin.accession_ids, kin.K / factor, scaled=True,
                         scale_factor=factor)


def kinship_from_genotypes(G, mode=None, maf_min=0.0, scale=True, threads=1):
    """Convenience pipeline: frequencies, kinship and (optional) scaling."""
    freqs = allele_frequencies(G, mode, maf_min)
    kin = compute_kinship(G, freqs, mode, threads=threads)
    return scale_kinship(kin) if scale else kin


# --- CSV interfaces -----------------------------------------------------------

def read_genotype_csv(path, mode="inbred", markers_as_rows=False, impute_mean=False):
    """Read ``accession,marker1,...`` rows; empty cells are missing calls.

    With ``markers_as_rows`` the file is ``marker,acc1,acc2,...`` instead.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise DataError(f"{path}: genotype file has no data rows")
    header, body = rows[0], rows[1:]
    labels = [r[0] for r in body]
    width = len(header)
    values = np.full((len(body), width - 1), np.nan)
    for i, r in enumerate(body):
        if len(r) != width:
            raise DataError(f"{path}: row {i + 2} has {len(r)} fields, expected {width}")
        for j, cell in enumerate(r[1:]):
            cell = cell.strip()
            if cell and cell.upper() not in ("NA", "NAN"):
                try:
                    values[i, j] = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {i + 2} column {j + 2}: "
                                    f"not a number: {cell!r}") from None
    if markers_as_rows:
        return GenotypeMatrix.from_array(values.T, header[1:], labels, mode, impute_mean)
    return GenotypeMatrix.from_array(values, labels, header[1:], mode, impute_mean)


def write_genotype_csv(G, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["accession", *G.marker_ids])
        for a, row in zip(G.accession_ids, G.calls):
            w.writerow([a, *(f"{v:g}" for v in row)])


def write_kinship_csv(kin, path):
    """Header row of accession ids followed by n rows of n values (10 sig. digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(kin.accession_ids)
        for row in kin.K:
            w.writerow([f"{v:.10g}" for v in row])


def read_kinship_csv(path, scaled=None):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty kinship file")
    ids = [c.strip() for c in rows[0]]
    body = rows[1:]
    if len(body) != len(ids) or any(len(r) != len(ids) for r in body):
        raise DataError(f"{path}: kinship must have {len(ids)} rows of {len(ids)} values")
    try:
        K = np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    kin = KinshipMatrix(tuple(ids), K)
    if not kin.is_psd():
        log.warning("%s: kinship has a negative eigenvalue (%.3g)", path, kin.min_eigenvalue())
    n = kin.n
    if scaled is None:
        scaled = n > 1 and abs(centered_trace(kin.K) - (n - 1)) <= 1e-6 * (n - 1)
    return KinshipMatrix(kin.accession_ids, kin.K, scaled=scaled, scale_factor=1.0)
