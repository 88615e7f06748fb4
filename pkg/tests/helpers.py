import numpy as np

from heritkit.design import PhenotypeTable
from heritkit.geno import GenotypeMatrix, KinshipMatrix


def random_genotypes(rng, n, p, mode="inbred", ids=None):
    if mode == "inbred":
        calls = 2.0 * (rng.random((n, p)) < rng.uniform(0.1, 0.9, p))
    else:
        calls = rng.binomial(2, rng.uniform(0.1, 0.9, p), size=(n, p)).astype(float)
    # keep every marker polymorphic
    calls[0] = 0.0
    calls[1] = 2.0
    ids = ids or [f"a{i:03d}" for i in range(n)]
    return GenotypeMatrix.from_array(calls, ids, [f"m{j:04d}" for j in range(p)], mode)


def crd_table(rng, K, r, sA=1.0, sE=1.0, ids=None, mu=0.0):
    """Completely randomized replicates of genotypes with effects ~ N(0, sA K)."""
    n = K.shape[0]
    ids = ids or [f"a{i:03d}" for i in range(n)]
    lam, U = np.linalg.eigh(K)
    g = U @ (np.sqrt(np.clip(lam, 0, None)) * rng.standard_normal(n)) * np.sqrt(sA)
    reps = np.broadcast_to(np.asarray(r), (n,))
    codes = np.repeat(np.arange(n), reps)
    y = mu + g[codes] + np.sqrt(sE) * rng.standard_normal(len(codes))
    return PhenotypeTable(np.array(ids)[codes], y), g


def as_kinship(K, prefix="a"):
    ids = tuple(f"{prefix}{i:03d}" for i in range(K.shape[0]))
    return KinshipMatrix(ids, np.asarray(K, float), False, 1.0)
