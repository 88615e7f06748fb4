import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heritkit import sim
from heritkit.design import PhenotypeTable, compute_blues
from heritkit.errors import DataError, ModelError
from heritkit.gblup import (PredictionSet, cross_validate, fit_blup, pev_henderson,
                            pev_misspecified, pev_validation_henderson, predict_observations,
                            predict_unobserved, prediction_error_variance)
from heritkit.herit import individual_model, means_model
from heritkit.reml import VarianceModel, reml_fit

from helpers import as_kinship, crd_table


def invertible_K(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T / n + 0.2 * np.eye(n)


def dense_blup(y, X, Z, K, R0, sA, sE, K_po=None):
    # closed forms through an explicit inverse of V
    V = sA * Z @ K @ Z.T + sE * R0
    Vi = np.linalg.inv(V)
    beta = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y) if X.shape[1] else np.zeros(0)
    e = Vi @ (y - X @ beta)
    G = sA * K @ Z.T @ e
    Gp = None if K_po is None else sA * K_po @ Z.T @ e
    return G, beta, Gp


def individual_instance(rng, n=20, reps=None):
    K = invertible_K(rng, n)
    reps = rng.integers(1, 4, size=n) if reps is None else np.full(n, reps)
    codes = np.repeat(np.arange(n), reps)
    Z = np.eye(n)[codes]
    X = np.column_stack([np.ones(len(codes)), rng.normal(size=len(codes))])
    y = 2.0 + Z @ rng.normal(size=n) + rng.normal(size=len(codes))
    return VarianceModel(y, X, K, Z=Z), K, Z


# --- fit_blup -----------------------------------------------------------------------

def test_blup_matches_dense_formula(rng):
    model, K, Z = individual_instance(rng)
    for sA, sE in ((1.0, 1.0), (0.3, 2.0), (4.0, 0.5)):
        fit = fit_blup(model, (sA, sE))
        G, beta, _ = dense_blup(model.y, model.X, Z, K, np.eye(model.N), sA, sE)
        assert np.allclose(fit.G_hat, G, atol=1e-10)
        assert np.allclose(fit.beta_hat, beta, atol=1e-10)
        assert fit.delta == pytest.approx(sA / sE)


def test_means_blup_matches_dense_formula(rng):
    n = 25
    K = invertible_K(rng, n)
    A = rng.normal(size=(n, n))
    R = A @ A.T / n + np.eye(n)
    model = VarianceModel(rng.normal(size=n), np.ones((n, 1)), K, R=R)
    fit = fit_blup(model, (0.7, 1.3))
    G, beta, _ = dense_blup(model.y, model.X, np.eye(n), K, R, 0.7, 1.3)
    assert np.allclose(fit.G_hat, G, atol=1e-10)
    assert np.allclose(fit.beta_hat, beta, atol=1e-10)
    assert fit.stage == "means"


def test_mixed_model_equations_hold(rng):
    model, K, Z = individual_instance(rng, reps=2)
    sA, sE = 0.8, 1.2
    fit = fit_blup(model, (sA, sE))
    X, y = model.X, model.y
    e = y - X @ fit.beta_hat - Z @ fit.G_hat
    # X' e = 0 and Z' e = (sE/sA) K^-1 G_hat
    assert np.abs(X.T @ e).max() < 1e-9
    assert np.allclose(Z.T @ e, sE / sA * np.linalg.solve(K, fit.G_hat), atol=1e-8)


def test_total_shrinkage_and_no_shrinkage(rng):
    n, r = 30, 3
    K = invertible_K(rng, n)
    pheno, _ = crd_table(rng, K, r)
    model, _ = individual_model(pheno, as_kinship(K))
    assert np.array_equal(fit_blup(model, (0.0, 1.0)).G_hat, np.zeros(n))
    # mu known to be zero: G_hat tends to the per-genotype means
    bare = VarianceModel(model.y, np.zeros((model.N, 0)), K, Z=model.Z)
    ybar = compute_blues(pheno, (), as_kinship(K).accession_ids).g_hat
    G = fit_blup(bare, (1e8, 1.0)).G_hat
    assert np.abs(G - ybar).max() < 1e-5 * ybar.std()
    with pytest.raises(ModelError):
        fit_blup(model, (1.0, 0.0))
    with pytest.raises(DataError):
        fit_blup(model, (-1.0, 1.0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_shrinkage_is_monotone(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 30))
    K = invertible_K(rng, n)
    pheno, _ = crd_table(rng, K, int(rng.integers(1, 4)))
    model, _ = individual_model(pheno, as_kinship(K))
    norms = [np.linalg.norm(fit_blup(model, (d, 1.0)).G_hat)
             for d in (0.0, 0.01, 0.1, 0.5, 1, 3, 10, 100)]
    assert all(b >= a * (1 - 1e-10) for a, b in zip(norms, norms[1:]))


# --- prediction of unobserved genotypes -----------------------------------------

def test_prediction_matches_dense_and_kinship_identity(rng):
    model, K, Z = individual_instance(rng)
    m = 6
    K_po = rng.normal(size=(m, K.shape[0])) * 0.3
    fit = fit_blup(model, (1.1, 0.9))
    pred = predict_unobserved(fit, PredictionSet(K_po))
    _, _, Gp = dense_blup(model.y, model.X, Z, K, np.eye(model.N), 1.1, 0.9, K_po)
    assert np.allclose(pred.G_pred_hat, Gp, atol=1e-10)
    assert np.allclose(pred.G_pred_hat, K_po @ np.linalg.solve(K, fit.G_hat), atol=1e-8)


def test_prediction_trivial_cases(rng):
    model, K, _ = individual_instance(rng)
    fit = fit_blup(model, (1.0, 1.0))
    zero = predict_unobserved(fit, PredictionSet(np.zeros((3, K.shape[0]))))
    assert np.array_equal(zero.G_pred_hat, np.zeros(3))
    # a validation genotype with the kinship row of training genotype 4
    dup = predict_unobserved(fit, PredictionSet(K[[4]]))
    assert dup.G_pred_hat[0] == pytest.approx(fit.G_hat[4], abs=1e-10)
    with pytest.raises(DataError):
        predict_unobserved(fit, PredictionSet(np.zeros((2, 3))))


def test_predict_observations(rng):
    model, K, Z = individual_instance(rng)
    fit = fit_blup(model, (1.0, 1.0))
    fitted = predict_observations(fit, model.X, Z)
    assert np.allclose(fitted, model.X @ fit.beta_hat + Z @ fit.G_hat)
    # unrelated genotype with a mean-only row: prediction is the intercept
    out = predict_observations(fit, [[1.0, 0.0]], np.ones((1, 1)), G=[0.0])
    assert out[0] == pytest.approx(fit.beta_hat[0])
    with pytest.raises(DataError):
        predict_observations(fit, [[1.0]], np.ones((1, 1)), G=[0.0])


# --- prediction-error variance ------------------------------------------------------

def test_pev_agrees_with_henderson(rng):
    model, K, _ = individual_instance(rng)
    for vc in ((1.0, 1.0), (0.2, 3.0)):
        pev = prediction_error_variance(model, vc)
        assert np.allclose(pev, pev_henderson(model, vc), atol=1e-9)
        assert np.linalg.eigvalsh(pev)[0] > -1e-8


def test_validation_pev_agrees_with_two_term_form(rng):
    model, K, _ = individual_instance(rng)
    n = K.shape[0]
    full = invertible_K(rng, n + 4)
    full[:n, :n] = K + 0.0
    full = 0.5 * (full + full.T)
    K_all = np.block([[K, full[n:, :n].T * 0.2], [full[n:, :n] * 0.2, np.eye(4) * 2]])
    K_po, K_pp = K_all[n:, :n], K_all[n:, n:]
    vc = (0.9, 1.1)
    pev = prediction_error_variance(model, vc, K_po, K_pp)
    assert np.allclose(pev, pev_validation_henderson(model, vc, K_po, K_pp), atol=1e-9)
    assert np.allclose(pev, pev.T)
    assert np.linalg.eigvalsh(pev)[0] > -1e-8
    with pytest.raises(DataError):
        prediction_error_variance(model, vc, K_po)


def test_pev_limits(rng):
    n, r = 15, 3
    K = invertible_K(rng, n)
    sA, sE = 0.7, 1.5
    R = np.eye(n) / r
    assert np.allclose(pev_misspecified(K, R, np.inf, sA, sE), sE / r * np.eye(n))
    assert np.allclose(pev_misspecified(K, R, 0.0, sA, sE), sA * K)
    # correct shrinkage reproduces the known-component PEV with mu known
    model = VarianceModel(np.zeros(n), np.zeros((n, 0)), K, R=R)
    assert np.allclose(pev_misspecified(K, R, sA / sE, sA, sE),
                       prediction_error_variance(model, (sA, sE)), atol=1e-10)
    # individual level, mu known, delta large: no shrinkage left
    codes = np.repeat(np.arange(n), r)
    ind = VarianceModel(np.zeros(n * r), np.zeros((n * r, 0)), K, Z=np.eye(n)[codes])
    assert np.allclose(prediction_error_variance(ind, (1e7, sE)), sE / r * np.eye(n), atol=1e-5)
    assert np.array_equal(prediction_error_variance(ind, (0.0, sE)), np.zeros((n, n)))


def test_misspecified_pev_is_worse_than_correct(rng):
    n = 20
    K = invertible_K(rng, n)
    R = np.eye(n) / 2
    good = np.trace(pev_misspecified(K, R, 1.0, 1.0, 1.0))
    for d in (0.1, 0.5, 2.0, 10.0):
        assert np.trace(pev_misspecified(K, R, d, 1.0, 1.0)) >= good - 1e-12


# --- cross-validation ------------------------------------------------------------

@pytest.fixture(scope="module")
def cv_data():
    rng = np.random.default_rng(11)
    pop = sim.make_population("weak", 60, markers=400, rng=rng)
    cfg = sim.SimConfig(n=60, r=2, q=5, gamma=0.5, h2_target=0.6)
    return pop, sim.simulate_trait(pop, cfg, rng)


def test_cv_is_deterministic(cv_data):
    pop, trait = cv_data
    a = cross_validate(trait.phenotypes, pop.kinship, repeats=3, seed=4)
    b = cross_validate(trait.phenotypes, pop.kinship, repeats=3, seed=4)
    assert a == b
    assert [r["stage"] for r in a] == ["one", "two"] * 3
    assert set(a[0]) == {"repeat", "stage", "h2_hat", "r_train", "r_valid"}
    c = cross_validate(trait.phenotypes, pop.kinship, repeats=3, seed=5)
    assert a != c


def test_cv_noiseless_training_correlation(cv_data):
    pop, trait = cv_data
    ids = np.array(pop.kinship.accession_ids)
    g = trait.true_G[:60]
    pheno = PhenotypeTable(np.repeat(ids, 2), np.repeat(g, 2))
    recs = cross_validate(pheno, pop.kinship, repeats=2, seed=1, stages=("one",))
    # replicate-level fits see zero within-genotype noise and stop at h2 = 1;
    # the means stage cannot separate noise from signal, so it is not checked
    for rec in recs:
        assert rec["h2_hat"] == 1.0
        assert rec["r_train"] == pytest.approx(1.0, abs=1e-6)


def test_cv_against_true_values(cv_data):
    pop, trait = cv_data
    recs = cross_validate(trait.phenotypes, pop.kinship, repeats=2, seed=2,
                          true_G=trait.true_G[:60])
    assert all(-1 <= r["r_valid"] <= 1 for r in recs)


def test_cv_validation(cv_data):
    pop, trait = cv_data
    with pytest.raises(DataError):
        cross_validate(trait.phenotypes, pop.kinship, folds=1)
    with pytest.raises(DataError):
        cross_validate(trait.phenotypes, pop.kinship, folds=40)


def test_underestimating_heritability_hurts_more():
    rng = np.random.default_rng(12)
    pop = sim.make_population("structured", 150, m=50, markers=1500, fst=0.1, rng=rng)
    cfg = sim.SimConfig(n=150, r=1, q=10, gamma=0.3, h2_target=0.5)
    factor = sim.kinship_factor(pop.kinship)
    K_po = pop.kinship.cross(pop.valid_ids, pop.train_ids)
    loss = {0.1: [], 0.9: []}
    for _ in range(60):
        trait = sim.simulate_trait(pop, cfg, rng, factor)
        model, _ = individual_model(trait.phenotypes, pop.kinship.subset(pop.train_ids))
        truth = trait.true_G[150:]
        best = np.corrcoef(predict_unobserved(fit_blup(model, reml_fit(model)),
                                              PredictionSet(K_po)).G_pred_hat, truth)[0, 1]
        for h in loss:
            Gp = predict_unobserved(fit_blup(model, (h, 1 - h)), PredictionSet(K_po)).G_pred_hat
            loss[h].append(best - np.corrcoef(Gp, truth)[0, 1])
    assert np.mean(loss[0.1]) > np.mean(loss[0.9])
