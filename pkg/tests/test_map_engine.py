import numpy as np
import pytest

from hbcmf.exceptions import TrainingError
from hbcmf.expfam import Family
from hbcmf.map_engine import (MapConfig, fit_map, init_factors, map_row_update, map_update_factor,
                              objective, psychic_priors)
from hbcmf.row_glm import DenseData, ObservationBlock, RowContext, row_gradient, row_negloglik
from hbcmf.schema import EntityType, ObservedMatrix, RelationalSchema, RelationSpec
from hbcmf.state import ModelState
from hbcmf.synth import RelationSynth, SynthSpec, generate, three_type_fixture

from conftest import random_context


def _two_type(counts=(3, 4), family="gaussian", seed=0, density=1.0):
    spec = SynthSpec([("a", counts[0]), ("b", counts[1])],
                     [RelationSynth("R", "a", "b", family, density)], k_true=2, seed=seed)
    return generate(spec)[0]


def _small_fixture(seed=0):
    return three_type_fixture(seed, counts=(40, 12, 20))[0]


class TestInit:
    def test_shapes(self):
        state = init_factors(_two_type(), 2, seed=0)
        assert [u.shape for u in state.factors] == [(3, 2), (4, 2)]
        assert all(np.all(np.isfinite(u)) for u in state.factors)
        np.testing.assert_array_equal(state.covs[0], np.eye(2))
        np.testing.assert_array_equal(state.means[1], np.zeros(2))

    def test_deterministic(self):
        a = init_factors(_two_type(), 3, seed=9)
        b = init_factors(_two_type(), 3, seed=9)
        for x, y in zip(a.factors, b.factors):
            assert x.tobytes() == y.tobytes()

    def test_moments(self):
        schema = RelationalSchema([EntityType(1, "a", 100_000), EntityType(2, "b", 1)],
                                  [RelationSpec("R", 1, 2, "gaussian")],
                                  {"R": ObservedMatrix("R", [0, 1], [0, 0], [0.5, -0.5])})
        u = init_factors(schema, 1, seed=1).factors[0][:, 0]
        assert abs(u.mean()) < 0.02
        assert abs(u.var() - 1.0) < 0.02


class TestRowUpdate:
    def test_gaussian_ridge(self, rng):
        ctx = random_context(rng, 3, Family.GAUSSIAN)
        v = np.vstack([b.counterparts for b in ctx.blocks])
        x = np.concatenate([b.values for b in ctx.blocks])
        ridge = np.linalg.solve(v.T @ v + ctx.prior_precision, v.T @ x + ctx.prior_precision @ ctx.prior_mean)
        np.testing.assert_allclose(map_row_update(ctx, rng.normal(size=3) * 4), ridge, atol=1e-10)

    def test_at_mode(self):
        ctx = RowContext(np.zeros(1), np.eye(1), [ObservationBlock(np.ones((1, 1)), np.array([2.0]), "gaussian")])
        np.testing.assert_allclose(map_row_update(ctx, np.ones(1)), np.ones(1), atol=1e-15)

    def test_extreme_bernoulli_start_is_monotone(self, rng):
        for _ in range(30):
            ctx = random_context(rng, 4, Family.BERNOULLI, n_obs=10)
            u = rng.normal(size=4)
            u *= 100 / np.linalg.norm(u)
            assert row_negloglik(ctx, map_row_update(ctx, u)) <= row_negloglik(ctx, u)

    def test_batched_matches_rowwise(self):
        schema = _small_fixture()
        state = init_factors(schema, 4, seed=2)
        data = DenseData(schema)
        fctx = data.factor_context(state, 0)
        batched = map_update_factor(fctx, state.factors[0])
        for i in range(fctx.n):
            np.testing.assert_allclose(batched[i], map_row_update(fctx.row_context(i), state.factors[0][i]),
                                       rtol=1e-10, atol=1e-12)

    def test_row_order_independent(self):
        schema = _small_fixture(1)
        state = init_factors(schema, 3, seed=3)
        fctx = DenseData(schema).factor_context(state, 0)
        perm = np.random.default_rng(0).permutation(fctx.n)
        direct = map_update_factor(fctx, state.factors[0])
        permuted = map_update_factor(fctx.take(perm), state.factors[0][perm])
        np.testing.assert_allclose(permuted, direct[perm], atol=1e-10)

    def test_thread_count_irrelevant(self):
        schema = three_type_fixture(0, counts=(200, 12, 20))[0]
        state = init_factors(schema, 3, seed=3)
        fctx = DenseData(schema).factor_context(state, 0)
        one = map_update_factor(fctx, state.factors[0], threads=1)
        four = map_update_factor(fctx, state.factors[0], threads=4)
        assert one.tobytes() == four.tobytes()


class TestFitMap:
    @pytest.mark.parametrize("hierarchical", [False, True])
    def test_monotone_trace(self, hierarchical):
        _, trace = fit_map(_small_fixture(), MapConfig(k=4, max_sweeps=30, hierarchical=hierarchical))
        assert np.all(np.diff(trace) <= 1e-9)

    def test_hierarchical_priors_are_niw_modes(self):
        from hbcmf.niw import NiwHyperprior, niw_mode, niw_posterior
        state, _ = fit_map(_small_fixture(), MapConfig(k=3, max_sweeps=5))
        for pos, u in enumerate(state.factors):
            mu, sigma = niw_mode(niw_posterior(NiwHyperprior.default(3), u))
            if pos == state.n_types - 1:
                np.testing.assert_allclose(state.covs[pos], sigma, atol=1e-12)
                np.testing.assert_allclose(state.means[pos], mu, atol=1e-12)

    def test_objective_recorded_matches_state(self):
        schema = _small_fixture()
        state, trace = fit_map(schema, MapConfig(k=3, max_sweeps=4, hierarchical=False))
        assert objective(DenseData(schema), state) == pytest.approx(trace[-1], rel=1e-12)

    def test_stationary_point_ridge_objective(self):
        schema = _two_type((15, 12), seed=4)
        state, _ = fit_map(schema, MapConfig(k=2, hierarchical=False, rel_tol=1e-15, max_sweeps=3000))
        data = DenseData(schema)
        for pos in range(2):
            fctx = data.factor_context(state, pos)
            assert np.abs(fctx.gradient(state.factors[pos])).max() < 1e-6

    def test_planted_recovery(self):
        spec = SynthSpec([("row", 100), ("col", 80)], [RelationSynth("Z", "row", "col", "gaussian", 0.5)],
                         k_true=5, noise=0.0, seed=0, standardize=False)
        schema, _ = generate(spec)
        weak = [(np.zeros(5), 1e6 * np.eye(5))] * 2
        state, _ = fit_map(schema, MapConfig(k=5, hierarchical=False, rel_tol=1e-12, max_sweeps=500),
                           fixed_priors=weak)
        m = schema.matrices["Z"]
        pred = np.einsum("ij,ij->i", state.factors[0][m.rows], state.factors[1][m.cols])
        assert np.sqrt(np.mean((pred - m.values) ** 2)) < 1e-3

    def test_fixed_priors_kept(self):
        sigma = np.diag([2.0, 3.0])
        state, _ = fit_map(_small_fixture(), MapConfig(k=2, max_sweeps=3, hierarchical=False),
                           fixed_priors=[(np.ones(2), sigma)] * 3)
        for mu, cov in zip(state.means, state.covs):
            np.testing.assert_array_equal(mu, np.ones(2))
            np.testing.assert_array_equal(cov, sigma)

    def test_deterministic(self):
        cfg = MapConfig(k=3, max_sweeps=5)
        a, ta = fit_map(_small_fixture(), cfg)
        b, tb = fit_map(_small_fixture(), cfg)
        assert ta == tb
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.factors, b.factors))

    def test_non_finite_objective(self):
        schema = _small_fixture()
        priors = [(np.zeros(2), np.diag([1.0, np.inf]))] + [(np.zeros(2), np.eye(2))] * 2
        with pytest.raises(TrainingError, match="sweep 1"):
            fit_map(schema, MapConfig(k=2, max_sweeps=2, hierarchical=False), fixed_priors=priors)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MapConfig(k=0)
        with pytest.raises(ValueError):
            MapConfig(rel_tol=0.0)


class TestPsychic:
    def test_identical_rows(self):
        ref = ModelState([np.ones((5, 3))], [np.zeros(3)], [np.eye(3)])
        (mu, sigma), = psychic_priors(ref)
        np.testing.assert_array_equal(np.diag(sigma), np.full(3, 1e-6))
        np.testing.assert_array_equal(mu, np.zeros(3))

    def test_variances(self):
        u = np.column_stack([[1.0, -1.0, 1.0, -1.0], [2.0, -2.0, 2.0, -2.0]])
        (mu, sigma), = psychic_priors(ModelState([u], [np.zeros(2)], [np.eye(2)]))
        np.testing.assert_array_equal(sigma, np.diag([1.0, 4.0]))
        assert mu.tolist() == [0.0, 0.0]
