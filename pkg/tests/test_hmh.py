import numpy as np
import pytest

from hbcmf.expfam import Family
from hbcmf.hmh import (ChainConfig, ProposalCaches, hmh_init, hmh_row_step, init_row_cache, load_chain,
                       run_chain, save_chain)
from hbcmf.row_glm import DenseData, ObservationBlock, RowContext, newton_step
from hbcmf.synth import RelationSynth, SynthSpec, generate, three_type_fixture

from conftest import random_context


def _gaussian_schema(seed=0, counts=(12, 9)):
    spec = SynthSpec([("a", counts[0]), ("b", counts[1])],
                     [RelationSynth("R", "a", "b", "gaussian", 0.7)], k_true=2, seed=seed)
    return generate(spec)[0]


class TestInit:
    def test_gaussian_hessians_are_constant_curvature(self):
        schema = _gaussian_schema()
        state, caches = hmh_init(schema, 3, seed=1)
        values, mask = schema.dense("R")
        v = state.factors[1]
        for i in range(len(state.factors[0])):
            vi = v[mask[i]]
            np.testing.assert_allclose(caches[0].hessians[i], vi.T @ vi + np.eye(3), atol=1e-12)

    def test_zero_eta_keeps_row(self, rng):
        ctx = random_context(rng, 3)
        u = rng.normal(size=3)
        np.testing.assert_array_equal(init_row_cache(ctx, u, 0.0).proposal_mean, u)

    def test_deterministic(self):
        schema = _gaussian_schema()
        _, a = hmh_init(schema, 3, seed=5)
        _, b = hmh_init(schema, 3, seed=5)
        for x, y in zip(a, b):
            assert x.means.tobytes() == y.means.tobytes()
            assert x.etas.tobytes() == y.etas.tobytes()

    def test_cached_means_are_newton_steps(self):
        schema = _gaussian_schema()
        state, caches = hmh_init(schema, 2, seed=2)
        fctx = DenseData(schema).factor_context(state, 0)
        for i in range(3):
            mean, _ = newton_step(fctx.row_context(i), state.factors[0][i], caches[0].etas[i])
            np.testing.assert_allclose(caches[0].means[i], mean, atol=1e-12)


class TestRowStep:
    def test_conjugate_case_always_accepts(self, rng):
        ctx = random_context(rng, 3, Family.GAUSSIAN, n_obs=6)
        u = rng.normal(size=3)
        cache = init_row_cache(ctx, u, 1.0)
        step_rng = np.random.default_rng(0)
        accepted = 0
        for _ in range(1000):
            info = {}
            u, cache, acc = hmh_row_step(ctx, u, cache, step_rng, eta=1.0, info=info)
            accepted += acc
            assert abs(info["log_rho"]) < 1e-8
        assert accepted / 1000 == pytest.approx(1.0, abs=1e-8)

    def test_proposal_equal_to_current(self, rng):
        ctx = random_context(rng, 2, Family.BERNOULLI)
        u = rng.normal(size=2)
        cache = init_row_cache(ctx, u, 0.4)
        info = {}
        nxt, _, acc = hmh_row_step(ctx, u, cache, rng, eta=cache.eta, proposal=u, info=info)
        assert acc
        assert info["log_rho"] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_array_equal(nxt, u)

    def test_cache_coherence(self, rng):
        ctx = random_context(rng, 3, Family.BERNOULLI, n_obs=8)
        u = rng.normal(size=3)
        cache = init_row_cache(ctx, u, rng.uniform())
        seen = set()
        for _ in range(200):
            nxt, new, acc = hmh_row_step(ctx, u, cache, rng)
            seen.add(acc)
            if acc:
                mean, h = newton_step(ctx, nxt, new.eta)
                np.testing.assert_allclose(new.proposal_mean, mean, atol=1e-10)
                np.testing.assert_allclose(new.hessian, h, atol=1e-10)
            else:
                assert new is cache
                np.testing.assert_array_equal(nxt, u)
            u, cache = nxt, new
        assert seen == {True, False}

    def test_non_finite_ratio_rejected(self):
        ctx = RowContext(np.zeros(1), np.eye(1), [ObservationBlock(np.ones((1, 1)), np.array([3.0]), "poisson")])
        u = np.zeros(1)
        cache = init_row_cache(ctx, u, 0.5)
        info = {}
        nxt, new, acc = hmh_row_step(ctx, u, cache, np.random.default_rng(0), proposal=np.array([800.0]),
                                     info=info)
        assert not acc and info["diagnostic"]
        np.testing.assert_array_equal(nxt, u)
        assert new is cache


class TestChain:
    def test_default_retains_twenty(self):
        cfg = ChainConfig()
        assert cfg.samples == 20
        assert cfg.retained_epochs() == [50 + 5 * s for s in range(1, 21)]

    def test_retained_and_accounting(self):
        schema = _gaussian_schema()
        chain = run_chain(schema, ChainConfig(k=2, epochs=40, burn_in=10, thin=3, samples=10, seed=1))
        assert len(chain.samples) == 10
        assert chain.retained_epochs == [10 + 3 * s for s in range(1, 11)]
        assert chain.accepted.shape == (40, 2)
        assert np.all(chain.accepted <= chain.proposed)
        np.testing.assert_array_equal(chain.proposed[:, 0], 12)
        for s in chain.samples:
            s.check()

    def test_gaussian_eta_one_accepts(self):
        schema = _gaussian_schema(3)
        chain = run_chain(schema, ChainConfig(k=3, epochs=60, burn_in=10, thin=2, samples=5, seed=0, eta=1.0))
        assert np.all(chain.acceptance_rate() >= 0.99)

    def test_thread_independent(self):
        schema = three_type_fixture(1, counts=(150, 20, 30))[0]
        runs = [run_chain(schema, ChainConfig(k=3, epochs=12, burn_in=2, thin=2, samples=5, seed=7, threads=t))
                for t in (1, 4)]
        assert runs[0].energy == runs[1].energy
        for a, b in zip(runs[0].samples, runs[1].samples):
            assert all(x.tobytes() == y.tobytes() for x, y in zip(a.factors, b.factors))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChainConfig(epochs=10, burn_in=10)
        with pytest.raises(ValueError):
            ChainConfig(epochs=60, burn_in=50, thin=5, samples=20)
        with pytest.raises(ValueError):
            ChainConfig(eta=2.0)

    def test_save_load(self, tmp_path):
        schema = _gaussian_schema()
        chain = run_chain(schema, ChainConfig(k=2, epochs=20, burn_in=5, thin=3, samples=5, seed=2))
        save_chain(chain, tmp_path, schema.fingerprint())
        back = load_chain(tmp_path)
        assert back.retained_epochs == chain.retained_epochs
        assert back.energy == chain.energy
        np.testing.assert_array_equal(back.accepted, chain.accepted)
        for a, b in zip(back.samples, chain.samples):
            assert all(x.tobytes() == y.tobytes() for x, y in zip(a.factors, b.factors))

    @pytest.mark.slow
    def test_fixture_acceptance_sanity(self):
        schema = three_type_fixture(0)[0]
        chain = run_chain(schema, ChainConfig(seed=0))
        rates = chain.acceptance_rate(chain.config.burn_in)
        assert np.all((rates >= 0.2) & (rates <= 1.0)), rates

    @pytest.mark.slow
    def test_matches_long_reference_chain(self):
        from scipy.special import expit
        spec = SynthSpec([("a", 5), ("b", 5)], [RelationSynth("R", "a", "b", "bernoulli", 1.0)],
                         k_true=2, seed=3)
        schema = generate(spec)[0]

        def posterior_mean(chain):
            return np.mean([expit(s.factors[0] @ s.factors[1].T) for s in chain.samples], axis=0)

        short = run_chain(schema, ChainConfig(k=2, epochs=1000, burn_in=100, thin=2, samples=450, seed=1))
        long = run_chain(schema, ChainConfig(k=2, epochs=10000, burn_in=1000, thin=20, samples=450, seed=2))
        assert np.abs(posterior_mean(short) - posterior_mean(long)).max() < 0.05
