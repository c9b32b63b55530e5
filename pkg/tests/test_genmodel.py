import itertools
import math

import numpy as np
import pytest
from scipy.stats import norm

from backpass.genmodel import (
    HiddenAssignment, NGramPrior, GenerativeModel, init_model, log_gen_density, log_hidden_prior,
    log_joint_td, ngram_log_prob, sample_prior, topdown_mean, topdown_pass,
)
from backpass.hierarchy import micro, t3
from backpass.observation import ObservationLayerParams


def all_assignments(spec, category=0):
    per_layer = [[(g, o) for g in range(spec[l].mixtures) for o in spec[l].offsets()]
                 for l in range(spec.L)]
    for combo in itertools.product(*per_layer):
        yield HiddenAssignment(tuple(c[0] for c in combo), tuple(c[1] for c in combo), category)


def random_counts(prior, seed):
    rng = np.random.default_rng(seed)
    for c in prior.counts:
        c[...] = rng.integers(0, 6, size=c.shape)
    return prior


class TestAssignment:
    def test_validate(self):
        spec = t3()
        H = HiddenAssignment((0, 1, 2, 15), ((0, 0), (1, -1), (0, 1), (2, -2)), 1)
        H.validate(spec)
        with pytest.raises(ValueError):
            HiddenAssignment((0, 1, 2, 16), H.offsets, 1).validate(spec)
        with pytest.raises(ValueError):
            HiddenAssignment(H.gammas, ((1, 0),) + H.offsets[1:], 1).validate(spec)
        with pytest.raises(ValueError):
            HiddenAssignment(H.gammas, H.offsets, 2).validate(spec)

    def test_hashable_and_normalised(self):
        a = HiddenAssignment([np.int64(1), 0], [np.array([0, 1]), (1, 1)], 0)
        assert a == HiddenAssignment((1, 0), ((0, 1), (1, 1)), 0)
        assert len({a, HiddenAssignment((1, 0), ((0, 1), (1, 1)), 0)}) == 1


class TestDensity:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        x, mu = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
        assert log_gen_density(x, mu, 0.7) == pytest.approx(norm.logpdf(x, mu, 0.7).sum(), rel=1e-12)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            log_gen_density(np.zeros(2), np.zeros(2), 0.0)

    def test_offset_range_enforced(self):
        m = init_model(micro(), 0)
        with pytest.raises(ValueError):
            topdown_mean(np.ones((2, 2, 2)), 0, (2, 0), m.layers[0])


class TestNGram:
    @pytest.mark.parametrize("order", [1, 2])
    def test_conditionals_normalised(self, order):
        spec = t3(ngram_order=order)
        prior = random_counts(NGramPrior.empty(spec, alpha=0.5), order)
        for l in range(spec.L):
            shape = prior.counts[l].shape[:-1]
            for pre in itertools.product(*map(range, shape)):
                assert np.exp(prior.log_probs(l, pre)).sum() == pytest.approx(1.0, abs=1e-12)

    def test_scalar_matches_vector(self):
        prior = random_counts(NGramPrior.empty(t3()), 1)
        np.testing.assert_allclose([ngram_log_prob((3,), g, prior, 2) for g in range(4)],
                                   prior.log_probs(2, (3,)))

    def test_smoothing_formula(self):
        prior = NGramPrior.empty(micro(), alpha=2.0)
        prior.counts[0][1] = [3.0, 1.0]
        assert ngram_log_prob((1,), 0, prior, 0) == pytest.approx(math.log(5 / 8))

    def test_wrong_prefix_length(self):
        prior = NGramPrior.empty(micro())
        with pytest.raises(ValueError):
            ngram_log_prob((), 0, prior, 0)

    def test_total_prior_mass(self):
        spec = micro(num_categories=2)
        m = init_model(spec, 0)
        random_counts(m.prior, 4)
        m.category_logprior = np.log([0.3, 0.7])
        total = sum(math.exp(log_hidden_prior(H, m)) for c in (0, 1) for H in all_assignments(spec, c))
        assert total == pytest.approx(1.0, abs=1e-9)


class TestTopDown:
    def test_pass_shapes(self):
        spec = t3()
        H = HiddenAssignment((0,) * 4, ((0, 0),) * 4, 1)
        stack = topdown_pass(H, init_model(spec, 0))
        assert [a.shape for a in stack] == [l.shape for l in spec.layers]
        assert all((a >= 0).all() for a in stack)

    def test_joint_of_noise_free_stack(self):
        spec = micro()
        m = init_model(spec, 1, sigma0=0.5)
        H = HiddenAssignment((1, 0), ((0, 1), (-1, 0)), 0)
        stack = topdown_pass(H, m)
        # every residual is zero, so only the normalisers and the prior remain
        n = sum(a.size for a in stack[:-1])
        expect = log_hidden_prior(H, m) - n * (0.5 * math.log(2 * math.pi) + math.log(0.5))
        assert log_joint_td(H, stack, m) == pytest.approx(expect, rel=1e-12)


class TestSampling:
    def test_seeded(self):
        m = init_model(t3(), 0, sigma0=0.1)
        a, sa = sample_prior(1, m, 5)
        b, sb = sample_prior(1, m, 5)
        assert a == b
        for x, y in zip(sa, sb):
            np.testing.assert_array_equal(x, y)

    def test_clamp_respected(self):
        m = init_model(t3(), 0)
        H, _ = sample_prior(0, m, 3, clamp={3: (7, (2, -1)), 1: (2, (0, 0))})
        assert H.layer(3) == (7, (2, -1)) and H.layer(1) == (2, (0, 0))
        H.validate(m.spec)

    def test_component_frequencies_follow_prior(self):
        spec = micro(mixtures=(2, 3))
        m = init_model(spec, 0, sigma0=0.1)
        m.prior.counts[1][:] = [8.0, 0.0, 2.0]
        draws = [sample_prior(0, m, s)[0].gammas[1] for s in range(3000)]
        freq = np.bincount(draws, minlength=3) / 3000
        np.testing.assert_allclose(freq, [9 / 13, 1 / 13, 3 / 13], atol=0.03)

    def test_bad_category(self):
        with pytest.raises(ValueError):
            sample_prior(2, init_model(t3(), 0), 0)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        m = init_model(t3(), 2)
        random_counts(m.prior, 0)
        m.observation = [ObservationLayerParams(0.1 * l, 0.05, np.full(m.spec[l].channels, 0.3), 0.2)
                         for l in range(m.L)]
        m.save(tmp_path / "m.ntf")
        b = GenerativeModel.load(tmp_path / "m.ntf")
        assert b.spec.to_dict() == m.spec.to_dict()
        for p, q in zip(m.layers, b.layers):
            assert p.sigma0 == q.sigma0
            for x, y in zip(p.banks, q.banks):
                np.testing.assert_array_equal(x.weights, y.weights)
                np.testing.assert_array_equal(x.bias, y.bias)
        for x, y in zip(m.prior.counts, b.prior.counts):
            np.testing.assert_array_equal(x, y)
        assert [o.to_dict() for o in b.observation] == [o.to_dict() for o in m.observation]

    def test_bad_schema(self, tmp_path):
        m = init_model(micro(), 0)
        m.save(tmp_path / "m.ntf")
        side = tmp_path / "m.json"
        side.write_text(side.read_text().replace('"schema_version": 1', '"schema_version": 7'))
        with pytest.raises(ValueError):
            GenerativeModel.load(tmp_path / "m.ntf")
