import nat_lattice.core
import nat_lattice.mgmo
import numpy as np
import pytest
import collections
import math

class TestSampling:
    def test_one_hot_lattice(self, rng):
        lattice = nat_lattice.core.EmissionLattice.from_probs(np.eye(7)[[5, 6]])
        samples = nat_lattice.mgmo.sample_hypotheses(lattice, 4, rng)
        assert [hypothesis.ids for hypothesis in samples.hypotheses] == [(5, 6)] * 4
        np.testing.assert_array_equal(samples.model_logprobs, 0.0)

    def test_deterministic_under_seed(self, random_lattice):
        lattice = random_lattice(3, 7)
        first = nat_lattice.mgmo.sample_hypotheses(lattice, 6, np.random.default_rng(11))
        second = nat_lattice.mgmo.sample_hypotheses(lattice, 6, np.random.default_rng(11))
        assert first.hypotheses == second.hypotheses
        np.testing.assert_array_equal(first.model_logprobs, second.model_logprobs)

    def test_uniform_frequencies(self, rng):
        lattice = nat_lattice.core.EmissionLattice.from_probs(np.full((2, 2), 0.5))
        samples = nat_lattice.mgmo.sample_hypotheses(lattice, 10**4, rng)
        counts = collections.Counter(hypothesis.ids for hypothesis in samples.hypotheses)
        assert set(counts) == {(0, 0), (0, 1), (1, 0), (1, 1)}
        for count in counts.values():
            assert abs(count / 10**4 - 0.25) <= 0.02

    def test_logprobs_match_lattice(self, rng, random_lattice):
        lattice = random_lattice(4, 7)
        samples = nat_lattice.mgmo.sample_hypotheses(lattice, 3, rng)
        for hypothesis, logprob in zip(samples.hypotheses, samples.model_logprobs):
            assert logprob == pytest.approx(sum(lattice.log_probs[position, token_id] for position, token_id in enumerate(hypothesis)))

    def test_rejects_bad_arguments(self, rng, random_lattice):
        with pytest.raises(ValueError):
            nat_lattice.mgmo.sample_hypotheses(random_lattice(2, 3), 0, rng)
        with pytest.raises(ValueError):
            nat_lattice.mgmo.SampleSet([[5]], [0.0], alpha=0.0)
        with pytest.raises(ValueError):
            nat_lattice.mgmo.SampleSet([[5]], [-np.inf])

class TestNormalizeQ:
    def test_single_sample(self):
        np.testing.assert_array_equal(nat_lattice.mgmo.normalize_q(nat_lattice.mgmo.SampleSet([[5]], [-3.0])), [1.0])

    @pytest.mark.parametrize('alpha', [0.5, 1.0, 7.0])
    def test_equal_logprobs(self, alpha):
        samples = nat_lattice.mgmo.SampleSet([[5], [6], [7], [8]], [-1.0] * 4, alpha=alpha)
        np.testing.assert_allclose(nat_lattice.mgmo.normalize_q(samples), [0.25] * 4)

    def test_sharpening(self):
        samples = nat_lattice.mgmo.SampleSet([[5], [6]], [math.log(0.8), math.log(0.2)], alpha=2.0)
        np.testing.assert_allclose(nat_lattice.mgmo.normalize_q(samples), [16.0 / 17.0, 1.0 / 17.0])

    def test_large_alpha_concentrates_on_argmax(self, rng):
        logprobs = rng.normal(size=6)
        samples = nat_lattice.mgmo.SampleSet([[5 + index] for index in range(6)], logprobs, alpha=1e3)
        q = nat_lattice.mgmo.normalize_q(samples)
        assert np.argmax(q) == np.argmax(logprobs)
        assert q.max() == pytest.approx(1.0, abs=1e-6)

    def test_dedupe(self):
        samples = nat_lattice.mgmo.SampleSet([[5], [6], [5]], [-1.0, -1.0, -1.0])
        np.testing.assert_allclose(nat_lattice.mgmo.normalize_q(samples, dedupe=True), [0.5, 0.5, 0.0])

class TestReward:
    def test_identical(self):
        assert nat_lattice.mgmo.ngram_reward([5, 6, 7, 8, 9], [5, 6, 7, 8, 9]) == 1.0

    def test_disjoint(self):
        assert nat_lattice.mgmo.ngram_reward([5, 6], [7, 8]) == 0.0

    def test_hand_computed(self):
        spec = nat_lattice.mgmo.RewardSpec([1, 2])
        assert nat_lattice.mgmo.ngram_reward([5, 6, 7], [5, 6, 8], spec) == pytest.approx(7.0 / 12.0)

    def test_clipped_counts(self):
        spec = nat_lattice.mgmo.RewardSpec([1])
        # overlap min(3, 1) = 1; precision 1/3, recall 1/2
        assert nat_lattice.mgmo.ngram_reward([5, 5, 5], [5, 6], spec) == pytest.approx(0.4)

    def test_empty_reference(self):
        with pytest.raises(ValueError):
            nat_lattice.mgmo.ngram_reward([5], [])

    def test_invalid_orders(self):
        with pytest.raises(ValueError):
            nat_lattice.mgmo.RewardSpec([0, 1])

class TestMgMOLoss:
    def test_equal_rewards(self, rng):
        samples = nat_lattice.mgmo.SampleSet([[5], [6], [7]], rng.normal(size=3), alpha=1.7)
        loss, grad = nat_lattice.mgmo.mgmo_loss_grad(samples, [0.3, 0.3, 0.3])
        assert loss == pytest.approx(-0.3)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        logprobs = rng.normal(size=5)
        rewards = rng.uniform(size=5)
        samples = nat_lattice.mgmo.SampleSet([[5 + index] for index in range(5)], logprobs, alpha=1.5)
        _, grad = nat_lattice.mgmo.mgmo_loss_grad(samples, rewards)
        step = 1e-5
        numeric = np.zeros(5)
        for index in range(5):
            plus = logprobs.copy()
            minus = logprobs.copy()
            plus[index] += step
            minus[index] -= step
            numeric[index] = (
                nat_lattice.mgmo.mgmo_loss_grad(samples.with_logprobs(plus), rewards)[0] -
                nat_lattice.mgmo.mgmo_loss_grad(samples.with_logprobs(minus), rewards)[0]
            ) / (2 * step)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-9)

    def test_lattice_gradient_matches_finite_differences(self, rng):
        logits = rng.normal(size=(3, 5))
        samples = nat_lattice.mgmo.sample_hypotheses(nat_lattice.core.log_softmax(logits), 4, rng)
        rewards = [nat_lattice.mgmo.ngram_reward(hypothesis, [1, 2, 3]) for hypothesis in samples.hypotheses]
        _, grad = nat_lattice.mgmo.hypothesis_logprob_grad(nat_lattice.core.log_softmax(logits), samples, rewards)
        step = 1e-6
        numeric = np.zeros_like(logits)
        for index in np.ndindex(logits.shape):
            plus = logits.copy()
            minus = logits.copy()
            plus[index] += step
            minus[index] -= step
            numeric[index] = (
                nat_lattice.mgmo.hypothesis_logprob_grad(nat_lattice.core.log_softmax(plus), samples, rewards)[0] -
                nat_lattice.mgmo.hypothesis_logprob_grad(nat_lattice.core.log_softmax(minus), samples, rewards)[0]
            ) / (2 * step)
        np.testing.assert_allclose(grad, numeric, atol=1e-8)

    def test_reward_count_mismatch(self):
        samples = nat_lattice.mgmo.SampleSet([[5], [6]], [-1.0, -2.0])
        with pytest.raises(ValueError):
            nat_lattice.mgmo.mgmo_loss_grad(samples, [1.0])

    def test_hypothesis_length_mismatch(self, random_lattice):
        samples = nat_lattice.mgmo.SampleSet([[5, 6]], [-1.0])
        with pytest.raises(ValueError):
            nat_lattice.mgmo.hypothesis_logprob_grad(random_lattice(3, 7), samples, [1.0])
