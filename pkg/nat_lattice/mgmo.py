import nat_lattice.core
import attr
import numpy as np
import logging
import collections

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 1.0
DEFAULT_GRANULARITIES = (1, 2, 3, 4)

def _to_sequences(hypotheses):
    return tuple(nat_lattice.core.TokenSequence(nat_lattice.core.as_ids(hypothesis)) for hypothesis in hypotheses)

def _to_frozen_vector(values):
    vector = np.array(values, dtype=np.float64)
    vector.setflags(write=False)
    return vector

@attr.s(frozen=True, eq=False)
class SampleSet:
    hypotheses = attr.ib(converter=_to_sequences)
    model_logprobs = attr.ib(converter=_to_frozen_vector)
    alpha = attr.ib(default=DEFAULT_ALPHA, converter=float)

    def __attrs_post_init__(self):
        if len(self.hypotheses) < 1:
            raise ValueError('Sample set must contain at least one hypothesis')
        if self.model_logprobs.shape != (len(self.hypotheses),):
            raise ValueError('Got {} log-probabilities for {} hypotheses'.format(
                self.model_logprobs.shape,
                len(self.hypotheses)
            ))
        if not np.all(np.isfinite(self.model_logprobs)):
            raise ValueError('Sample log-probabilities must be finite')
        if self.alpha <= 0:
            raise ValueError('Sharpness alpha must be positive, got {}'.format(self.alpha))

    def __len__(self):
        return len(self.hypotheses)

    def with_logprobs(self, model_logprobs):
        return SampleSet(self.hypotheses, model_logprobs, self.alpha)

def _to_orders(granularities):
    return tuple(sorted(set(int(order) for order in granularities)))

@attr.s(frozen=True)
class RewardSpec:
    granularities = attr.ib(default=DEFAULT_GRANULARITIES, converter=_to_orders)

    @granularities.validator
    def _check_orders(self, attribute, value):
        if len(value) == 0 or min(value) < 1:
            raise ValueError('N-gram orders must be positive, got {}'.format(value))

def sample_hypotheses(
    lattice,
    K,
    rng,
    alpha=DEFAULT_ALPHA
):
    """Draw K sequences by independent per-position categorical sampling."""
    if K < 1:
        raise ValueError('Number of samples must be at least 1, got {}'.format(K))
    log_probs = lattice.log_probs if isinstance(lattice, nat_lattice.core.EmissionLattice) else np.asarray(lattice, dtype=np.float64)
    num_positions, width = log_probs.shape
    cumulative = np.cumsum(np.exp(log_probs), axis=1)
    cumulative /= cumulative[:, -1:]
    draws = rng.random((K, num_positions))
    ids = np.sum(draws[:, :, np.newaxis] >= cumulative[np.newaxis, :, :], axis=2)
    ids = np.minimum(ids, width - 1)
    logprobs = log_probs[np.arange(num_positions)[np.newaxis, :], ids].sum(axis=1)
    return SampleSet(ids.tolist(), logprobs, alpha)

def _first_occurrence_mask(hypotheses):
    seen = set()
    keep = np.zeros(len(hypotheses), dtype=bool)
    for index, hypothesis in enumerate(hypotheses):
        if hypothesis.ids not in seen:
            keep[index] = True
            seen.add(hypothesis.ids)
    return keep

def normalize_q(
    samples,
    dedupe=False
):
    """q_k proportional to p_k ** alpha, computed in log space."""
    scaled = samples.alpha * np.asarray(samples.model_logprobs, dtype=np.float64)
    if dedupe:
        scaled = np.where(_first_occurrence_mask(samples.hypotheses), scaled, -np.inf)
    return np.exp(scaled - nat_lattice.core.logsumexp(scaled))

def _ngram_counts(ids, order):
    return collections.Counter(tuple(ids[start:start + order]) for start in range(len(ids) - order + 1))

def ngram_reward(
    hypothesis,
    reference,
    spec=RewardSpec()
):
    """Mean n-gram multiset F1 over the configured orders."""
    hypothesis_ids = nat_lattice.core.as_ids(hypothesis)
    reference_ids = nat_lattice.core.as_ids(reference)
    if len(reference_ids) == 0:
        raise ValueError('Reward requires a non-empty reference')
    scores = list()
    for order in spec.granularities:
        hypothesis_counts = _ngram_counts(hypothesis_ids, order)
        reference_counts = _ngram_counts(reference_ids, order)
        overlap = sum((hypothesis_counts & reference_counts).values())
        if overlap == 0:
            scores.append(0.0)
            continue
        precision = overlap / sum(hypothesis_counts.values())
        recall = overlap / sum(reference_counts.values())
        scores.append(2 * precision * recall / (precision + recall))
    return float(np.mean(scores))

def mgmo_loss_grad(
    samples,
    rewards,
    dedupe=False
):
    """Expected negative reward under q and its gradient w.r.t. the model log-probs."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (len(samples),):
        raise ValueError('Got {} rewards for {} hypotheses'.format(rewards.shape, len(samples)))
    q = normalize_q(samples, dedupe=dedupe)
    expected_reward = float(np.dot(q, rewards))
    grad = -samples.alpha * q * (rewards - expected_reward)
    return -expected_reward, grad

def hypothesis_logprob_grad(
    lattice,
    samples,
    rewards,
    dedupe=False
):
    """MgMO loss with sample log-probs recomputed under ``lattice``; gradient w.r.t. its logits."""
    log_probs = lattice.log_probs if isinstance(lattice, nat_lattice.core.EmissionLattice) else np.asarray(lattice, dtype=np.float64)
    num_positions = log_probs.shape[0]
    positions = np.arange(num_positions)
    for hypothesis in samples.hypotheses:
        if len(hypothesis) != num_positions:
            raise ValueError('Hypothesis of length {} does not fit lattice with {} positions'.format(len(hypothesis), num_positions))
    logprobs = [float(np.sum(log_probs[positions, list(hypothesis.ids)])) for hypothesis in samples.hypotheses]
    loss, grad_logprobs = mgmo_loss_grad(samples.with_logprobs(logprobs), rewards, dedupe=dedupe)
    grad_log_probs = np.zeros_like(log_probs)
    for hypothesis, weight in zip(samples.hypotheses, grad_logprobs):
        grad_log_probs[positions, list(hypothesis.ids)] += weight
    return loss, nat_lattice.core.log_softmax_backward(grad_log_probs, log_probs)
