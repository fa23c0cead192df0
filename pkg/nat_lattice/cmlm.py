import nat_lattice.core
import attr
import numpy as np
import logging

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 10

def _to_sorted_positions(positions):
    return tuple(sorted(set(int(position) for position in positions)))

@attr.s(frozen=True)
class MaskSet:
    positions = attr.ib(converter=_to_sorted_positions)

    def __len__(self):
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)

    def __contains__(self, position):
        return position in self.positions

    def check(self, target_length):
        invalid = [position for position in self.positions if position < 0 or position >= target_length]
        if len(invalid) > 0:
            raise ValueError('Mask positions {} not valid for target of length {}'.format(invalid, target_length))
        return self

class ConditionalLatticeScorer:
    """Scores every position of a partially masked target.

    Subclasses implement ``logits(source, observed)``, returning a
    ``len(observed) x |V|`` array of unnormalized scores.
    """
    def logits(self, source, observed):
        raise NotImplementedError('Conditional scorers must implement logits(source, observed)')

    def lattice(self, source, observed):
        return nat_lattice.core.EmissionLattice.from_logits(self.logits(source, observed))

class CallableConditionalScorer(ConditionalLatticeScorer):
    def __init__(self, function):
        self.function = function

    def logits(self, source, observed):
        return np.asarray(self.function(source, tuple(nat_lattice.core.as_ids(observed))), dtype=np.float64)

def sample_mask(
    target_length,
    rng
):
    if target_length < 1:
        raise ValueError('Cannot sample a mask for target of length {}'.format(target_length))
    num_masked = int(rng.integers(1, target_length + 1))
    positions = rng.choice(target_length, size=num_masked, replace=False)
    return MaskSet(positions)

def observe(
    target,
    mask,
    mask_id=nat_lattice.core.MASK_ID
):
    """Target with masked positions replaced by the MASK token."""
    target_ids = nat_lattice.core.as_ids(target)
    mask.check(len(target_ids))
    return nat_lattice.core.TokenSequence([
        mask_id if position in mask else token_id
        for position, token_id in enumerate(target_ids)
    ])

def cmlm_loss_grad(
    scorer,
    source,
    target,
    mask,
    mask_id=nat_lattice.core.MASK_ID
):
    target_ids = nat_lattice.core.as_ids(target)
    if len(mask) == 0:
        raise ValueError('Masked LM loss requires a non-empty mask')
    observed = observe(target_ids, mask, mask_id=mask_id)
    logits = np.asarray(scorer.logits(source, observed), dtype=np.float64)
    if logits.shape[0] != len(target_ids):
        raise ValueError('Scorer returned {} rows for target of length {}'.format(logits.shape[0], len(target_ids)))
    log_probs = nat_lattice.core.log_softmax(logits)
    positions = list(mask.positions)
    masked_tokens = [target_ids[position] for position in positions]
    loss = -float(np.sum(log_probs[positions, masked_tokens]))
    grad = np.zeros_like(log_probs)
    grad[positions] = np.exp(log_probs[positions]) - nat_lattice.core.one_hot(masked_tokens, log_probs.shape[1])
    return loss, grad

def remask_count(
    target_length,
    iteration,
    iterations
):
    return (target_length * (iterations - iteration)) // iterations

def mask_predict_decode(
    scorer,
    source,
    target_length,
    iterations=DEFAULT_ITERATIONS,
    mask_id=nat_lattice.core.MASK_ID
):
    """Iterative mask-predict decoding.

    Each round predicts the masked positions, then re-masks the
    lowest-confidence tokens on a linear schedule. Unmasked tokens are
    frozen; lower positions are re-masked first on confidence ties.
    """
    if iterations < 1:
        raise ValueError('Mask-predict needs at least one iteration, got {}'.format(iterations))
    if target_length < 1:
        raise ValueError('Target length must be at least 1, got {}'.format(target_length))
    tokens = np.full(target_length, mask_id, dtype=np.int64)
    confidence = np.zeros(target_length)
    masked = list(range(target_length))
    for iteration in range(1, iterations + 1):
        log_probs = nat_lattice.core.log_softmax(scorer.logits(source, nat_lattice.core.TokenSequence(tokens)))
        for position in masked:
            tokens[position] = int(np.argmax(log_probs[position]))
            confidence[position] = log_probs[position, tokens[position]]
        num_remask = remask_count(target_length, iteration, iterations)
        if num_remask == 0:
            break
        masked = sorted(range(target_length), key=lambda position: (confidence[position], position))[:num_remask]
        tokens[masked] = mask_id
        logger.debug('Iteration {}: re-masked {} of {} positions'.format(iteration, num_remask, target_length))
    return nat_lattice.core.TokenSequence(tokens)
