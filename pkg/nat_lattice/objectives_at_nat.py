import nat_lattice.core
import attr
import numpy as np
import logging

logger = logging.getLogger(__name__)

DEFAULT_BEAM_SIZE = 5
DEFAULT_DELTA_MAX = 20

class ARScorer:
    """Next-token scorer for autoregressive decoding.

    Subclasses implement ``logits(source, prefix)``, returning unnormalized
    scores over the vocabulary for the token following ``prefix``.
    """
    def logits(self, source, prefix):
        raise NotImplementedError('AR scorers must implement logits(source, prefix)')

    def log_probs(self, source, prefix):
        return nat_lattice.core.log_softmax(self.logits(source, prefix))

    def teacher_forcing_logits(self, source, target):
        target = nat_lattice.core.as_ids(target)
        return np.stack([
            np.asarray(self.logits(source, target[:step]), dtype=np.float64)
            for step in range(len(target))
        ])

class CallableARScorer(ARScorer):
    def __init__(self, function):
        self.function = function

    def logits(self, source, prefix):
        return np.asarray(self.function(source, tuple(prefix)), dtype=np.float64)

def _to_frozen_vector(values):
    vector = np.array(values, dtype=np.float64)
    vector.setflags(write=False)
    return vector

@attr.s(frozen=True, eq=False)
class LengthDistribution:
    """Log-probabilities over length offsets -delta_max..+delta_max."""
    log_probs = attr.ib(converter=_to_frozen_vector)

    @log_probs.validator
    def _check_shape(self, attribute, value):
        if value.ndim != 1 or value.shape[0] % 2 != 1:
            raise ValueError('Length distribution must be a vector of odd length, got shape {}'.format(value.shape))

    @classmethod
    def from_logits(cls, logits):
        return cls(nat_lattice.core.log_softmax(logits))

    @property
    def delta_max(self):
        return (self.log_probs.shape[0] - 1) // 2

    def offset_index(self, offset):
        if abs(offset) > self.delta_max:
            raise nat_lattice.core.LengthRangeError('Length offset {} outside supported range [{}, {}]'.format(
                offset,
                -self.delta_max,
                self.delta_max
            ))
        return offset + self.delta_max

    def offsets(self):
        return np.arange(-self.delta_max, self.delta_max + 1)

@attr.s(frozen=True)
class ARDecodeResult:
    sequence = attr.ib()
    log_prob = attr.ib()
    truncated = attr.ib(default=False)

def _check_ids(ids, width):
    invalid = [token_id for token_id in ids if token_id >= width]
    if len(invalid) > 0:
        raise ValueError('Target ids {} not valid for scorer width {}'.format(invalid, width))

def at_xe_loss_grad(
    scorer,
    source,
    target
):
    """Teacher-forced cross-entropy and its gradient w.r.t. the per-step logits."""
    target_ids = nat_lattice.core.as_ids(target)
    if len(target_ids) == 0:
        raise ValueError('Autoregressive loss requires a non-empty target')
    logits = np.asarray(scorer.teacher_forcing_logits(source, target_ids), dtype=np.float64)
    _check_ids(target_ids, logits.shape[1])
    log_probs = nat_lattice.core.log_softmax(logits)
    steps = np.arange(len(target_ids))
    loss = -float(np.sum(log_probs[steps, list(target_ids)]))
    grad = np.exp(log_probs) - nat_lattice.core.one_hot(target_ids, logits.shape[1])
    return loss, grad

def at_decode(
    scorer,
    source,
    strategy='greedy',
    beam_size=DEFAULT_BEAM_SIZE,
    max_len=100,
    eos_id=nat_lattice.core.EOS_ID
):
    if max_len < 1:
        raise ValueError('Maximum decode length must be at least 1, got {}'.format(max_len))
    if beam_size < 1:
        raise ValueError('Beam size must be at least 1, got {}'.format(beam_size))
    if strategy == 'greedy':
        return _at_greedy(scorer, source, max_len, eos_id)
    if strategy == 'beam':
        return _at_beam(scorer, source, beam_size, max_len, eos_id)
    raise ValueError('Autoregressive decode strategy \'{}\' not recognized'.format(strategy))

def _at_greedy(scorer, source, max_len, eos_id):
    prefix = list()
    total = 0.0
    for step in range(max_len):
        log_probs = scorer.log_probs(source, tuple(prefix))
        token_id = int(np.argmax(log_probs))
        total += float(log_probs[token_id])
        if token_id == eos_id:
            return ARDecodeResult(nat_lattice.core.TokenSequence(prefix), total, False)
        prefix.append(token_id)
    logger.info('Greedy decode reached max_len {} without EOS'.format(max_len))
    return ARDecodeResult(nat_lattice.core.TokenSequence(prefix), total, True)

def _at_beam(scorer, source, beam_size, max_len, eos_id):
    # Hypotheses are (score, tokens, finished); finished ones keep competing
    beam = [(0.0, tuple(), False)]
    for step in range(max_len):
        candidates = list()
        for score, tokens, finished in beam:
            if finished:
                candidates.append((score, tokens, True))
                continue
            log_probs = scorer.log_probs(source, tokens)
            for token_id, log_prob in enumerate(log_probs):
                if not np.isfinite(log_prob):
                    continue
                candidates.append((score + float(log_prob), tokens + (token_id,), token_id == eos_id))
        candidates.sort(key=lambda candidate: (-candidate[0], candidate[1]))
        beam = candidates[:beam_size]
        if all(finished for _, _, finished in beam):
            break
    # Best completed hypothesis wins over any live one still in the beam
    completed = [hypothesis for hypothesis in beam if hypothesis[2]]
    if len(completed) > 0:
        score, tokens, _ = completed[0]
        return ARDecodeResult(nat_lattice.core.TokenSequence(tokens[:-1]), score, False)
    score, tokens, _ = beam[0]
    logger.info('Beam decode reached max_len {} without EOS'.format(max_len))
    return ARDecodeResult(nat_lattice.core.TokenSequence(tokens), score, True)

def _lattice_log_probs(lattice):
    if isinstance(lattice, nat_lattice.core.EmissionLattice):
        return lattice.log_probs
    return np.asarray(lattice, dtype=np.float64)

def nat_loss_grad(
    lattice,
    target
):
    log_probs = _lattice_log_probs(lattice)
    target_ids = nat_lattice.core.as_ids(target)
    if log_probs.shape[0] != len(target_ids):
        raise ValueError('Lattice has {} positions but target has {} tokens'.format(
            log_probs.shape[0],
            len(target_ids)
        ))
    _check_ids(target_ids, log_probs.shape[1])
    positions = np.arange(len(target_ids))
    loss = -float(np.sum(log_probs[positions, list(target_ids)]))
    grad = np.exp(log_probs) - nat_lattice.core.one_hot(target_ids, log_probs.shape[1])
    return loss, grad

def length_loss_grad(
    dist,
    true_length,
    source_length
):
    index = dist.offset_index(int(true_length) - int(source_length))
    loss = -float(dist.log_probs[index])
    grad = np.exp(dist.log_probs)
    grad[index] -= 1.0
    return loss, grad

def length_offset_argmax(
    dist,
    source_length,
    min_length=1
):
    offset = int(dist.offsets()[np.argmax(dist.log_probs)])
    return max(min_length, int(source_length) + offset)

def nat_argmax_decode(lattice):
    log_probs = _lattice_log_probs(lattice)
    return nat_lattice.core.TokenSequence(np.argmax(log_probs, axis=1))
