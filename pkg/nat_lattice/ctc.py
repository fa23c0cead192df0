import nat_lattice.core
import attr
import numpy as np
import logging
import itertools

logger = logging.getLogger(__name__)

DEFAULT_BEAM_SIZE = 5
DEFAULT_UPSAMPLE = 3
MAX_ORACLE_POSITIONS = 8
MAX_ORACLE_ALIGNMENTS = 10**7

@attr.s(frozen=True)
class Alignment:
    ids = attr.ib(converter=nat_lattice.core.as_ids)

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

def collapse(
    alignment,
    blank_id=nat_lattice.core.BLANK_ID
):
    """Merge consecutive repeats, then drop blanks."""
    merged = [token_id for token_id, _ in itertools.groupby(nat_lattice.core.as_ids(alignment))]
    return nat_lattice.core.TokenSequence([token_id for token_id in merged if token_id != blank_id])

def min_alignment_length(target):
    target_ids = nat_lattice.core.as_ids(target)
    repeats = sum(1 for previous, current in zip(target_ids[:-1], target_ids[1:]) if previous == current)
    return len(target_ids) + repeats

def enumerate_alignments(
    target,
    M,
    vocab,
    blank_id=nat_lattice.core.BLANK_ID
):
    width = nat_lattice.core.alphabet_size(vocab)
    if M > MAX_ORACLE_POSITIONS or width**M > MAX_ORACLE_ALIGNMENTS:
        raise nat_lattice.core.OracleGuardError('Alignment enumeration for M={} over {} symbols exceeds oracle guard'.format(
            M,
            width
        ))
    target = nat_lattice.core.TokenSequence(nat_lattice.core.as_ids(target))
    # Only target symbols and blank can collapse to the target
    symbols = sorted(set(target.ids) | {blank_id})
    alignments = list()
    for candidate in itertools.product(symbols, repeat=M):
        if collapse(candidate, blank_id=blank_id) == target:
            alignments.append(Alignment(candidate))
    return alignments

def _extended_labels(target_ids, blank_id):
    extended = [blank_id]
    for token_id in target_ids:
        extended.extend([token_id, blank_id])
    return np.array(extended, dtype=np.int64)

def _skip_allowed(extended, blank_id):
    allowed = np.zeros(len(extended), dtype=bool)
    for state in range(2, len(extended)):
        allowed[state] = extended[state] != blank_id and extended[state] != extended[state - 2]
    return allowed

def _shift(values, offset):
    shifted = np.full_like(values, -np.inf)
    shifted[offset:] = values[:-offset]
    return shifted

def _log_probs(lattice):
    if isinstance(lattice, nat_lattice.core.EmissionLattice):
        return lattice.log_probs
    return np.asarray(lattice, dtype=np.float64)

def ctc_forward_backward(
    log_probs,
    target,
    blank_id=nat_lattice.core.BLANK_ID
):
    """Forward and backward variables over the blank-interleaved states.

    ``alpha[t, s]`` includes the emission at ``t``; ``beta[t, s]`` covers
    positions after ``t`` only.
    """
    target_ids = nat_lattice.core.as_ids(target)
    num_positions = log_probs.shape[0]
    extended = _extended_labels(target_ids, blank_id)
    num_states = len(extended)
    skip = _skip_allowed(extended, blank_id)
    emissions = log_probs[:, extended]
    alpha = np.full((num_positions, num_states), -np.inf)
    alpha[0, 0] = emissions[0, 0]
    if num_states > 1:
        alpha[0, 1] = emissions[0, 1]
    for t in range(1, num_positions):
        skipped = np.where(skip, _shift(alpha[t - 1], 2), -np.inf)
        candidates = np.stack([alpha[t - 1], _shift(alpha[t - 1], 1), skipped])
        alpha[t] = emissions[t] + nat_lattice.core.logsumexp(candidates, axis=0)
    beta = np.full((num_positions, num_states), -np.inf)
    beta[-1, -1] = 0.0
    if num_states > 1:
        beta[-1, -2] = 0.0
    skip_from = np.zeros(num_states, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(num_positions - 2, -1, -1):
        ahead = emissions[t + 1] + beta[t + 1]
        following = np.full(num_states, -np.inf)
        following[:-1] = ahead[1:]
        jumped = np.full(num_states, -np.inf)
        jumped[:-2] = ahead[2:]
        jumped = np.where(skip_from, jumped, -np.inf)
        beta[t] = nat_lattice.core.logsumexp(np.stack([ahead, following, jumped]), axis=0)
    final_states = alpha[-1, -2:] if num_states > 1 else alpha[-1, -1:]
    log_marginal = float(nat_lattice.core.logsumexp(final_states))
    return alpha, beta, log_marginal, extended

def ctc_logprob_grad(
    lattice,
    target,
    blank_id=nat_lattice.core.BLANK_ID
):
    """Log marginal over all alignments and its gradient w.r.t. the lattice logits."""
    log_probs = _log_probs(lattice)
    target_ids = nat_lattice.core.as_ids(target)
    if blank_id >= log_probs.shape[1]:
        raise ValueError('Lattice of width {} has no blank column {}'.format(log_probs.shape[1], blank_id))
    required = min_alignment_length(target_ids)
    if log_probs.shape[0] < required:
        raise nat_lattice.core.InfeasibleLengthError('Target of length {} needs at least {} positions but lattice has {}'.format(
            len(target_ids),
            required,
            log_probs.shape[0]
        ))
    alpha, beta, log_marginal, extended = ctc_forward_backward(log_probs, target_ids, blank_id=blank_id)
    if not np.isfinite(log_marginal):
        logger.warning('Target has zero probability under lattice; returning zero gradient')
        return log_marginal, np.zeros_like(log_probs)
    with np.errstate(invalid='ignore'):
        state_occupancy = np.exp(alpha + beta - log_marginal)
    occupancy = np.zeros_like(log_probs)
    for state, token_id in enumerate(extended):
        occupancy[:, token_id] += state_occupancy[:, state]
    grad = nat_lattice.core.log_softmax_backward(occupancy, log_probs)
    return log_marginal, grad

def ctc_loss_grad(
    lattice,
    target,
    blank_id=nat_lattice.core.BLANK_ID
):
    log_marginal, grad = ctc_logprob_grad(lattice, target, blank_id=blank_id)
    return -log_marginal, -grad

def _log_add(a, b):
    return float(np.logaddexp(a, b))

def ctc_prefix_beam_search(
    lattice,
    beam_size=DEFAULT_BEAM_SIZE,
    blank_id=nat_lattice.core.BLANK_ID,
    n_best=None
):
    """Prefix beam search returning ``(prefix, log_prob)`` pairs, best first.

    Each prefix carries separate blank-ending and non-blank-ending masses so
    alignments that collapse to the same prefix are merged. Ties in total
    probability go to the lexicographically smaller prefix.
    """
    if beam_size < 1:
        raise ValueError('Beam size must be at least 1, got {}'.format(beam_size))
    log_probs = _log_probs(lattice)
    beams = {tuple(): (0.0, -np.inf)}
    for t in range(log_probs.shape[0]):
        row = log_probs[t]
        extended = dict()
        def accumulate(prefix, blank_mass=-np.inf, non_blank_mass=-np.inf):
            current_blank, current_non_blank = extended.get(prefix, (-np.inf, -np.inf))
            extended[prefix] = (
                _log_add(current_blank, blank_mass),
                _log_add(current_non_blank, non_blank_mass)
            )
        for prefix, (blank_mass, non_blank_mass) in beams.items():
            total = _log_add(blank_mass, non_blank_mass)
            accumulate(prefix, blank_mass=total + row[blank_id])
            for token_id, log_prob in enumerate(row):
                if token_id == blank_id or not np.isfinite(log_prob):
                    continue
                if len(prefix) > 0 and prefix[-1] == token_id:
                    accumulate(prefix + (token_id,), non_blank_mass=blank_mass + log_prob)
                    accumulate(prefix, non_blank_mass=non_blank_mass + log_prob)
                else:
                    accumulate(prefix + (token_id,), non_blank_mass=total + log_prob)
        ranked = sorted(
            extended.items(),
            key=lambda item: (-_log_add(*item[1]), item[0])
        )
        beams = dict(ranked[:beam_size])
    results = sorted(
        [(prefix, _log_add(*masses)) for prefix, masses in beams.items()],
        key=lambda item: (-item[1], item[0])
    )
    if n_best is not None:
        results = results[:n_best]
    return [(nat_lattice.core.TokenSequence(prefix), log_prob) for prefix, log_prob in results]

def ctc_decode(
    lattice,
    strategy='greedy',
    beam_size=DEFAULT_BEAM_SIZE,
    blank_id=nat_lattice.core.BLANK_ID
):
    if beam_size < 1:
        raise ValueError('Beam size must be at least 1, got {}'.format(beam_size))
    if strategy == 'greedy':
        return collapse(np.argmax(_log_probs(lattice), axis=1), blank_id=blank_id)
    if strategy == 'prefix_beam':
        return ctc_prefix_beam_search(
            lattice,
            beam_size=beam_size,
            blank_id=blank_id,
            n_best=1
        )[0][0]
    raise ValueError('CTC decode strategy \'{}\' not recognized'.format(strategy))
