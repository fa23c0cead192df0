import attr
import numpy as np
import pandas as pd
import scipy.special
import logging

logger = logging.getLogger(__name__)

BOS = '<bos>'
EOS = '<eos>'
UNK = '<unk>'
BLANK = '<blank>'
MASK = '<mask>'
RESERVED_TOKENS = (BOS, EOS, UNK, BLANK, MASK)
BOS_ID, EOS_ID, UNK_ID, BLANK_ID, MASK_ID = range(len(RESERVED_TOKENS))

MAX_VOCABULARY_SIZE = 2**31
ROW_NORMALIZATION_TOLERANCE = 1e-9

class InfeasibleLengthError(ValueError):
    pass

class OracleGuardError(ValueError):
    pass

class LengthRangeError(ValueError):
    pass

def _to_id_tuple(ids):
    return tuple(int(token_id) for token_id in ids)

@attr.s(frozen=True)
class TokenSequence:
    ids = attr.ib(converter=_to_id_tuple)

    @ids.validator
    def _check_ids(self, attribute, value):
        for token_id in value:
            if token_id < 0 or token_id >= MAX_VOCABULARY_SIZE:
                raise ValueError('Token id {} is outside the 32-bit id range'.format(token_id))

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, index):
        return self.ids[index]

def as_ids(sequence):
    """Token ids of a TokenSequence, Alignment, or plain iterable of ids."""
    if hasattr(sequence, 'ids'):
        return sequence.ids
    return _to_id_tuple(sequence)

@attr.s(frozen=True)
class Vocabulary:
    tokens = attr.ib(converter=tuple)
    _index = attr.ib(init=False, repr=False, eq=False)

    def __attrs_post_init__(self):
        if len(self.tokens) >= MAX_VOCABULARY_SIZE:
            raise ValueError('Vocabulary size {} exceeds the supported maximum'.format(len(self.tokens)))
        if self.tokens[:len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError('Vocabulary must begin with reserved tokens {}'.format(RESERVED_TOKENS))
        index = dict()
        for token_id, token in enumerate(self.tokens):
            if token in index:
                raise ValueError('Token {} appears more than once in vocabulary'.format(token))
            index[token] = token_id
        object.__setattr__(self, '_index', index)

    @classmethod
    def from_tokens(cls, content_tokens):
        content_tokens = [token for token in content_tokens if token not in RESERVED_TOKENS]
        return cls(RESERVED_TOKENS + tuple(content_tokens))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    @property
    def bos_id(self):
        return BOS_ID

    @property
    def eos_id(self):
        return EOS_ID

    @property
    def unk_id(self):
        return UNK_ID

    @property
    def blank_id(self):
        return BLANK_ID

    @property
    def mask_id(self):
        return MASK_ID

    def token_id(self, token):
        return self._index.get(token, UNK_ID)

    def encode(self, tokens):
        return TokenSequence([self.token_id(token) for token in tokens])

    def decode(self, sequence):
        ids = as_ids(sequence)
        for token_id in ids:
            if token_id >= len(self.tokens):
                raise ValueError('Token id {} not valid for vocabulary of size {}'.format(
                    token_id,
                    len(self.tokens)
                ))
        return [self.tokens[token_id] for token_id in ids]

    def validate(self, sequence):
        ids = as_ids(sequence)
        invalid = [token_id for token_id in ids if token_id >= len(self.tokens)]
        if len(invalid) > 0:
            raise ValueError('Token ids {} not valid for vocabulary of size {}'.format(
                invalid,
                len(self.tokens)
            ))
        return sequence

def _to_frozen_matrix(values):
    matrix = np.array(values, dtype=np.float64)
    matrix.setflags(write=False)
    return matrix

@attr.s(frozen=True, eq=False)
class EmissionLattice:
    """Per-position log-probability rows (M x |V'|)."""
    log_probs = attr.ib(converter=_to_frozen_matrix)

    @log_probs.validator
    def _check_shape(self, attribute, value):
        if value.ndim != 2:
            raise ValueError('Emission lattice must be two dimensional (positions x vocabulary), got shape {}'.format(value.shape))
        if value.shape[0] < 1:
            raise ValueError('Emission lattice must have at least one position')

    @classmethod
    def from_logits(cls, logits):
        return cls(log_softmax(logits))

    @classmethod
    def from_probs(cls, probs):
        with np.errstate(divide='ignore'):
            return cls(np.log(np.asarray(probs, dtype=np.float64)))

    @property
    def num_positions(self):
        return self.log_probs.shape[0]

    @property
    def width(self):
        return self.log_probs.shape[1]

    def probs(self):
        return np.exp(self.log_probs)

@attr.s(frozen=True)
class CorpusEntry:
    id = attr.ib(converter=str)
    source = attr.ib()
    hypothesis = attr.ib(default=None)
    reference = attr.ib(default=None)
    metadata = attr.ib(default=None)

def check_unique_ids(entries):
    seen = set()
    duplicates = list()
    for entry in entries:
        if entry.id in seen:
            duplicates.append(entry.id)
        seen.add(entry.id)
    if len(duplicates) > 0:
        raise ValueError('Corpus entry ids are not unique: {}'.format(sorted(set(duplicates))))
    return entries

def logsumexp(values, axis=None):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        if axis is None:
            return -np.inf
        return np.full(np.delete(values.shape, axis), -np.inf)
    with np.errstate(divide='ignore', invalid='ignore'):
        result = scipy.special.logsumexp(values, axis=axis)
    return result

def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits, axis=-1)[..., np.newaxis]

def log_softmax_backward(grad_log_probs, log_probs):
    # d/dz of sum(g * log_softmax(z)) = g - softmax(z) * sum(g)
    grad_log_probs = np.asarray(grad_log_probs, dtype=np.float64)
    return grad_log_probs - np.exp(log_probs) * grad_log_probs.sum(axis=-1, keepdims=True)

def one_hot(ids, width):
    matrix = np.zeros((len(ids), width))
    matrix[np.arange(len(ids)), list(ids)] = 1.0
    return matrix

def alphabet_size(vocab):
    if isinstance(vocab, Vocabulary):
        return len(vocab)
    return int(vocab)

def validate_lattice(
    lattice,
    vocabulary=None,
    tolerance=ROW_NORMALIZATION_TOLERANCE
):
    """Report rows that are not normalized and width mismatches.

    Returns a data frame with one row per problem (columns ``row``, ``issue``,
    ``deviation``); an empty frame means the lattice is valid.
    """
    log_probs = lattice.log_probs if isinstance(lattice, EmissionLattice) else np.asarray(lattice, dtype=np.float64)
    problems = list()
    if vocabulary is not None and log_probs.shape[1] != alphabet_size(vocabulary):
        problems.append({
            'row': None,
            'issue': 'dimension_mismatch',
            'deviation': float(log_probs.shape[1] - alphabet_size(vocabulary))
        })
    row_totals = logsumexp(log_probs, axis=1)
    for row_index, row_total in enumerate(row_totals):
        if not np.isfinite(row_total) or abs(row_total) > tolerance:
            problems.append({
                'row': row_index,
                'issue': 'row_not_normalized',
                'deviation': float(row_total)
            })
    if len(problems) > 0:
        logger.warning('Lattice validation found {} problems'.format(len(problems)))
    return pd.DataFrame(problems, columns=['row', 'issue', 'deviation'])
