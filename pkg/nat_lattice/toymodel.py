import nat_lattice.core
import nat_lattice.objectives_at_nat
import nat_lattice.ctc
import nat_lattice.dat
import nat_lattice.cmlm
import nat_lattice.mgmo
import attr
import numpy as np
import pandas as pd
import tqdm
import tqdm.notebook
import logging
import time

logger = logging.getLogger(__name__)

OBJECTIVES = ('at', 'nat', 'length', 'ctc', 'dat', 'dat_star', 'cmlm', 'mgmo')
TOY_TASKS = ('copy', 'reverse', 'multimodal_lexicon')
DEFAULT_DELTA_MAX = nat_lattice.objectives_at_nat.DEFAULT_DELTA_MAX
DEFAULT_MGMO_SAMPLES = 8
GRADCHECK_STEP = 1e-5
GRADCHECK_THRESHOLD = 1e-4
# Relative errors are measured against at least this magnitude so that
# round-off in near-zero gradients does not register as failure
GRADCHECK_DENOMINATOR_FLOOR = 1e-3

def num_positions_for(max_source_length, upsample, delta_max):
    return upsample * max_source_length + delta_max + 1

def block_shapes(
    vocab_size,
    hidden_size,
    ff_size,
    max_source_length,
    upsample,
    delta_max,
    star=False
):
    shapes = {
        'src_emb': (vocab_size, hidden_size),
        'tgt_emb': (vocab_size, hidden_size),
        'pos': (num_positions_for(max_source_length, upsample, delta_max), hidden_size),
        'w1': (hidden_size, ff_size),
        'b1': (ff_size,),
        'w2': (ff_size, hidden_size),
        'b2': (hidden_size,),
        'w_p': (hidden_size, vocab_size),
        'w_len': (hidden_size, 2 * delta_max + 1),
        'b_len': (2 * delta_max + 1,),
        'w_q': (hidden_size, hidden_size),
        'w_k': (hidden_size, hidden_size)
    }
    if star:
        shapes['w_q_star'] = (hidden_size, hidden_size)
        shapes['w_k_star'] = (hidden_size, hidden_size)
    return shapes

@attr.s(eq=False)
class ModelParams:
    """Named parameter blocks of the toy emitter plus its configuration."""
    blocks = attr.ib()
    vocab_size = attr.ib(converter=int)
    hidden_size = attr.ib(converter=int)
    ff_size = attr.ib(converter=int)
    max_source_length = attr.ib(converter=int)
    upsample = attr.ib(converter=int)
    delta_max = attr.ib(converter=int)
    star = attr.ib(default=False, converter=bool)

    def __attrs_post_init__(self):
        expected = block_shapes(**self.config_dict())
        if set(expected) != set(self.blocks):
            raise ValueError('Parameter blocks {} do not match expected blocks {}'.format(
                sorted(self.blocks),
                sorted(expected)
            ))
        for name, shape in expected.items():
            block = np.asarray(self.blocks[name], dtype=np.float64)
            if block.shape != shape:
                raise ValueError('Parameter block {} has shape {}, expected {}'.format(name, block.shape, shape))
            self.blocks[name] = block

    def config_dict(self):
        return {
            'vocab_size': self.vocab_size,
            'hidden_size': self.hidden_size,
            'ff_size': self.ff_size,
            'max_source_length': self.max_source_length,
            'upsample': self.upsample,
            'delta_max': self.delta_max,
            'star': self.star
        }

    @property
    def num_positions(self):
        return num_positions_for(self.max_source_length, self.upsample, self.delta_max)

    def num_parameters(self):
        return int(sum(block.size for block in self.blocks.values()))

    def with_blocks(self, blocks):
        return ModelParams(blocks=dict(blocks), **self.config_dict())

    def copy(self):
        return self.with_blocks({name: block.copy() for name, block in self.blocks.items()})

    def dat_params(self):
        return nat_lattice.dat.DATParams(
            w_q=self.blocks['w_q'],
            w_k=self.blocks['w_k'],
            w_q_star=self.blocks.get('w_q_star'),
            w_k_star=self.blocks.get('w_k_star')
        )

def init_params(
    vocab_size,
    hidden_size=16,
    ff_size=32,
    max_source_length=10,
    upsample=nat_lattice.ctc.DEFAULT_UPSAMPLE,
    delta_max=DEFAULT_DELTA_MAX,
    star=False,
    rng=None,
    scale=0.1
):
    if rng is None:
        rng = np.random.default_rng(0)
    vocab_size = nat_lattice.core.alphabet_size(vocab_size)
    shapes = block_shapes(
        vocab_size=vocab_size,
        hidden_size=hidden_size,
        ff_size=ff_size,
        max_source_length=max_source_length,
        upsample=upsample,
        delta_max=delta_max,
        star=star
    )
    blocks = dict()
    for name, shape in shapes.items():
        if name.startswith('b'):
            blocks[name] = np.zeros(shape)
        else:
            blocks[name] = rng.normal(scale=scale, size=shape)
    params = ModelParams(
        blocks=blocks,
        vocab_size=vocab_size,
        hidden_size=hidden_size,
        ff_size=ff_size,
        max_source_length=max_source_length,
        upsample=upsample,
        delta_max=delta_max,
        star=star
    )
    logger.info('Initialized toy emitter with {} parameters in {} blocks'.format(
        params.num_parameters(),
        len(blocks)
    ))
    return params

def zero_params_like(params):
    return params.with_blocks({name: np.zeros_like(block) for name, block in params.blocks.items()})

def _prefix_context(num_rows, num_tokens):
    # Row i sees the mean embedding of the first i tokens
    weights = np.zeros((num_rows, num_tokens))
    for row in range(1, num_rows):
        weights[row, :row] = 1.0 / row
    return weights

def _observed_context(observed, mask_id):
    observed = nat_lattice.core.as_ids(observed)
    context_ids = [token_id for token_id in observed if token_id != mask_id]
    if len(context_ids) == 0:
        return tuple(), None
    weights = np.full((len(observed), len(context_ids)), 1.0 / len(context_ids))
    return tuple(context_ids), weights

def _forward(
    params,
    source,
    num_positions,
    context_ids=tuple(),
    context_weights=None
):
    source_ids = list(nat_lattice.core.as_ids(source))
    if len(source_ids) == 0:
        raise ValueError('Toy emitter needs a non-empty source')
    if len(source_ids) > params.max_source_length:
        raise ValueError('Source of length {} exceeds the model maximum {}'.format(len(source_ids), params.max_source_length))
    if num_positions < 1 or num_positions > params.num_positions:
        raise ValueError('Cannot emit {} positions (model supports 1 to {})'.format(num_positions, params.num_positions))
    blocks = params.blocks
    pooled = blocks['src_emb'][source_ids].mean(axis=0)
    inputs = pooled[np.newaxis, :] + blocks['pos'][:num_positions]
    if len(context_ids) > 0:
        inputs = inputs + context_weights @ blocks['tgt_emb'][list(context_ids)]
    hidden = np.tanh(inputs @ blocks['w1'] + blocks['b1'])
    states = inputs + hidden @ blocks['w2'] + blocks['b2']
    logits = states @ blocks['w_p']
    return {
        'source_ids': source_ids,
        'num_positions': num_positions,
        'context_ids': tuple(context_ids),
        'context_weights': context_weights,
        'pooled': pooled,
        'inputs': inputs,
        'hidden': hidden,
        'states': states,
        'logits': logits,
        'log_probs': nat_lattice.core.log_softmax(logits),
        'length_logits': pooled @ blocks['w_len'] + blocks['b_len']
    }

def _backward(
    params,
    cache,
    grad_logits=None,
    grad_states=None,
    grad_length_logits=None
):
    blocks = params.blocks
    grads = {name: np.zeros_like(block) for name, block in blocks.items()}
    num_positions = cache['num_positions']
    d_states = np.zeros_like(cache['states'])
    if grad_logits is not None:
        grads['w_p'] += cache['states'].T @ grad_logits
        d_states += grad_logits @ blocks['w_p'].T
    if grad_states is not None:
        d_states += grad_states
    grads['b2'] += d_states.sum(axis=0)
    grads['w2'] += cache['hidden'].T @ d_states
    d_pre = (d_states @ blocks['w2'].T) * (1.0 - cache['hidden']**2)
    grads['w1'] += cache['inputs'].T @ d_pre
    grads['b1'] += d_pre.sum(axis=0)
    d_inputs = d_states + d_pre @ blocks['w1'].T
    grads['pos'][:num_positions] += d_inputs
    d_pooled = d_inputs.sum(axis=0)
    if len(cache['context_ids']) > 0:
        np.add.at(grads['tgt_emb'], list(cache['context_ids']), cache['context_weights'].T @ d_inputs)
    if grad_length_logits is not None:
        grads['w_len'] += np.outer(cache['pooled'], grad_length_logits)
        grads['b_len'] += grad_length_logits
        d_pooled += blocks['w_len'] @ grad_length_logits
    source_ids = cache['source_ids']
    np.add.at(grads['src_emb'], source_ids, d_pooled / len(source_ids))
    return grads

class ToyARScorer(nat_lattice.objectives_at_nat.ARScorer):
    """Autoregressive scorer over the toy emitter; row i conditions on the mean prefix embedding."""
    def __init__(self, params):
        self.params = params
        self.last_cache = None

    def teacher_forcing_logits(self, source, target):
        target_ids = nat_lattice.core.as_ids(target)
        cache = _forward(
            self.params,
            source,
            len(target_ids),
            context_ids=target_ids[:-1],
            context_weights=_prefix_context(len(target_ids), len(target_ids) - 1)
        )
        self.last_cache = cache
        return cache['logits']

    def logits(self, source, prefix):
        prefix_ids = nat_lattice.core.as_ids(prefix)
        cache = _forward(
            self.params,
            source,
            len(prefix_ids) + 1,
            context_ids=prefix_ids,
            context_weights=_prefix_context(len(prefix_ids) + 1, len(prefix_ids))
        )
        return cache['logits'][-1]

class ToyConditionalScorer(nat_lattice.cmlm.ConditionalLatticeScorer):
    """Conditional scorer over the toy emitter; every row sees the mean observed-token embedding."""
    def __init__(self, params, mask_id=nat_lattice.core.MASK_ID):
        self.params = params
        self.mask_id = mask_id
        self.last_cache = None

    def logits(self, source, observed):
        context_ids, context_weights = _observed_context(observed, self.mask_id)
        cache = _forward(
            self.params,
            source,
            len(observed),
            context_ids=context_ids,
            context_weights=context_weights
        )
        self.last_cache = cache
        return cache['logits']

def lattice_length(
    params,
    source,
    target_length_mode='upsampled',
    target_length=None
):
    if target_length_mode == 'upsampled':
        return params.upsample * len(nat_lattice.core.as_ids(source))
    if target_length_mode == 'exact':
        if target_length is None:
            raise ValueError('Exact target length mode needs a target length')
        return int(target_length)
    raise ValueError('Target length mode \'{}\' not recognized'.format(target_length_mode))

def forward_emissions(
    params,
    source,
    target_length_mode='upsampled',
    target_length=None,
    observed_target=None,
    mask_id=nat_lattice.core.MASK_ID
):
    """Emission lattice, decoder states and length distribution for one source.

    With ``observed_target`` the lattice has one row per target position and
    conditions on the unmasked tokens. Decoder states are ``None`` for
    single-position lattices.
    """
    if observed_target is not None:
        target_length_mode = 'exact'
        target_length = len(nat_lattice.core.as_ids(observed_target))
        context_ids, context_weights = _observed_context(observed_target, mask_id)
    else:
        context_ids, context_weights = tuple(), None
    num_positions = lattice_length(params, source, target_length_mode, target_length)
    cache = _forward(params, source, num_positions, context_ids=context_ids, context_weights=context_weights)
    lattice = nat_lattice.core.EmissionLattice(cache['log_probs'])
    states = nat_lattice.dat.DecoderStates(cache['states']) if num_positions >= 2 else None
    length_distribution = nat_lattice.objectives_at_nat.LengthDistribution.from_logits(cache['length_logits'])
    return lattice, states, length_distribution

def forward_transition(
    params,
    states,
    variant='plain'
):
    scores, _ = nat_lattice.dat.transition_scores(states, params.dat_params(), variant=variant)
    return nat_lattice.dat.TransitionMatrix.from_scores(scores)

def _check_objective(objective, params):
    if objective not in OBJECTIVES:
        raise ValueError('Objective \'{}\' not recognized (expected one of {})'.format(objective, OBJECTIVES))
    if objective == 'dat_star' and not params.star:
        raise ValueError('Objective dat_star needs parameters initialized with star=True')

def _entry_ids(entry):
    if entry.reference is None:
        raise ValueError('Corpus entry {} has no reference'.format(entry.id))
    return nat_lattice.core.as_ids(entry.source), nat_lattice.core.as_ids(entry.reference)

def prepare_frozen(
    objective,
    params,
    entry,
    rng,
    mgmo_samples=DEFAULT_MGMO_SAMPLES,
    mgmo_alpha=nat_lattice.mgmo.DEFAULT_ALPHA
):
    """Draw the random parts of an objective (CMLM mask, MgMO samples) once."""
    source_ids, target_ids = _entry_ids(entry)
    if objective == 'cmlm':
        return {'mask': nat_lattice.cmlm.sample_mask(len(target_ids), rng)}
    if objective == 'mgmo':
        cache = _forward(params, source_ids, len(target_ids))
        samples = nat_lattice.mgmo.sample_hypotheses(cache['log_probs'], mgmo_samples, rng, alpha=mgmo_alpha)
        return {'samples': samples}
    return dict()

def _evaluate(
    objective,
    params,
    entry,
    frozen,
    length_weight
):
    source_ids, target_ids = _entry_ids(entry)
    relu_pattern = None
    grad_logits = None
    grad_states = None
    weight_grads = dict()
    if objective == 'at':
        scorer = ToyARScorer(params)
        loss, grad_logits = nat_lattice.objectives_at_nat.at_xe_loss_grad(
            scorer,
            source_ids,
            target_ids + (nat_lattice.core.EOS_ID,)
        )
        cache = scorer.last_cache
    elif objective == 'cmlm':
        scorer = ToyConditionalScorer(params)
        loss, grad_logits = nat_lattice.cmlm.cmlm_loss_grad(scorer, source_ids, target_ids, frozen['mask'])
        cache = scorer.last_cache
    elif objective in ['nat', 'length', 'mgmo']:
        cache = _forward(params, source_ids, len(target_ids))
        if objective == 'nat':
            loss, grad_logits = nat_lattice.objectives_at_nat.nat_loss_grad(cache['log_probs'], target_ids)
        elif objective == 'mgmo':
            samples = frozen['samples']
            rewards = [nat_lattice.mgmo.ngram_reward(hypothesis, target_ids) for hypothesis in samples.hypotheses]
            loss, grad_logits = nat_lattice.mgmo.hypothesis_logprob_grad(cache['log_probs'], samples, rewards)
        else:
            loss = 0.0
    elif objective == 'ctc':
        cache = _forward(params, source_ids, params.upsample * len(source_ids))
        log_marginal, grad = nat_lattice.ctc.ctc_logprob_grad(cache['log_probs'], target_ids)
        loss, grad_logits = -log_marginal, -grad
    else:
        variant = 'star' if objective == 'dat_star' else 'plain'
        cache = _forward(params, source_ids, params.upsample * len(source_ids))
        states = nat_lattice.dat.DecoderStates(cache['states'])
        dat_params = params.dat_params()
        scores, transition_cache = nat_lattice.dat.transition_scores(states, dat_params, variant=variant)
        transition = nat_lattice.dat.TransitionMatrix.from_scores(scores)
        log_marginal, grad_emissions, grad_scores = nat_lattice.dat.dat_logprob_grad(cache['log_probs'], transition, target_ids)
        loss, grad_logits = -log_marginal, -grad_emissions
        grad_states, weight_grads = nat_lattice.dat.transition_backward(states, dat_params, -grad_scores, variant=variant)
        if variant == 'star':
            relu_pattern = np.concatenate([
                (transition_cache['q'] > 0).ravel(),
                (transition_cache['k'] > 0).ravel()
            ])
    grad_length_logits = None
    if objective == 'length' or (length_weight > 0 and objective in ['nat', 'cmlm']):
        weight = 1.0 if objective == 'length' else length_weight
        distribution = nat_lattice.objectives_at_nat.LengthDistribution.from_logits(cache['length_logits'])
        length_loss, length_grad = nat_lattice.objectives_at_nat.length_loss_grad(
            distribution,
            len(target_ids),
            len(source_ids)
        )
        loss += weight * length_loss
        grad_length_logits = weight * length_grad
    return loss, cache, grad_logits, grad_states, grad_length_logits, weight_grads, relu_pattern

def objective_loss_grad(
    objective,
    params,
    entry,
    rng=None,
    frozen=None,
    length_weight=0.0,
    mgmo_samples=DEFAULT_MGMO_SAMPLES,
    mgmo_alpha=nat_lattice.mgmo.DEFAULT_ALPHA
):
    """Loss of one corpus entry under an objective and gradients for every parameter block."""
    _check_objective(objective, params)
    if frozen is None:
        if objective in ['cmlm', 'mgmo'] and rng is None:
            raise ValueError('Objective {} needs a random generator'.format(objective))
        frozen = prepare_frozen(objective, params, entry, rng, mgmo_samples=mgmo_samples, mgmo_alpha=mgmo_alpha)
    loss, cache, grad_logits, grad_states, grad_length_logits, weight_grads, _ = _evaluate(
        objective,
        params,
        entry,
        frozen,
        length_weight
    )
    grads = _backward(
        params,
        cache,
        grad_logits=grad_logits,
        grad_states=grad_states,
        grad_length_logits=grad_length_logits
    )
    for name, grad in weight_grads.items():
        grads[name] += grad
    return float(loss), grads

def objective_loss(
    objective,
    params,
    entry,
    frozen,
    length_weight=0.0
):
    loss, _, _, _, _, _, relu_pattern = _evaluate(objective, params, entry, frozen, length_weight)
    return float(loss), relu_pattern

@attr.s(frozen=True, eq=False)
class GradCheckReport:
    objective = attr.ib()
    errors = attr.ib()
    step = attr.ib()
    threshold = attr.ib()

    @property
    def max_relative_error(self):
        if len(self.errors) == 0:
            return 0.0
        return float(self.errors['max_relative_error'].max())

    @property
    def passed(self):
        return self.max_relative_error <= self.threshold

    def to_json(self):
        return {
            'objective': self.objective,
            'step': self.step,
            'threshold': self.threshold,
            'passed': self.passed,
            'blocks': self.errors.to_dict(orient='records')
        }

def gradcheck(
    objective,
    params,
    instance,
    step=GRADCHECK_STEP,
    threshold=GRADCHECK_THRESHOLD,
    rng=None,
    frozen=None,
    length_weight=0.0,
    max_coordinates=None,
    progress_bar=False,
    notebook=False
):
    """Compare analytic parameter gradients with central finite differences.

    Coordinates whose perturbations flip a rectifier in the star transition
    are skipped and counted. ``max_coordinates`` caps the number of
    coordinates checked per block (sampled with ``rng``).
    """
    if step <= 0:
        raise ValueError('Finite-difference step must be positive, got {}'.format(step))
    _check_objective(objective, params)
    if rng is None:
        rng = np.random.default_rng(0)
    if frozen is None:
        frozen = prepare_frozen(objective, params, instance, rng)
    params = params.copy()
    _, analytic = objective_loss_grad(objective, params, instance, frozen=frozen, length_weight=length_weight)
    _, base_pattern = objective_loss(objective, params, instance, frozen, length_weight)
    block_names = sorted(params.blocks)
    if progress_bar:
        if notebook:
            block_names = tqdm.notebook.tqdm(block_names)
        else:
            block_names = tqdm.tqdm(block_names)
    start_time = time.time()
    rows = list()
    for name in block_names:
        block = params.blocks[name]
        coordinates = list(np.ndindex(block.shape))
        if max_coordinates is not None and len(coordinates) > max_coordinates:
            chosen = rng.choice(len(coordinates), size=max_coordinates, replace=False)
            coordinates = [coordinates[index] for index in sorted(chosen)]
        max_error = 0.0
        num_skipped = 0
        for coordinate in coordinates:
            original = block[coordinate]
            try:
                block[coordinate] = original + step
                loss_plus, pattern_plus = objective_loss(objective, params, instance, frozen, length_weight)
                block[coordinate] = original - step
                loss_minus, pattern_minus = objective_loss(objective, params, instance, frozen, length_weight)
            finally:
                block[coordinate] = original
            if base_pattern is not None and (
                not np.array_equal(pattern_plus, base_pattern) or
                not np.array_equal(pattern_minus, base_pattern)
            ):
                num_skipped += 1
                continue
            numeric = (loss_plus - loss_minus) / (2 * step)
            exact = analytic[name][coordinate]
            denominator = max(abs(numeric), abs(exact), GRADCHECK_DENOMINATOR_FLOOR)
            max_error = max(max_error, abs(numeric - exact) / denominator)
        rows.append({
            'block': name,
            'max_relative_error': max_error,
            'num_checked': len(coordinates) - num_skipped,
            'num_skipped': num_skipped
        })
    elapsed_time = time.time() - start_time
    errors = pd.DataFrame(rows, columns=['block', 'max_relative_error', 'num_checked', 'num_skipped'])
    report = GradCheckReport(objective=objective, errors=errors, step=step, threshold=threshold)
    logger.info('Gradient check for {}: max relative error {:.2e} over {} coordinates in {:.1f} seconds'.format(
        objective,
        report.max_relative_error,
        int(errors['num_checked'].sum()),
        elapsed_time
    ))
    return report

def make_toy_task(
    kind,
    vocab_size,
    min_length=3,
    max_length=8,
    pairs=1000,
    rng=None,
    id_prefix=None
):
    """Synthetic parallel corpus and its vocabulary.

    ``vocab_size`` counts content tokens. Copy and reverse sources are
    distinct tokens in ascending id order. The multimodal lexicon splits the
    content tokens into source words with two target synonyms each and draws
    one synonym per token per pair; its sources are in random order.
    """
    if kind not in TOY_TASKS:
        raise ValueError('Toy task \'{}\' not recognized (expected one of {})'.format(kind, TOY_TASKS))
    if vocab_size < 4:
        raise ValueError('Toy tasks need at least 4 content tokens, got {}'.format(vocab_size))
    if rng is None:
        rng = np.random.default_rng(0)
    if id_prefix is None:
        id_prefix = kind
    if kind == 'multimodal_lexicon':
        num_source_words = vocab_size // 3
        source_words = ['x{}'.format(index) for index in range(num_source_words)]
        synonyms = {word: ['{}_a'.format(word), '{}_b'.format(word)] for word in source_words}
        content_tokens = source_words + [synonym for word in source_words for synonym in synonyms[word]]
    else:
        num_source_words = vocab_size
        source_words = ['t{}'.format(index) for index in range(vocab_size)]
        content_tokens = source_words
    if min_length < 1 or max_length < min_length or max_length > num_source_words:
        raise ValueError('Length range {}..{} not supported with {} distinct source words'.format(
            min_length,
            max_length,
            num_source_words
        ))
    vocabulary = nat_lattice.core.Vocabulary.from_tokens(content_tokens)
    entries = list()
    for pair_index in range(pairs):
        length = int(rng.integers(min_length, max_length + 1))
        chosen = rng.choice(num_source_words, size=length, replace=False)
        if kind == 'multimodal_lexicon':
            source_tokens = [source_words[index] for index in chosen]
            reference_tokens = [synonyms[word][int(rng.integers(0, 2))] for word in source_tokens]
        else:
            source_tokens = [source_words[index] for index in sorted(chosen)]
            reference_tokens = source_tokens[::-1] if kind == 'reverse' else list(source_tokens)
        entries.append(nat_lattice.core.CorpusEntry(
            id='{}-{:05d}'.format(id_prefix, pair_index),
            source=vocabulary.encode(source_tokens),
            reference=vocabulary.encode(reference_tokens)
        ))
    logger.info('Generated {} {} pairs over {} content tokens'.format(pairs, kind, len(content_tokens)))
    return entries, vocabulary
