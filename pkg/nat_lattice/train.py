import nat_lattice.core
import nat_lattice.objectives_at_nat
import nat_lattice.ctc
import nat_lattice.dat
import nat_lattice.cmlm
import nat_lattice.metrics
import nat_lattice.toymodel
import attr
import numpy as np
import pandas as pd
import tqdm
import tqdm.notebook
import concurrent.futures
import functools
import logging
import time

logger = logging.getLogger(__name__)

DECODE_METHODS = ('at', 'nat', 'ctc', 'dat', 'dat-star', 'cmlm')
DEFAULT_STRATEGIES = {
    'at': 'greedy',
    'nat': 'argmax',
    'ctc': 'greedy',
    'dat': 'greedy',
    'dat-star': 'greedy',
    'cmlm': 'mask_predict'
}

class TrainingDivergedError(FloatingPointError):
    pass

def _check_objective(instance, attribute, value):
    if value not in nat_lattice.toymodel.OBJECTIVES:
        raise ValueError('Objective \'{}\' not recognized (expected one of {})'.format(value, nat_lattice.toymodel.OBJECTIVES))

def _check_non_negative(instance, attribute, value):
    if value < 0:
        raise ValueError('{} must be non-negative, got {}'.format(attribute.name, value))

def _check_positive(instance, attribute, value):
    if value < 1:
        raise ValueError('{} must be at least 1, got {}'.format(attribute.name, value))

@attr.s(frozen=True)
class TrainConfig:
    objective = attr.ib(default='nat', validator=_check_objective)
    learning_rate = attr.ib(default=0.1, converter=float, validator=_check_non_negative)
    epochs = attr.ib(default=10, converter=int, validator=_check_positive)
    batch_size = attr.ib(default=16, converter=int, validator=_check_positive)
    clip_norm = attr.ib(default=1.0, converter=float, validator=_check_non_negative)
    seed = attr.ib(default=0, converter=int)
    length_weight = attr.ib(default=1.0, converter=float, validator=_check_non_negative)
    mgmo_samples = attr.ib(default=nat_lattice.toymodel.DEFAULT_MGMO_SAMPLES, converter=int, validator=_check_positive)
    mgmo_alpha = attr.ib(default=1.0, converter=float)

    def to_json(self):
        return attr.asdict(self)

    @classmethod
    def from_json(cls, data):
        return cls(**data)

def global_norm(grads):
    return float(np.sqrt(sum(np.sum(grad**2) for grad in grads.values())))

def clip_gradients(grads, clip_norm):
    """Rescale so the global norm is at most ``clip_norm`` (0 disables clipping)."""
    norm = global_norm(grads)
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        return {name: grad * scale for name, grad in grads.items()}, norm
    return grads, norm

def train_model(
    corpus,
    params,
    config,
    progress_bar=False,
    notebook=False
):
    """Mini-batch SGD with global-norm clipping.

    Returns the trained parameters and a data frame of per-epoch mean loss.
    Entries whose target cannot be generated under the objective are skipped
    with a warning.
    """
    if len(corpus) == 0:
        raise ValueError('Training corpus is empty')
    rng = np.random.default_rng(config.seed)
    params = params.copy()
    epochs = range(1, config.epochs + 1)
    if progress_bar:
        if notebook:
            epochs = tqdm.notebook.tqdm(epochs)
        else:
            epochs = tqdm.tqdm(epochs)
    logger.info('Training {} objective on {} entries for {} epochs'.format(config.objective, len(corpus), config.epochs))
    start_time = time.time()
    history = list()
    for epoch in epochs:
        losses = np.full(len(corpus), np.nan)
        order = rng.permutation(len(corpus))
        for batch_start in range(0, len(corpus), config.batch_size):
            batch = order[batch_start:batch_start + config.batch_size]
            batch_grads = None
            num_used = 0
            for index in batch:
                entry = corpus[index]
                try:
                    loss, grads = nat_lattice.toymodel.objective_loss_grad(
                        config.objective,
                        params,
                        entry,
                        rng=rng,
                        length_weight=config.length_weight,
                        mgmo_samples=config.mgmo_samples,
                        mgmo_alpha=config.mgmo_alpha
                    )
                except (nat_lattice.core.InfeasibleLengthError, nat_lattice.core.LengthRangeError) as error:
                    logger.warning('Skipping entry {}: {}'.format(entry.id, error))
                    continue
                if not np.isfinite(loss):
                    raise TrainingDivergedError('Loss {} on entry {} (epoch {}, batch starting {}, objective {})'.format(
                        loss,
                        entry.id,
                        epoch,
                        batch_start,
                        config.objective
                    ))
                losses[index] = loss
                num_used += 1
                if batch_grads is None:
                    batch_grads = grads
                else:
                    for name, grad in grads.items():
                        batch_grads[name] += grad
            if num_used == 0:
                continue
            batch_grads = {name: grad / num_used for name, grad in batch_grads.items()}
            batch_grads, norm = clip_gradients(batch_grads, config.clip_norm)
            if not np.isfinite(norm):
                raise TrainingDivergedError('Gradient norm {} (epoch {}, batch starting {}, objective {})'.format(
                    norm,
                    epoch,
                    batch_start,
                    config.objective
                ))
            params = params.with_blocks({
                name: block - config.learning_rate * batch_grads[name]
                for name, block in params.blocks.items()
            })
        # Mean in corpus order so the value does not depend on batch composition
        mean_loss = float(np.nanmean(losses)) if np.any(np.isfinite(losses)) else np.nan
        history.append({
            'epoch': epoch,
            'mean_loss': mean_loss,
            'num_examples': int(np.sum(np.isfinite(losses)))
        })
        logger.info('Epoch {}: mean {} loss {:.4f}'.format(epoch, config.objective, mean_loss))
    logger.info('Trained for {} epochs in {:.1f} seconds'.format(config.epochs, time.time() - start_time))
    return params, pd.DataFrame(history, columns=['epoch', 'mean_loss', 'num_examples'])

def decode_entry(
    params,
    entry,
    method,
    strategy=None,
    beam_size=nat_lattice.objectives_at_nat.DEFAULT_BEAM_SIZE,
    iterations=nat_lattice.cmlm.DEFAULT_ITERATIONS,
    max_len=None,
    dedup=False
):
    if method not in DECODE_METHODS:
        raise ValueError('Decode method \'{}\' not recognized (expected one of {})'.format(method, DECODE_METHODS))
    if strategy is None:
        strategy = DEFAULT_STRATEGIES[method]
    source = nat_lattice.core.as_ids(entry.source)
    if method == 'at':
        if max_len is None:
            max_len = params.num_positions
        result = nat_lattice.objectives_at_nat.at_decode(
            nat_lattice.toymodel.ToyARScorer(params),
            source,
            strategy=strategy,
            beam_size=beam_size,
            max_len=min(max_len, params.num_positions)
        )
        return result.sequence
    if method in ['nat', 'cmlm']:
        _, _, length_distribution = nat_lattice.toymodel.forward_emissions(params, source)
        target_length = nat_lattice.objectives_at_nat.length_offset_argmax(length_distribution, len(source))
        target_length = min(target_length, params.num_positions)
        if method == 'nat':
            lattice, _, _ = nat_lattice.toymodel.forward_emissions(
                params,
                source,
                target_length_mode='exact',
                target_length=target_length
            )
            return nat_lattice.objectives_at_nat.nat_argmax_decode(lattice)
        return nat_lattice.cmlm.mask_predict_decode(
            nat_lattice.toymodel.ToyConditionalScorer(params),
            source,
            target_length,
            iterations=iterations
        )
    lattice, states, _ = nat_lattice.toymodel.forward_emissions(params, source)
    if method == 'ctc':
        return nat_lattice.ctc.ctc_decode(lattice, strategy=strategy, beam_size=beam_size)
    variant = 'star' if method == 'dat-star' else 'plain'
    transition = nat_lattice.toymodel.forward_transition(params, states, variant=variant)
    tokens, _ = nat_lattice.dat.dat_decode(
        lattice,
        transition,
        strategy=strategy,
        beam_size=beam_size,
        max_len=max_len,
        dedup=dedup
    )
    return tokens

def decode_corpus(
    params,
    corpus,
    method,
    strategy=None,
    beam_size=nat_lattice.objectives_at_nat.DEFAULT_BEAM_SIZE,
    iterations=nat_lattice.cmlm.DEFAULT_ITERATIONS,
    max_len=None,
    dedup=False,
    threads=1,
    progress_bar=False,
    notebook=False
):
    """Decode every entry; outputs keep corpus order regardless of ``threads``."""
    decode = functools.partial(
        decode_entry,
        params,
        method=method,
        strategy=strategy,
        beam_size=beam_size,
        iterations=iterations,
        max_len=max_len,
        dedup=dedup
    )
    start_time = time.time()
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            results = executor.map(decode, corpus)
            if progress_bar:
                results = (tqdm.notebook.tqdm if notebook else tqdm.tqdm)(results, total=len(corpus))
            outputs = list(results)
    else:
        entries = corpus
        if progress_bar:
            entries = (tqdm.notebook.tqdm if notebook else tqdm.tqdm)(corpus)
        outputs = [decode(entry) for entry in entries]
    logger.info('Decoded {} entries with {} in {:.1f} seconds'.format(len(outputs), method, time.time() - start_time))
    return outputs

def _split(entries, num_test):
    return entries[:-num_test], entries[-num_test:]

def run_repetition_experiment(
    seed=0,
    vocab_size=12,
    min_length=2,
    max_length=4,
    pairs=2000,
    num_test=200,
    hidden_size=16,
    ff_size=32,
    nat_epochs=10,
    dat_epochs=10,
    learning_rate=0.5,
    batch_size=16,
    dat_strategy='lookahead',
    dedup=True,
    progress_bar=False
):
    """Train vanilla NAT and DAT on the multimodal lexicon and compare decoded repetition.

    DAT outputs are decoded with ``dat_strategy`` and, with ``dedup``, have
    consecutive equal tokens along the decoded path merged.
    """
    rng = np.random.default_rng(seed)
    entries, vocabulary = nat_lattice.toymodel.make_toy_task(
        'multimodal_lexicon',
        vocab_size,
        min_length=min_length,
        max_length=max_length,
        pairs=pairs,
        rng=rng
    )
    train_entries, test_entries = _split(entries, num_test)
    outputs = dict()
    for method, objective, upsample, epochs in [
        ('nat', 'nat', nat_lattice.ctc.DEFAULT_UPSAMPLE, nat_epochs),
        ('dat', 'dat', nat_lattice.dat.DEFAULT_UPSAMPLE, dat_epochs)
    ]:
        params = nat_lattice.toymodel.init_params(
            vocabulary,
            hidden_size=hidden_size,
            ff_size=ff_size,
            max_source_length=max_length,
            upsample=upsample,
            delta_max=max_length,
            rng=np.random.default_rng(seed)
        )
        config = TrainConfig(
            objective=objective,
            learning_rate=learning_rate,
            epochs=epochs,
            batch_size=batch_size,
            seed=seed
        )
        params, _ = train_model(train_entries, params, config, progress_bar=progress_bar)
        if method == 'dat':
            outputs[method] = decode_corpus(params, test_entries, method, strategy=dat_strategy, dedup=dedup)
        else:
            outputs[method] = decode_corpus(params, test_entries, method)
    references = [entry.reference for entry in test_entries]
    report = nat_lattice.metrics.compare_methods(outputs, references)
    return report, outputs

def run_copy_experiment(
    seed=0,
    vocab_size=12,
    min_length=3,
    max_length=8,
    pairs=2000,
    num_test=200,
    hidden_size=32,
    ff_size=64,
    ctc_epochs=40,
    cmlm_epochs=10,
    learning_rate=0.5,
    batch_size=16,
    iterations=(1, 10),
    progress_bar=False
):
    """Train CTC and CMLM on the copy task; report exact match per decoder setting."""
    rng = np.random.default_rng(seed)
    entries, vocabulary = nat_lattice.toymodel.make_toy_task(
        'copy',
        vocab_size,
        min_length=min_length,
        max_length=max_length,
        pairs=pairs,
        rng=rng
    )
    train_entries, test_entries = _split(entries, num_test)
    references = [entry.reference for entry in test_entries]
    rows = list()
    ctc_params = nat_lattice.toymodel.init_params(
        vocabulary,
        hidden_size=hidden_size,
        ff_size=ff_size,
        max_source_length=max_length,
        upsample=nat_lattice.ctc.DEFAULT_UPSAMPLE,
        delta_max=max_length,
        rng=np.random.default_rng(seed)
    )
    ctc_params, ctc_history = train_model(
        train_entries,
        ctc_params,
        TrainConfig(objective='ctc', learning_rate=learning_rate, epochs=ctc_epochs, batch_size=batch_size, seed=seed),
        progress_bar=progress_bar
    )
    outputs = decode_corpus(ctc_params, test_entries, 'ctc')
    rows.append({'method': 'ctc', 'setting': 'greedy', 'exact_match': nat_lattice.metrics.exact_match(outputs, references)})
    cmlm_params = nat_lattice.toymodel.init_params(
        vocabulary,
        hidden_size=hidden_size,
        ff_size=ff_size,
        max_source_length=max_length,
        upsample=1,
        delta_max=max_length,
        rng=np.random.default_rng(seed)
    )
    cmlm_params, cmlm_history = train_model(
        train_entries,
        cmlm_params,
        TrainConfig(objective='cmlm', learning_rate=learning_rate, epochs=cmlm_epochs, batch_size=batch_size, seed=seed),
        progress_bar=progress_bar
    )
    for iteration_count in iterations:
        outputs = decode_corpus(cmlm_params, test_entries, 'cmlm', iterations=iteration_count)
        rows.append({
            'method': 'cmlm',
            'setting': 'iterations={}'.format(iteration_count),
            'exact_match': nat_lattice.metrics.exact_match(outputs, references)
        })
    histories = pd.concat([
        ctc_history.assign(objective='ctc'),
        cmlm_history.assign(objective='cmlm')
    ], ignore_index=True)
    return pd.DataFrame(rows, columns=['method', 'setting', 'exact_match']), histories
