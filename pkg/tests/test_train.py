import nat_lattice.core
import nat_lattice.toymodel
import nat_lattice.train
import numpy as np
import pandas as pd
import pytest

def small_task(kind='copy', pairs=24, seed=0):
    return nat_lattice.toymodel.make_toy_task(kind, 6, min_length=2, max_length=3, pairs=pairs, rng=np.random.default_rng(seed))

def small_params(vocabulary, star=False, upsample=3):
    return nat_lattice.toymodel.init_params(
        vocabulary,
        hidden_size=6,
        ff_size=8,
        max_source_length=3,
        upsample=upsample,
        delta_max=3,
        star=star,
        rng=np.random.default_rng(0)
    )

class TestTrainConfig:
    def test_json(self):
        config = nat_lattice.train.TrainConfig(objective='ctc', learning_rate=0.3, epochs=2)
        assert nat_lattice.train.TrainConfig.from_json(config.to_json()) == config

    @pytest.mark.parametrize('kwargs', [
        {'objective': 'rl'},
        {'learning_rate': -0.1},
        {'epochs': 0},
        {'batch_size': 0}
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            nat_lattice.train.TrainConfig(**kwargs)

def test_clip_gradients():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    clipped, norm = nat_lattice.train.clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert nat_lattice.train.global_norm(clipped) == pytest.approx(1.0)
    unclipped, _ = nat_lattice.train.clip_gradients(grads, 0.0)
    assert unclipped is grads

class TestTrain:
    def test_zero_learning_rate(self):
        entries, vocabulary = small_task()
        params = small_params(vocabulary)
        config = nat_lattice.train.TrainConfig(objective='nat', learning_rate=0.0, epochs=3, batch_size=5)
        trained, history = nat_lattice.train.train_model(entries, params, config)
        for name, block in params.blocks.items():
            np.testing.assert_array_equal(trained.blocks[name], block)
        assert history['mean_loss'].nunique() == 1
        assert list(history['epoch']) == [1, 2, 3]

    @pytest.mark.parametrize('objective', ['cmlm', 'dat', 'mgmo'])
    def test_identical_seeds_give_identical_histories(self, objective):
        entries, vocabulary = small_task()
        config = nat_lattice.train.TrainConfig(objective=objective, learning_rate=0.2, epochs=2, batch_size=4, seed=5)
        _, first = nat_lattice.train.train_model(entries, small_params(vocabulary), config)
        _, second = nat_lattice.train.train_model(entries, small_params(vocabulary), config)
        pd.testing.assert_frame_equal(first, second)

    def test_does_not_mutate_input_parameters(self):
        entries, vocabulary = small_task()
        params = small_params(vocabulary)
        before = {name: block.copy() for name, block in params.blocks.items()}
        nat_lattice.train.train_model(entries, params, nat_lattice.train.TrainConfig(objective='ctc', epochs=1))
        for name, block in params.blocks.items():
            np.testing.assert_array_equal(block, before[name])

    def test_skips_infeasible_entries(self, ab_vocabulary):
        entries = [
            nat_lattice.core.CorpusEntry(id='ok', source=[5, 6], reference=[5, 6]),
            nat_lattice.core.CorpusEntry(id='short', source=[5], reference=[5, 5, 5])
        ]
        params = small_params(ab_vocabulary, upsample=1)
        _, history = nat_lattice.train.train_model(entries, params, nat_lattice.train.TrainConfig(objective='ctc', epochs=1))
        assert list(history['num_examples']) == [1]

    def test_divergence(self):
        entries, vocabulary = small_task(pairs=4)
        params = small_params(vocabulary)
        blocks = dict(params.blocks)
        blocks['w_p'] = np.full_like(blocks['w_p'], np.nan)
        with pytest.raises(nat_lattice.train.TrainingDivergedError, match='epoch 1'):
            nat_lattice.train.train_model(entries, params.with_blocks(blocks), nat_lattice.train.TrainConfig(objective='nat'))

    def test_empty_corpus(self, ab_vocabulary):
        with pytest.raises(ValueError):
            nat_lattice.train.train_model([], small_params(ab_vocabulary), nat_lattice.train.TrainConfig())

class TestDecode:
    @pytest.mark.parametrize('method,strategy', [
        ('at', 'greedy'),
        ('at', 'beam'),
        ('nat', None),
        ('ctc', 'greedy'),
        ('ctc', 'prefix_beam'),
        ('dat', 'greedy'),
        ('dat', 'lookahead'),
        ('dat', 'viterbi'),
        ('dat', 'beam'),
        ('dat-star', None),
        ('cmlm', None)
    ])
    def test_methods(self, method, strategy):
        entries, vocabulary = small_task(pairs=3)
        params = small_params(vocabulary, star=method == 'dat-star')
        outputs = nat_lattice.train.decode_corpus(params, entries, method, strategy=strategy, beam_size=2, iterations=2)
        assert len(outputs) == 3
        for output in outputs:
            assert isinstance(output, nat_lattice.core.TokenSequence)
            vocabulary.validate(output)

    def test_threads_preserve_order(self):
        entries, vocabulary = small_task(pairs=8)
        params = small_params(vocabulary)
        serial = nat_lattice.train.decode_corpus(params, entries, 'dat')
        threaded = nat_lattice.train.decode_corpus(params, entries, 'dat', threads=3)
        assert serial == threaded

    def test_unknown_method(self):
        entries, vocabulary = small_task(pairs=1)
        with pytest.raises(ValueError):
            nat_lattice.train.decode_entry(small_params(vocabulary), entries[0], 'rnn')

@pytest.mark.slow
def test_ctc_copy_loss_decreases():
    entries, vocabulary = nat_lattice.toymodel.make_toy_task('copy', 12, min_length=3, max_length=8, pairs=2000, rng=np.random.default_rng(0))
    params = nat_lattice.toymodel.init_params(vocabulary, max_source_length=8, upsample=3, delta_max=8, rng=np.random.default_rng(0))
    config = nat_lattice.train.TrainConfig(objective='ctc', learning_rate=0.5, epochs=5, seed=0)
    _, history = nat_lattice.train.train_model(entries, params, config)
    assert all(np.diff(history['mean_loss']) < 0)

@pytest.mark.slow
def test_repetition_experiment_report():
    report, outputs = nat_lattice.train.run_repetition_experiment(seed=0, pairs=600, num_test=100, nat_epochs=3, dat_epochs=3)
    assert list(report['method']) == ['nat', 'dat']
    assert set(outputs) == {'nat', 'dat'}
    assert all(len(sequences) == 100 for sequences in outputs.values())
    assert report['unigram_ratio'].between(0.0, 100.0).all()

@pytest.mark.slow
def test_copy_experiment_report():
    report, histories = nat_lattice.train.run_copy_experiment(seed=0, pairs=400, num_test=50, ctc_epochs=2, cmlm_epochs=2)
    assert list(report['setting']) == ['greedy', 'iterations=1', 'iterations=10']
    assert report['exact_match'].between(0.0, 1.0).all()
    assert set(histories['objective']) == {'ctc', 'cmlm'}

@pytest.mark.slow
def test_nat_repeats_more_than_dat():
    report, _ = nat_lattice.train.run_repetition_experiment(seed=0)
    ratios = report.set_index('method')['unigram_ratio']
    assert ratios['nat'] > ratios['dat']

@pytest.mark.slow
def test_copy_experiment_accuracy():
    report, _ = nat_lattice.train.run_copy_experiment(seed=0)
    accuracy = report.set_index('setting')['exact_match']
    assert accuracy['greedy'] >= 0.95
    assert accuracy['iterations=10'] >= accuracy['iterations=1']
