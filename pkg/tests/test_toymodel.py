import nat_lattice.core
import nat_lattice.toymodel
import numpy as np
import pytest
import collections

def small_params(star=False, seed=0):
    return nat_lattice.toymodel.init_params(
        9,
        hidden_size=4,
        ff_size=5,
        max_source_length=3,
        upsample=3,
        delta_max=2,
        star=star,
        rng=np.random.default_rng(seed),
        scale=0.5
    )

ENTRY = nat_lattice.core.CorpusEntry(id='copy-00000', source=[5, 6, 7], reference=[5, 6, 7])

class TestToyTasks:
    def test_copy(self, rng):
        entries, vocabulary = nat_lattice.toymodel.make_toy_task('copy', 6, min_length=2, max_length=4, pairs=20, rng=rng)
        assert len(vocabulary) == 11
        assert [entry.id for entry in entries[:2]] == ['copy-00000', 'copy-00001']
        for entry in entries:
            assert entry.reference == entry.source
            assert 2 <= len(entry.source) <= 4
            assert list(entry.source.ids) == sorted(set(entry.source.ids))

    def test_reverse(self, rng):
        entries, _ = nat_lattice.toymodel.make_toy_task('reverse', 6, pairs=10, min_length=3, max_length=3, rng=rng)
        for entry in entries:
            assert entry.reference.ids == entry.source.ids[::-1]
            assert list(entry.source.ids) == sorted(entry.source.ids)

    def test_multimodal_lexicon_splits_evenly(self, rng):
        entries, vocabulary = nat_lattice.toymodel.make_toy_task(
            'multimodal_lexicon',
            4,
            min_length=1,
            max_length=1,
            pairs=10**4,
            rng=rng
        )
        assert {tuple(vocabulary.decode(entry.source)) for entry in entries} == {('x0',)}
        counts = collections.Counter(vocabulary.decode(entry.reference)[0] for entry in entries)
        assert set(counts) == {'x0_a', 'x0_b'}
        assert abs(counts['x0_a'] / 10**4 - 0.5) <= 0.02

    def test_rejects_bad_arguments(self, rng):
        with pytest.raises(ValueError):
            nat_lattice.toymodel.make_toy_task('translate', 6, rng=rng)
        with pytest.raises(ValueError):
            nat_lattice.toymodel.make_toy_task('copy', 4, min_length=2, max_length=5, rng=rng)

class TestForward:
    def test_zero_parameters_emit_uniformly(self):
        params = nat_lattice.toymodel.zero_params_like(small_params())
        lattice, states, length_distribution = nat_lattice.toymodel.forward_emissions(params, [5, 6])
        assert lattice.num_positions == 6
        np.testing.assert_allclose(lattice.probs(), 1.0 / 9.0)
        np.testing.assert_allclose(np.exp(length_distribution.log_probs), 0.2)
        assert states.num_vertices == 6

    def test_exact_length(self):
        lattice, _, _ = nat_lattice.toymodel.forward_emissions(small_params(), [5], target_length_mode='exact', target_length=4)
        assert lattice.num_positions == 4
        np.testing.assert_allclose(lattice.probs().sum(axis=1), 1.0)

    def test_single_position_has_no_states(self):
        _, states, _ = nat_lattice.toymodel.forward_emissions(small_params(), [5], target_length_mode='exact', target_length=1)
        assert states is None

    def test_source_too_long(self):
        with pytest.raises(ValueError, match='exceeds'):
            nat_lattice.toymodel.forward_emissions(small_params(), [5, 6, 7, 8])

    def test_transition_is_normalized(self):
        params = small_params(star=True)
        _, states, _ = nat_lattice.toymodel.forward_emissions(params, [5, 6])
        for variant in ['plain', 'star']:
            transition = nat_lattice.toymodel.forward_transition(params, states, variant=variant)
            np.testing.assert_allclose(transition.probs()[:-1].sum(axis=1), 1.0, atol=1e-9)

    def test_block_shape_mismatch(self):
        params = small_params()
        blocks = dict(params.blocks)
        blocks['w1'] = np.zeros((3, 3))
        with pytest.raises(ValueError, match='w1'):
            params.with_blocks(blocks)

class TestObjectives:
    @pytest.mark.parametrize('objective', nat_lattice.toymodel.OBJECTIVES)
    def test_gradients_match_finite_differences(self, objective):
        params = small_params(star=objective == 'dat_star', seed=1)
        report = nat_lattice.toymodel.gradcheck(objective, params, ENTRY, rng=np.random.default_rng(2))
        assert report.passed, report.errors
        assert report.errors['num_checked'].sum() > 0

    @pytest.mark.parametrize('seed', range(20))
    @pytest.mark.parametrize('objective', nat_lattice.toymodel.OBJECTIVES)
    def test_gradients_on_random_instances(self, objective, seed):
        rng = np.random.default_rng(seed)
        source_length = int(rng.integers(1, 4))
        target_length = int(rng.integers(max(1, source_length - 2), min(source_length + 2, 3 * source_length - 2) + 1))
        # No adjacent repeats keeps every target feasible for the upsampled alignment lattices
        target = [int(rng.integers(5, 9))]
        while len(target) < target_length:
            token_id = int(rng.integers(5, 9))
            if token_id != target[-1]:
                target.append(token_id)
        entry = nat_lattice.core.CorpusEntry(
            id='random-{:05d}'.format(seed),
            source=[int(token_id) for token_id in rng.integers(5, 9, size=source_length)],
            reference=target
        )
        params = small_params(star=objective == 'dat_star', seed=seed + 100)
        report = nat_lattice.toymodel.gradcheck(objective, params, entry, rng=rng, max_coordinates=10)
        assert report.passed, report.errors

    def test_length_term_in_nat_loss(self):
        params = small_params()
        base, _ = nat_lattice.toymodel.objective_loss_grad('nat', params, ENTRY)
        with_length, grads = nat_lattice.toymodel.objective_loss_grad('nat', params, ENTRY, length_weight=1.0)
        length, _ = nat_lattice.toymodel.objective_loss_grad('length', params, ENTRY)
        assert with_length == pytest.approx(base + length)
        assert np.any(grads['w_len'] != 0.0)

    def test_gradcheck_does_not_mutate_parameters(self):
        params = small_params()
        before = {name: block.copy() for name, block in params.blocks.items()}
        nat_lattice.toymodel.gradcheck('ctc', params, ENTRY, max_coordinates=3, rng=np.random.default_rng(0))
        for name, block in params.blocks.items():
            np.testing.assert_array_equal(block, before[name])

    def test_report_json(self):
        report = nat_lattice.toymodel.gradcheck('nat', small_params(), ENTRY, max_coordinates=2)
        data = report.to_json()
        assert data['objective'] == 'nat'
        assert {row['block'] for row in data['blocks']} == set(small_params().blocks)

    def test_random_objectives_need_generator(self):
        with pytest.raises(ValueError, match='random generator'):
            nat_lattice.toymodel.objective_loss_grad('cmlm', small_params(), ENTRY)

    def test_star_objective_needs_star_parameters(self):
        with pytest.raises(ValueError, match='star'):
            nat_lattice.toymodel.objective_loss_grad('dat_star', small_params(), ENTRY)

    def test_unknown_objective(self):
        with pytest.raises(ValueError):
            nat_lattice.toymodel.objective_loss_grad('rl', small_params(), ENTRY)

    def test_infeasible_ctc_instance(self):
        params = nat_lattice.toymodel.init_params(9, hidden_size=4, ff_size=5, max_source_length=3, upsample=1, delta_max=2)
        entry = nat_lattice.core.CorpusEntry(id='x', source=[5], reference=[5, 5])
        with pytest.raises(nat_lattice.core.InfeasibleLengthError):
            nat_lattice.toymodel.objective_loss_grad('ctc', params, entry)

    def test_missing_reference(self):
        entry = nat_lattice.core.CorpusEntry(id='x', source=[5])
        with pytest.raises(ValueError, match='no reference'):
            nat_lattice.toymodel.objective_loss_grad('nat', small_params(), entry)
