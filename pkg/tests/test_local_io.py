import nat_lattice.core
import nat_lattice.dat
import nat_lattice.local_io
import nat_lattice.toymodel
import numpy as np
import pytest
import json

def write_lines(path, lines):
    with open(path, 'w') as fh:
        for line in lines:
            fh.write(line)
            fh.write('\n')

class TestCorpus:
    def test_read_corpus_builds_vocabulary(self, tmp_path):
        path = tmp_path / 'corpus.jsonl'
        write_lines(path, [
            json.dumps({'id': 's1', 'src': ['b', 'a'], 'ref': ['a', 'c'], 'domain': 'news'}),
            '',
            json.dumps({'id': 's2', 'src': ['c'], 'hyp': ['c', 'c'], 'ref': ['c']})
        ])
        entries, vocabulary = nat_lattice.local_io.read_corpus(str(path))
        assert vocabulary.tokens[5:] == ('a', 'b', 'c')
        assert entries[0].source.ids == (6, 5)
        assert entries[0].hypothesis is None
        assert entries[0].metadata == {'domain': 'news'}
        assert entries[1].hypothesis.ids == (7, 7)

    def test_write_then_read_preserves_records(self, tmp_path, ab_vocabulary):
        entries = [nat_lattice.core.CorpusEntry(
            id='x',
            source=ab_vocabulary.encode(['a']),
            reference=ab_vocabulary.encode(['b', 'a']),
            metadata={'perturb': {'mode': 'delete'}}
        )]
        path = str(tmp_path / 'out.jsonl')
        nat_lattice.local_io.write_corpus(entries, ab_vocabulary, path)
        records = nat_lattice.local_io.read_jsonl(path)
        assert records == [{'id': 'x', 'src': ['a'], 'ref': ['b', 'a'], 'perturb': {'mode': 'delete'}}]
        reread, _ = nat_lattice.local_io.read_corpus(path, vocabulary=ab_vocabulary)
        assert reread == entries

    def test_malformed_line(self, tmp_path):
        path = tmp_path / 'bad.jsonl'
        write_lines(path, ['{"id": "s1", "src": []}', '{not json'])
        with pytest.raises(ValueError, match='line 2'):
            nat_lattice.local_io.read_jsonl(str(path))

    def test_missing_id(self, tmp_path):
        path = tmp_path / 'noid.jsonl'
        write_lines(path, [json.dumps({'src': ['a']})])
        with pytest.raises(ValueError, match='missing an id'):
            nat_lattice.local_io.read_corpus(str(path))

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / 'dup.jsonl'
        write_lines(path, [json.dumps({'id': 'a', 'src': ['a']}), json.dumps({'id': 'a', 'src': ['b']})])
        with pytest.raises(ValueError, match='not unique'):
            nat_lattice.local_io.read_corpus(str(path))

def test_vocabulary_file(tmp_path, ab_vocabulary):
    path = str(tmp_path / 'vocab.txt')
    nat_lattice.local_io.write_vocabulary(ab_vocabulary, path)
    assert nat_lattice.local_io.read_vocabulary(path) == ab_vocabulary

def test_mqm_annotations(tmp_path):
    path = tmp_path / 'mqm.jsonl'
    write_lines(path, [
        json.dumps({'id': 1, 'system': 'A', 'rater': 'r1', 'category': 'Fluency', 'subcategory': 'Punctuation', 'severity': 'Minor'}),
        json.dumps({'id': 2, 'system': 'A', 'rater': 'r1', 'category': 'NonTranslation', 'severity': 'Major'})
    ])
    annotations = nat_lattice.local_io.read_mqm_annotations(str(path))
    assert [annotation.severity for annotation in annotations] == ['minor', 'major']
    assert annotations[1].subcategory is None

class TestTransitionJson:
    def test_neg_inf_serialized_as_null(self):
        transition = nat_lattice.dat.TransitionMatrix.from_scores(np.zeros((3, 3)))
        data = nat_lattice.local_io.transition_to_json(transition)
        assert data['m'] == 3
        assert data['log_e'][0] is None
        assert data['log_e'][-1] is None
        np.testing.assert_allclose(
            nat_lattice.local_io.transition_from_json(data).log_e[np.triu_indices(3, k=1)],
            transition.log_e[np.triu_indices(3, k=1)]
        )

    def test_wrong_size(self):
        with pytest.raises(ValueError):
            nat_lattice.local_io.transition_from_json({'m': 3, 'log_e': [None] * 8})

class TestParamsJson:
    def test_round_trip(self, tmp_path):
        params = nat_lattice.toymodel.init_params(9, hidden_size=4, ff_size=5, max_source_length=3, delta_max=2, star=True)
        path = str(tmp_path / 'params.json')
        nat_lattice.local_io.write_params(params, path)
        loaded = nat_lattice.local_io.read_params(path)
        assert loaded.config_dict() == params.config_dict()
        for name, block in params.blocks.items():
            np.testing.assert_array_equal(loaded.blocks[name], block)

    def test_version_required(self):
        params = nat_lattice.toymodel.init_params(9, hidden_size=4, ff_size=5, max_source_length=3, delta_max=2)
        data = nat_lattice.local_io.params_to_json(params)
        del data['version']
        with pytest.raises(ValueError, match='version'):
            nat_lattice.local_io.params_from_json(data)
        data['version'] = 99
        with pytest.raises(ValueError, match='version'):
            nat_lattice.local_io.params_from_json(data)
