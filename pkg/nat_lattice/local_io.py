import nat_lattice.core
import numpy as np
import logging
import json
import os

logger = logging.getLogger(__name__)

PARAMS_FORMAT_VERSION = 1

def read_vocabulary(path):
    with open(path, 'r') as fh:
        tokens = [line.rstrip('\n') for line in fh if line.rstrip('\n') != '']
    logger.info('Retrieved {} tokens from {}'.format(len(tokens), path))
    return nat_lattice.core.Vocabulary(tokens)

def write_vocabulary(vocabulary, path):
    with open(path, 'w') as fh:
        for token in vocabulary.tokens:
            fh.write('{}\n'.format(token))

def read_jsonl(path):
    records = list()
    with open(path, 'r') as fh:
        for line_number, line in enumerate(fh, start=1):
            if line.strip() == '':
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as error:
                raise ValueError('Malformed JSON on line {} of {}: {}'.format(line_number, path, error))
    logger.info('Retrieved {} records from {}'.format(len(records), path))
    return records

def write_jsonl(records, path):
    with open(path, 'w') as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write('\n')
    logger.info('Wrote {} records to {}'.format(len(records), path))

def build_vocabulary_from_records(records):
    tokens = set()
    for record in records:
        for key in ['src', 'hyp', 'ref']:
            if record.get(key) is not None:
                tokens.update(record.get(key))
    return nat_lattice.core.Vocabulary.from_tokens(sorted(tokens))

def parse_corpus_records(
    records,
    vocabulary
):
    entries = list()
    for record in records:
        if 'id' not in record:
            raise ValueError('Corpus record is missing an id: {}'.format(record))
        entries.append(nat_lattice.core.CorpusEntry(
            id=record['id'],
            source=vocabulary.encode(record.get('src', [])),
            hypothesis=vocabulary.encode(record['hyp']) if record.get('hyp') is not None else None,
            reference=vocabulary.encode(record['ref']) if record.get('ref') is not None else None,
            metadata={key: value for key, value in record.items() if key not in ['id', 'src', 'hyp', 'ref']} or None
        ))
    nat_lattice.core.check_unique_ids(entries)
    return entries

def read_corpus(
    path,
    vocabulary=None
):
    records = read_jsonl(path)
    if vocabulary is None:
        vocabulary = build_vocabulary_from_records(records)
        logger.info('Built vocabulary of {} tokens from {}'.format(len(vocabulary), path))
    entries = parse_corpus_records(records, vocabulary)
    return entries, vocabulary

def corpus_records(
    entries,
    vocabulary
):
    records = list()
    for entry in entries:
        record = {'id': entry.id, 'src': vocabulary.decode(entry.source)}
        if entry.hypothesis is not None:
            record['hyp'] = vocabulary.decode(entry.hypothesis)
        if entry.reference is not None:
            record['ref'] = vocabulary.decode(entry.reference)
        if entry.metadata is not None:
            record.update(entry.metadata)
        records.append(record)
    return records

def write_corpus(
    entries,
    vocabulary,
    path
):
    write_jsonl(corpus_records(entries, vocabulary), path)

def read_mqm_annotations(path):
    # Imported here to keep local_io importable from metrics
    import nat_lattice.metrics
    records = read_jsonl(path)
    return [nat_lattice.metrics.MQMAnnotation.from_record(record) for record in records]

def transition_to_json(transition):
    log_e = transition.log_e
    return {
        'm': int(log_e.shape[0]),
        'log_e': [None if not np.isfinite(value) else float(value) for value in log_e.ravel()]
    }

def transition_from_json(data):
    import nat_lattice.dat
    m = int(data['m'])
    values = data['log_e']
    if len(values) != m * m:
        raise ValueError('Transition matrix JSON has {} entries, expected {}'.format(len(values), m * m))
    log_e = np.array([-np.inf if value is None else value for value in values], dtype=np.float64).reshape((m, m))
    return nat_lattice.dat.TransitionMatrix(log_e)

def write_transition(transition, path):
    with open(path, 'w') as fh:
        json.dump(transition_to_json(transition), fh)

def read_transition(path):
    with open(path, 'r') as fh:
        return transition_from_json(json.load(fh))

def params_to_json(params):
    return {
        'version': PARAMS_FORMAT_VERSION,
        'config': params.config_dict(),
        'blocks': {
            name: {
                'shape': list(block.shape),
                'data': block.ravel().tolist()
            }
            for name, block in sorted(params.blocks.items())
        }
    }

def params_from_json(data):
    import nat_lattice.toymodel
    if 'version' not in data:
        raise ValueError('Parameter document is missing its version field')
    if data['version'] != PARAMS_FORMAT_VERSION:
        raise ValueError('Unsupported parameter format version {}'.format(data['version']))
    blocks = {
        name: np.array(block['data'], dtype=np.float64).reshape(block['shape'])
        for name, block in data['blocks'].items()
    }
    return nat_lattice.toymodel.ModelParams(blocks=blocks, **data['config'])

def write_params(params, path):
    with open(path, 'w') as fh:
        json.dump(params_to_json(params), fh)
    logger.info('Wrote {} parameters to {}'.format(params.num_parameters(), path))

def read_params(path):
    with open(path, 'r') as fh:
        params = params_from_json(json.load(fh))
    logger.info('Retrieved {} parameters from {}'.format(params.num_parameters(), path))
    return params

def write_json(data, path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write('\n')

def read_json(path):
    with open(path, 'r') as fh:
        return json.load(fh)
