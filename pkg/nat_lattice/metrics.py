import nat_lattice.core
import attr
import numpy as np
import pandas as pd
import sacrebleu.metrics
import logging
import collections

logger = logging.getLogger(__name__)

DEFAULT_NGRAM_MIN = 2
DEFAULT_NGRAM_MAX = 10

MQM_HIERARCHY = {
    'Accuracy': (
        'Addition',
        'Omission',
        'Mistranslation',
        'Untranslated text'
    ),
    'Fluency': (
        'Punctuation',
        'Spelling',
        'Grammar',
        'Register',
        'Inconsistency',
        'Character encoding'
    ),
    'NonTranslation': tuple()
}
MQM_SEVERITIES = ('major', 'minor')
DEFAULT_MQM_WEIGHTS = 'Major:5 Minor:1 Major/NonTranslation:25 Minor/Fluency/Punctuation:0.1'

def _normalize_subcategory(value):
    if value is None or value == '':
        return None
    return str(value)

@attr.s(frozen=True)
class MQMAnnotation:
    category = attr.ib(converter=str)
    subcategory = attr.ib(converter=_normalize_subcategory)
    severity = attr.ib(converter=lambda value: str(value).lower())
    id = attr.ib(default=None)
    system = attr.ib(default=None)
    rater = attr.ib(default=None)

    def __attrs_post_init__(self):
        if self.category not in MQM_HIERARCHY:
            raise ValueError('MQM category \'{}\' not recognized'.format(self.category))
        if self.severity not in MQM_SEVERITIES:
            raise ValueError('MQM severity \'{}\' not recognized'.format(self.severity))
        subcategories = MQM_HIERARCHY[self.category]
        if len(subcategories) == 0:
            if self.subcategory is not None:
                raise ValueError('MQM category {} takes no subcategory (got \'{}\')'.format(self.category, self.subcategory))
            if self.severity != 'major':
                raise ValueError('{} errors are always major'.format(self.category))
        elif self.subcategory not in subcategories:
            raise ValueError('MQM subcategory \'{}\' not recognized for category {}'.format(self.subcategory, self.category))

    @classmethod
    def from_record(cls, record):
        return cls(
            category=record['category'],
            subcategory=record.get('subcategory'),
            severity=record['severity'],
            id=record.get('id'),
            system=record.get('system'),
            rater=record.get('rater')
        )

    def weight_keys(self):
        items = [self.severity, self.category]
        if self.subcategory is not None:
            items.append(self.subcategory)
        return [item.lower() for item in items]

@attr.s(frozen=True)
class MQMWeights:
    """Weights keyed by ``severity[/category[/subcategory]]``; the most specific match applies."""
    weights = attr.ib(converter=lambda weights: {key.lower(): float(value) for key, value in dict(weights).items()})

    @classmethod
    def from_string(
        cls,
        spec=DEFAULT_MQM_WEIGHTS,
        separator=' '
    ):
        weights = dict()
        for item in spec.split(separator):
            if item == '':
                continue
            try:
                key, value = item.rsplit(':', 1)
                weights[key] = float(value)
            except ValueError:
                raise ValueError('MQM weight item \'{}\' is not of the form severity[/category[/subcategory]]:weight'.format(item))
        return cls(weights)

    @classmethod
    def default(cls):
        return cls.from_string(DEFAULT_MQM_WEIGHTS)

    def weight(self, annotation):
        items = annotation.weight_keys()
        while items:
            key = '/'.join(items)
            if key in self.weights:
                return self.weights[key]
            items = items[:-1]
        return 0.0

@attr.s(frozen=True)
class RepetitionReport:
    unigram_ratio = attr.ib(converter=float)
    ngram_counts = attr.ib(converter=dict)

    def to_json(self):
        return {
            'unigram_ratio': self.unigram_ratio,
            'ngram_counts': {str(order): int(count) for order, count in sorted(self.ngram_counts.items())}
        }

def _check_corpus(corpus):
    if len(corpus) == 0:
        raise ValueError('Repetition statistics need a non-empty corpus')

def has_adjacent_repeat(sequence):
    ids = nat_lattice.core.as_ids(sequence)
    return any(previous == current for previous, current in zip(ids[:-1], ids[1:]))

def repetition_ratio(corpus):
    """Percentage of sequences containing two equal adjacent tokens."""
    _check_corpus(corpus)
    num_repeated = sum(1 for sequence in corpus if has_adjacent_repeat(sequence))
    return 100.0 * num_repeated / len(corpus)

def repeated_ngrams(sequence, n):
    """N-gram types occurring at least twice in one sequence (overlaps count)."""
    ids = nat_lattice.core.as_ids(sequence)
    counts = collections.Counter(tuple(ids[start:start + n]) for start in range(len(ids) - n + 1))
    return sorted(ngram for ngram, count in counts.items() if count >= 2)

def ngram_repetition_counts(
    corpus,
    n_min=DEFAULT_NGRAM_MIN,
    n_max=DEFAULT_NGRAM_MAX
):
    if n_min < 2 or n_max < n_min:
        raise ValueError('N-gram range must satisfy 2 <= n_min <= n_max (got {}..{})'.format(n_min, n_max))
    return {
        n: sum(len(repeated_ngrams(sequence, n)) for sequence in corpus)
        for n in range(n_min, n_max + 1)
    }

def repetition_report(
    corpus,
    n_min=DEFAULT_NGRAM_MIN,
    n_max=DEFAULT_NGRAM_MAX
):
    return RepetitionReport(
        unigram_ratio=repetition_ratio(corpus),
        ngram_counts=ngram_repetition_counts(corpus, n_min=n_min, n_max=n_max)
    )

def mqm_score(
    annotations,
    weights=None
):
    """Weighted error count; lower is better."""
    if weights is None:
        weights = MQMWeights.default()
    return float(sum(weights.weight(annotation) for annotation in annotations))

def _annotations_df(annotations):
    df = pd.DataFrame([
        {
            'id': annotation.id,
            'system': annotation.system if annotation.system is not None else 'system',
            'rater': annotation.rater if annotation.rater is not None else 'rater',
            'severity': annotation.severity,
            'category': annotation.category,
            'subcategory': annotation.subcategory if annotation.subcategory is not None else '',
        }
        for annotation in annotations
    ], columns=['id', 'system', 'rater', 'severity', 'category', 'subcategory'])
    return df

def mqm_error_breakdown(annotations):
    """Error counts per system and error class, averaged over raters."""
    df = _annotations_df(annotations)
    columns = ['system', 'severity', 'category', 'subcategory', 'count']
    if len(df) == 0:
        return pd.DataFrame(columns=columns)
    num_raters = df.groupby('system')['rater'].nunique()
    counts = df.groupby(['system', 'severity', 'category', 'subcategory']).size().rename('count').reset_index()
    counts['count'] = counts['count'] / counts['system'].map(num_raters)
    return counts.loc[:, columns].sort_values(columns[:-1]).reset_index(drop=True)

def mqm_system_scores(
    annotations,
    weights=None,
    per_segments=None,
    num_segments=None
):
    """Weighted MQM score per system, averaged over raters.

    With ``per_segments`` the score is rescaled to that many segments, using
    ``num_segments`` (a dict by system) or the count of distinct annotated ids.
    """
    if weights is None:
        weights = MQMWeights.default()
    df = _annotations_df(annotations)
    columns = ['system', 'num_raters', 'num_segments', 'mqm']
    if len(df) == 0:
        return pd.DataFrame(columns=columns)
    df['weight'] = [weights.weight(annotation) for annotation in annotations]
    rows = list()
    for system, system_df in df.groupby('system'):
        raters = system_df['rater'].nunique()
        segments = None
        if num_segments is not None:
            segments = num_segments[system]
        elif system_df['id'].notna().any():
            segments = system_df['id'].nunique()
        score = system_df['weight'].sum() / raters
        if per_segments is not None:
            if not segments:
                raise ValueError('Segment count for system {} unknown; cannot rescale MQM score'.format(system))
            score = score * per_segments / segments
        rows.append({
            'system': system,
            'num_raters': raters,
            'num_segments': segments,
            'mqm': float(score)
        })
    return pd.DataFrame(rows, columns=columns)

def _id_string(sequence):
    return ' '.join(str(token_id) for token_id in nat_lattice.core.as_ids(sequence))

def corpus_bleu(
    hypotheses,
    references
):
    """Corpus BLEU-4 over token ids with add-one smoothing on orders 2-4."""
    if len(hypotheses) != len(references):
        raise ValueError('Got {} hypotheses but {} references'.format(len(hypotheses), len(references)))
    if len(hypotheses) == 0:
        raise ValueError('BLEU needs at least one hypothesis/reference pair')
    bleu = sacrebleu.metrics.BLEU(
        tokenize='none',
        smooth_method='add-k',
        smooth_value=1,
        force=True
    )
    result = bleu.corpus_score(
        [_id_string(hypothesis) for hypothesis in hypotheses],
        [[_id_string(reference) for reference in references]]
    )
    return float(result.score)

def exact_match(
    hypotheses,
    references
):
    if len(hypotheses) != len(references):
        raise ValueError('Got {} hypotheses but {} references'.format(len(hypotheses), len(references)))
    if len(hypotheses) == 0:
        raise ValueError('Exact match needs at least one pair')
    matches = sum(
        1 for hypothesis, reference in zip(hypotheses, references)
        if nat_lattice.core.as_ids(hypothesis) == nat_lattice.core.as_ids(reference)
    )
    return matches / len(hypotheses)

def compare_methods(
    outputs,
    references,
    n_min=DEFAULT_NGRAM_MIN,
    n_max=DEFAULT_NGRAM_MAX
):
    """Side-by-side report of BLEU and repetition statistics per method.

    ``outputs`` maps method names to lists of sequences aligned with
    ``references``.
    """
    rows = list()
    for method, hypotheses in outputs.items():
        report = repetition_report(hypotheses, n_min=n_min, n_max=n_max)
        row = {
            'method': method,
            'bleu': corpus_bleu(hypotheses, references),
            'unigram_ratio': report.unigram_ratio
        }
        for order, count in report.ngram_counts.items():
            row['ngram_{}'.format(order)] = count
        rows.append(row)
    logger.info('Compared {} methods over {} sentences'.format(len(rows), len(references)))
    return pd.DataFrame(rows)
