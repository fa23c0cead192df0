import nat_lattice.core
import nat_lattice.local_io
import nat_lattice.objectives_at_nat
import nat_lattice.ctc
import nat_lattice.dat
import nat_lattice.cmlm
import nat_lattice.metrics
import nat_lattice.perturb
import nat_lattice.toymodel
import nat_lattice.train
import nat_lattice.visualize
import attr
import numpy as np
import pandas as pd
import argparse
import concurrent.futures
import datetime
import importlib.metadata
import json
import logging
import os
import sys
import time

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

class UsageError(Exception):
    pass

class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError('{}: error: {}'.format(self.prog, message))

def toolkit_version():
    try:
        return importlib.metadata.version('nat-lattice')
    except importlib.metadata.PackageNotFoundError:
        return 'unknown'

@attr.s(frozen=True)
class RunManifest:
    command = attr.ib()
    argv = attr.ib()
    config = attr.ib()
    seed = attr.ib()
    inputs = attr.ib()
    outputs = attr.ib()
    version = attr.ib()
    started = attr.ib()
    elapsed_seconds = attr.ib()

    def to_json(self):
        return attr.asdict(self)

def _common_parser():
    parser = ArgumentParser(add_help=False)
    parser.add_argument('--seed', type=int, default=0, help='Random seed')
    parser.add_argument('--threads', type=int, default=1, help='Worker threads for per-sentence work')
    parser.add_argument('--format', choices=['json', 'table'], default='json', help='Standard output format')
    parser.add_argument('--log-level', default='WARNING', help='Logging level (written to stderr)')
    parser.add_argument('--manifest', default=None, help='Run manifest path')
    return parser

def build_parser():
    common = _common_parser()
    parser = ArgumentParser(
        prog='nat-lattice',
        description='Non-autoregressive translation objectives, decoders and analysis instruments'
    )
    subparsers = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    subparsers.required = True

    train_parser = subparsers.add_parser('train', parents=[common], help='Train the toy emitter')
    train_parser.add_argument('--task', choices=nat_lattice.toymodel.TOY_TASKS, default='copy')
    train_parser.add_argument('--corpus', default=None, help='Train on this corpus instead of a toy task')
    train_parser.add_argument('--vocab', default=None, help='Vocabulary for --corpus')
    train_parser.add_argument('--vocab-size', type=int, default=12)
    train_parser.add_argument('--min-length', type=int, default=3)
    train_parser.add_argument('--max-length', type=int, default=8)
    train_parser.add_argument('--pairs', type=int, default=2000)
    train_parser.add_argument('--objective', choices=nat_lattice.toymodel.OBJECTIVES, default='nat')
    train_parser.add_argument('--epochs', type=int, default=10)
    train_parser.add_argument('--lr', type=float, default=0.5)
    train_parser.add_argument('--batch-size', type=int, default=16)
    train_parser.add_argument('--clip-norm', type=float, default=1.0)
    train_parser.add_argument('--length-weight', type=float, default=1.0)
    train_parser.add_argument('--hidden-size', type=int, default=16)
    train_parser.add_argument('--ff-size', type=int, default=32)
    train_parser.add_argument('--upsample', type=int, default=None, help='Default: 8 for DAT, 3 for CTC, 1 otherwise')
    train_parser.add_argument('--delta-max', type=int, default=None, help='Default: maximum source length')
    train_parser.add_argument('--corpus-output', default=None, help='Write the toy corpus here')
    train_parser.add_argument('--vocab-output', default=None, help='Default: <output>.vocab')
    train_parser.add_argument('output', help='Parameter JSON output path')

    decode_parser = subparsers.add_parser('decode', parents=[common], help='Decode a corpus with a trained emitter')
    decode_parser.add_argument('--params', required=True)
    decode_parser.add_argument('--vocab', required=True)
    decode_parser.add_argument('--method', choices=nat_lattice.train.DECODE_METHODS, required=True)
    decode_parser.add_argument('--strategy', default=None, help='greedy, beam, prefix_beam, lookahead, viterbi, argmax or mask_predict')
    decode_parser.add_argument('--beam-size', type=int, default=nat_lattice.objectives_at_nat.DEFAULT_BEAM_SIZE)
    decode_parser.add_argument('--iterations', type=int, default=nat_lattice.cmlm.DEFAULT_ITERATIONS)
    decode_parser.add_argument('--max-len', type=int, default=None)
    decode_parser.add_argument('--dedup', action='store_true', help='Merge consecutive equal tokens on DAT paths')
    decode_parser.add_argument('input')
    decode_parser.add_argument('output')

    loss_parser = subparsers.add_parser('loss', parents=[common], help='Score a corpus under an objective')
    loss_parser.add_argument('--params', required=True)
    loss_parser.add_argument('--vocab', required=True)
    loss_parser.add_argument('--objective', choices=nat_lattice.toymodel.OBJECTIVES, required=True)
    loss_parser.add_argument('input')

    metrics_parser = subparsers.add_parser('metrics', parents=[common], help='Repetition statistics and BLEU')
    metrics_parser.add_argument('--repetition', action='store_true')
    metrics_parser.add_argument('--bleu', action='store_true')
    metrics_parser.add_argument('--nmin', type=int, default=nat_lattice.metrics.DEFAULT_NGRAM_MIN)
    metrics_parser.add_argument('--nmax', type=int, default=nat_lattice.metrics.DEFAULT_NGRAM_MAX)
    metrics_parser.add_argument('--field', default='hyp', help='Corpus field holding the sequences to analyze')
    metrics_parser.add_argument('input')

    mqm_parser = subparsers.add_parser('mqm', parents=[common], help='Score MQM annotation files')
    mqm_parser.add_argument('--weights', default=nat_lattice.metrics.DEFAULT_MQM_WEIGHTS)
    mqm_parser.add_argument('--per-segments', type=int, default=None)
    mqm_parser.add_argument('--breakdown', action='store_true')
    mqm_parser.add_argument('inputs', nargs='+')

    perturb_parser = subparsers.add_parser('perturb', parents=[common], help='Emit a noisy corpus')
    perturb_parser.add_argument('--mode', choices=nat_lattice.perturb.PERTURB_MODES, required=True)
    perturb_parser.add_argument('--p', type=float, required=True)
    perturb_parser.add_argument('--window', type=int, default=None)
    perturb_parser.add_argument('--symmetric', action='store_true')
    perturb_parser.add_argument('input')
    perturb_parser.add_argument('output')

    gradcheck_parser = subparsers.add_parser('gradcheck', parents=[common], help='Finite-difference gradient sweep')
    gradcheck_parser.add_argument('--all', action='store_true')
    gradcheck_parser.add_argument('--objective', choices=nat_lattice.toymodel.OBJECTIVES, action='append')
    gradcheck_parser.add_argument('--step', type=float, default=nat_lattice.toymodel.GRADCHECK_STEP)
    gradcheck_parser.add_argument('--threshold', type=float, default=nat_lattice.toymodel.GRADCHECK_THRESHOLD)
    gradcheck_parser.add_argument('--instances', type=int, default=3)

    compare_parser = subparsers.add_parser('compare', parents=[common], help='Side-by-side method report')
    compare_parser.add_argument('--references', default=None, help='Corpus holding references (default: first input)')
    compare_parser.add_argument('--nmin', type=int, default=nat_lattice.metrics.DEFAULT_NGRAM_MIN)
    compare_parser.add_argument('--nmax', type=int, default=nat_lattice.metrics.DEFAULT_NGRAM_MAX)
    compare_parser.add_argument('--plot-directory', default=None)
    compare_parser.add_argument('methods', nargs='+', help='NAME=PATH pairs')

    rerun_parser = subparsers.add_parser('rerun', help='Re-execute the command stored in a manifest')
    rerun_parser.add_argument('manifest_path')
    return parser

def _emit(data, args, table=None):
    if args.format == 'table' and table is not None:
        sys.stdout.write(table.to_string(index=False, float_format=lambda value: '{:.2f}'.format(value)))
        sys.stdout.write('\n')
    else:
        sys.stdout.write(json.dumps(data, indent=2, sort_keys=True))
        sys.stdout.write('\n')

def _map(function, items, threads):
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(function, items))
    return [function(item) for item in items]

def _default_upsample(objective):
    if objective in ['dat', 'dat_star']:
        return nat_lattice.dat.DEFAULT_UPSAMPLE
    if objective == 'ctc':
        return nat_lattice.ctc.DEFAULT_UPSAMPLE
    return 1

def run_train(args):
    rng = np.random.default_rng(args.seed)
    inputs = list()
    outputs = [args.output]
    if args.corpus is not None:
        vocabulary = nat_lattice.local_io.read_vocabulary(args.vocab) if args.vocab is not None else None
        entries, vocabulary = nat_lattice.local_io.read_corpus(args.corpus, vocabulary=vocabulary)
        inputs.append(args.corpus)
        max_source_length = max(len(entry.source) for entry in entries)
    else:
        entries, vocabulary = nat_lattice.toymodel.make_toy_task(
            args.task,
            args.vocab_size,
            min_length=args.min_length,
            max_length=args.max_length,
            pairs=args.pairs,
            rng=rng
        )
        max_source_length = args.max_length
    params = nat_lattice.toymodel.init_params(
        vocabulary,
        hidden_size=args.hidden_size,
        ff_size=args.ff_size,
        max_source_length=max_source_length,
        upsample=args.upsample if args.upsample is not None else _default_upsample(args.objective),
        delta_max=args.delta_max if args.delta_max is not None else max_source_length,
        star=args.objective == 'dat_star',
        rng=np.random.default_rng(args.seed)
    )
    config = nat_lattice.train.TrainConfig(
        objective=args.objective,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        clip_norm=args.clip_norm,
        seed=args.seed,
        length_weight=args.length_weight
    )
    params, history = nat_lattice.train.train_model(entries, params, config)
    nat_lattice.local_io.write_params(params, args.output)
    vocab_output = args.vocab_output if args.vocab_output is not None else '{}.vocab'.format(args.output)
    nat_lattice.local_io.write_vocabulary(vocabulary, vocab_output)
    outputs.append(vocab_output)
    if args.corpus_output is not None:
        nat_lattice.local_io.write_corpus(entries, vocabulary, args.corpus_output)
        outputs.append(args.corpus_output)
    _emit(
        {'config': config.to_json(), 'history': json.loads(history.to_json(orient='records'))},
        args,
        table=history
    )
    return inputs, outputs

def run_decode(args):
    params = nat_lattice.local_io.read_params(args.params)
    vocabulary = nat_lattice.local_io.read_vocabulary(args.vocab)
    entries, _ = nat_lattice.local_io.read_corpus(args.input, vocabulary=vocabulary)
    hypotheses = nat_lattice.train.decode_corpus(
        params,
        entries,
        args.method,
        strategy=args.strategy,
        beam_size=args.beam_size,
        iterations=args.iterations,
        max_len=args.max_len,
        dedup=args.dedup,
        threads=args.threads
    )
    decoded = [attr.evolve(entry, hypothesis=hypothesis) for entry, hypothesis in zip(entries, hypotheses)]
    nat_lattice.local_io.write_corpus(decoded, vocabulary, args.output)
    return [args.params, args.vocab, args.input], [args.output]

def run_loss(args):
    params = nat_lattice.local_io.read_params(args.params)
    vocabulary = nat_lattice.local_io.read_vocabulary(args.vocab)
    entries, _ = nat_lattice.local_io.read_corpus(args.input, vocabulary=vocabulary)
    def entry_loss(entry):
        loss, _ = nat_lattice.toymodel.objective_loss_grad(
            args.objective,
            params,
            entry,
            rng=nat_lattice.perturb.entry_rng(args.seed, entry.id)
        )
        return loss
    losses = _map(entry_loss, entries, args.threads)
    table = pd.DataFrame({'id': [entry.id for entry in entries], 'loss': losses})
    _emit(
        {
            'objective': args.objective,
            'mean_loss': float(np.mean(losses)),
            'losses': {entry.id: loss for entry, loss in zip(entries, losses)}
        },
        args,
        table=table
    )
    return [args.params, args.vocab, args.input], list()

def _field_sequences(records, field, vocabulary):
    missing = [record.get('id') for record in records if record.get(field) is None]
    if len(missing) > 0:
        raise ValueError('Records {} have no \'{}\' field'.format(missing, field))
    return [vocabulary.encode(record[field]) for record in records]

def run_metrics(args):
    if not args.repetition and not args.bleu:
        raise UsageError('metrics: choose at least one of --repetition and --bleu')
    records = nat_lattice.local_io.read_jsonl(args.input)
    vocabulary = nat_lattice.local_io.build_vocabulary_from_records(records)
    hypotheses = _field_sequences(records, args.field, vocabulary)
    result = dict()
    rows = list()
    if args.repetition:
        report = nat_lattice.metrics.repetition_report(hypotheses, n_min=args.nmin, n_max=args.nmax)
        result.update(report.to_json())
        rows.append({'statistic': 'unigram_ratio', 'value': report.unigram_ratio})
        rows.extend({'statistic': 'ngram_{}'.format(n), 'value': count} for n, count in sorted(report.ngram_counts.items()))
    if args.bleu:
        references = _field_sequences(records, 'ref', vocabulary)
        result['bleu'] = nat_lattice.metrics.corpus_bleu(hypotheses, references)
        rows.append({'statistic': 'bleu', 'value': result['bleu']})
    _emit(result, args, table=pd.DataFrame(rows, columns=['statistic', 'value']))
    return [args.input], list()

def run_mqm(args):
    weights = nat_lattice.metrics.MQMWeights.from_string(args.weights)
    annotations = list()
    for path in args.inputs:
        file_annotations = nat_lattice.local_io.read_mqm_annotations(path)
        # Files without a system field are scored as their own system
        system = os.path.splitext(os.path.basename(path))[0]
        annotations.extend(
            annotation if annotation.system is not None else attr.evolve(annotation, system=system)
            for annotation in file_annotations
        )
    if args.breakdown:
        table = nat_lattice.metrics.mqm_error_breakdown(annotations)
    else:
        table = nat_lattice.metrics.mqm_system_scores(annotations, weights=weights, per_segments=args.per_segments)
    _emit(json.loads(table.to_json(orient='records')), args, table=table)
    return list(args.inputs), list()

def run_perturb(args):
    spec = nat_lattice.perturb.PerturbSpec(
        mode=args.mode,
        p=args.p,
        window=args.window,
        seed=args.seed,
        symmetric=args.symmetric
    )
    entries, vocabulary = nat_lattice.local_io.read_corpus(args.input)
    perturbed = nat_lattice.perturb.perturb_corpus(entries, spec)
    nat_lattice.local_io.write_corpus(perturbed, vocabulary, args.output)
    return [args.input], [args.output]

def _gradcheck_instances(objective, count, rng):
    # Tiny random models keep the sweep fast; DAT needs room for BOS/EOS vertices
    entries, vocabulary = nat_lattice.toymodel.make_toy_task('copy', 4, min_length=1, max_length=3, pairs=count, rng=rng)
    instances = list()
    for entry in entries:
        params = nat_lattice.toymodel.init_params(
            vocabulary,
            hidden_size=4,
            ff_size=5,
            max_source_length=3,
            upsample=3,
            delta_max=2,
            star=objective == 'dat_star',
            rng=rng,
            scale=0.5
        )
        instances.append((params, entry))
    return instances

def run_gradcheck(args):
    if args.all:
        objectives = list(nat_lattice.toymodel.OBJECTIVES)
    elif args.objective:
        objectives = args.objective
    else:
        raise UsageError('gradcheck: choose --all or at least one --objective')
    rng = np.random.default_rng(args.seed)
    rows = list()
    reports = list()
    for objective in objectives:
        for index, (params, entry) in enumerate(_gradcheck_instances(objective, args.instances, rng)):
            report = nat_lattice.toymodel.gradcheck(
                objective,
                params,
                entry,
                step=args.step,
                threshold=args.threshold,
                rng=rng
            )
            reports.append(report.to_json())
            rows.append({
                'objective': objective,
                'instance': index,
                'max_relative_error': report.max_relative_error,
                'passed': report.passed
            })
    table = pd.DataFrame(rows, columns=['objective', 'instance', 'max_relative_error', 'passed'])
    passed = bool(table['passed'].all())
    _emit({'passed': passed, 'reports': reports}, args, table=table)
    if not passed:
        logger.error('Gradient check failed for {}'.format(sorted(table.loc[~table['passed'], 'objective'].unique())))
    return list(), list(), passed

def _parse_method_specs(specs):
    methods = list()
    for spec in specs:
        if '=' not in spec:
            raise UsageError('compare: method \'{}\' is not of the form NAME=PATH'.format(spec))
        name, path = spec.split('=', 1)
        methods.append((name, path))
    if len(methods) < 2:
        raise UsageError('compare: need at least two methods')
    return methods

def run_compare(args):
    methods = _parse_method_specs(args.methods)
    reference_path = args.references if args.references is not None else methods[0][1]
    reference_records = nat_lattice.local_io.read_jsonl(reference_path)
    method_records = {name: nat_lattice.local_io.read_jsonl(path) for name, path in methods}
    all_records = reference_records + [record for records in method_records.values() for record in records]
    vocabulary = nat_lattice.local_io.build_vocabulary_from_records(all_records)
    reference_ids = [record['id'] for record in reference_records]
    outputs = dict()
    for name, records in method_records.items():
        by_id = {record['id']: record for record in records}
        offending = sorted(set(reference_ids) ^ set(by_id))
        if len(offending) > 0:
            raise ValueError('Method {} is not aligned with the references; offending ids: {}'.format(name, offending))
        outputs[name] = _field_sequences([by_id[record_id] for record_id in reference_ids], 'hyp', vocabulary)
    references = _field_sequences(reference_records, 'ref', vocabulary)
    table = nat_lattice.metrics.compare_methods(outputs, references, n_min=args.nmin, n_max=args.nmax)
    written = list()
    if args.plot_directory is not None:
        os.makedirs(args.plot_directory, exist_ok=True)
        reports = {
            name: nat_lattice.metrics.repetition_report(sequences, n_min=args.nmin, n_max=args.nmax)
            for name, sequences in outputs.items()
        }
        path = nat_lattice.visualize.plot_ngram_repetition(
            nat_lattice.visualize.ngram_repetition_df(reports),
            show=False,
            save=True,
            save_directory=args.plot_directory
        )
        written.append(path)
    _emit(json.loads(table.to_json(orient='records', double_precision=15)), args, table=table)
    return [path for _, path in methods] + ([args.references] if args.references is not None else []), written

COMMANDS = {
    'train': run_train,
    'decode': run_decode,
    'loss': run_loss,
    'metrics': run_metrics,
    'mqm': run_mqm,
    'perturb': run_perturb,
    'gradcheck': run_gradcheck,
    'compare': run_compare
}

def manifest_path(args, outputs):
    if args.manifest is not None:
        return args.manifest
    if len(outputs) > 0:
        return '{}.manifest.json'.format(outputs[0])
    return '{}.manifest.json'.format(args.command)

def run_rerun(args):
    manifest = nat_lattice.local_io.read_json(args.manifest_path)
    if 'argv' not in manifest:
        raise ValueError('Manifest {} has no stored argv'.format(args.manifest_path))
    logger.info('Re-running {} from {}'.format(manifest.get('command'), args.manifest_path))
    return main(manifest['argv'])

def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as error:
        sys.stderr.write('{}\n'.format(error))
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, str(getattr(args, 'log_level', 'WARNING')).upper(), logging.WARNING),
        stream=sys.stderr,
        format='%(asctime)s %(name)s %(levelname)s %(message)s'
    )
    if args.command == 'rerun':
        try:
            return run_rerun(args)
        except (ValueError, KeyError, OSError) as error:
            sys.stderr.write('error: {}\n'.format(error))
            return EXIT_DATA
    started = datetime.datetime.now(datetime.timezone.utc)
    start_time = time.time()
    passed = True
    try:
        result = COMMANDS[args.command](args)
        if len(result) == 3:
            inputs, outputs, passed = result
        else:
            inputs, outputs = result
        manifest = RunManifest(
            command=args.command,
            argv=argv,
            config={key: value for key, value in sorted(vars(args).items())},
            seed=args.seed,
            inputs=inputs,
            outputs=outputs,
            version=toolkit_version(),
            started=started.isoformat(),
            elapsed_seconds=time.time() - start_time
        )
        nat_lattice.local_io.write_json(manifest.to_json(), manifest_path(args, outputs))
    except UsageError as error:
        sys.stderr.write('{}\n'.format(error))
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, FloatingPointError) as error:
        sys.stderr.write('error: {}\n'.format(error))
        return EXIT_DATA
    if not passed:
        return EXIT_DATA
    return EXIT_OK

if __name__ == '__main__':
    sys.exit(main())
