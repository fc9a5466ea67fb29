"""Spatial feature reconstruction for partial-pattern matching.

Usage:
  sfr pool <input> <output> [options]
  sfr match --gallery=<manifest> --probes=<manifest> --out=<dir> [options]
  sfr eval <rankings> <truth> [--out=<dir>] [options]
  sfr sweep --gallery=<manifest> --probes=<manifest> [--out=<dir>] [options]
  sfr train-demo [--out=<dir>] [options]
  sfr verify [--fault] [options]
  sfr -h | --help

Options:
  -h --help                 Show this screen.
  --config=<ini>            INI file with an [sfr] section; flags override it.
  --gallery=<manifest>      Gallery manifest, one JSON object per line.
  --probes=<manifest>       Probe manifest; subjectId is the ground truth.
  --out=<dir>               Output directory.
  --alpha=<alpha>           Fusion weight on the global distance [config: 0.7].
  --beta=<beta>             Ridge regularizer [config: 0.001].
  --margin=<m>              Triplet margin [config: 0.3].
  --kernels=<list>          Pyramid kernel sizes, e.g. 1,2,3,4.
  --normalize               L2-normalize spatial columns (default).
  --no-normalize            Keep raw spatial columns.
  --subject-dictionaries    Merge all of a subject's entries into one dictionary.
  --p=<P>                   Subjects per training batch [config: 32].
  --k=<K>                   Images per subject in a batch [config: 4].
  --epochs=<n>              Training epochs [config: 40].
  --lr=<lr>                 Base learning rate [config: 0.002].
  --lr-schedule=<s>         constant or step:FACTOR:INTERVAL [config: step:0.5:100].
  --identities=<n>          Synthetic identities for train-demo [config: 10].
  --seed=<seed>             Random seed [config: 7].
  --workers=<n>             Matching threads [config: 1].
  --fault                   Perturb the solver output so verification must fail.
  -v --verbose              Debug logging; verify also prints per-case errors.

Exit codes: 0 success, 2 input error, 3 data mismatch, 4 no convergence,
5 verification failure.
"""
import json
import logging
import os
import sys

import numpy as np
import pandas as pd
from docopt import DocoptExit, docopt

from sfr.config import resolve_config
from sfr.encoder import init_params, save_params
from sfr.errors import (ConfigError, ConvergenceError, DimensionMismatchError, EmptyPyramidError,
                        FactorizationError, FeatureFormatError, InvalidFeatureError,
                        NoTrueMatchError, NonFiniteGradientError, UnknownIdentifierError,
                        VerificationError)
from sfr.features import extract_features, load_feature_map, load_features, save_pooled
from sfr.retrieval import (ALPHA_GRID, GalleryEntry, build_gallery, evaluate, match_all,
                           rankings_frame, rankings_from_frame, summary, sweep_alpha)
from sfr.toy import DEFAULT_ENCODER, evaluate_split, make_toy_split
from sfr.triplet import epoch_batches, learn
from sfr.verify import run_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISMATCH = 3
EXIT_CONVERGENCE = 4
EXIT_VERIFICATION = 5

# first match wins
EXIT_CODES = (
    ((DimensionMismatchError, UnknownIdentifierError, NoTrueMatchError, FactorizationError), EXIT_MISMATCH),
    ((ConvergenceError, NonFiniteGradientError), EXIT_CONVERGENCE),
    ((VerificationError,), EXIT_VERIFICATION),
    ((ConfigError, FeatureFormatError, InvalidFeatureError, EmptyPyramidError, OSError, ValueError), EXIT_INPUT),
)

FLAGS = {'--alpha': 'alpha', '--beta': 'beta', '--margin': 'margin', '--kernels': 'kernels',
         '--p': 'p', '--k': 'k', '--epochs': 'epochs', '--lr': 'lr', '--lr-schedule': 'lr_schedule',
         '--identities': 'identities', '--seed': 'seed', '--workers': 'workers'}
RANKING_COLUMNS = ('probeId', 'rank', 'entryId', 'd', 'r', 's')
FLOAT_FORMAT = '%.10g'
CONVERGED_RANK1 = 0.95


def config_from_args(args):
    flags = {field: args[flag] for flag, field in FLAGS.items()}
    if args['--no-normalize']:
        flags['normalize'] = False
    elif args['--normalize']:
        flags['normalize'] = True
    if args['--subject-dictionaries']:
        flags['subject_dictionaries'] = True
    return resolve_config(flags, args['--config'])


def exit_code(error):
    for kinds, code in EXIT_CODES:
        if isinstance(error, kinds):
            return code
    raise error


def read_manifest(path, need_path=True):
    """JSON lines of {entryId, subjectId[, path]}; paths resolve against the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                row = {'entryId': str(obj['entryId']), 'subjectId': str(obj['subjectId'])}
                if need_path:
                    row['path'] = os.path.join(base, obj['path'])
            except (KeyError, TypeError, ValueError) as e:
                raise FeatureFormatError(f'{path}:{n}: bad manifest line ({e})') from None
            rows.append(row)
    if not rows:
        raise FeatureFormatError(f'{path}: empty manifest')
    return rows


def load_entries(path, config):
    entries = []
    for row in read_manifest(path):
        global_feature, matrix = load_features(row['path'], config.pyramid, config.normalize)
        entries.append(GalleryEntry(row['entryId'], row['subjectId'], global_feature, matrix))
    return entries


def _load_run(args, config):
    gallery = build_gallery(load_entries(args['--gallery'], config), config.alpha, config.beta,
                            config.subject_dictionaries)
    probe_entries = load_entries(args['--probes'], config)
    probes = [(e.entry_id, e.global_feature, e.spatial) for e in probe_entries]
    truth = {e.entry_id: e.subject_id for e in probe_entries}
    logger.info('%d gallery entries, %d probes', len(gallery), len(probes))
    return gallery, probes, truth


def write_report(report, out):
    os.makedirs(out, exist_ok=True)
    cmc = pd.DataFrame({'rank': np.arange(1, len(report.cmc) + 1), 'cmc': report.cmc})
    cmc.to_csv(os.path.join(out, 'cmc.csv'), index=False, float_format=FLOAT_FORMAT)
    with open(os.path.join(out, 'summary.json'), 'w') as f:
        json.dump(summary(report), f, indent=2, sort_keys=True)


def cmd_pool(args, config):
    fmap = load_feature_map(args['<input>'])
    global_feature, matrix = extract_features(fmap, config.pyramid, config.normalize)
    save_pooled(global_feature, matrix, args['<output>'])
    print(f'{matrix.count} columns')
    return EXIT_OK


def cmd_match(args, config):
    gallery, probes, truth = _load_run(args, config)
    rankings = match_all(probes, gallery, config.workers)
    report = evaluate(rankings, truth, gallery)

    out = args['--out']
    os.makedirs(out, exist_ok=True)
    rankings_frame(rankings).to_csv(os.path.join(out, 'rankings.csv'), index=False, float_format=FLOAT_FORMAT)
    write_report(report, out)
    print(json.dumps(summary(report), sort_keys=True))
    return EXIT_OK


def cmd_eval(args, config):
    frame = pd.read_csv(args['<rankings>'], dtype={'probeId': str, 'entryId': str})
    missing = [c for c in RANKING_COLUMNS if c not in frame.columns]
    if missing:
        raise FeatureFormatError(f'{args["<rankings>"]}: missing columns {missing}')
    if frame.empty:
        raise FeatureFormatError(f'{args["<rankings>"]}: no rankings')

    truth = {row['entryId']: row['subjectId'] for row in read_manifest(args['<truth>'], need_path=False)}
    report = evaluate(rankings_from_frame(frame), truth, truth)
    if args['--out']:
        write_report(report, args['--out'])
    print(json.dumps(summary(report), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args, config):
    gallery, probes, truth = _load_run(args, config)
    frame = sweep_alpha(probes, truth, gallery, ALPHA_GRID, config.workers)
    if args['--out']:
        os.makedirs(args['--out'], exist_ok=True)
        frame.to_csv(os.path.join(args['--out'], 'sweep.csv'), index=False, float_format=FLOAT_FORMAT)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_train_demo(args, config):
    split = make_toy_split(config.identities, seed=config.seed)
    subjects = config.p
    if subjects > config.identities:
        logger.warning('P=%d exceeds the %d toy identities, using P=%d', subjects, config.identities,
                       config.identities)
        subjects = config.identities

    rng = np.random.default_rng(config.seed)
    batches = epoch_batches(split.train_labels, subjects, config.k, rng)
    steps = config.epochs * len(batches)
    params = init_params(DEFAULT_ENCODER, seed=config.seed)
    params, losses = learn(steps, split.train_images, split.train_labels, params, subjects, config.k,
                           config.beta, config.margin, config.schedule, config.pyramid, config.normalize,
                           rng, batches=batches)

    epoch_losses = []
    for e in range(config.epochs):
        epoch_losses.append(float(np.mean(losses[e * len(batches):(e + 1) * len(batches)])))
        # every hinge clamped on every batch: later epochs repeat it exactly
        if epoch_losses[-1] == 0:
            break

    report = evaluate_split(params, split, config.alpha, config.beta, config.pyramid, config.normalize,
                            config.workers)
    rank1 = float(report.cmc[0])
    logger.info('%d steps, held-out rank-1 %.4f, mAP %.4f', steps, rank1, report.map)

    out = args['--out']
    if out:
        os.makedirs(out, exist_ok=True)
        pd.DataFrame({'epoch': np.arange(1, len(epoch_losses) + 1), 'loss': epoch_losses}).to_csv(
            os.path.join(out, 'loss.csv'), index=False, float_format=FLOAT_FORMAT)
        save_params(params, os.path.join(out, 'encoder.sfrf'))

    if rank1 < CONVERGED_RANK1:
        raise ConvergenceError(f'no convergence after {steps} steps: rank-1 {rank1:.4f} < {CONVERGED_RANK1}',
                               epoch_losses, rank1)
    print(json.dumps({'steps': steps, 'rank1': rank1, 'mAP': report.map}, sort_keys=True))
    return EXIT_OK


def cmd_verify(args, config):
    reports = run_suite(config.seed, fault=args['--fault'])
    print(json.dumps([r.to_dict() for r in reports], indent=2))
    if args['--verbose']:
        for report in reports:
            print(f'\n{report.check_name}')
            print(pd.DataFrame(report.cases).to_string(index=False))

    failed = [r.check_name for r in reports if not r.passed]
    if failed:
        raise VerificationError(f'failed checks: {", ".join(failed)}', reports)
    return EXIT_OK


COMMANDS = {'pool': cmd_pool, 'match': cmd_match, 'eval': cmd_eval, 'sweep': cmd_sweep,
            'train-demo': cmd_train_demo, 'verify': cmd_verify}


def main(argv=None):
    try:
        args = docopt(__doc__, argv=argv)
    except DocoptExit as e:
        print(e, file=sys.stderr)
        return EXIT_INPUT

    logging.basicConfig(level=logging.DEBUG if args['--verbose'] else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    command = next(name for name in COMMANDS if args[name])
    try:
        config = config_from_args(args)
        return COMMANDS[command](args, config)
    except Exception as e:
        code = exit_code(e)
        logger.error('%s: %s', command, e)
        if isinstance(e, ConvergenceError) and e.losses:
            logger.error('epoch losses: %s', ', '.join(f'{loss:.5f}' for loss in e.losses))
        return code


if __name__ == '__main__':
    sys.exit(main())
