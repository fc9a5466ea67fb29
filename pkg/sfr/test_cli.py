import json

import numpy as np
import pandas as pd

from sfr.cli import EXIT_CONVERGENCE, EXIT_INPUT, EXIT_MISMATCH, EXIT_OK, EXIT_VERIFICATION, main
from sfr.encoder import load_params
from sfr.features import SpatialFeatureMap, load_pooled, save_feature_map


def write_manifest(path, rows):
    path.write_text(''.join(json.dumps(row) + '\n' for row in rows))
    return str(path)


def write_maps(tmp_path, prefix, count, channels=4, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in range(count):
        name = f'{prefix}{n}.sfrf'
        save_feature_map(SpatialFeatureMap(rng.standard_normal((channels, 6, 5))), str(tmp_path / name))
        rows.append({'entryId': f'{prefix}{n}', 'subjectId': f's{n}', 'path': name})
    return write_manifest(tmp_path / f'{prefix}.jsonl', rows)


def test_pool(tmp_path, capsys):
    source, target = str(tmp_path / 'map.sfrf'), str(tmp_path / 'pooled.sfrf')
    save_feature_map(SpatialFeatureMap(np.random.default_rng(0).standard_normal((3, 8, 4))), source)

    assert main(['pool', source, target]) == EXIT_OK
    assert capsys.readouterr().out.strip() == '70 columns'
    g, m = load_pooled(target)
    assert m.count == 70 and m.normalized and g.dim == 3


def test_pool_single_pixel(tmp_path, capsys):
    source = str(tmp_path / 'map.sfrf')
    save_feature_map(SpatialFeatureMap(np.ones((2, 1, 1))), source)

    assert main(['pool', source, str(tmp_path / 'out.sfrf'), '--no-normalize']) == EXIT_OK
    assert capsys.readouterr().out.strip() == '1 columns'


def test_pool_malformed(tmp_path):
    source = tmp_path / 'bad.sfrf'
    source.write_bytes(b'garbage')

    assert main(['pool', str(source), str(tmp_path / 'out.sfrf')]) == EXIT_INPUT
    assert main(['pool', str(tmp_path / 'missing.sfrf'), str(tmp_path / 'out.sfrf')]) == EXIT_INPUT


def test_bad_usage():
    assert main(['frobnicate']) == EXIT_INPUT
    assert main(['pool', 'a', 'b', '--alpha', '2']) == EXIT_INPUT


def test_match_self(tmp_path, capsys):
    gallery = write_maps(tmp_path, 'g', 5)
    out = tmp_path / 'run'

    assert main(['match', f'--gallery={gallery}', f'--probes={gallery}', f'--out={out}']) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed['rank1'] == 1.0 and printed['mAP'] == 1.0, printed

    rankings = pd.read_csv(out / 'rankings.csv')
    assert list(rankings.columns) == ['probeId', 'rank', 'entryId', 'd', 'r', 's']
    assert len(rankings) == 25
    assert json.loads((out / 'summary.json').read_text()) == printed
    assert list(pd.read_csv(out / 'cmc.csv')['cmc']) == [1.0] * 5


def test_match_workers_identical(tmp_path):
    gallery = write_maps(tmp_path, 'g', 6, seed=1)
    probes = write_maps(tmp_path, 'p', 6, seed=2)
    one, many = tmp_path / 'one', tmp_path / 'many'

    assert main(['match', f'--gallery={gallery}', f'--probes={probes}', f'--out={one}', '--workers', '1']) == EXIT_OK
    assert main(['match', f'--gallery={gallery}', f'--probes={probes}', f'--out={many}', '--workers', '8']) == EXIT_OK
    assert (one / 'rankings.csv').read_bytes() == (many / 'rankings.csv').read_bytes()


def test_match_errors(tmp_path):
    gallery = write_maps(tmp_path, 'g', 3)
    wide = write_maps(tmp_path, 'w', 3, channels=6)
    empty = write_manifest(tmp_path / 'empty.jsonl', [])
    out = str(tmp_path / 'run')

    assert main(['match', f'--gallery={gallery}', f'--probes={empty}', f'--out={out}']) == EXIT_INPUT
    assert main(['match', f'--gallery={gallery}', f'--probes={wide}', f'--out={out}']) == EXIT_MISMATCH


def test_sweep(tmp_path, capsys):
    gallery = write_maps(tmp_path, 'g', 4)
    out = tmp_path / 'sweep'

    assert main(['sweep', f'--gallery={gallery}', f'--probes={gallery}', f'--out={out}']) == EXIT_OK
    frame = pd.read_csv(out / 'sweep.csv')
    assert len(frame) == 11 and list(frame.columns) == ['alpha', 'rank1', 'mAP']


def eval_fixture(tmp_path, truth_rows):
    rows = [(p, rank, g, 0.0, 0.0, float(rank)) for p in ('p1', 'p2') for rank, g in enumerate(['g1', 'g2', 'g3'], 1)]
    rankings = tmp_path / 'rankings.csv'
    pd.DataFrame(rows, columns=['probeId', 'rank', 'entryId', 'd', 'r', 's']).to_csv(rankings, index=False)
    return str(rankings), write_manifest(tmp_path / 'truth.jsonl', truth_rows)


def test_eval(tmp_path, capsys):
    truth = [{'entryId': e, 'subjectId': s} for e, s in
             [('p1', 's1'), ('p2', 's2'), ('g1', 's1'), ('g2', 's2'), ('g3', 's3')]]
    rankings, manifest = eval_fixture(tmp_path, truth)
    out = tmp_path / 'eval'

    assert main(['eval', rankings, manifest, '--out', str(out)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed['mAP'] == 0.75 and printed['rank1'] == 0.5, printed
    assert list(pd.read_csv(out / 'cmc.csv')['cmc']) == [0.5, 1.0, 1.0]


def test_eval_missing_truth(tmp_path):
    truth = [{'entryId': e, 'subjectId': s} for e, s in [('p1', 's1'), ('g1', 's1'), ('g2', 's2'), ('g3', 's3')]]
    rankings, manifest = eval_fixture(tmp_path, truth)

    assert main(['eval', rankings, manifest]) == EXIT_MISMATCH


def test_verify(capsys):
    assert main(['verify']) == EXIT_OK
    reports = json.loads(capsys.readouterr().out)
    assert {r['checkName'] for r in reports} >= {'ridge_cross_check', 'mining_equivalence', 'pyramid_geometry'}
    assert all(r['passed'] for r in reports), reports


def test_verify_fault(capsys):
    assert main(['verify', '--fault']) == EXIT_VERIFICATION
    reports = {r['checkName']: r for r in json.loads(capsys.readouterr().out)}
    assert not reports['ridge_cross_check']['passed']


def test_train_demo_untrained(tmp_path):
    out = tmp_path / 'demo'

    assert main(['train-demo', '--epochs', '0', f'--out={out}']) == EXIT_CONVERGENCE
    assert len(pd.read_csv(out / 'loss.csv')) == 0


def test_train_demo(tmp_path, capsys):
    out = tmp_path / 'demo'

    assert main(['train-demo', '--seed', '7', f'--out={out}']) == EXIT_OK
    assert json.loads(capsys.readouterr().out)['rank1'] >= 0.95

    losses = pd.read_csv(out / 'loss.csv')
    assert list(losses.columns) == ['epoch', 'loss'] and 1 <= len(losses) <= 40
    assert np.all(np.diff(losses['loss']) < 0), losses
    assert load_params(str(out / 'encoder.sfrf')).spec == [(8, 1, 3, True), (16, 8, 3, True)]
