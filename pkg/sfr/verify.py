"""Oracle suite: every fast path against its slow reference, with fixed seeds."""
import logging

import numpy as np

from sfr import oracle
from sfr.encoder import ToyImage, encode_backward, encode_values, init_params
from sfr.features import (FeatureMatrix, GlobalFeature, PyramidSpec, SpatialFeatureMap,
                          global_average_pool, pyramid_pool)
from sfr.oracle import OracleReport, relative_error
from sfr.reconstruction import sfr_distance, sfr_gradients, solve_coefficients
from sfr.triplet import (Sample, TripletBatch, batch_gradients, batch_hard_mine, encode_batch,
                         plan_step, surrogate_objective)

logger = logging.getLogger(__name__)

RIDGE_CASES = 200
GRADIENT_CASES = 50
MINING_CASES = 100
BETAS = (1e-3, 1e-1, 1.0)
FAULT = 1e-3


def _report(name, rows, tol, rel=False):
    abs_err = max((r['abs_error'] for r in rows), default=0.0)
    rel_err = max((r['rel_error'] for r in rows), default=0.0)
    passed = (rel_err if rel else abs_err) <= tol and all(r.get('ok', True) for r in rows)
    return OracleReport(name, abs_err, rel_err, passed, len(rows), rows)


def check_ridge(rng, fault=False, cases=RIDGE_CASES):
    rows, identity_rows = [], []
    for case in range(cases):
        d, m, n = rng.integers(1, 17, size=3)
        beta = BETAS[case % len(BETAS)]
        x, y = rng.standard_normal((d, n)), rng.standard_normal((d, m))
        w = solve_coefficients(x, y, beta).matrix
        if fault:
            w = w + FAULT
        abs_err, rel_err = relative_error(w, oracle.ridge_oracle(x, y, beta))
        rows.append({'case': case, 'abs_error': abs_err, 'rel_error': rel_err})

        stationarity = y.T @ (x - y @ w) - beta * w
        identity_rows.append({'case': case, 'abs_error': float(np.abs(stationarity).max()), 'rel_error': 0.0})

    return [_report('ridge_cross_check', rows, oracle.SOLVER_TOL),
            _report('normal_equation_identity', identity_rows, oracle.SOLVER_TOL)]


def check_orthonormal(rng):
    rows = []
    for case in range(10):
        m = int(rng.integers(1, 6))
        q, _ = np.linalg.qr(rng.standard_normal((m + int(rng.integers(0, 4)), m)))
        distance = sfr_distance(q, q, 1.0).distance
        rows.append({'case': case, 'abs_error': abs(distance - 0.5), 'rel_error': abs(distance - 0.5) / 0.5})
    return _report('orthonormal_closed_form', rows, 1e-12)


def check_sfr_gradients(rng, cases=GRADIENT_CASES):
    rows = []
    for case in range(cases):
        xa, xo = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
        w = solve_coefficients(xa, xo, BETAS[case % len(BETAS)]).matrix
        grad_a, grad_o = sfr_gradients(xa, xo, w)
        fd_a = oracle.finite_difference(lambda z: float(np.sum((z - xo @ w) ** 2)), xa)
        fd_o = oracle.finite_difference(lambda z: float(np.sum((xa - z @ w) ** 2)), xo)
        for analytic, reference in ((grad_a, fd_a), (grad_o, fd_o)):
            abs_err, rel_err = relative_error(analytic, reference)
            rows.append({'case': case, 'abs_error': abs_err, 'rel_error': rel_err})
    return _report('sfr_gradients', rows, oracle.GRADIENT_TOL, rel=True)


def _param_check(name, params, objective, analytic, tol):
    rows = []
    arrays = params.arrays()
    for n, (array, grad) in enumerate(zip(arrays, analytic)):
        def f(z, n=n):
            trial = list(arrays)
            trial[n] = z
            return objective(params.with_arrays(trial))
        abs_err, rel_err = relative_error(grad, oracle.finite_difference(f, array))
        rows.append({'case': n, 'abs_error': abs_err, 'rel_error': rel_err})
    return _report(name, rows, tol, rel=True)


def _flat(grads):
    out = []
    for gk, gb in grads:
        out.extend([gk, gb])
    return out


def check_encoder_backward(rng):
    params = init_params([(2, 1, 3, True), (3, 2, 2, False)], seed=int(rng.integers(1 << 31)))
    img = ToyImage(rng.uniform(size=(1, 10, 8)))
    upstream = rng.standard_normal(encode_values(img, params).shape)
    analytic = _flat(encode_backward(img, params, upstream))
    return _param_check('encoder_backward', params,
                        lambda p: float(np.sum(encode_values(img, p) * upstream)),
                        analytic, oracle.GRADIENT_TOL)


def check_end_to_end(rng):
    spec = PyramidSpec((1, 2, 3))
    params = init_params([(3, 1, 3, True), (4, 3, 2, False)], seed=int(rng.integers(1 << 31)))
    images = [ToyImage(rng.uniform(size=(1, 12, 10))) for _ in range(4)]
    labels = ['a', 'a', 'b', 'b']
    # a wide margin keeps every hinge active
    plan = plan_step(encode_batch(images, params, spec), labels, 2, 2, beta=1e-3, margin=10.0)
    analytic = _flat(batch_gradients(images, params, plan, spec))
    return _param_check('end_to_end_gradient', params,
                        lambda p: surrogate_objective(images, p, plan, spec),
                        analytic, oracle.END_TO_END_TOL)


def random_batch(rng, subjects, images_per_subject, dim=None):
    dim = dim or int(rng.integers(2, 6))
    samples = []
    for subject in range(subjects):
        for _ in range(images_per_subject):
            count = int(rng.integers(2, 6))
            samples.append(Sample(f's{subject}', GlobalFeature(rng.standard_normal(dim)),
                                  FeatureMatrix(rng.standard_normal((dim, count)))))
    return TripletBatch(tuple(samples), subjects, images_per_subject)


def check_mining(rng, cases=MINING_CASES):
    rows = []
    for case in range(cases):
        batch = random_batch(rng, int(rng.integers(2, 6)), int(rng.integers(2, 5)))
        beta = BETAS[case % len(BETAS)]
        fast = batch_hard_mine(batch, beta)
        slow = oracle.exhaustive_mine(batch, beta)
        same = all((f.anchor, f.positive, f.negative) == (s.anchor, s.positive, s.negative)
                   for f, s in zip(fast, slow))
        errors = [abs(f.positive_distance - s.positive_distance) for f, s in zip(fast, slow)]
        errors += [abs(f.negative_distance - s.negative_distance) for f, s in zip(fast, slow)]
        rows.append({'case': case, 'abs_error': max(errors), 'rel_error': 0.0, 'ok': same})
    return _report('mining_equivalence', rows, oracle.SOLVER_TOL)


def check_pooling(rng):
    rows = []
    fmap = SpatialFeatureMap(rng.standard_normal((3, 8, 4)))
    matrix = pyramid_pool(fmap)
    abs_err, rel_err = relative_error(matrix.columns, oracle.window_oracle(fmap.values))
    rows.append({'case': '8x4', 'abs_error': abs_err, 'rel_error': rel_err, 'ok': matrix.count == 70})

    for case in range(20):
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        fmap = SpatialFeatureMap(rng.standard_normal((2, h, w)))
        matrix = pyramid_pool(fmap)
        expected = sum((h - k + 1) * (w - k + 1) for k in (1, 2, 3, 4) if k <= min(h, w))
        abs_err, rel_err = relative_error(matrix.columns, oracle.window_oracle(fmap.values))
        gap_abs, gap_rel = relative_error(global_average_pool(fmap).values, oracle.gap_oracle(fmap.values))
        rows.append({'case': f'{h}x{w}', 'abs_error': max(abs_err, gap_abs), 'rel_error': max(rel_err, gap_rel),
                     'ok': matrix.count == expected})
    return _report('pyramid_geometry', rows, oracle.POOLING_TOL, rel=True)


def run_suite(seed=0, fault=False):
    rng = np.random.default_rng(seed)
    reports = []
    reports.extend(check_ridge(rng, fault))
    reports.append(check_orthonormal(rng))
    reports.append(check_sfr_gradients(rng))
    reports.append(check_encoder_backward(rng))
    reports.append(check_end_to_end(rng))
    reports.append(check_mining(rng))
    reports.append(check_pooling(rng))
    for report in reports:
        logger.info('%s: %s (max abs %.3e, max rel %.3e, %d cases)', report.check_name,
                    'pass' if report.passed else 'FAIL', report.max_abs_error, report.max_rel_error,
                    report.cases_run)
    return reports
