"""Slow loop references; nothing here reuses the fast-path arithmetic."""
import math
from dataclasses import dataclass, field

import numpy as np

from sfr.errors import FactorizationError, NonFiniteGradientError

# cross-checks between two double-precision solvers
SOLVER_TOL = 1e-8
# central differences
GRADIENT_TOL = 1e-4
END_TO_END_TOL = 1e-3
POOLING_TOL = 1e-6
MAX_MINE = 24


@dataclass
class OracleReport:
    check_name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool
    cases_run: int
    cases: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {'checkName': self.check_name, 'maxAbsError': self.max_abs_error,
                'maxRelError': self.max_rel_error, 'passed': self.passed, 'casesRun': self.cases_run}


def ridge_oracle(X, Y, beta):
    x = np.array(X, dtype=np.float64, ndmin=2)
    y = np.array(Y, dtype=np.float64, ndmin=2)
    d, m = y.shape
    n = x.shape[1]

    a = np.zeros((m, m))
    b = np.zeros((m, n))
    for i in range(m):
        for j in range(m):
            a[i, j] = sum(y[k, i] * y[k, j] for k in range(d)) + (beta if i == j else 0.0)
        for j in range(n):
            b[i, j] = sum(y[k, i] * x[k, j] for k in range(d))

    scale = max(np.abs(a).max(), 1e-300)
    for col in range(m):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot, col]) <= 1e-12 * scale:
            raise FactorizationError(f'singular system at column {col}')
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        for row in range(col + 1, m):
            f = a[row, col] / a[col, col]
            a[row, col:] -= f * a[col, col:]
            b[row] -= f * b[col]

    w = np.zeros((m, n))
    for row in reversed(range(m)):
        acc = b[row].copy()
        for j in range(row + 1, m):
            acc -= a[row, j] * w[j]
        w[row] = acc / a[row, row]
    return w


def finite_difference(f, at, eps=1e-6):
    if eps <= 0:
        raise ValueError(f'eps must be positive, got {eps}')
    at = np.array(at, dtype=np.float64)
    grad = np.zeros_like(at)
    for idx in np.ndindex(at.shape):
        plus, minus = at.copy(), at.copy()
        plus[idx] += eps
        minus[idx] -= eps
        fp, fm = f(plus), f(minus)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteGradientError(f'f is not finite near index {idx}')
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def euclidean_oracle(a, b):
    return math.sqrt(sum((float(ai) - float(bi)) ** 2 for ai, bi in zip(a, b)))


def reconstruction_oracle(x, y, beta):
    x = np.array(x, dtype=np.float64, ndmin=2)
    y = np.array(y, dtype=np.float64, ndmin=2)
    w = ridge_oracle(x, y, beta)
    total = 0.0
    for col in range(x.shape[1]):
        sq = 0.0
        for row in range(x.shape[0]):
            r = x[row, col] - sum(y[row, k] * w[k, col] for k in range(y.shape[1]))
            sq += r * r
        total += math.sqrt(sq)
    return total / x.shape[1]


def exhaustive_mine(batch, beta):
    """O((PK)^2) scan with the lowest-index tie rule, returned as MinedTriplet."""
    from sfr.triplet import MinedTriplet

    samples = batch.samples
    n = len(samples)
    if n > MAX_MINE:
        raise ValueError(f'exhaustive mining is limited to {MAX_MINE} samples, got {n}')

    dist = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                dist[i][j] = (euclidean_oracle(samples[i].global_feature.values, samples[j].global_feature.values)
                              + reconstruction_oracle(samples[i].spatial.columns, samples[j].spatial.columns, beta))

    mined = []
    for a in range(n):
        pos = neg = None
        for j in range(n):
            if j == a:
                continue
            if samples[j].label == samples[a].label:
                if pos is None or dist[a][j] > dist[a][pos]:
                    pos = j
            elif neg is None or dist[a][j] < dist[a][neg]:
                neg = j
        mined.append(MinedTriplet(a, pos, neg, dist[a][pos], dist[a][neg]))
    return mined


def gap_oracle(values):
    c, h, w = np.shape(values)
    out = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for r in range(h):
            for col in range(w):
                acc += float(values[ch][r][col])
        out[ch] = acc / (h * w)
    return out


def window_oracle(values, kernel_sizes=(1, 2, 3, 4), stride=1):
    """Pyramid pooling by explicit window enumeration: kernel order, then row-major."""
    c, h, w = np.shape(values)
    columns = []
    for k in kernel_sizes:
        if k > h or k > w:
            continue
        for top in range(0, h - k + 1, stride):
            for left in range(0, w - k + 1, stride):
                col = []
                for ch in range(c):
                    acc = 0.0
                    for r in range(top, top + k):
                        for cc in range(left, left + k):
                            acc += float(values[ch][r][cc])
                    col.append(acc / (k * k))
                columns.append(col)
    return np.array(columns).T


def relative_error(analytic, reference):
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    abs_err = float(np.max(np.abs(analytic - reference))) if analytic.size else 0.0
    scale = float(np.max(np.abs(reference))) if reference.size else 0.0
    return abs_err, abs_err / max(scale, 1e-12)
