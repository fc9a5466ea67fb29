import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from sfr.encoder import encode_backward, encode_values, sgd_update
from sfr.errors import (DimensionMismatchError, FactorizationError, InvalidFeatureError,
                        NonFiniteGradientError)
from sfr.features import (FeatureMatrix, GlobalFeature, PyramidSpec, column_scales,
                          global_average_pool, global_average_pool_backward, l2_normalize_columns,
                          pyramid_pool, pyramid_pool_backward)
from sfr.reconstruction import (DEFAULT_BETA, factorize_dictionary, sfr_distance,
                                sfr_distance_with_factor, sfr_gradients, solve_coefficients)

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.3


@dataclass(frozen=True, eq=False)
class Sample:
    label: object
    global_feature: GlobalFeature
    spatial: FeatureMatrix


def _label_codes(labels):
    index = {}
    return np.array([index.setdefault(label, len(index)) for label in labels])


def _check_pk(labels, subjects, images_per_subject):
    if subjects < 2 or images_per_subject < 2:
        raise InvalidFeatureError(f'batches need P >= 2 and K >= 2, got P={subjects}, K={images_per_subject}')
    if len(labels) != subjects * images_per_subject:
        raise InvalidFeatureError(f'{len(labels)} samples in a P={subjects}, K={images_per_subject} batch')
    codes = _label_codes(labels)
    counts = np.bincount(codes)
    if len(counts) != subjects or np.any(counts != images_per_subject):
        raise InvalidFeatureError(f'each of {subjects} identities must appear exactly {images_per_subject} times')


@dataclass(frozen=True, eq=False)
class TripletBatch:
    samples: tuple
    subjects: int
    images_per_subject: int
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        object.__setattr__(self, 'samples', tuple(self.samples))
        _check_pk(self.labels, self.subjects, self.images_per_subject)

    @property
    def labels(self):
        return [s.label for s in self.samples]

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True, eq=False)
class ImageBatch:
    """Raw toy inputs of one P x K batch, before encoding."""
    images: tuple
    labels: tuple
    subjects: int
    images_per_subject: int

    def __post_init__(self):
        object.__setattr__(self, 'images', tuple(self.images))
        object.__setattr__(self, 'labels', tuple(self.labels))
        if len(self.images) != len(self.labels):
            raise InvalidFeatureError('one label per image')
        _check_pk(self.labels, self.subjects, self.images_per_subject)


@dataclass(frozen=True)
class MinedTriplet:
    anchor: int
    positive: int
    negative: int
    positive_distance: float
    negative_distance: float


@dataclass(frozen=True)
class LossReport:
    total_loss: float
    active_triplets: int
    per_triplet_terms: tuple
    triplets: tuple = ()


class LearningRateSchedule:
    def __init__(self, base, kind='constant', factor=0.5, interval=100):
        self.base = base
        self.kind = kind
        self.factor = factor
        self.interval = interval

    def rate(self, step):
        if self.kind == 'constant':
            return self.base
        return self.base * self.factor ** (step // self.interval)


def euclidean_distance(a, b):
    av = a.values if isinstance(a, GlobalFeature) else np.asarray(a, dtype=np.float64)
    bv = b.values if isinstance(b, GlobalFeature) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise DimensionMismatchError(f'global dims differ: {av.shape} vs {bv.shape}')
    return float(np.linalg.norm(av - bv))


def combined_distance(a, b, beta=DEFAULT_BETA):
    """a is reconstructed from b's dictionary; not symmetric."""
    return (euclidean_distance(a.global_feature, b.global_feature)
            + sfr_distance(a.spatial, b.spatial, beta).distance)


def pairwise_distances(batch, beta=DEFAULT_BETA):
    samples = batch.samples
    dims = {s.global_feature.dim for s in samples} | {s.spatial.dim for s in samples}
    if len(dims) != 1:
        raise DimensionMismatchError(f'batch mixes feature dims {sorted(dims)}')

    factors = [factorize_dictionary(s.spatial, beta) for s in samples]
    n = len(samples)
    dist = np.zeros((n, n))
    for i, anchor in enumerate(samples):
        for j, other in enumerate(samples):
            if i == j:
                continue
            dist[i, j] = (euclidean_distance(anchor.global_feature, other.global_feature)
                          + sfr_distance_with_factor(anchor.spatial, factors[j]))
    return dist


def batch_hard_mine(batch, beta=DEFAULT_BETA):
    dist = pairwise_distances(batch, beta)
    codes = _label_codes(batch.labels)
    same = codes[:, None] == codes[None, :]
    positives = same & ~np.eye(len(codes), dtype=bool)

    # argmax/argmin return the first extreme index, i.e. the lowest-index tie rule
    hardest_pos = np.where(positives, dist, -np.inf).argmax(axis=1)
    hardest_neg = np.where(~same, dist, np.inf).argmin(axis=1)

    return [MinedTriplet(a, int(p), int(n), float(dist[a, p]), float(dist[a, n]))
            for a, (p, n) in enumerate(zip(hardest_pos, hardest_neg))]


def triplet_terms(triplets, margin=DEFAULT_MARGIN):
    return tuple(max(0.0, margin + t.positive_distance - t.negative_distance) for t in triplets)


def sfr_triplet_loss(batch, beta=DEFAULT_BETA, margin=None):
    margin = batch.margin if margin is None else margin
    if margin < 0:
        raise ValueError(f'margin must be nonnegative, got {margin}')

    triplets = tuple(batch_hard_mine(batch, beta))
    terms = triplet_terms(triplets, margin)
    return LossReport(sum(terms), sum(1 for t in terms if t > 0), terms, triplets)


def sample_batch(labels, subjects, images_per_subject, rng):
    """Dataset indices of a P x K batch; identities without replacement."""
    by_label = {}
    for idx, label in enumerate(labels):
        by_label.setdefault(label, []).append(idx)
    identities = list(by_label)
    if subjects > len(identities):
        raise InvalidFeatureError(f'cannot draw {subjects} subjects from {len(identities)} identities')

    indices = []
    for c in rng.choice(len(identities), size=subjects, replace=False):
        pool = by_label[identities[c]]
        picks = rng.choice(len(pool), size=images_per_subject, replace=len(pool) < images_per_subject)
        indices.extend(pool[p] for p in picks)
    return indices


def epoch_batches(labels, subjects, images_per_subject, rng):
    """A fixed partition of the dataset into P x K batches.

    Each identity's images are shuffled once and cut into chunks of K; chunk r of
    every identity goes into round r, P identities per batch. Leftovers are dropped.
    """
    by_label = {}
    for idx, label in enumerate(labels):
        by_label.setdefault(label, []).append(idx)
    if subjects > len(by_label):
        raise InvalidFeatureError(f'cannot draw {subjects} subjects from {len(by_label)} identities')

    chunks = []
    for pool in by_label.values():
        order = [pool[i] for i in rng.permutation(len(pool))]
        chunks.append([order[c:c + images_per_subject]
                       for c in range(0, len(order) - images_per_subject + 1, images_per_subject)])

    batches = []
    for r in range(max(len(c) for c in chunks)):
        ready = [c[r] for c in chunks if r < len(c)]
        ready = [ready[i] for i in rng.permutation(len(ready))]
        for start in range(0, len(ready) - subjects + 1, subjects):
            batches.append([idx for chunk in ready[start:start + subjects] for idx in chunk])
    if not batches:
        raise InvalidFeatureError(f'no identity has {images_per_subject} images for a full batch')
    return batches


@dataclass(frozen=True, eq=False)
class Encoded:
    shape: tuple
    spatial: np.ndarray
    global_values: np.ndarray


@dataclass(frozen=True, eq=False)
class StepPlan:
    """Everything step 1 freezes: triplets, active hinges, W per pair, column scales."""
    triplets: tuple
    active: tuple
    weights: dict
    scales: tuple
    report: LossReport
    margin: float


def encode_batch(images, params, spec=None):
    spec = spec or PyramidSpec()
    encoded = []
    for img in images:
        values = encode_values(img, params)
        encoded.append(Encoded(values.shape, pyramid_pool(values, spec).columns,
                               global_average_pool(values).values))
    return encoded


def _samples(encoded, labels, normalize):
    samples, scales = [], []
    for enc, label in zip(encoded, labels):
        if normalize:
            scales.append(column_scales(enc.spatial))
            spatial = l2_normalize_columns(enc.spatial)
        else:
            scales.append(np.ones(enc.spatial.shape[1]))
            spatial = FeatureMatrix(enc.spatial)
        samples.append(Sample(label, GlobalFeature(enc.global_values), spatial))
    return samples, scales


def batch_loss(batch, params, beta=DEFAULT_BETA, margin=DEFAULT_MARGIN, spec=None, normalize=True):
    encoded = encode_batch(batch.images, params, spec)
    samples, _ = _samples(encoded, batch.labels, normalize)
    return sfr_triplet_loss(TripletBatch(tuple(samples), batch.subjects, batch.images_per_subject, margin),
                            beta, margin)


def plan_step(encoded, labels, subjects, images_per_subject, beta=DEFAULT_BETA,
              margin=DEFAULT_MARGIN, normalize=True):
    samples, scales = _samples(encoded, labels, normalize)
    batch = TripletBatch(tuple(samples), subjects, images_per_subject, margin)
    report = sfr_triplet_loss(batch, beta, margin)
    active = tuple(term > 0 for term in report.per_triplet_terms)

    weights = {}
    for t, on in zip(report.triplets, active):
        if not on:
            continue
        for other in (t.positive, t.negative):
            if (t.anchor, other) not in weights:
                weights[t.anchor, other] = solve_coefficients(samples[t.anchor].spatial,
                                                              samples[other].spatial, beta).matrix

    return StepPlan(report.triplets, active, weights, tuple(scales), report, margin)


def _scaled(enc, scales):
    return enc.spatial * scales


def surrogate_objective(images, params, plan, spec=None):
    """Frozen-plan objective whose exact parameter gradient batch_gradients returns."""
    encoded = encode_batch(images, params, spec)
    total = 0.0
    for t, on in zip(plan.triplets, plan.active):
        if not on:
            continue
        a = t.anchor
        xa = _scaled(encoded[a], plan.scales[a])
        total += plan.margin
        for other, sign in ((t.positive, 1.0), (t.negative, -1.0)):
            xo = _scaled(encoded[other], plan.scales[other])
            residual = xa - xo @ plan.weights[a, other]
            total += sign * (np.linalg.norm(encoded[a].global_values - encoded[other].global_values)
                             + np.sum(residual ** 2))
    return float(total)


def batch_gradients(images, params, plan, spec=None, encoded=None):
    spec = spec or PyramidSpec()
    encoded = encoded or encode_batch(images, params, spec)
    grad_spatial = [np.zeros_like(enc.spatial) for enc in encoded]
    grad_global = [np.zeros_like(enc.global_values) for enc in encoded]

    for t, on in zip(plan.triplets, plan.active):
        if not on:
            continue
        a = t.anchor
        xa = _scaled(encoded[a], plan.scales[a])
        for other, sign in ((t.positive, 1.0), (t.negative, -1.0)):
            diff = encoded[a].global_values - encoded[other].global_values
            norm = np.linalg.norm(diff)
            if norm > 0:
                grad_global[a] += sign * diff / norm
                grad_global[other] -= sign * diff / norm

            xo = _scaled(encoded[other], plan.scales[other])
            grad_a, grad_o = sfr_gradients(xa, xo, plan.weights[a, other])
            grad_spatial[a] += sign * grad_a * plan.scales[a]
            grad_spatial[other] += sign * grad_o * plan.scales[other]

    grads = [(np.zeros_like(layer.kernel), np.zeros_like(layer.bias)) for layer in params.layers]
    for img, enc, gx, gg in zip(images, encoded, grad_spatial, grad_global):
        if not (np.any(gx) or np.any(gg)):
            continue
        _, height, width = enc.shape
        upstream = (pyramid_pool_backward(gx, height, width, spec)
                    + global_average_pool_backward(gg, height, width))
        for acc, (gk, gb) in zip(grads, encode_backward(img, params, upstream)):
            acc[0][...] += gk
            acc[1][...] += gb

    return grads


def training_step(batch, params, beta=DEFAULT_BETA, margin=DEFAULT_MARGIN, learning_rate=1e-3,
                  spec=None, normalize=True):
    spec = spec or PyramidSpec()
    encoded = encode_batch(batch.images, params, spec)
    plan = plan_step(encoded, batch.labels, batch.subjects, batch.images_per_subject,
                     beta, margin, normalize)
    grads = batch_gradients(batch.images, params, plan, spec, encoded)

    for n, (gk, gb) in enumerate(grads):
        if not (np.all(np.isfinite(gk)) and np.all(np.isfinite(gb))):
            raise NonFiniteGradientError(f'non-finite gradient in layer {n} '
                                         f'(loss {plan.report.total_loss:.4g}, '
                                         f'{plan.report.active_triplets} active triplets)')
        if not (np.all(np.isfinite(learning_rate * gk)) and np.all(np.isfinite(learning_rate * gb))):
            raise NonFiniteGradientError(f'update overflows in layer {n} at learning rate {learning_rate}')

    updated = sgd_update(params, grads, learning_rate)
    if updated is not params:
        try:
            after = batch_loss(batch, updated, beta, margin, spec, normalize).total_loss
        except (InvalidFeatureError, FactorizationError) as e:
            raise NonFiniteGradientError(f'update at learning rate {learning_rate} breaks the encoder: {e}') from e
        if not np.isfinite(after):
            raise NonFiniteGradientError(f'loss after the update is {after} at learning rate {learning_rate}')
    return updated, plan.report


def learn(steps, images, labels, params, subjects=32, images_per_subject=4, beta=DEFAULT_BETA,
          margin=DEFAULT_MARGIN, schedule=None, spec=None, normalize=True, rng=None, progress=True,
          batches=None):
    """SGD over P x K batches; returns params and the per-step loss trace.

    Step s uses batches[s % len(batches)] when a fixed partition is given, a
    freshly sampled batch otherwise.
    """
    schedule = schedule or LearningRateSchedule(1e-3)
    rng = rng if rng is not None else np.random.default_rng(0)
    losses = []

    for step in tqdm(range(steps), desc='learning', disable=not progress):
        if batches:
            idx = batches[step % len(batches)]
        else:
            idx = sample_batch(labels, subjects, images_per_subject, rng)
        batch = ImageBatch(tuple(images[i] for i in idx), tuple(labels[i] for i in idx),
                           subjects, images_per_subject)
        params, report = training_step(batch, params, beta, margin, schedule.rate(step), spec, normalize)
        losses.append(report.total_loss)
        logger.debug('step %d loss %.5f active %d', step, report.total_loss, report.active_triplets)

    return params, losses
