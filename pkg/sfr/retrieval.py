import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from sfr.errors import DimensionMismatchError, NoTrueMatchError, UnknownIdentifierError
from sfr.features import FeatureMatrix, GlobalFeature
from sfr.reconstruction import DEFAULT_BETA, factorize_dictionary, sfr_distance_with_factor

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.7
SUMMARY_RANKS = (1, 3, 5, 10)
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True, eq=False)
class GalleryEntry:
    entry_id: str
    subject_id: str
    global_feature: GlobalFeature
    spatial: FeatureMatrix


@dataclass(frozen=True, eq=False)
class GalleryIndex:
    entries: tuple
    alpha: float
    beta: float
    factors: tuple

    @property
    def dim(self):
        return self.entries[0].spatial.dim

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class ScoredEntry:
    entry_id: str
    global_distance: float
    sfr_distance: float
    fused: float


@dataclass(frozen=True)
class RetrievalRanking:
    probe_id: str
    scored: tuple

    def entry_ids(self):
        return [s.entry_id for s in self.scored]


@dataclass(frozen=True, eq=False)
class EvalReport:
    cmc: np.ndarray
    map: float
    per_probe_ap: tuple


def merge_subject_entries(entries):
    """One entry per subject: concatenated dictionary, mean global feature."""
    grouped = {}
    for entry in entries:
        grouped.setdefault(entry.subject_id, []).append(entry)

    merged = []
    for subject, group in grouped.items():
        columns = np.concatenate([e.spatial.columns for e in group], axis=1)
        normalized = all(e.spatial.normalized for e in group)
        degenerate, offset = [], 0
        for e in group:
            degenerate.extend(i + offset for i in e.spatial.degenerate)
            offset += e.spatial.count
        spatial = FeatureMatrix(columns, normalized=normalized, degenerate=degenerate if normalized else ())
        mean_global = np.mean([e.global_feature.values for e in group], axis=0)
        merged.append(GalleryEntry(subject, subject, GlobalFeature(mean_global), spatial))

    return merged


def build_gallery(entries, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, subject_dictionaries=False):
    entries = list(entries)
    if not entries:
        raise ValueError('gallery needs at least one entry')
    if not 0 <= alpha <= 1:
        raise ValueError(f'alpha must lie in [0, 1], got {alpha}')
    if subject_dictionaries:
        entries = merge_subject_entries(entries)

    seen = set()
    dim = entries[0].spatial.dim
    for entry in entries:
        if entry.entry_id in seen:
            raise ValueError(f'duplicate entryId {entry.entry_id!r}')
        seen.add(entry.entry_id)
        if entry.spatial.dim != dim or entry.global_feature.dim != dim:
            raise DimensionMismatchError(f'entry {entry.entry_id!r} has dims '
                                         f'{entry.global_feature.dim}/{entry.spatial.dim}, gallery uses {dim}')

    factors = tuple(factorize_dictionary(e.spatial, beta) for e in entries)
    logger.debug('gallery of %d entries, dim %d', len(entries), dim)
    return GalleryIndex(tuple(entries), float(alpha), float(beta), factors)


def score_probe(probe, gallery):
    """Global and reconstruction distances of a probe to every entry, in gallery order."""
    global_feature, spatial = probe
    if global_feature.dim != gallery.dim or spatial.dim != gallery.dim:
        raise DimensionMismatchError(f'probe dims {global_feature.dim}/{spatial.dim} != gallery dim {gallery.dim}')

    d = [float(np.linalg.norm(global_feature.values - e.global_feature.values)) for e in gallery.entries]
    r = [sfr_distance_with_factor(spatial, f) for f in gallery.factors]
    return d, r


def _rank(probe_id, entry_ids, d, r, alpha):
    fused = [alpha * dc + (1 - alpha) * rc for dc, rc in zip(d, r)]
    order = np.argsort(np.array(fused), kind='stable')
    return RetrievalRanking(probe_id, tuple(ScoredEntry(entry_ids[i], d[i], r[i], fused[i]) for i in order))


def match_probe(probe, gallery, probe_id=''):
    d, r = score_probe(probe, gallery)
    return _rank(probe_id, [e.entry_id for e in gallery.entries], d, r, gallery.alpha)


def match_all(probes, gallery, workers=1):
    """probes: iterable of (probe_id, GlobalFeature, FeatureMatrix); output keeps probe order."""
    probes = list(probes)

    def run(probe):
        probe_id, global_feature, spatial = probe
        return match_probe((global_feature, spatial), gallery, probe_id)

    if workers <= 1:
        return [run(p) for p in probes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, probes))


def _subject_lookup(gallery):
    if isinstance(gallery, GalleryIndex):
        return {e.entry_id: e.subject_id for e in gallery.entries}
    return dict(gallery)


def _true_positions(ranking, truth, lookup):
    if ranking.probe_id not in truth:
        raise UnknownIdentifierError(f'no truth for probe {ranking.probe_id!r}')
    subject = truth[ranking.probe_id]

    positions = []
    for pos, scored in enumerate(ranking.scored, 1):
        if scored.entry_id not in lookup:
            raise UnknownIdentifierError(f'unknown gallery entry {scored.entry_id!r}')
        if lookup[scored.entry_id] == subject:
            positions.append(pos)
    if not positions:
        raise NoTrueMatchError(f'probe {ranking.probe_id!r} has no same-subject gallery entry')
    return positions


def cmc_curve(rankings, truth, gallery):
    if not rankings:
        raise ValueError('no rankings to evaluate')
    lookup = _subject_lookup(gallery)
    hits = np.zeros(max(len(r.scored) for r in rankings))
    for ranking in rankings:
        first = _true_positions(ranking, truth, lookup)[0]
        hits[first - 1:] += 1
    return hits / len(rankings)


def average_precision(positions):
    return float(np.mean([hit / pos for hit, pos in enumerate(positions, 1)]))


def mean_average_precision(rankings, truth, gallery):
    return evaluate(rankings, truth, gallery).map


def evaluate(rankings, truth, gallery):
    lookup = _subject_lookup(gallery)
    aps = tuple(average_precision(_true_positions(r, truth, lookup)) for r in rankings)
    return EvalReport(cmc_curve(rankings, truth, lookup), float(np.mean(aps)), aps)


def summary(report):
    cmc = report.cmc
    out = {'mAP': float(report.map)}
    for k in SUMMARY_RANKS:
        out[f'rank{k}'] = float(cmc[min(k, len(cmc)) - 1])
    return out


def sweep_alpha(probes, truth, gallery, alphas=ALPHA_GRID, workers=1):
    """Rank-1 and mAP per fusion weight; distances are computed once and re-fused."""
    probes = list(probes)
    entry_ids = [e.entry_id for e in gallery.entries]

    def run(probe):
        probe_id, global_feature, spatial = probe
        return probe_id, score_probe((global_feature, spatial), gallery)

    if workers <= 1:
        scores = [run(p) for p in probes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, probes))

    rows = []
    for alpha in alphas:
        rankings = [_rank(probe_id, entry_ids, d, r, alpha) for probe_id, (d, r) in scores]
        report = evaluate(rankings, truth, gallery)
        rows.append({'alpha': alpha, 'rank1': float(report.cmc[0]), 'mAP': report.map})
        logger.info('alpha %.2f rank-1 %.4f mAP %.4f', alpha, report.cmc[0], report.map)
    return pd.DataFrame(rows, columns=['alpha', 'rank1', 'mAP'])


def rankings_frame(rankings):
    rows = [(r.probe_id, pos, s.entry_id, s.global_distance, s.sfr_distance, s.fused)
            for r in rankings for pos, s in enumerate(r.scored, 1)]
    return pd.DataFrame(rows, columns=['probeId', 'rank', 'entryId', 'd', 'r', 's'])


def rankings_from_frame(frame):
    rankings = []
    for probe_id, group in frame.groupby('probeId', sort=False):
        group = group.sort_values('rank', kind='stable')
        scored = tuple(ScoredEntry(str(row.entryId), float(row.d), float(row.r), float(row.s))
                       for row in group.itertuples(index=False))
        rankings.append(RetrievalRanking(str(probe_id), scored))
    return rankings
