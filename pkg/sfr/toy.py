"""Seeded synthetic identities: oriented sinusoids under a random brightness shift."""
import logging
import math

import numpy as np

from sfr.encoder import ToyImage, encode
from sfr.features import PyramidSpec, extract_features
from sfr.reconstruction import DEFAULT_BETA
from sfr.retrieval import DEFAULT_ALPHA, GalleryEntry, build_gallery, evaluate, match_all

logger = logging.getLogger(__name__)

TOY_HEIGHT = 32
TOY_WIDTH = 24
NOISE = 0.03
AMPLITUDE = 0.2
# drawn per rendering, the same range for every identity
BRIGHTNESS = (0.3, 0.7)
MIN_CROP = 0.6
DEFAULT_ENCODER = [(8, 1, 3, True), (16, 8, 3, True)]


class ToySplit:
    def __init__(self, train_images, train_labels, gallery, probes):
        self.train_images = train_images
        self.train_labels = train_labels
        self.gallery = gallery
        self.probes = probes

    @property
    def truth(self):
        return {probe_id: label for probe_id, label, _ in self.probes}


def render_identity(identity, identities, rng, height=TOY_HEIGHT, width=TOY_WIDTH):
    theta = math.pi * identity / identities
    frequency = 0.2 if identity % 2 == 0 else 0.33

    rows, cols = np.mgrid[0:height, 0:width]
    phase = rng.uniform(0, 2 * math.pi)
    brightness = rng.uniform(*BRIGHTNESS)
    wave = np.sin(2 * math.pi * frequency * (rows * math.cos(theta) + cols * math.sin(theta)) + phase)
    values = brightness + AMPLITUDE * wave + NOISE * rng.standard_normal((height, width))
    return ToyImage(np.clip(values, 0, 1))


def random_crop(img, min_fraction, rng):
    """A random sub-rectangle keeping at least min_fraction of each side."""
    if not 0 < min_fraction <= 1:
        raise ValueError(f'min_fraction must lie in (0, 1], got {min_fraction}')
    _, height, width = img.values.shape
    h = int(rng.integers(math.ceil(min_fraction * height), height + 1))
    w = int(rng.integers(math.ceil(min_fraction * width), width + 1))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return ToyImage(img.values[:, top:top + h, left:left + w])


def make_toy_split(identities=10, train_per_identity=20, probes_per_identity=2, seed=7):
    rng = np.random.default_rng(seed)
    train_images, train_labels, gallery, probes = [], [], [], []

    for i in range(identities):
        label = f'id{i:02d}'
        for n in range(train_per_identity):
            img = render_identity(i, identities, rng)
            train_images.append(random_crop(img, MIN_CROP, rng) if n % 2 else img)
            train_labels.append(label)
        gallery.append((f'g{i:02d}', label, render_identity(i, identities, rng)))
        for n in range(probes_per_identity):
            probes.append((f'p{i:02d}_{n}', label, random_crop(render_identity(i, identities, rng), MIN_CROP, rng)))

    logger.debug('toy split: %d train, %d gallery, %d probes', len(train_images), len(gallery), len(probes))
    return ToySplit(tuple(train_images), tuple(train_labels), tuple(gallery), tuple(probes))


def evaluate_split(params, split, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, spec=None, normalize=True, workers=1):
    """Held-out CMC/mAP of the encoder: holistic gallery, cropped probes."""
    spec = spec or PyramidSpec()
    entries = []
    for entry_id, label, img in split.gallery:
        global_feature, matrix = extract_features(encode(img, params), spec, normalize)
        entries.append(GalleryEntry(entry_id, label, global_feature, matrix))
    gallery = build_gallery(entries, alpha, beta)

    probes = [(probe_id, *extract_features(encode(img, params), spec, normalize))
              for probe_id, _, img in split.probes]
    return evaluate(match_all(probes, gallery, workers), split.truth, gallery)
