"""Procedural synthetic quality-assessment domains and real-data ingestion.

Images are single-channel float32 arrays in [0, 1]. A domain is a set of
images with quality scores in [1, 5] (5 = best); synthetic domains are built
by distorting procedural base content at sampled severity levels, with the
score given by a strictly decreasing severity-to-quality map.

Per-item randomness is keyed as (seed, item index, purpose) so that two
domains generated from the same seed share base content and severity draws
exactly, regardless of the distortion family applied on top.

Target-role datasets keep their scores (synthetic truth is needed for
evaluation) but batches never expose them to training.
"""

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

DISTORTION_FAMILIES = ("gaussian-blur", "additive-noise", "block-average", "contrast-shift")
BASE_KINDS = ("noise", "gradient", "checker", "mixed")
ROLES = ("source", "target")

SCORE_MIN, SCORE_MAX = 1.0, 5.0


@dataclass(frozen=True)
class DistortionSpec:
    """One distortion family with ordered severity levels and their quality map."""

    family: str
    levels: tuple            # strictly increasing severities; levels[0] == 0 (identity)
    scores: tuple            # strictly decreasing, scores[0] == 5.0, all in [1, 5]

    def __post_init__(self):
        if self.family not in DISTORTION_FAMILIES:
            raise ValueError(f"unknown distortion family {self.family!r}")
        if len(self.levels) != len(self.scores) or len(self.levels) < 1:
            raise ValueError("levels and scores must be nonempty parallel lists")
        if self.levels[0] != 0.0:
            raise ValueError("the first severity level must be 0 (identity distortion)")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("severity levels must be strictly increasing")
        if self.scores[0] != SCORE_MAX:
            raise ValueError("severity 0 must map to the best score 5.0")
        if any(b >= a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("quality map must be strictly decreasing in severity")
        if any(not SCORE_MIN <= s <= SCORE_MAX for s in self.scores):
            raise ValueError("quality scores must lie in [1, 5]")

    @classmethod
    def default(cls, family, n_levels=5):
        max_sev = {
            "gaussian-blur": 2.5,
            "additive-noise": 0.4,
            "block-average": 3.0,    # block edge 2^severity
            "contrast-shift": 3.0,   # contrast factor 1/(1+severity)
        }[family]
        levels = tuple(max_sev * i / (n_levels - 1) for i in range(n_levels))
        scores = tuple(SCORE_MAX - (SCORE_MAX - SCORE_MIN) * i / (n_levels - 1) for i in range(n_levels))
        return cls(family=family, levels=levels, scores=scores)


@dataclass(frozen=True)
class RescaleRecord:
    original_min: float
    original_max: float
    higher_is_better: bool


@dataclass
class DomainDataset:
    images: np.ndarray          # (N, H, W) float32 in [0, 1]
    scores: np.ndarray          # (N,) in [1, 5]; retained on targets for evaluation only
    role: str
    rescale: RescaleRecord = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3 or len(self.images) < 1:
            raise ValueError(f"expected (N, H, W) image stack, got shape {self.images.shape}")
        if not np.isfinite(self.images).all():
            raise ValueError("non-finite pixel values")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape != (len(self.images),):
                raise ValueError("scores must align with images")
            if self.scores.min() < SCORE_MIN or self.scores.max() > SCORE_MAX:
                raise ValueError("scores must lie in [1, 5]")
        elif self.role == "source":
            raise ValueError("source datasets must carry scores")

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return self.images.shape[1:]


@dataclass
class DomainBatch:
    """Paired mini-batch: labeled source items and unlabeled target items."""

    source_images: np.ndarray
    source_scores: np.ndarray
    target_images: np.ndarray

    def __post_init__(self):
        if len(self.source_images) != len(self.target_images):
            raise ValueError(
                f"paired sampling requires equal counts, got "
                f"{len(self.source_images)} source vs {len(self.target_images)} target"
            )
        if len(self.source_scores) != len(self.source_images):
            raise ValueError("source scores must align with source images")


def _item_rng(seed, index, purpose):
    return np.random.default_rng([int(seed), int(index), int(purpose)])


def _normalize(img, lo=0.1, hi=0.9):
    span = img.max() - img.min()
    if span < 1e-12:
        return np.full_like(img, (lo + hi) / 2.0)
    return lo + (hi - lo) * (img - img.min()) / span


def make_base(rng, kind, size):
    """Procedural base content: filtered noise, oriented gradient, checker, or a mix."""
    if kind == "noise":
        sigma = rng.uniform(1.0, 4.0)
        img = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    elif kind == "gradient":
        theta = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:size, 0:size] / size
        img = math.cos(theta) * xx + math.sin(theta) * yy + 0.2 * rng.standard_normal()
    elif kind == "checker":
        period = int(rng.integers(4, 17))
        phase = rng.uniform(0, period)
        yy, xx = np.mgrid[0:size, 0:size]
        img = np.sign(np.sin(2 * math.pi * (xx + phase) / period)
                      * np.sin(2 * math.pi * (yy + phase) / period)).astype(np.float64)
        img += 0.1 * rng.standard_normal((size, size))
    elif kind == "mixed":
        weights = rng.dirichlet(np.ones(3))
        parts = [make_base(rng, k, size) for k in ("noise", "gradient", "checker")]
        img = sum(w * _normalize(p) for w, p in zip(weights, parts))
    else:
        raise ValueError(f"unknown base content kind {kind!r}; expected one of {BASE_KINDS}")
    return _normalize(img).astype(np.float32)


def _block_average(img, block):
    if block <= 1:
        return img
    h, w = img.shape
    ph = (-h) % block
    pw = (-w) % block
    padded = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    hh, ww = padded.shape
    means = padded.reshape(hh // block, block, ww // block, block).mean(axis=(1, 3))
    return np.repeat(np.repeat(means, block, axis=0), block, axis=1)[:h, :w]


def apply_distortion(img, family, severity, rng):
    """Apply one distortion at the given severity; severity 0 is the identity."""
    img = np.asarray(img, dtype=np.float32)
    if severity == 0.0:
        return img.copy()
    if family == "gaussian-blur":
        out = ndimage.gaussian_filter(img, float(severity))
    elif family == "additive-noise":
        out = img + severity * rng.standard_normal(img.shape)
    elif family == "block-average":
        out = _block_average(img, int(round(2 ** float(severity))))
    elif family == "contrast-shift":
        mean = img.mean()
        out = mean + (img - mean) / (1.0 + float(severity))
    else:
        raise ValueError(f"unknown distortion family {family!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_domain(seed, base_kind, spec, count, size=64, role="source"):
    """Build a synthetic domain: distorted procedural bases with mapped scores.

    Deterministic under the seed; base content and severity draws depend only
    on (seed, item index), not on the distortion family, so domains generated
    from one seed with different families share bases and score marginals.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if base_kind not in BASE_KINDS:
        raise ValueError(f"unknown base content kind {base_kind!r}; expected one of {BASE_KINDS}")
    images = np.empty((count, size, size), dtype=np.float32)
    scores = np.empty(count)
    for i in range(count):
        base = make_base(_item_rng(seed, i, 0), base_kind, size)
        level_idx = int(_item_rng(seed, i, 1).integers(len(spec.levels)))
        images[i] = apply_distortion(base, spec.family, spec.levels[level_idx], _item_rng(seed, i, 2))
        scores[i] = spec.scores[level_idx]
    return DomainDataset(images=images, scores=scores, role=role)


def generate_band_signal_domain(seed, grid_pos, count, size=64, grid=8, n_levels=5,
                                background="noise", role="source"):
    """Synthetic domain whose quality signal lives at one frequency-grid cell.

    Each image is a background (with strong random global brightness, which
    makes the DC cell uninformative) plus a cosine pattern matched to the
    given cell of the downsampled feature grid; the pattern's amplitude
    decreases with severity, so quality is encoded at that cell only.
    """
    i0, j0 = grid_pos
    factor = size // grid
    hh = (np.arange(size) // factor + 0.5) / grid
    pattern = np.outer(np.cos(math.pi * i0 * hh), np.cos(math.pi * j0 * hh))
    amp_hi, amp_lo = 0.35, 0.02
    images = np.empty((count, size, size), dtype=np.float32)
    scores = np.empty(count)
    for i in range(count):
        rng = _item_rng(seed, i, 0)
        bg = 0.35 * make_base(rng, background, size) + rng.uniform(0.15, 0.45)
        level_idx = int(_item_rng(seed, i, 1).integers(n_levels))
        frac = level_idx / (n_levels - 1)
        amp = amp_hi - (amp_hi - amp_lo) * frac
        images[i] = np.clip(bg + amp * pattern, 0.0, 1.0)
        scores[i] = SCORE_MAX - (SCORE_MAX - SCORE_MIN) * frac
    return DomainDataset(images=images, scores=scores, role=role)


def concat_domains(*domains):
    """Simple concatenation; all parts must share role and image size."""
    roles = {d.role for d in domains}
    sizes = {d.image_size for d in domains}
    if len(roles) != 1 or len(sizes) != 1:
        raise ValueError("can only concatenate domains with one role and image size")
    return DomainDataset(
        images=np.concatenate([d.images for d in domains]),
        scores=np.concatenate([d.scores for d in domains]),
        role=domains[0].role,
    )


def rescale_scores(raw, original_min, original_max, higher_is_better=True):
    """Affine map of raw annotations into [1, 5], 5 always meaning best quality."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot rescale an empty score list")
    if not original_max > original_min:
        raise ValueError(f"degenerate score range [{original_min}, {original_max}]")
    if raw.min() < original_min or raw.max() > original_max:
        raise ValueError("raw scores fall outside the declared range")
    frac = (raw - original_min) / (original_max - original_min)
    if not higher_is_better:
        frac = 1.0 - frac
    return SCORE_MIN + (SCORE_MAX - SCORE_MIN) * frac


def crop_and_flip(image, crop_size, train, rng=None):
    """Random crop + 50% horizontal flip in training; center crop at eval."""
    h, w = image.shape
    if h < crop_size or w < crop_size:
        raise ValueError(f"image {h}x{w} smaller than crop {crop_size}")
    if train:
        if rng is None:
            raise ValueError("training-mode augmentation needs an rng")
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
        out = image[top : top + crop_size, left : left + crop_size]
        if rng.random() < 0.5:
            out = out[:, ::-1]
    else:
        top = (h - crop_size) // 2
        left = (w - crop_size) // 2
        out = image[top : top + crop_size, left : left + crop_size]
    return np.ascontiguousarray(out)


def sample_batch(source, target, batch_size, rng, crop_size, train=True):
    """Draw one paired batch; the smaller domain is resampled cyclically.

    Each call draws indices without replacement within the batch (falling back
    to replacement when a domain is smaller than the batch), so the batch
    stream is a pure function of the rng state.
    """
    def draw(n):
        return rng.choice(n, size=batch_size, replace=batch_size > n)

    src_idx = draw(len(source))
    tgt_idx = draw(len(target))
    src = np.stack([crop_and_flip(source.images[i], crop_size, train, rng) for i in src_idx])
    tgt = np.stack([crop_and_flip(target.images[i], crop_size, train, rng) for i in tgt_idx])
    return DomainBatch(
        source_images=src,
        source_scores=source.scores[src_idx],
        target_images=tgt,
    )


def steps_per_epoch(source, target, batch_size):
    return math.ceil(max(len(source), len(target)) / batch_size)


# --- on-disk format: manifest.json + images/*.png + scores.csv ---------------

def save_domain(dataset, directory, manifest_extra=None):
    """Write a domain as 8-bit PNGs with a scores CSV and a JSON manifest."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    names = []
    for i, img in enumerate(dataset.images):
        name = f"{i:05d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(
            os.path.join(directory, "images", name)
        )
        names.append(name)
    with open(os.path.join(directory, "scores.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "score"])
        for name, score in zip(names, dataset.scores):
            writer.writerow([name, repr(float(score))])
    manifest = {
        "count": len(dataset),
        "image_size": list(dataset.image_size),
        "role": dataset.role,
        "score_range": [SCORE_MIN, SCORE_MAX],
        "pixel_range": [0.0, 1.0],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def ingest_directory(image_dir, csv_path, original_min, original_max,
                     higher_is_better=True, size=None, role="source"):
    """Load an (images + scores CSV) dataset, rescaling annotations into [1, 5].

    The CSV has a one-line header followed by ``filename,score`` rows. Rows are
    validated individually (malformed rows are reported with their line
    number, duplicates rejected); files missing on disk are reported together
    as one complete list.
    """
    rows = []
    seen = set()
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{csv_path}: empty file, expected a header and data rows")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{csv_path}:{lineno}: expected 'filename,score', got {row!r}")
            name = row[0].strip()
            try:
                score = float(row[1])
            except ValueError:
                raise ValueError(f"{csv_path}:{lineno}: score {row[1]!r} is not a number") from None
            if name in seen:
                raise ValueError(f"{csv_path}:{lineno}: duplicate filename {name!r} is ambiguous")
            seen.add(name)
            rows.append((name, score))
    if not rows:
        raise ValueError(f"{csv_path}: no data rows; refusing to build an empty dataset")

    missing = [name for name, _ in rows if not os.path.exists(os.path.join(image_dir, name))]
    if missing:
        raise FileNotFoundError(f"{len(missing)} image files missing from {image_dir}: {missing}")

    images = []
    for name, _ in rows:
        with Image.open(os.path.join(image_dir, name)) as im:
            im = im.convert("L")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.float32) / 255.0)
    raw = np.array([score for _, score in rows])
    scores = rescale_scores(raw, original_min, original_max, higher_is_better)
    return DomainDataset(
        images=np.stack(images),
        scores=scores,
        role=role,
        rescale=RescaleRecord(original_min, original_max, higher_is_better),
    )
