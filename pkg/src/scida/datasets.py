"""Source/target image streams.

Two producers share one in-memory representation (:class:`ImageDataset`):

* :func:`generate_synthetic_pair` composites procedural class tiles into a
  single-label source set and a shifted multi-label target set whose label
  co-occurrence follows a known affinity table;
* :func:`load_mai` reads the on-disk MAI layout (also written by
  :func:`write_dataset`).
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, LoadError

SOURCE = "source"
TARGET = "target"

ANNOTATIONS_FILE = "annotations.json"
EVAL_ANNOTATIONS_FILE = "eval_annotations.json"
MANIFEST_FILE = "manifest.json"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# published sizes of the four MAI splits: (images, categories, mean labels or None)
MAI_REFERENCE = {
    "MAI-AID-s": (7050, 20, None),
    "MAI-AID-m": (3239, 20, 3.73),
    "MAI-UCM-s": (1700, 17, None),
    "MAI-UCM-m": (1799, 17, 3.14),
}


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    label: np.ndarray | None
    domain: str
    id: str


@dataclass(frozen=True, eq=False)
class ImageDataset:
    """Immutable image set with optional multi-hot labels.

    ``images`` is ``(N, H, W, C)`` float32 in ``[0, 1]``; ``labels`` is
    ``(N, K)`` uint8 or ``None`` for an unlabeled split.
    """

    images: np.ndarray
    labels: np.ndarray | None
    ids: tuple[str, ...]
    categories: tuple[str, ...]
    domain: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        n = self.images.shape[0]
        if len(self.ids) != n:
            raise ValueError(f"{len(self.ids)} ids for {n} images")
        if len(set(self.ids)) != n:
            raise ValueError("sample ids must be unique")
        if self.labels is not None:
            if self.labels.shape != (n, len(self.categories)):
                raise ValueError(
                    f"labels shape {self.labels.shape} != ({n}, {len(self.categories)})"
                )
            if not np.isin(self.labels, (0, 1)).all():
                raise ValueError("labels must be 0/1")
            per_image = self.labels.sum(axis=1)
            if (per_image < 1).any():
                raise ValueError("every labeled sample needs at least one positive")
            if self.domain == SOURCE and (per_image != 1).any():
                raise ValueError("source samples must be single-label")
        for arr in (self.images, self.labels):
            if arr is not None:
                arr.flags.writeable = False

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx: int) -> ImageSample:
        label = None if self.labels is None else self.labels[idx]
        return ImageSample(self.images[idx], label, self.domain, self.ids[idx])

    def __iter__(self) -> Iterator[ImageSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def unlabeled(self) -> "ImageDataset":
        """Same images with the labels dropped (what a trainer may see)."""
        return ImageDataset(self.images, None, self.ids, self.categories, self.domain)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(json.dumps([self.ids, self.categories, self.domain]).encode())
        return h.hexdigest()


# --------------------------------------------------------------------------
# class statistics


def class_frequencies(dataset: ImageDataset) -> np.ndarray:
    """Share of positive annotations per class; entries sum to one."""
    if dataset.labels is None or len(dataset) == 0:
        raise ValueError("class_frequencies needs a non-empty labeled dataset")
    counts = dataset.labels.sum(axis=0).astype(np.float64)
    missing = [dataset.categories[i] for i in np.flatnonzero(counts == 0)]
    if missing:
        raise ValueError(f"classes with zero occurrences: {missing}")
    return counts / counts.sum()


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    num_classes: int = 8
    source_per_class: int = 100
    num_target: int = 400
    max_labels: int = 4
    side: int = 64
    color_jitter: float = 0.3
    blur_radius: float = 1.0
    downscale: int = 2
    partner_affinity: float = 0.7
    base_affinity: float = 0.1
    # explicit K x K table overrides the seeded default
    affinity: list[list[float]] | None = None
    categories: list[str] | None = None

    def validate(self) -> None:
        k = self.num_classes
        if k < 3:
            raise ConfigError(f"need at least 3 classes, got {k}")
        if self.max_labels < 1 or self.max_labels > k:
            raise ConfigError(f"max_labels must be in [1, {k}], got {self.max_labels}")
        if self.source_per_class <= 0 or self.num_target <= 0:
            raise ConfigError("per-class source count and target count must be positive")
        if self.side < 16 or self.side % 16:
            raise ConfigError(f"side must be a positive multiple of 16, got {self.side}")
        if self.downscale < 1 or self.side % self.downscale:
            raise ConfigError(f"downscale {self.downscale} must divide side {self.side}")
        if self.color_jitter < 0 or self.blur_radius < 0:
            raise ConfigError("color_jitter and blur_radius must be non-negative")
        if self.affinity is not None:
            a = np.asarray(self.affinity, dtype=float)
            if a.shape != (k, k) or (a < 0).any() or (a > 1).any():
                raise ConfigError(f"affinity must be a {k}x{k} table of values in [0, 1]")
        if self.categories is not None and len(self.categories) != k:
            raise ConfigError("categories length must equal num_classes")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _Texture:
    color: np.ndarray
    marker: np.ndarray
    angle: float
    freq: float


def default_affinity(k: int, seed: int, partner: float = 0.7, base: float = 0.1) -> np.ndarray:
    """Symmetric table pairing classes via a seeded permutation.

    Every row has a unique strongest partner; with odd ``k`` the leftover class
    attaches to the first pair at half strength.
    """
    rng = np.random.default_rng([seed, 2])
    perm = rng.permutation(k)
    a = np.full((k, k), base)
    for i in range(0, k - 1, 2):
        p, q = perm[i], perm[i + 1]
        a[p, q] = a[q, p] = partner
    if k % 2:
        last, first = perm[-1], perm[0]
        a[last, first] = a[first, last] = max(base, 0.5 * partner)
    np.fill_diagonal(a, 0.0)
    return a


def strongest_partners(affinity: np.ndarray) -> np.ndarray:
    a = np.array(affinity, dtype=float)
    np.fill_diagonal(a, -np.inf)
    return a.argmax(axis=1)


def _textures(k: int) -> list[_Texture]:
    textures = []
    for c in range(k):
        r, g, b = colorsys.hsv_to_rgb(c / k, 0.75, 0.9)
        # marker colors are exact in 8-bit so they survive PNG round trips
        marker = np.array([255, 0, c + 1], dtype=np.float32) / 255.0
        textures.append(
            _Texture(
                color=np.array([r, g, b], dtype=np.float32),
                marker=marker,
                angle=math.pi * ((c * 5) % k) / k,
                freq=0.08 + 0.05 * (c % 3),
            )
        )
    return textures


def _render_tile(tex: _Texture, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    angle = tex.angle + rng.normal(0.0, 0.05)
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * tex.freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    shade = 0.55 + 0.4 * (0.5 + 0.5 * wave)
    tile = shade[..., None] * tex.color[None, None, :]
    tile += rng.normal(0.0, 0.03, size=tile.shape).astype(np.float32)
    tile = np.clip(tile, 0.0, 1.0)
    tile[0, 0] = tex.marker
    return tile


def _background(side: int, rng: np.random.Generator) -> np.ndarray:
    bg = 0.12 + rng.normal(0.0, 0.03, size=(side, side, 3))
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def _domain_shift(img: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    out = img
    if cfg.color_jitter > 0:
        gain = rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter, size=3)
        offset = rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3) * 0.3
        out = out * gain[None, None, :] + offset[None, None, :]
    if cfg.blur_radius > 0:
        out = ndimage.gaussian_filter(out, sigma=(cfg.blur_radius, cfg.blur_radius, 0))
    if cfg.downscale > 1:
        s = cfg.downscale
        h, w, c = out.shape
        small = out.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))
        out = np.repeat(np.repeat(small, s, axis=0), s, axis=1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _sample_label_set(affinity: np.ndarray, max_labels: int, rng: np.random.Generator) -> list[int]:
    """Affinity-driven closure: each added label may pull in partners."""
    k = affinity.shape[0]
    first = int(rng.integers(k))
    chosen = [first]
    queue = [first]
    while queue and len(chosen) < max_labels:
        i = queue.pop(0)
        for j in rng.permutation(k):
            j = int(j)
            if j in chosen or len(chosen) >= max_labels:
                continue
            if rng.random() < affinity[i, j]:
                chosen.append(j)
                queue.append(j)
    return chosen


def grid_size(max_labels: int) -> int:
    return math.ceil(math.sqrt(max_labels))


def generate_synthetic_pair(config: SynthConfig, seed: int) -> tuple[ImageDataset, ImageDataset]:
    """Single-label source set and labeled multi-label target set.

    The target's labels are its evaluation ground truth; hand trainers
    ``target.unlabeled()``.
    """
    config.validate()
    k, side = config.num_classes, config.side
    categories = tuple(config.categories or [f"class_{c:02d}" for c in range(k)])
    textures = _textures(k)
    affinity = (
        np.asarray(config.affinity, dtype=float)
        if config.affinity is not None
        else default_affinity(k, seed, config.partner_affinity, config.base_affinity)
    )

    rng_s = np.random.default_rng([seed, 0])
    n_s = k * config.source_per_class
    src_images = np.empty((n_s, side, side, 3), dtype=np.float32)
    src_labels = np.zeros((n_s, k), dtype=np.uint8)
    order = rng_s.permutation(np.repeat(np.arange(k), config.source_per_class))
    for n, c in enumerate(order):
        src_images[n] = _render_tile(textures[c], side, rng_s)
        src_labels[n, c] = 1
    source = ImageDataset(
        src_images, src_labels, tuple(f"s{n:05d}" for n in range(n_s)), categories, SOURCE
    )

    rng_t = np.random.default_rng([seed, 1])
    g = grid_size(config.max_labels)
    cell = side // g
    n_t = config.num_target
    tgt_images = np.empty((n_t, side, side, 3), dtype=np.float32)
    tgt_labels = np.zeros((n_t, k), dtype=np.uint8)
    for n in range(n_t):
        labels = _sample_label_set(affinity, config.max_labels, rng_t)
        cells = rng_t.choice(g * g, size=len(labels), replace=False)
        img = _background(side, rng_t)
        for c, pos in zip(labels, cells):
            r0, c0 = (pos // g) * cell, (pos % g) * cell
            img[r0 : r0 + cell, c0 : c0 + cell] = _render_tile(textures[c], cell, rng_t)
            tgt_labels[n, c] = 1
        tgt_images[n] = _domain_shift(img, config, rng_t)
    target = ImageDataset(
        tgt_images, tgt_labels, tuple(f"t{n:05d}" for n in range(n_t)), categories, TARGET
    )
    return source, target


def synthetic_affinity(config: SynthConfig, seed: int) -> np.ndarray:
    if config.affinity is not None:
        return np.asarray(config.affinity, dtype=float)
    return default_affinity(config.num_classes, seed, config.partner_affinity, config.base_affinity)


def marker_colors(k: int) -> np.ndarray:
    return np.stack([t.marker for t in _textures(k)])


def decode_markers(image: np.ndarray, max_labels: int, num_classes: int) -> set[int]:
    """Brute-force read of the class markers at each grid cell corner."""
    markers = np.round(marker_colors(num_classes) * 255).astype(int)
    pix = np.round(np.asarray(image) * 255).astype(int)
    g = grid_size(max_labels)
    cell = image.shape[0] // g
    found = set()
    for r in range(g):
        for c in range(g):
            hits = np.flatnonzero((markers == pix[r * cell, c * cell]).all(axis=1))
            found.update(int(h) for h in hits)
    return found


# --------------------------------------------------------------------------
# on-disk MAI layout


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def _label_names(row: np.ndarray | None, categories: Sequence[str]) -> list[str]:
    if row is None:
        return []
    return [categories[i] for i in np.flatnonzero(row)]


def write_dataset(dataset: ImageDataset, root: str | Path, eval_labels: bool = False) -> Path:
    """Write ``dataset`` in the MAI layout.

    With ``eval_labels`` the labels go to a separate evaluation file and the
    training annotations list the ids only.
    """
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for sample in dataset:
        Image.fromarray(_to_uint8(sample.pixels)).save(root / "images" / f"{sample.id}.png")

    def entries(with_labels: bool) -> list[dict]:
        return [
            {"id": s.id, "labels": _label_names(s.label, dataset.categories) if with_labels else []}
            for s in dataset
        ]

    train_doc = {"categories": list(dataset.categories), "samples": entries(not eval_labels)}
    (root / ANNOTATIONS_FILE).write_text(json.dumps(train_doc, indent=1))
    if eval_labels:
        eval_doc = {"categories": list(dataset.categories), "samples": entries(True)}
        (root / EVAL_ANNOTATIONS_FILE).write_text(json.dumps(eval_doc, indent=1))
    manifest = {"num_images": len(dataset), "num_categories": dataset.num_classes}
    (root / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1))
    return root


def _find_image(images_dir: Path, sample_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        path = images_dir / f"{sample_id}{suffix}"
        if path.exists():
            return path
    raise LoadError(f"image file for sample {sample_id!r} not found in {images_dir}")


def load_mai(
    root_path: str | Path, split: str = "train", side: int | None = None, domain: str | None = None
) -> ImageDataset:
    """Load one MAI-layout directory.

    ``split="train"`` reads ``annotations.json`` (samples listed without labels
    come back unlabeled); ``split="eval"`` reads ``eval_annotations.json``.
    Images are resized to ``side`` when given.  Category order is the sorted
    category names regardless of the order stored on disk.
    """
    from PIL import Image

    root = Path(root_path)
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    ann_path = root / (ANNOTATIONS_FILE if split == "train" else EVAL_ANNOTATIONS_FILE)
    if not ann_path.exists():
        raise LoadError(f"missing annotation file {ann_path}")
    text = ann_path.read_text().strip()
    if not text:
        raise LoadError(f"empty annotation file {ann_path}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed annotation file {ann_path}: {exc}") from exc
    if not isinstance(doc, dict) or "categories" not in doc or "samples" not in doc:
        raise LoadError(f"{ann_path} must hold 'categories' and 'samples'")
    samples = doc["samples"]
    if not samples:
        raise LoadError(f"annotation file {ann_path} lists no samples")
    categories = tuple(sorted(doc["categories"]))
    if len(set(categories)) != len(categories):
        raise LoadError(f"duplicate category names in {ann_path}")
    index = {name: i for i, name in enumerate(categories)}

    manifest_path = root / MANIFEST_FILE
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("num_images") != len(samples):
            raise LoadError(
                f"manifest num_images={manifest.get('num_images')} but {len(samples)} samples listed"
            )
        if manifest.get("num_categories") != len(categories):
            raise LoadError(
                f"manifest num_categories={manifest.get('num_categories')} "
                f"but {len(categories)} categories listed"
            )

    labeled = [bool(s.get("labels")) for s in samples]
    if any(labeled) and not all(labeled):
        first = samples[labeled.index(False)]["id"]
        raise LoadError(f"sample {first!r} has no labels while others do")
    k = len(categories)
    labels = np.zeros((len(samples), k), dtype=np.uint8) if all(labeled) else None
    images = []
    for n, s in enumerate(samples):
        sid = s["id"]
        if labels is not None:
            for name in s["labels"]:
                if name not in index:
                    raise LoadError(f"sample {sid!r}: unknown category {name!r}")
                labels[n, index[name]] = 1
        with Image.open(_find_image(root / "images", sid)) as im:
            im = im.convert("RGB")
            if side is not None and im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.float32) / 255.0)
    if domain is None:
        domain = SOURCE if labels is not None and (labels.sum(axis=1) == 1).all() and split == "train" else TARGET
    return ImageDataset(
        np.stack(images), labels, tuple(s["id"] for s in samples), categories, domain
    )
