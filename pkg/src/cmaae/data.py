"""Age-labeled image datasets: folder loading, preprocessing and the synthetic face generator.

Images are float arrays of shape (H, W, C) with values in [0, 1]. A ``Dataset``
stores them stacked as (N, H, W, C).

The synthetic generator paints two oracle regions at fixed absolute coordinates:

* identity patch, rows [2, 8), cols [2, S - 2): a per-identity signature color;
* wrinkle rectangle, rows [20, 27), cols [8, 24): even rows hold
  ``0.9 - 0.6 * age / max_age``, odd rows hold 0.9.

Both regions are read back analytically by :func:`oracle_age` and
:func:`oracle_identity_distance`.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

BACKGROUND = 0.25
IDENTITY_ROWS = (2, 8)
WRINKLE_ROWS = (20, 27)
WRINKLE_COLS = (8, 24)
WRINKLE_BASE = 0.9
WRINKLE_SPAN = 0.6
MIN_SYNTH_SIZE = 32

SYNTH_SIDECAR = "synthetic.json"
_FILENAME_RE = re.compile(r"^(?P<age>\d+(?:p\d+)?)_(?P<identity>[^_]+)_(?P<index>\d+)\.png$")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class AgeLabel:
    years: float
    max_age: float

    @property
    def normalized(self) -> float:
        return self.years / self.max_age

    def denormalize(self) -> float:
        return self.normalized * self.max_age


def normalize_age(years: float, max_age: float) -> AgeLabel:
    if max_age <= 0:
        raise ValueError(f"max_age must be positive, got {max_age}")
    if not 0 <= years <= max_age:
        raise ValueError(f"age {years} outside [0, {max_age}]")
    return AgeLabel(float(years), float(max_age))


def denormalize_age(normalized, max_age: float):
    return normalized * max_age


@dataclass
class Dataset:
    """Stacked images with their ages (years) and identity ids."""

    images: np.ndarray
    ages: np.ndarray
    identities: list[str]
    max_age: float
    provenance: str = "real-folder"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ages = np.asarray(self.ages, dtype=np.float64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if not (len(self.images) == len(self.ages) == len(self.identities)):
            raise DatasetError("images, ages and identities differ in length")
        if len(self.ages) and (self.ages.min() < 0 or self.ages.max() > self.max_age):
            raise DatasetError(f"ages outside [0, {self.max_age}]")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], AgeLabel(float(self.ages[i]), self.max_age), self.identities[i]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    @property
    def normalized_ages(self) -> np.ndarray:
        return self.ages / self.max_age

    @property
    def is_synthetic(self) -> bool:
        return self.provenance == "synthetic"

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.images[index],
            self.ages[index],
            [self.identities[i] for i in index],
            self.max_age,
            self.provenance,
            dict(self.meta),
        )


# ---------------------------------------------------------------------------
# loading


def preprocess_image(raw, image_size: int, channels: int = 3) -> np.ndarray:
    """Center-crop to a square, bilinear-resize to ``image_size``, scale to [0, 1]."""
    img = raw if isinstance(raw, Image.Image) else Image.fromarray(np.asarray(raw, dtype=np.uint8))
    w, h = img.size
    if w == 0 or h == 0:
        raise ValueError("zero-area image")
    img = img.convert("L" if channels == 1 else "RGB")
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != image_size:
        img = img.resize((image_size, image_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def parse_filename(name: str):
    """Return (age_years, identity, index) for ``<age>_<identity>_<index>.png``, or None."""
    m = _FILENAME_RE.match(name)
    if m is None:
        return None
    age = float(m.group("age").replace("p", "."))
    return age, m.group("identity"), int(m.group("index"))


def format_filename(age: float, identity: str, index: int) -> str:
    age_str = f"{age:.2f}".replace(".", "p")
    return f"{age_str}_{identity}_{index}.png"


def load_dataset(root, split: str, image_size: int, max_age: float, channels: int = 3) -> Dataset:
    folder = Path(root) / split
    if not folder.is_dir():
        raise DatasetError(f"dataset directory not found: {folder}")

    images, ages, ids = [], [], []
    for path in sorted(folder.iterdir()):
        if path.suffix.lower() != ".png":
            continue
        parsed = parse_filename(path.name)
        if parsed is None:
            logger.warning("skipping %s: filename does not match <age>_<identity>_<index>.png", path.name)
            continue
        age, identity, _ = parsed
        if age > max_age:
            logger.warning("skipping %s: age %.2f exceeds max_age %.2f", path.name, age, max_age)
            continue
        with Image.open(path) as im:
            images.append(preprocess_image(im, image_size, channels))
        ages.append(age)
        ids.append(identity)

    if not images:
        raise DatasetError(f"no usable images in {folder}")

    provenance, meta = "real-folder", {}
    sidecar = folder / SYNTH_SIDECAR
    if sidecar.exists():
        provenance = "synthetic"
        meta = json.loads(sidecar.read_text())
    return Dataset(np.stack(images), np.array(ages), ids, float(max_age), provenance, meta)


def save_dataset(ds: Dataset, root, split: str) -> Path:
    """Write ``ds`` as 8-bit PNGs using the ``<age>_<identity>_<index>.png`` layout."""
    folder = Path(root) / split
    folder.mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    for img, age, identity in zip(ds.images, ds.ages, ds.identities):
        idx = counters.get(identity, 0)
        counters[identity] = idx + 1
        Image.fromarray(to_uint8(img)).save(folder / format_filename(age, identity, idx))
    if ds.is_synthetic:
        (folder / SYNTH_SIDECAR).write_text(json.dumps(ds.meta, indent=2, sort_keys=True))
    return folder


def to_uint8(img: np.ndarray) -> np.ndarray:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return arr


# ---------------------------------------------------------------------------
# synthetic faces


@dataclass
class SynthConfig:
    image_size: int = 32
    max_age: float = 60.0
    n_identities: int = 500
    images_per_identity: int = 10
    seed: int = 0
    channels: int = 3

    def validate(self):
        if self.image_size < MIN_SYNTH_SIZE:
            raise ValueError(f"image_size must be >= {MIN_SYNTH_SIZE} for the oracle regions to fit")
        if self.image_size & (self.image_size - 1):
            raise ValueError("image_size must be a power of two")
        if self.max_age <= 0:
            raise ValueError("max_age must be positive")
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ValueError("need at least one identity and one image per identity")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


@dataclass(frozen=True)
class _Identity:
    radii: tuple[float, float]
    skin: np.ndarray
    signature: np.ndarray
    eye_row: float
    eye_offsets: tuple[float, float]
    eye_color: float


def _identity_params(seed: int, i: int, size: int) -> _Identity:
    rng = np.random.default_rng([seed, 0, i])
    radii = (rng.uniform(0.34, 0.44) * size, rng.uniform(0.40, 0.47) * size)
    skin = rng.uniform(0.35, 0.85, size=3)
    signature = rng.uniform(0.0, 1.0, size=3)
    eye_row = 11.0 + rng.uniform(-1.0, 1.0)
    eye_offsets = (size / 2 - rng.uniform(4.0, 7.0), size / 2 + rng.uniform(4.0, 7.0))
    eye_color = rng.uniform(0.02, 0.15)
    return _Identity(radii, skin, signature, eye_row, eye_offsets, eye_color)


def identity_name(i: int) -> str:
    return f"id{i:04d}"


def render_face(ident: _Identity, age: float, max_age: float, size: int, channels: int = 3) -> np.ndarray:
    img = np.full((size, size, 3), BACKGROUND)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    ry, rx = ident.radii[1], ident.radii[0]
    face = ((rows - c) / ry) ** 2 + ((cols - c) / rx) ** 2 <= 1.0
    img[face] = ident.skin

    r0, r1 = IDENTITY_ROWS
    img[r0:r1, 2 : size - 2] = ident.signature

    for cx in ident.eye_offsets:
        eye = (rows - ident.eye_row) ** 2 + (cols - cx) ** 2 <= 1.8**2
        img[eye] = ident.eye_color

    w0, w1 = WRINKLE_ROWS
    c0, c1 = WRINKLE_COLS
    img[w0:w1, c0:c1] = WRINKLE_BASE
    img[w0:w1:2, c0:c1] = WRINKLE_BASE - WRINKLE_SPAN * (age / max_age)

    if channels == 1:
        img = img.mean(axis=2, keepdims=True)
    return img


def render(cfg: SynthConfig, identity: int, age: float) -> np.ndarray:
    """Render one synthetic face for ``identity`` at ``age`` years."""
    cfg.validate()
    return render_face(_identity_params(cfg.seed, identity, cfg.image_size), age, cfg.max_age, cfg.image_size, cfg.channels)


def gen_synthetic_dataset(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    images, ages, ids = [], [], []
    for i in range(cfg.n_identities):
        ident = _identity_params(cfg.seed, i, cfg.image_size)
        for j in range(cfg.images_per_identity):
            age = np.random.default_rng([cfg.seed, 1, i, j]).uniform(0.0, cfg.max_age)
            images.append(render_face(ident, age, cfg.max_age, cfg.image_size, cfg.channels))
            ages.append(age)
            ids.append(identity_name(i))
    return Dataset(np.stack(images), np.array(ages), ids, float(cfg.max_age), "synthetic", {"synth_config": asdict(cfg)})


# ---------------------------------------------------------------------------
# oracles


def _wrinkle_mean(img: np.ndarray) -> np.ndarray:
    w0, w1 = WRINKLE_ROWS
    c0, c1 = WRINKLE_COLS
    return np.asarray(img, dtype=np.float64)[..., w0:w1:2, c0:c1, :].mean(axis=(-3, -2, -1))


def oracle_age(img: np.ndarray, max_age: float):
    """Read the age (years) back from the wrinkle rows. Accepts (H, W, C) or (N, H, W, C)."""
    if np.asarray(img).shape[-3] < MIN_SYNTH_SIZE:
        raise ValueError(f"oracle needs images of size >= {MIN_SYNTH_SIZE}")
    m = _wrinkle_mean(img)
    age = np.clip(max_age * (WRINKLE_BASE - m) / WRINKLE_SPAN, 0.0, max_age)
    return float(age) if np.ndim(age) == 0 else age


def identity_color(img: np.ndarray) -> np.ndarray:
    r0, r1 = IDENTITY_ROWS
    size = np.asarray(img).shape[-2]
    return np.asarray(img, dtype=np.float64)[..., r0:r1, 2 : size - 2, :].mean(axis=(-3, -2))


def oracle_identity_distance(a: np.ndarray, b: np.ndarray):
    """Euclidean distance between the mean identity-patch colors. Works on single images or batches."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = np.linalg.norm(identity_color(a) - identity_color(b), axis=-1)
    return float(d) if np.ndim(d) == 0 else d
