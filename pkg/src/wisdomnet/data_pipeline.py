"""Images, labels, dataset composition and the synthetic radiograph corpus."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wisdomnet._io import atomic_write_bytes, atomic_write_text
from wisdomnet.errors import ImageDecodeError, ManifestError

# label 0 / label 1 per layer; index 0 of the softmax output is label 0
COVID_TAGS = {"covid": 0, "healthy": 1, "bacterial": 1, "viral": 1}
ARDS_TAGS = {"non_ards": 0, "ards": 1}
LAYER_TAGS = {"covid": COVID_TAGS, "ards": ARDS_TAGS}

NEGATIVE_MIX = (("healthy", 0.4), ("bacterial", 0.3), ("viral", 0.3))

PNM_SUFFIXES = {".pbm", ".pgm", ".ppm", ".pnm"}
MANIFEST_FIELDS = ("path", "label", "class_tag", "split")


def layer_of_tag(tag: str) -> str:
    for layer, tags in LAYER_TAGS.items():
        if tag in tags:
            return layer
    raise ValueError(f"unknown class tag {tag!r}")


def label_for_tag(tag: str) -> int:
    return LAYER_TAGS[layer_of_tag(tag)][tag]


def one_hot(label) -> np.ndarray:
    """``0 -> [1, 0]`` and ``1 -> [0, 1]``."""
    if isinstance(label, bool) or label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    out = np.zeros(2, dtype=np.float32)
    out[int(label)] = 1
    return out


@dataclass
class Sample:
    image: np.ndarray
    one_hot: np.ndarray
    class_tag: str
    source_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.one_hot = np.asarray(self.one_hot, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.shape[0] != self.image.shape[1]:
            raise ValueError(f"{self.source_id}: image must be side x side x 3, got {self.image.shape}")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValueError(f"{self.source_id}: image values must lie in [0, 1]")
        if self.one_hot.shape != (2,) or sorted(self.one_hot.tolist()) != [0.0, 1.0]:
            raise ValueError(f"{self.source_id}: one_hot must contain exactly one 1, got {self.one_hot}")
        if label_for_tag(self.class_tag) != self.label:
            raise ValueError(f"{self.source_id}: label {self.label} disagrees with tag {self.class_tag!r}")

    @property
    def label(self) -> int:
        return int(np.argmax(self.one_hot))

    @property
    def side(self) -> int:
        return self.image.shape[0]


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    split: dict[str, float] | None = None

    def __post_init__(self):
        if self.split is not None and not math.isclose(sum(self.split.values()), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions {self.split} do not sum to 1")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.samples:
            counts[s.class_tag] = counts.get(s.class_tag, 0) + 1
        return counts

    @property
    def input_side(self) -> int:
        if not self.samples:
            raise ValueError("empty dataset has no input side")
        return self.samples[0].side

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``N x side x side x 3`` images and ``N x 2`` one-hot labels."""
        if not self.samples:
            raise ValueError("dataset is empty")
        return (np.stack([s.image for s in self.samples]),
                np.stack([s.one_hot for s in self.samples]))

    def for_layer(self, layer: str) -> "Dataset":
        """Samples whose class tag belongs to ``layer`` ("covid" or "ards")."""
        tags = LAYER_TAGS[layer]
        return Dataset([s for s in self.samples if s.class_tag in tags], self.split)


# --- image decoding -------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("unexpected end of header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode a P1-P6 portable any-map into an ``H x W x C`` array in [0, 1]."""
    if len(buf) < 2 or buf[:1] != b"P" or buf[1:2] not in b"123456":
        raise ValueError("not a portable any-map")
    kind = int(buf[1:2])
    bitmap = kind in (1, 4)
    channels = 3 if kind in (3, 6) else 1
    (width, height), pos = _pnm_tokens(buf, 2, 2)
    maxval = 1
    if not bitmap:
        (maxval,), pos = _pnm_tokens(buf, 1, pos)
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ValueError(f"bad dimensions {width}x{height} or maxval {maxval}")
    count = width * height * channels
    if kind <= 3:
        try:
            values = np.array(buf[pos:].split()[:count], dtype=np.int64) if kind != 1 else \
                np.array([c - 48 for c in buf[pos:] if c in (48, 49)][:count], dtype=np.int64)
        except ValueError as exc:
            raise ValueError("non-numeric pixel data") from exc
        if values.size != count:
            raise ValueError(f"expected {count} samples, found {values.size}")
    else:
        pos += 1  # single whitespace after header
        if kind == 4:
            row_bytes = (width + 7) // 8
            raw = np.frombuffer(buf, dtype=np.uint8, count=row_bytes * height, offset=pos) \
                if len(buf) >= pos + row_bytes * height else None
            if raw is None:
                raise ValueError("truncated pixel data")
            values = np.unpackbits(raw.reshape(height, row_bytes), axis=1)[:, :width]
        else:
            dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
            if len(buf) < pos + count * dtype.itemsize:
                raise ValueError("truncated pixel data")
            values = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    values = np.asarray(values, dtype=np.float64).reshape(height, width, channels)
    if values.max(initial=0) > maxval:
        raise ValueError(f"sample exceeds maxval {maxval}")
    if bitmap:
        return 1.0 - values  # 1 is black in PBM
    return values / maxval


def encode_ppm(image: np.ndarray) -> bytes:
    """8-bit binary P6 encoding of an ``H x W x 3`` image in [0, 1]."""
    image = np.asarray(image)
    h, w, _ = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape[:2]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(in_h, out_h)
    x0, x1, wx = axis_weights(in_w, out_w)
    rows = image[y0] * (1 - wy)[:, None, None] + image[y1] * wy[:, None, None]
    return rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]


def load_image(path, target_side: int) -> np.ndarray:
    """Decode ``path`` into a ``target_side x target_side x 3`` float32 image in [0, 1].

    Portable any-maps are decoded here; other formats (PNG, JPEG, ...) go
    through Pillow. Grayscale is replicated to three channels.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageDecodeError(path, exc.strerror or str(exc)) from exc
    try:
        if path.suffix.lower() in PNM_SUFFIXES or buf[:1] == b"P" and buf[1:2] in b"123456":
            img = decode_pnm(buf)
        else:
            img = _decode_with_pillow(buf)
    except (ValueError, OSError) as exc:
        raise ImageDecodeError(path, str(exc)) from exc
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.shape[:2] != (target_side, target_side):
        img = resize_bilinear(img, target_side, target_side)
    return np.clip(img, 0, 1).astype(np.float32)


def probe_image_side(path, fallback: int = 256) -> int:
    """Native side of a square image usable as network input, else ``fallback``."""
    path = Path(path)
    try:
        buf = path.read_bytes()
        img = decode_pnm(buf) if buf[:1] == b"P" and buf[1:2] in b"123456" else _decode_with_pillow(buf)
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(path, str(exc)) from exc
    h, w = img.shape[:2]
    if h == w and h >= 8 and h % 4 == 0:
        return h
    return fallback


def _decode_with_pillow(buf: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(buf)) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                return arr[..., None]
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise ValueError("unsupported or corrupt image") from exc
    return arr[..., None] if arr.ndim == 2 else arr


# --- composition and splits -----------------------------------------------

def largest_remainder(total: int, fractions) -> list[int]:
    return _apportion(total, [total * f for f in fractions])


def _apportion(total: int, quotas) -> list[int]:
    """Integer counts summing to ``total``, each the floor or ceiling of its quota."""
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def compose_negative_class(healthy, bacterial, viral, total: int, rng) -> list:
    """Draw a negative class mixing 40% healthy, 30% bacterial and 30% viral."""
    if total < 0:
        raise ValueError("total must be non-negative")
    counts = largest_remainder(total, [f for _, f in NEGATIVE_MIX])
    picked = []
    for (tag, _), pool, n in zip(NEGATIVE_MIX, (healthy, bacterial, viral), counts):
        if n > len(pool):
            raise ValueError(f"need {n} {tag} samples, only {len(pool)} available")
        idx = rng.choice(len(pool), size=n, replace=False) if n else []
        picked.extend(pool[i] for i in sorted(idx))
    return [picked[i] for i in rng.permutation(len(picked))]


def split_dataset(dataset: Dataset, train_fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Stratified split by class tag; both halves keep the original order.

    The training half holds ``round(N * train_fraction)`` samples, shared out
    over the class tags by largest remainder, so every class is within one
    sample of its exact share.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_tag: dict[str, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        by_tag.setdefault(s.class_tag, []).append(i)
    tags = sorted(by_tag)
    total = math.floor(len(dataset) * train_fraction + 0.5)
    per_tag = _apportion(total, [len(by_tag[t]) * train_fraction for t in tags])
    train_idx = set()
    for tag, n_train in zip(tags, per_tag):
        idx = by_tag[tag]
        train_idx.update(idx[j] for j in rng.permutation(len(idx))[:n_train])
    meta = {"train": train_fraction, "test": 1 - train_fraction}
    train = [s for i, s in enumerate(dataset.samples) if i in train_idx]
    test = [s for i, s in enumerate(dataset.samples) if i not in train_idx]
    return Dataset(train, meta), Dataset(test, meta)


# --- synthetic corpus -----------------------------------------------------

# infiltrate density by tag; each non_ards image is mild covid with probability 0.5, else healthy-like
INFILTRATE_DENSITY = {"healthy": 0.0, "bacterial": 0.0, "viral": 0.0, "covid": 0.35, "ards": 0.8}
MILD_COVID_DENSITY = 0.35


@dataclass(frozen=True)
class CorpusSpec:
    counts: dict
    input_side: int = 32
    noise: float = 0.0

    def __post_init__(self):
        for tag, n in self.counts.items():
            layer_of_tag(tag)
            if n < 0:
                raise ValueError(f"negative count for {tag}")
        if self.input_side < 8 or self.noise < 0:
            raise ValueError("input_side must be >= 8 and noise >= 0")


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1


def _base_radiograph(side, rng):
    yy, xx = np.mgrid[0:side, 0:side] / side
    jitter = rng.uniform(-0.02, 0.02, size=2)
    img = np.full((side, side), 0.05)
    img[_ellipse(yy, xx, 0.55, 0.5, 0.45, 0.42)] = 0.40
    left = _ellipse(yy, xx, 0.5 + jitter[0], 0.3 + jitter[1], 0.30, 0.14)
    right = _ellipse(yy, xx, 0.5 + jitter[0], 0.7 + jitter[1], 0.30, 0.14)
    lungs = left | right
    img[lungs] = 0.15
    img[(np.abs(xx - 0.5) < 0.04) & (yy > 0.1)] = 0.65  # spine
    return img, lungs, yy, xx


def _infiltrate(lungs, yy, xx, density, amplitude, rng):
    """Union of Gaussian bright spots scattered inside the lung fields."""
    field_ = np.zeros_like(yy)
    n_spots = int(round(density * 40))
    if n_spots == 0 or amplitude <= 0:
        return field_
    ys, xs = np.nonzero(lungs)
    side = yy.shape[0]
    pick = rng.integers(0, ys.size, size=n_spots)
    keep = np.ones_like(yy)
    for y, x in zip(ys[pick] / side, xs[pick] / side):
        g = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * 0.05 ** 2))
        keep *= 1 - min(amplitude, 1.0) * g
    return (1 - keep) * lungs


def synthetic_image(tag: str, side: int, noise: float, rng) -> np.ndarray:
    img, lungs, yy, xx = _base_radiograph(side, rng)
    density = INFILTRATE_DENSITY.get(tag)
    if tag == "non_ards":
        density = MILD_COVID_DENSITY if rng.random() < 0.5 else 0.0
    amplitude = 0.6
    if density > 0:
        amplitude *= max(0.0, 1 + noise * rng.standard_normal())
    else:
        # negatives pick up spurious opacities as noise grows
        density = 0.35
        amplitude *= noise * abs(rng.standard_normal())
    if tag == "bacterial":
        img[lungs & (yy > 0.62) & (xx < 0.5)] += 0.04  # lobar consolidation
    elif tag == "viral":
        img[lungs] += 0.03  # diffuse haze
    spots = _infiltrate(lungs, yy, xx, density, amplitude, rng)
    img = img + (1 - img) * spots
    if noise > 0:
        img = img + rng.normal(0, 0.05 * noise, size=img.shape)
    img = np.clip(img, 0, 1)
    return np.repeat(img[..., None], 3, axis=2).astype(np.float32)


def generate_synthetic_corpus(spec: CorpusSpec, seed) -> Dataset:
    """Deterministic corpus of stylised chest radiographs.

    Positive tags carry bright infiltrate spots inside the lung fields, denser
    for ``ards`` than for ``covid``. ``spec.noise`` jitters the infiltrate
    strength, adds spurious spots to negatives and adds pixel noise; at
    ``noise == 0`` the classes are separable by mean brightness.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for tag in sorted(spec.counts):
        for i in range(spec.counts[tag]):
            image = synthetic_image(tag, spec.input_side, spec.noise, rng)
            samples.append(Sample(image, one_hot(label_for_tag(tag)), tag, f"{tag}_{i:04d}"))
    order = rng.permutation(len(samples))
    return Dataset([samples[i] for i in order])


# --- corpus files -----------------------------------------------------------

def write_manifest(path, records) -> None:
    """Write manifest records (dicts with path/label/class_tag/split) as CSV."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({k: rec[k] for k in MANIFEST_FIELDS})
    atomic_write_text(Path(path), buf.getvalue())


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
                raise ManifestError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
            rows = list(reader)
    except OSError as exc:
        raise ManifestError(f"{path}: {exc.strerror or exc}") from exc
    for n, row in enumerate(rows, start=2):
        try:
            row["label"] = int(row["label"])
            if label_for_tag(row["class_tag"]) != row["label"]:
                raise ValueError(f"label {row['label']} disagrees with tag {row['class_tag']}")
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"{path}:{n}: {exc}") from exc
    return rows


def save_corpus(dataset: Dataset, out_dir, splits: dict[str, str] | None = None) -> Path:
    """Write every sample as a binary PPM plus ``manifest.csv``.

    ``splits`` maps source ids to "train"/"test"; missing ids get an empty split.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in dataset:
        rel = Path("images") / f"{s.source_id}.ppm"
        atomic_write_bytes(out_dir / rel, encode_ppm(s.image))
        records.append({"path": rel.as_posix(), "label": s.label, "class_tag": s.class_tag,
                        "split": (splits or {}).get(s.source_id, "")})
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, records)
    return manifest


def load_corpus(manifest_path, input_side: int, split: str | None = None) -> Dataset:
    """Load the samples listed in a manifest, optionally only one split."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    samples = []
    for row in rows:
        if split is not None and row["split"] != split:
            continue
        img_path = Path(row["path"])
        if not img_path.is_absolute():
            img_path = manifest_path.parent / img_path
        image = load_image(img_path, input_side)
        samples.append(Sample(image, one_hot(row["label"]), row["class_tag"], Path(row["path"]).stem))
    return Dataset(samples)
