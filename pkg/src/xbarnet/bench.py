"""Datasets and metrics: the 4x4 letter task, digit sets, and scoring.

The builtin letter set ships 4 classes x 10 stylized 4x4 glyph variants.
The published bitmap set is not available as data, so these are plausible
stand-ins with one deliberately engineered property: all 40 patterns are
pairwise Hamming distance >= 3 apart.  That makes the single-pixel-flip test
construction a true bijection — every flip pattern is distance 1 from
exactly its generating train pattern — which the flip-test semantics need.
External pattern files are accepted for anyone holding the real bitmaps.

Digit data loads from IDX files (the standard big-endian layout).  A
procedural 28x28 digit generator doubles as a stand-in corpus for
environments without the real files; it writes valid IDX so the loader path
stays identical either way.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataFormatError, DataMissingError, DimensionError

# 4 classes, 10 variants each; global pairwise Hamming distance >= 3.
_LETTER_CLASSES = "TOXV"
_LETTER_PATTERNS = [
    "1111011001100110", "0111111001110110", "1111111001001110",
    "1111011001101101", "1101011011100111", "1111011010101110",
    "1011011101101110", "0111011001000100", "1111001101000110",
    "1111111101100100",
    "1111100110011111", "1110100101011111", "1101000111011111",
    "1110100110011100", "1111100111010011", "1111000010001111",
    "1111110100001111", "1011100110011001", "1011000100011111",
    "1100100010011111",
    "1001011001101001", "1001011001100010", "0001011001001101",
    "1000011101001001", "1001101101101001", "1001111011101000",
    "0101001001101001", "1001111000111001", "1011110001101001",
    "1000011001100101",
    "1001100101100110", "1001100100101010", "1101000111100110",
    "1011100101100011", "1001101101010110", "1000001101100110",
    "1100100001100110", "1001000001101110", "1101101101100010",
    "1001100111111110",
]


@dataclass
class Dataset:
    """Pixel patterns with labels.

    encoding notes how pixels map to drive voltages downstream:
    "pm1" (binary +-1, letters) or "gray01" (grayscale [0, 1], digits).
    """

    pixels: np.ndarray
    labels: np.ndarray
    n_classes: int
    encoding: str = "pm1"

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise DimensionError("pixels must be a (patterns, features) array")
        if self.labels.shape != (self.pixels.shape[0],):
            raise DimensionError("labels length must match pattern count")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise ConfigError("labels must lie in [0, n_classes)")
        if self.encoding not in ("pm1", "gray01"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_features(self) -> int:
        return self.pixels.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.pixels[idx], self.labels[idx], self.n_classes,
                       self.encoding)


def encode_levels(dataset: Dataset) -> np.ndarray:
    """Pixels as drive levels in [-1, 1] (multiply by input_voltage to get
    volts): pm1 passes through, gray01 maps p -> 2p - 1."""
    if dataset.encoding == "pm1":
        return dataset.pixels
    return 2.0 * dataset.pixels - 1.0


# ---------------------------------------------------------------------------
# letters
# ---------------------------------------------------------------------------


def _flip_test_set(train: Dataset) -> Dataset:
    n, d = train.pixels.shape
    pix = np.repeat(train.pixels, d, axis=0)
    labels = np.repeat(train.labels, d)
    flip_at = np.tile(np.arange(d), n)
    pix[np.arange(n * d), flip_at] *= -1
    return Dataset(pix, labels, train.n_classes, train.encoding)


def _parse_pattern_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or len(parts[0]) != 16 \
                or set(parts[0]) - set("01") or not parts[1].isdigit():
            raise DataFormatError(
                f"{path}:{lineno}: expected 16 chars of 0/1 and a label, "
                f"got {line!r}"
            )
        rows.append([1.0 if c == "1" else -1.0 for c in parts[0]])
        labels.append(int(parts[1]))
    if not rows:
        raise DataFormatError(f"{path}: no patterns found")
    return np.array(rows), np.array(labels, dtype=np.int64)


def letter_dataset(
    pattern_file: str | Path | None = None,
    *,
    n_classes: int = 4,
) -> tuple[Dataset, Dataset]:
    """(train, test) letter sets: 10 patterns per class, plus every
    single-pixel flip of every train pattern as test (label inherited).

    n_classes=3 selects the first three classes (30 train / 480 test).
    """
    if n_classes not in (3, 4):
        raise ConfigError("letter task supports 3 or 4 classes")
    if pattern_file is None:
        pix = np.array(
            [[1.0 if c == "1" else -1.0 for c in p] for p in _LETTER_PATTERNS]
        )
        labels = np.repeat(np.arange(4, dtype=np.int64), 10)
    else:
        path = Path(pattern_file)
        if not path.exists():
            raise DataMissingError(f"pattern file not found: {path}")
        pix, labels = _parse_pattern_file(path)
        if labels.max() >= n_classes:
            raise DataFormatError(
                f"{path}: label {labels.max()} outside {n_classes} classes"
            )
    keep = labels < n_classes
    train = Dataset(pix[keep], labels[keep], n_classes, "pm1")
    return train, _flip_test_set(train)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049


def _read_exact(f, n: int, path, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            f"{path}: truncated {what} at offset {offset} "
            f"(wanted {n} bytes, got {len(buf)})"
        )
    return buf


def _read_idx(path: Path, magic_expected: int, n_dims: int) -> np.ndarray:
    if not path.exists():
        raise DataMissingError(f"IDX file not found: {path}")
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, path, "magic"))[0]
        if magic != magic_expected:
            raise DataFormatError(
                f"{path}: bad magic {magic} at offset 0 "
                f"(expected {magic_expected})"
            )
        dims = struct.unpack(
            f">{n_dims}I", _read_exact(f, 4 * n_dims, path, "dimension header")
        )
        count = int(np.prod(dims))
        payload = _read_exact(f, count, path, "payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist(image_file: str | Path, label_file: str | Path) -> Dataset:
    """Load an IDX image/label pair: 28x28 images flattened to 784 floats in
    [0, 1], labels 0-9."""
    images = _read_idx(Path(image_file), _IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(label_file), _IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    pix = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(pix, labels.astype(np.int64), 10, "gray01")


def save_idx(dataset: Dataset, image_file: str | Path, label_file: str | Path,
             *, side: int = 28):
    """Write a gray01 dataset back to an IDX image/label pair (round-trip
    safe: quantizes to uint8 exactly as the loader divides)."""
    if dataset.encoding != "gray01":
        raise ConfigError("only gray01 datasets serialize to IDX")
    n, d = dataset.pixels.shape
    if d != side * side:
        raise DimensionError(f"feature count {d} is not {side}x{side}")
    images = np.round(dataset.pixels * 255.0).astype(np.uint8)
    with open(image_file, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, side, side))
        f.write(images.tobytes())
    with open(label_file, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# procedural digit corpus (stand-in when no IDX files are available)
# ---------------------------------------------------------------------------

# stroke skeletons on a [0,1]^2 canvas, as (x, y) polyline/arc pieces
def _arc(cx, cy, rx, ry, a0, a1, n=40):
    t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(x0, y0, x1, y1, n=30):
    t = np.linspace(0.0, 1.0, n)
    return np.stack([x0 + (x1 - x0) * t, y0 + (y1 - y0) * t], axis=1)


def _digit_strokes() -> list[np.ndarray]:
    pi = np.pi
    return [
        np.vstack([_arc(0.5, 0.5, 0.28, 0.38, 0, 2 * pi, 80)]),            # 0
        np.vstack([_line(0.5, 0.12, 0.5, 0.88), _line(0.35, 0.26, 0.5, 0.12)]),  # 1
        np.vstack([_arc(0.5, 0.68, 0.27, 0.2, 0.15 * pi, pi),
                   _line(0.72, 0.62, 0.28, 0.14), _line(0.28, 0.14, 0.75, 0.14)]),  # 2
        np.vstack([_arc(0.48, 0.68, 0.25, 0.19, -0.6 * pi, 0.8 * pi),
                   _arc(0.48, 0.3, 0.27, 0.19, -0.8 * pi, 0.6 * pi)]),      # 3
        np.vstack([_line(0.62, 0.88, 0.25, 0.4), _line(0.25, 0.4, 0.78, 0.4),
                   _line(0.62, 0.6, 0.62, 0.1)]),                           # 4
        np.vstack([_line(0.72, 0.86, 0.32, 0.86), _line(0.32, 0.86, 0.3, 0.55),
                   _arc(0.5, 0.36, 0.26, 0.24, -0.9 * pi, 0.7 * pi)]),      # 5
        np.vstack([_arc(0.52, 0.68, 0.26, 0.32, 0.45 * pi, 1.05 * pi),
                   _arc(0.5, 0.32, 0.24, 0.2, 0, 2 * pi, 60)]),             # 6
        np.vstack([_line(0.25, 0.86, 0.75, 0.86), _line(0.75, 0.86, 0.42, 0.1)]),  # 7
        np.vstack([_arc(0.5, 0.67, 0.22, 0.17, 0, 2 * pi, 60),
                   _arc(0.5, 0.3, 0.26, 0.2, 0, 2 * pi, 60)]),              # 8
        np.vstack([_arc(0.5, 0.66, 0.24, 0.2, 0, 2 * pi, 60),
                   _line(0.73, 0.62, 0.62, 0.1)]),                          # 9
    ]


def synthetic_digits(n: int, seed, *, side: int = 28) -> Dataset:
    """Procedural handwritten-style digit corpus, one glyph skeleton per
    class plus random affine distortion, stroke-width jitter, and pixel
    noise.  Deterministic per seed; balanced class counts (round-robin)."""
    if n <= 0:
        raise ConfigError("sample count must be positive")
    rng = np.random.default_rng(seed)
    strokes = _digit_strokes()
    labels = rng.permutation(np.arange(n, dtype=np.int64) % 10)
    images = np.zeros((n, side, side))
    for i in range(n):
        pts = strokes[labels[i]] - 0.5
        angle = rng.normal(0.0, 0.14)
        shear = rng.normal(0.0, 0.13)
        sx, sy = 1.0 + rng.normal(0.0, 0.1, 2)
        c, s = np.cos(angle), np.sin(angle)
        mat = np.array([[c, -s], [s, c]]) @ np.array([[sx, shear * sx], [0.0, sy]])
        moved = pts @ mat.T + 0.5 + rng.normal(0.0, 0.035, 2)
        ij = np.clip(np.round(moved * (side - 1)).astype(int), 0, side - 1)
        canvas = np.zeros((side, side))
        np.add.at(canvas, (side - 1 - ij[:, 1], ij[:, 0]), 1.0)
        width = max(0.55, rng.normal(0.9, 0.18))
        canvas = gaussian_filter(canvas, sigma=width)
        peak = canvas.max()
        if peak > 0:
            canvas /= peak
        canvas += rng.normal(0.0, 0.04, canvas.shape)
        images[i] = np.clip(canvas, 0.0, 1.0)
    pix = images.reshape(n, side * side)
    # quantize like the IDX round trip so synthetic-direct and
    # synthetic-via-file paths agree bit for bit
    pix = np.round(pix * 255.0) / 255.0
    return Dataset(pix, labels, 10, "gray01")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


@dataclass
class ScoreResult:
    fidelity: float
    confusion: np.ndarray
    per_class_recall: np.ndarray

    @property
    def error_rate(self) -> float:
        return 100.0 - self.fidelity


def score(predictions: np.ndarray, labels: np.ndarray, n_classes: int
          ) -> ScoreResult:
    """Fidelity percentage, confusion matrix (rows = true class), recalls."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionError(
            f"predictions {predictions.shape} vs labels {labels.shape}"
        )
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    correct = int(np.trace(confusion))
    total = labels.size
    row_sums = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(row_sums > 0,
                          np.diag(confusion) / np.maximum(row_sums, 1), np.nan)
    fidelity = 100.0 * correct / total if total else 0.0
    return ScoreResult(fidelity, confusion, recall)
