"""Volume assembly, preprocessing, augmentation, and the dataset manifest.

Slice stacks are binary PGM (P5) files, one per axial slice; whole
volumes can also live in a single raw "VOL1" file (text header, then
little-endian float32 voxels).  All multi-byte values on disk are
little-endian, 16-bit PGM samples included.

The preprocessing pipeline is a pure function of (volume, config) in
eval mode.  In train mode it additionally takes a PRNG whose state is
derived per (seed, epoch, sample), so loading samples in parallel gives
the same result as loading them serially.
"""

from __future__ import annotations

import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    CropError,
    InconsistentSlicesError,
    ManifestError,
    ShapeError,
    TooFewSlicesError,
    VolumeError,
)
from .tensor import Rng, Tensor, derive_seed


@dataclass
class Volume:
    """A (D,H,W) float32 voxel grid plus the id of where it came from."""

    data: np.ndarray
    source_id: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3-d (D,H,W), got {self.data.shape}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) to a (H,W) uint8 or uint16 array.

    Header comments (#) are honored.  16-bit samples are read
    little-endian; byte order is uniform across all formats here.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            c = raw[pos]
            if c in b" \t\r\n":
                pos += 1
            elif c == ord("#"):
                while pos < len(raw) and raw[pos] != ord("\n"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and raw[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise VolumeError(f"{path}: truncated PGM header")
        return raw[start:pos]

    if token() != b"P5":
        raise VolumeError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise VolumeError(f"{path}: non-numeric PGM header field") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise VolumeError(f"{path}: bad PGM dimensions {width}x{height} maxval {maxval}")
    pos += 1  # exactly one whitespace byte separates header from pixels
    payload = raw[pos:]
    dtype = np.uint8 if maxval < 256 else np.dtype("<u2")
    need = width * height * dtype.itemsize if maxval >= 256 else width * height
    if len(payload) < need:
        raise VolumeError(f"{path}: pixel payload truncated ({len(payload)} < {need})")
    if payload[need:].strip(b" \t\r\n"):
        raise VolumeError(f"{path}: trailing bytes after pixel payload")
    arr = np.frombuffer(payload[:need], dtype=dtype).reshape(height, width)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype not in (np.uint8, np.uint16):
        raise VolumeError(f"PGM image must be 2-d uint8/uint16, got {image.dtype} {image.shape}")
    maxval = 255 if image.dtype == np.uint8 else 65535
    height, width = image.shape
    payload = image.tobytes() if maxval == 255 else image.astype("<u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


def read_vol1(path) -> Volume:
    """Raw volume file: one text line `VOL1 D H W`, then float32 LE voxels."""
    with open(path, "rb") as fh:
        header = fh.readline(256)
        if not header.endswith(b"\n"):
            raise VolumeError(f"{path}: missing VOL1 header line")
        parts = header.split()
        if len(parts) != 4 or parts[0] != b"VOL1":
            raise VolumeError(f"{path}: bad VOL1 header {header!r}")
        try:
            d, h, w = (int(p) for p in parts[1:])
        except ValueError:
            raise VolumeError(f"{path}: non-numeric VOL1 extents") from None
        if min(d, h, w) < 1:
            raise VolumeError(f"{path}: bad VOL1 extents {(d, h, w)}")
        need = d * h * w * 4
        payload = fh.read(need + 1)
        if len(payload) < need:
            raise VolumeError(f"{path}: voxel payload truncated ({len(payload)} < {need})")
        if len(payload) > need:
            raise VolumeError(f"{path}: trailing bytes after voxel payload")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    if not np.all(np.isfinite(voxels)):
        raise VolumeError(f"{path}: non-finite voxel values")
    return Volume(voxels.astype(np.float32, copy=True), str(path))


def write_vol1(path, volume: Volume) -> None:
    d, h, w = volume.extents
    with open(path, "wb") as fh:
        fh.write(f"VOL1 {d} {h} {w}\n".encode("ascii"))
        fh.write(volume.data.astype("<f4").tobytes(order="C"))


_NATURAL_SPLIT = re.compile(r"(\d+)")


def natural_key(name: str):
    """Sort key ordering embedded integers numerically: s2 before s10."""
    return tuple(
        int(part) if part.isdigit() else part
        for part in _NATURAL_SPLIT.split(name)
    )


def stack_slices(directory) -> Volume:
    """Stack a directory of equal-size PGM slices into a (D,H,W) volume.

    Slices are ordered by numeric-aware filename sort and normalized by
    the max representable value of their bit depth (255 or 65535).
    """
    names = sorted(
        (
            n
            for n in os.listdir(directory)
            if not n.startswith(".") and os.path.isfile(os.path.join(directory, n))
        ),
        key=natural_key,
    )
    if len(names) < 2:
        raise TooFewSlicesError(f"{directory}: need at least 2 slices, found {len(names)}")
    planes = []
    shape = None
    for name in names:
        img = read_pgm(os.path.join(directory, name))
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise InconsistentSlicesError(
                f"{directory}: slice {name} is {img.shape}, expected {shape}"
            )
        max_rep = 255.0 if img.dtype == np.uint8 else 65535.0
        planes.append((img.astype(np.float64) / max_rep).astype(np.float32))
    return Volume(np.stack(planes, axis=0), str(directory))


DEFAULT_CROP_FRACTIONS = ((0.10, 0.10), (0.08, 0.08), (0.08, 0.08))


def crop_border(vol: Volume, fractions=DEFAULT_CROP_FRACTIONS) -> Volume:
    """Remove floor(fraction * extent) voxels from each of the 6 faces."""
    slices = []
    for axis, (lo, hi) in enumerate(fractions):
        if not (0.0 <= lo <= 0.45 and 0.0 <= hi <= 0.45):
            raise ConfigError(f"crop fractions must be in [0, 0.45], got {(lo, hi)}")
        extent = vol.data.shape[axis]
        n_lo = math.floor(lo * extent)
        n_hi = math.floor(hi * extent)
        if extent - n_lo - n_hi < 4:
            raise CropError(
                f"axis {axis}: cropping {n_lo}+{n_hi} of {extent} leaves fewer than 4 voxels"
            )
        slices.append(slice(n_lo, extent - n_hi))
    return Volume(vol.data[tuple(slices)].copy(), vol.source_id)


def _nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    rank = max(1, math.ceil(percentile / 100.0 * sorted_values.size))
    return float(sorted_values[rank - 1])


def contrast_stretch(vol: Volume, p_low: float = 1.0, p_high: float = 99.0) -> Volume:
    """Linear stretch between the nearest-rank percentiles, clamped to [0,1].

    A degenerate window (both percentiles equal) maps everything to 0.5.
    """
    if not 0.0 <= p_low < p_high <= 100.0:
        raise ConfigError(f"need 0 <= p_low < p_high <= 100, got {(p_low, p_high)}")
    flat = np.sort(vol.data.astype(np.float64), axis=None)
    q_low = _nearest_rank(flat, p_low)
    q_high = _nearest_rank(flat, p_high)
    if q_low == q_high:
        out = np.full(vol.data.shape, 0.5, dtype=np.float32)
    else:
        scaled = (vol.data.astype(np.float64) - q_low) / (q_high - q_low)
        out = np.clip(scaled, 0.0, 1.0).astype(np.float32)
    return Volume(out, vol.source_id)


def _axis_coords(src: int, dst: int):
    scale = src / dst
    centers = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    np.clip(centers, 0.0, float(src - 1), out=centers)
    i0 = np.floor(centers).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = centers - i0
    return i0, i1, frac


def trilinear_resize(vol: Volume, target) -> Volume:
    """Trilinear interpolation with half-pixel centers.

    Source coordinate of output index i is (i + 0.5) * (src/dst) - 0.5,
    clamped to [0, src-1]; the 8 surrounding voxels are blended in
    float64.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ShapeError(f"resize target must be 3 positive extents, got {target}")
    src = vol.data.shape
    if target == src:
        return Volume(vol.data.copy(), vol.source_id)
    v = vol.data.astype(np.float64)
    d0, d1, fd = _axis_coords(src[0], target[0])
    h0, h1, fh = _axis_coords(src[1], target[1])
    w0, w1, fw = _axis_coords(src[2], target[2])
    out = np.zeros(target, dtype=np.float64)
    for di, wd in ((d0, 1.0 - fd), (d1, fd)):
        for hi, wh in ((h0, 1.0 - fh), (h1, fh)):
            for wi, ww in ((w0, 1.0 - fw), (w1, fw)):
                weight = wd[:, None, None] * wh[None, :, None] * ww[None, None, :]
                out += weight * v[np.ix_(di, hi, wi)]
    return Volume(out.astype(np.float32), vol.source_id)


def random_crop(vol: Volume, size, rng: Rng) -> Volume:
    """Uniform-offset crop; consumes exactly one draw per axis (D,H,W)."""
    size = tuple(int(s) for s in size)
    slices = []
    for axis in range(3):
        extent = vol.data.shape[axis]
        if size[axis] < 1 or size[axis] > extent:
            raise CropError(f"axis {axis}: crop size {size[axis]} not in [1, {extent}]")
        offset = rng.next_below(extent - size[axis] + 1)
        slices.append(slice(offset, offset + size[axis]))
    return Volume(vol.data[tuple(slices)].copy(), vol.source_id)


def horizontal_flip(vol: Volume) -> Volume:
    """Reverse the W axis; applying it twice is a bit-exact identity."""
    return Volume(vol.data[:, :, ::-1].copy(), vol.source_id)


@dataclass
class DataConfig:
    """Preprocessing and augmentation settings.

    Sizes are (D,H,W).  `augment` gates the train-only steps; eval mode
    never applies them regardless.
    """

    input_size: tuple = (64, 128, 128)
    crop_fractions: tuple = DEFAULT_CROP_FRACTIONS
    contrast_percentiles: tuple = (1.0, 99.0)
    train_crop_size: tuple = (56, 112, 112)
    flip_probability: float = 0.5
    augment: bool = True

    def validate(self) -> None:
        if len(self.input_size) != 3 or any(int(e) < 1 for e in self.input_size):
            raise ConfigError(f"input_size must be 3 positive extents, got {self.input_size}")
        if len(self.train_crop_size) != 3 or any(
            not 1 <= int(c) <= int(e) for c, e in zip(self.train_crop_size, self.input_size)
        ):
            raise ConfigError(
                f"train_crop_size {self.train_crop_size} must fit input_size {self.input_size}"
            )
        if len(self.crop_fractions) != 3 or any(
            len(pair) != 2 or not all(0.0 <= float(f) <= 0.45 for f in pair)
            for pair in self.crop_fractions
        ):
            raise ConfigError(f"crop_fractions must be 3 (low, high) pairs in [0, 0.45]")
        lo, hi = self.contrast_percentiles
        if not 0.0 <= float(lo) < float(hi) <= 100.0:
            raise ConfigError(f"contrast percentiles must satisfy 0 <= low < high <= 100")
        if not 0.0 <= float(self.flip_probability) <= 1.0:
            raise ConfigError(f"flip_probability must be in [0,1], got {self.flip_probability}")

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "crop_fractions": [list(p) for p in self.crop_fractions],
            "contrast_percentiles": list(self.contrast_percentiles),
            "train_crop_size": list(self.train_crop_size),
            "flip_probability": self.flip_probability,
            "augment": self.augment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {
            "input_size",
            "crop_fractions",
            "contrast_percentiles",
            "train_crop_size",
            "flip_probability",
            "augment",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data config fields: {', '.join(sorted(unknown))}")
        cfg = cls(
            input_size=tuple(d.get("input_size", cls.input_size)),
            crop_fractions=tuple(tuple(p) for p in d.get("crop_fractions", cls.crop_fractions)),
            contrast_percentiles=tuple(d.get("contrast_percentiles", cls.contrast_percentiles)),
            train_crop_size=tuple(d.get("train_crop_size", cls.train_crop_size)),
            flip_probability=float(d.get("flip_probability", cls.flip_probability)),
            augment=bool(d.get("augment", cls.augment)),
        )
        cfg.validate()
        return cfg


def preprocess_pipeline(vol: Volume, config: DataConfig, mode: str, rng: Rng | None = None) -> Tensor:
    """crop -> contrast -> resize, plus train-time crop/flip augmentation.

    Returns a Tensor of shape [1, D, H, W] with every voxel in [0,1].
    Train mode consumes exactly 4 PRNG draws per call (3 crop offsets,
    1 flip decision) whenever augmentation is on.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    config.validate()
    out = crop_border(vol, config.crop_fractions)
    out = contrast_stretch(out, *config.contrast_percentiles)
    out = trilinear_resize(out, config.input_size)
    if mode == "train" and config.augment:
        if rng is None:
            raise ConfigError("train-mode preprocessing with augmentation needs an rng")
        out = random_crop(out, config.train_crop_size, rng)
        out = trilinear_resize(out, config.input_size)
        if rng.next_float() < config.flip_probability:
            out = horizontal_flip(out)
    return Tensor(out.data[None, :, :, :])


@dataclass
class ManifestEntry:
    sample_id: str  # the path exactly as written in the manifest
    path: str  # resolved relative to the manifest's directory
    label: int


MANIFEST_HEADER = ("path", "label")


def load_manifest(path) -> list[ManifestEntry]:
    """CSV of `path,label` rows; the header row is optional.

    Relative paths are resolved against the manifest's directory.
    Errors carry the 1-based line number.
    """
    import csv

    base = os.path.dirname(os.path.abspath(path))
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, "r", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and tuple(row) == MANIFEST_HEADER:
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
            sample_path, label_text = row[0].strip(), row[1].strip()
            if not sample_path:
                raise ManifestError(f"{path}: line {lineno}: empty path")
            if label_text not in ("0", "1"):
                raise ManifestError(
                    f"{path}: line {lineno}: label {label_text!r} is not 0 or 1"
                )
            if sample_path in seen:
                raise ManifestError(
                    f"{path}: line {lineno}: duplicate path {sample_path!r} "
                    f"(first at line {seen[sample_path]})"
                )
            seen[sample_path] = lineno
            resolved = sample_path
            if not os.path.isabs(resolved):
                resolved = os.path.join(base, resolved)
            entries.append(ManifestEntry(sample_path, resolved, int(label_text)))
    if not entries:
        raise ManifestError(f"{path}: manifest lists no samples")
    return entries


def labels_by_id(entries: list[ManifestEntry]) -> dict[str, int]:
    return {e.sample_id: e.label for e in entries}


def load_volume(path) -> Volume:
    """A directory is a PGM slice stack; a file must be VOL1."""
    if os.path.isdir(path):
        return stack_slices(path)
    if not os.path.exists(path):
        raise VolumeError(f"{path}: no such file or directory")
    return read_vol1(path)


def worker_count() -> int:
    """Parallel-loading width, capped by the VOLNET_THREADS env var."""
    raw = os.environ.get("VOLNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"VOLNET_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


class ManifestDataset:
    """Loads and preprocesses manifest samples, optionally ahead on threads.

    Augmentation randomness is keyed by (seed, epoch, sample index), so
    the produced tensors are independent of worker count and of the
    order samples are requested in.
    """

    def __init__(self, entries: list[ManifestEntry], config: DataConfig, seed: int):
        if not entries:
            raise ManifestError("dataset needs at least one sample")
        config.validate()
        self.entries = list(entries)
        self.config = config
        self.seed = int(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def _load(self, index: int, epoch: int | None) -> tuple[int, Tensor, int]:
        entry = self.entries[index]
        vol = load_volume(entry.path)
        if epoch is None:
            x = preprocess_pipeline(vol, self.config, "eval")
        else:
            rng = Rng(derive_seed(self.seed, epoch, index))
            x = preprocess_pipeline(vol, self.config, "train", rng)
        return index, x, entry.label

    def _run(self, order, epoch):
        workers = min(worker_count(), len(self.entries))
        if workers <= 1:
            for i in order:
                yield self._load(int(i), epoch)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                yield from pool.map(lambda i: self._load(int(i), epoch), order)

    def train_samples(self, epoch: int, order):
        """(index, Tensor[1,D,H,W], label) in the given order, augmented."""
        return self._run(order, int(epoch))

    def eval_samples(self, order=None):
        """(index, Tensor[1,D,H,W], label) deterministically, no augmentation."""
        if order is None:
            order = range(len(self.entries))
        return self._run(order, None)
