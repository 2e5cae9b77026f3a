"""Volume I/O (VOL1 format), CT intensity preprocessing, cropping and phantoms.

Axis convention: arrays are ``[C, H, W, D]`` with ``H`` the x axis, ``W`` the
y axis and ``D`` the z (slice) axis; ``spacing = (sx, sy, sz)`` in mm.

VOL1 layout (little-endian)::

    offset  size  field
    0       4     magic b"VOL1"
    4       4     format version (u32, currently 1)
    8       4     channels (u32)
    12      12    H, W, D (u32 each)
    24      12    spacing sx, sy, sz (f32 each)
    36      1     dtype code (0 = f32, 1 = u16)
    37      3     reserved, zero
    40      ...   payload: channel-major, then z, y, x with x fastest
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, SamplingError, ShapeError

MAGIC = b"VOL1"
VERSION = 1
HEADER = struct.Struct("<4sIIIII3fB3s")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}


@dataclass
class Volume:
    data: np.ndarray  # [C, H, W, D]
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"volume data must be [C, H, W, D], got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"volume extents must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def extents(self) -> tuple:
        return self.data.shape[1:]


@dataclass
class LabeledVolume:
    image: Volume
    labels: np.ndarray  # [H, W, D] integer class map
    n_classes: int = field(default=0)

    def __post_init__(self):
        if self.labels.shape != self.image.extents:
            raise ShapeError(f"labels {self.labels.shape} vs image extents {self.image.extents}")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")


def as_array(x) -> np.ndarray:
    """Underlying array of a :class:`Volume` (or tensor); arrays pass through."""
    if isinstance(x, np.ndarray):
        return x
    return np.asarray(x.data if hasattr(x, "spacing") or hasattr(x, "requires_grad") else x)


def write_volume(path, v: Volume) -> None:
    data = np.asarray(v.data)
    if data.dtype == np.float32:
        code = 0
    elif data.dtype == np.uint16:
        code = 1
    else:
        raise TypeError(f"VOL1 stores float32 or uint16, got {data.dtype}")
    c, h, w, d = data.shape
    header = HEADER.pack(MAGIC, VERSION, c, h, w, d, *v.spacing, code, b"\0\0\0")
    payload = np.ascontiguousarray(data.transpose(0, 3, 2, 1)).astype(DTYPES[code], copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(raw)} of {HEADER.size} bytes")
    magic, version, c, h, w, d, sx, sy, sz, code, _ = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC.decode()!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    for off, name, n in ((8, "channels", c), (12, "H", h), (16, "W", w), (20, "D", d)):
        if n == 0:
            raise FormatError(f"{path}: non-positive {name} at offset {off}")
    if code not in DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 36")
    dt = DTYPES[code]
    need = HEADER.size + c * h * w * d * dt.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes, file ends at offset {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    arr = np.frombuffer(raw, dtype=dt, count=c * h * w * d, offset=HEADER.size)
    arr = arr.reshape(c, d, w, h).transpose(0, 3, 2, 1)
    arr = np.ascontiguousarray(arr, dtype=np.float32 if code == 0 else np.uint16)
    return Volume(arr, (sx, sy, sz))


def write_labeled(stem, lv: LabeledVolume) -> tuple[Path, Path]:
    """Write ``<stem>.img.vol`` and ``<stem>.lbl.vol``."""
    stem = Path(stem)
    img, lbl = stem.with_name(stem.name + ".img.vol"), stem.with_name(stem.name + ".lbl.vol")
    write_volume(img, lv.image)
    write_volume(lbl, Volume(lv.labels.astype(np.uint16)[None], lv.image.spacing))
    return img, lbl


def read_labeled(stem, n_classes: int = 0) -> LabeledVolume:
    stem = Path(stem)
    img = read_volume(stem.with_name(stem.name + ".img.vol"))
    lbl = read_volume(stem.with_name(stem.name + ".lbl.vol"))
    return LabeledVolume(img, lbl.data[0].astype(np.int64), n_classes)


def list_volumes(directory) -> list[Path]:
    """Image volumes in ``directory`` (labelled ``.img.vol`` files or plain ``.vol``)."""
    return sorted(p for p in Path(directory).glob("*.vol") if not p.name.endswith(".lbl.vol"))


def list_labeled(directory) -> list[Path]:
    """Stems of every ``<stem>.img.vol`` with a matching ``.lbl.vol``."""
    stems = []
    for p in sorted(Path(directory).glob("*.img.vol")):
        stem = p.with_name(p.name[: -len(".img.vol")])
        if stem.with_name(stem.name + ".lbl.vol").exists():
            stems.append(stem)
    return stems


def preprocess_ct(v: Volume, lo: float = -1000.0, hi: float = 1000.0) -> Volume:
    """Clip to ``[lo, hi]`` then map affinely onto ``[0, 1]``.

    Not idempotent: a second application maps ``[0, 1]`` to ``[0.5, 0.5005]``
    with the default window.
    """
    if not lo < hi:
        raise ValueError("preprocess_ct needs lo < hi")
    data = (np.clip(v.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return Volume(data.astype(np.float32), v.spacing)


def _crop(data: np.ndarray, starts, size) -> np.ndarray:
    return data[(slice(None),) + tuple(slice(s, s + n) for s, n in zip(starts, size))]


def random_crop_starts(extents, size, rng: np.random.Generator) -> tuple:
    return tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(extents, size))


def sample_subvolume(v: Volume, size, rng: np.random.Generator, max_tries: int = 100) -> Volume:
    """Uniformly random crop of ``size``; all-air crops (max voxel == 0) are redrawn."""
    size = tuple(int(s) for s in size)
    if any(s > n or s < 1 for s, n in zip(size, v.extents)):
        raise ShapeError(f"crop {size} does not fit extents {v.extents}")
    for _ in range(max_tries):
        crop = _crop(v.data, random_crop_starts(v.extents, size, rng), size)
        if crop.max() != 0:
            return Volume(np.ascontiguousarray(crop), v.spacing)
    raise SamplingError(f"no non-air crop of {size} found in {max_tries} draws")


def sample_labeled(lv: LabeledVolume, size, rng: np.random.Generator) -> LabeledVolume:
    size = tuple(int(s) for s in size)
    if any(s > n for s, n in zip(size, lv.image.extents)):
        raise ShapeError(f"crop {size} does not fit extents {lv.image.extents}")
    starts = random_crop_starts(lv.image.extents, size, rng)
    img = np.ascontiguousarray(_crop(lv.image.data, starts, size))
    lbl = np.ascontiguousarray(_crop(lv.labels[None], starts, size)[0])
    return LabeledVolume(Volume(img, lv.image.spacing), lbl, lv.n_classes)


def gen_phantom(seed: int, extents=(32, 32, 32), n_shapes: int = 4, n_classes: int = 3,
                spacing=(1.0, 1.0, 1.0)) -> LabeledVolume:
    """Synthetic labeled volume of overlapping ellipsoids.

    Background intensity 0.1, shape of class ``c`` centred on ``0.2 + 0.15 c``
    (each shape jitters its mean by up to +-0.05, so adjacent bands touch),
    Gaussian noise sigma 0.02, clipped to [0, 1]. Later shapes overwrite
    earlier ones. Shape centres are biased toward the low-x, high-y quadrant
    and x radii are longer than y radii, so in-plane orientation is
    recoverable (as it is for anatomy).
    """
    extents = tuple(int(n) for n in extents)
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    if min(extents) < 16:
        raise ShapeError("phantom extents must be >= 16 per axis")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    H, W, Dz = extents
    grids = np.meshgrid(np.arange(H), np.arange(W), np.arange(Dz), indexing="ij")
    image = np.full(extents, 0.1)
    labels = np.zeros(extents, dtype=np.int64)
    classes = [1 + (i % (n_classes - 1)) for i in range(n_shapes)]
    rng.shuffle(classes)
    for c in classes:
        centre = (rng.uniform(0.25, 0.6) * H, rng.uniform(0.4, 0.75) * W, rng.uniform(0.3, 0.7) * Dz)
        radii = (rng.uniform(0.15, 0.3) * H, rng.uniform(0.08, 0.18) * W, rng.uniform(0.12, 0.3) * Dz)
        radii = tuple(max(r, 2.0) for r in radii)
        inside = sum(((g - m) / r) ** 2 for g, m, r in zip(grids, centre, radii)) <= 1.0
        image[inside] = 0.2 + 0.15 * c + rng.uniform(-0.05, 0.05)
        labels[inside] = c
    image += rng.normal(0.0, 0.02, size=extents)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledVolume(Volume(image[None], spacing), labels, n_classes)
