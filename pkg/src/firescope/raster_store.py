"""Patch container files, band selection, cirrus filtering and band
normalization.

Container layout (little-endian)::

    "FPC1" | u32 version=1 | u32 patch_count | u16 H | u16 W | u16 B
    | u8 dtype (1=u16, 2=f32) | u8 reserved=0
    | B x (u8 length + ASCII band label)
    | per patch: H*W*B pixels (row-major, channel fastest), then H*W mask bytes
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FPC1"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHHBB")

DTYPE_CODES = {1: np.dtype("<u2"), 2: np.dtype("<f4")}

# Channel order of 10-band Landsat 8 patches.
LANDSAT_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B9", "B10", "B11")
GREEN = "B3"
SWIR = ("B6", "B7")
CIRRUS = "B9"


class ContainerError(ValueError):
    """Base class for container parse failures."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    pass


class DatasetValidationError(ValueError):
    pass


class UnknownBandError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class MultibandPatch:
    pixels: np.ndarray  # (H, W, B)
    band_ids: list[str]
    mask: np.ndarray  # (H, W) of 0/1

    def __post_init__(self):
        self.band_ids = list(self.band_ids)
        if self.pixels.ndim != 3:
            raise DatasetValidationError(f"pixels must be H x W x B, got shape {self.pixels.shape}")
        if self.pixels.shape[2] != len(self.band_ids):
            raise DatasetValidationError(
                f"{len(self.band_ids)} band ids for {self.pixels.shape[2]} channels")
        if self.mask.shape != self.pixels.shape[:2]:
            raise DatasetValidationError(
                f"mask shape {self.mask.shape} != pixel grid {self.pixels.shape[:2]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise DatasetValidationError("mask values must be 0 or 1")

    def band(self, label: str) -> np.ndarray:
        try:
            return self.pixels[:, :, self.band_ids.index(label)]
        except ValueError:
            raise UnknownBandError(f"unknown band {label!r}; have {self.band_ids}") from None

    @property
    def has_fire(self) -> bool:
        return bool(self.mask.any())


@dataclass
class PatchDataset:
    patches: list[MultibandPatch]
    provenance: str = ""

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, idx):
        return self.patches[idx]

    @property
    def band_ids(self) -> list[str]:
        return self.patches[0].band_ids if self.patches else []

    def subset(self, indices) -> "PatchDataset":
        return PatchDataset([self.patches[i] for i in indices], self.provenance)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N, H, W, B) float64 pixels and (N, H, W, 1) float64 masks."""
        x = np.stack([p.pixels for p in self.patches]).astype(np.float64)
        y = np.stack([p.mask for p in self.patches]).astype(np.float64)[..., None]
        return x, y


@dataclass(frozen=True)
class NormalizationStats:
    band_ids: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    scheme: str = "standardize"

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            bad = [b for b, s in zip(self.band_ids, self.std) if not s > 0]
            raise ValueError(f"zero-variance band(s): {bad}")


@dataclass(frozen=True)
class DatasetStats:
    n_total: int
    n_fire: int
    n_nonfire: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_nonfire", self.n_total - self.n_fire)


def validate(dataset: PatchDataset) -> None:
    if not dataset.patches:
        raise DatasetValidationError("dataset is empty")
    first = dataset.patches[0]
    for i, p in enumerate(dataset.patches):
        if p.band_ids != first.band_ids:
            raise DatasetValidationError(
                f"patch {i}: band ids {p.band_ids} differ from {first.band_ids}")
        if p.pixels.shape != first.pixels.shape:
            raise DatasetValidationError(
                f"patch {i}: shape {p.pixels.shape} differs from {first.pixels.shape}")
        if p.pixels.dtype != first.pixels.dtype:
            raise DatasetValidationError(
                f"patch {i}: dtype {p.pixels.dtype} differs from {first.pixels.dtype}")


def _dtype_code(dtype) -> int:
    dtype = np.dtype(dtype)
    for code, dt in DTYPE_CODES.items():
        if dtype.kind == dt.kind and dtype.itemsize == dt.itemsize:
            return code
    raise DatasetValidationError(f"pixels must be uint16 or float32, got {dtype}")


def encode_container(dataset: PatchDataset) -> bytes:
    validate(dataset)
    h, w, b = dataset.patches[0].pixels.shape
    code = _dtype_code(dataset.patches[0].pixels.dtype)
    parts = [_HEADER.pack(MAGIC, VERSION, len(dataset), h, w, b, code, 0)]
    for label in dataset.band_ids:
        raw = label.encode("ascii")
        if len(raw) > 255:
            raise DatasetValidationError(f"band label too long: {label!r}")
        parts.append(struct.pack("<B", len(raw)) + raw)
    dt = DTYPE_CODES[code]
    for p in dataset.patches:
        parts.append(np.ascontiguousarray(p.pixels, dtype=dt).tobytes())
        parts.append(np.ascontiguousarray(p.mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def write_container(dataset: PatchDataset, path) -> None:
    Path(path).write_bytes(encode_container(dataset))


def decode_container(buf: bytes, provenance: str = "") -> PatchDataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(
            f"truncated payload: header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, count, h, w, b, code, _ = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in DTYPE_CODES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    pos = _HEADER.size
    labels = []
    for _ in range(b):
        if pos >= len(buf):
            raise TruncatedPayloadError("truncated payload inside band labels")
        n = buf[pos]
        if pos + 1 + n > len(buf):
            raise TruncatedPayloadError("truncated payload inside band labels")
        labels.append(buf[pos + 1:pos + 1 + n].decode("ascii"))
        pos += 1 + n
    dt = DTYPE_CODES[code]
    pix_bytes = h * w * b * dt.itemsize
    per_patch = pix_bytes + h * w
    expected = pos + count * per_patch
    if len(buf) < expected:
        raise TruncatedPayloadError(
            f"truncated payload: expected {expected} bytes, got {len(buf)}")
    patches = []
    for _ in range(count):
        pixels = np.frombuffer(buf, dtype=dt, count=h * w * b, offset=pos).reshape(h, w, b)
        mask = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos + pix_bytes).reshape(h, w)
        patches.append(MultibandPatch(pixels.astype(dt.newbyteorder("=")), labels, mask.copy()))
        pos += per_patch
    return PatchDataset(patches, provenance)


def read_container(path) -> PatchDataset:
    return decode_container(Path(path).read_bytes(), provenance=str(path))


def container_size(h: int, w: int, band_ids, n_patches: int, dtype_code: int) -> int:
    header = _HEADER.size + sum(1 + len(b.encode("ascii")) for b in band_ids)
    per_patch = h * w * len(band_ids) * DTYPE_CODES[dtype_code].itemsize + h * w
    return header + n_patches * per_patch


def select_bands(patch: MultibandPatch, wanted) -> MultibandPatch:
    idx = []
    for label in wanted:
        if label not in patch.band_ids:
            raise UnknownBandError(f"unknown band {label!r}; have {patch.band_ids}")
        idx.append(patch.band_ids.index(label))
    return MultibandPatch(patch.pixels[:, :, idx], list(wanted), patch.mask)


def select_dataset_bands(dataset: PatchDataset, wanted) -> PatchDataset:
    return PatchDataset([select_bands(p, wanted) for p in dataset.patches], dataset.provenance)


def dataset_stats(dataset: PatchDataset) -> DatasetStats:
    return DatasetStats(len(dataset), sum(p.has_fire for p in dataset.patches))


def filter_cirrus(dataset: PatchDataset, cirrus_band: str = CIRRUS, threshold=500) -> list[int]:
    """Indices of patches whose cirrus-band maximum is >= threshold."""
    return [i for i, p in enumerate(dataset.patches) if p.band(cirrus_band).max() >= threshold]


def fit_normalization(dataset: PatchDataset) -> NormalizationStats:
    x = np.stack([p.pixels for p in dataset.patches]).astype(np.float64)
    x = x.reshape(-1, x.shape[-1])
    return NormalizationStats(tuple(dataset.band_ids), x.mean(axis=0), x.std(axis=0))


def normalize_bands(dataset: PatchDataset, stats="fit"):
    """Standardize each band to zero mean / unit (population) sd.

    ``stats="fit"`` fits on ``dataset``; pass previously fitted stats to
    transform held-out data.  Returns ``(float64 dataset, stats)``.
    """
    if isinstance(stats, str):
        if stats != "fit":
            raise ValueError(f"stats must be NormalizationStats or 'fit', got {stats!r}")
        stats = fit_normalization(dataset)
    elif tuple(dataset.band_ids) != tuple(stats.band_ids):
        raise ValueError(f"stats bands {stats.band_ids} do not match {dataset.band_ids}")
    out = [MultibandPatch((p.pixels.astype(np.float64) - stats.mean) / stats.std,
                          p.band_ids, p.mask) for p in dataset.patches]
    return PatchDataset(out, dataset.provenance), stats


def datasets_equal(a: PatchDataset, b: PatchDataset) -> bool:
    if len(a) != len(b):
        return False
    for p, q in zip(a.patches, b.patches):
        if (p.band_ids != q.band_ids or p.pixels.dtype != q.pixels.dtype
                or p.pixels.shape != q.pixels.shape
                or p.pixels.tobytes() != q.pixels.tobytes()
                or not np.array_equal(p.mask, q.mask)):
            return False
    return True
