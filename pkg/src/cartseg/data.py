"""Volumes, the VVOL file format, synthetic phantoms, patch sampling and tiling.

Arrays are indexed ``[x, y, z]``; on disk the payload is x-fastest, which is
numpy Fortran order for that indexing.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MASK_U8 = "mask_u8"
GRAY_F32 = "gray_f32"
_DTYPE_CODES = {MASK_U8: 0, GRAY_F32: 1}
_NP_DTYPES = {MASK_U8: np.dtype("<u1"), GRAY_F32: np.dtype("<f4")}


@dataclass
class Volume:
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (0.2, 0.2, 0.2)
    dtype: str = GRAY_F32

    def __post_init__(self):
        if self.dtype not in _DTYPE_CODES:
            raise ValueError(f"unknown volume dtype {self.dtype!r}")
        arr = np.asarray(self.voxels)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume needs three positive extents, got shape {arr.shape}")
        if self.dtype == MASK_U8:
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ValueError("mask_u8 volume must contain only 0 and 1")
            arr = arr.astype(np.uint8, copy=False)
        else:
            arr = arr.astype(np.float32, copy=False)
        self.voxels = arr
        sp = tuple(float(np.float32(s)) for s in self.spacing_mm)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be three positive reals, got {self.spacing_mm}")
        self.spacing_mm = sp

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @classmethod
    def mask(cls, arr, spacing_mm=(0.2, 0.2, 0.2)) -> "Volume":
        return cls(np.asarray(arr).astype(np.uint8), spacing_mm, MASK_U8)

    @classmethod
    def gray(cls, arr, spacing_mm=(0.2, 0.2, 0.2)) -> "Volume":
        return cls(np.asarray(arr, dtype=np.float32), spacing_mm, GRAY_F32)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.spacing_mm == other.spacing_mm
            and self.voxels.shape == other.voxels.shape
            and np.array_equal(self.voxels, other.voxels)
        )


# --- VVOL ---------------------------------------------------------------
# bytes 0-7   magic b"VVOL0001"
# bytes 8-19  dx, dy, dz as little-endian u32
# bytes 20-31 sx, sy, sz as little-endian f32 (mm)
# bytes 32-35 dtype code as little-endian u32 (0 mask_u8, 1 gray_f32)
# then dx*dy*dz voxels, x fastest, little-endian

VVOL_MAGIC = b"VVOL0001"
VVOL_HEADER = struct.Struct("<8s3I3fI")
assert VVOL_HEADER.size == 36


class VVOLError(ValueError):
    pass


class VVOLMagicError(VVOLError):
    pass


class VVOLTruncatedError(VVOLError):
    pass


class VVOLSizeMismatchError(VVOLError):
    pass


def encode_volume(volume: Volume) -> bytes:
    header = VVOL_HEADER.pack(
        VVOL_MAGIC, *volume.dims, *volume.spacing_mm, _DTYPE_CODES[volume.dtype]
    )
    payload = volume.voxels.astype(_NP_DTYPES[volume.dtype], copy=False).tobytes(order="F")
    return header + payload


def decode_volume(raw: bytes, source: str = "<bytes>") -> Volume:
    if len(raw) < 8 or raw[:8] != VVOL_MAGIC:
        raise VVOLMagicError(f"{source}: magic mismatch, expected {VVOL_MAGIC!r}, found {raw[:8]!r}")
    if len(raw) < VVOL_HEADER.size:
        raise VVOLTruncatedError(f"{source}: header truncated ({len(raw)} of {VVOL_HEADER.size} bytes)")
    _, dx, dy, dz, sx, sy, sz, code = VVOL_HEADER.unpack_from(raw)
    names = {v: k for k, v in _DTYPE_CODES.items()}
    if code not in names:
        raise VVOLError(f"{source}: unknown dtype code {code}")
    dtype = names[code]
    want = dx * dy * dz * _NP_DTYPES[dtype].itemsize
    have = len(raw) - VVOL_HEADER.size
    if have < want:
        raise VVOLTruncatedError(f"{source}: payload truncated ({have} of {want} bytes for dims {dx}x{dy}x{dz})")
    if have > want:
        raise VVOLSizeMismatchError(
            f"{source}: payload has {have} bytes but dims {dx}x{dy}x{dz} {dtype} need {want}"
        )
    arr = np.frombuffer(raw, dtype=_NP_DTYPES[dtype], offset=VVOL_HEADER.size)
    arr = arr.reshape((dx, dy, dz), order="F")
    return Volume(np.array(arr, dtype=arr.dtype.newbyteorder("=")), (sx, sy, sz), dtype)


def write_volume(volume: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(volume))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes(), str(path))


# --- synthetic phantom ---------------------------------------------------

TISSUE = 0.1
BONE = 0.35
SHEET_BASE = 0.7
SHEET_PEAK = 1.0


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 0.2
    sheet_thickness_vox: int = 3
    target_positive_fraction: float = 0.0018
    noise_sigma: float = 0.05
    distractor_count: int = 10
    seed: int = 0


@dataclass
class Phantom:
    image: Volume
    truth: Volume
    sheet: np.ndarray  # bool, voxels carrying contrast
    distractors: np.ndarray  # bool, speckle voxels
    contact_radius: float


def _sheet_value(d: np.ndarray, half: float) -> np.ndarray:
    return SHEET_BASE + (SHEET_PEAK - SHEET_BASE) * (1.0 - np.abs(d) / (half + 0.5))


def make_phantom(config: PhantomConfig) -> Phantom:
    """Two condyle contacts: a curved bright sheet between a dark femur above
    and a dark tibia below, in two discs (medial/lateral). Truth is the
    brightest voxel of the sheet in each column of a disc, i.e. a one voxel
    thin surface."""
    dx, dy, dz = config.dims
    t = int(config.sheet_thickness_vox)
    if t < 1:
        raise ValueError("sheet_thickness_vox must be >= 1")
    rng = np.random.default_rng(config.seed)
    n_target = config.target_positive_fraction * dx * dy * dz
    radius = float(np.sqrt(n_target / (2 * np.pi)))
    half = t / 2.0
    if radius < 1.0 or dx < 4 * radius + 8 or dy < 2 * radius + 8 or dz < t + 12:
        raise ValueError(
            f"dims {config.dims} too small to host two contact discs of radius {radius:.1f} "
            f"and a sheet {t} voxels thick"
        )

    x = np.arange(dx, dtype=np.float64)[:, None]
    y = np.arange(dy, dtype=np.float64)[None, :]
    jitter = min(2.0, (dx - 4 * radius - 8) / 8)
    cy = dy / 2 + rng.uniform(-1, 1) * min(2.0, (dy - 2 * radius - 8) / 4)
    centers = [
        (dx * 0.3 + rng.uniform(-jitter, jitter), cy),
        (dx * 0.7 + rng.uniform(-jitter, jitter), cy),
    ]
    z0 = dz / 2 + rng.uniform(-2, 2)
    tilt_x, tilt_y = rng.uniform(-0.15, 0.15, size=2)
    bend = rng.uniform(0.0, 0.3)
    ext = max(dx, dy)
    height = (
        z0
        + tilt_x * (x - dx / 2)
        + tilt_y * (y - dy / 2)
        + bend * ((x - dx / 2) ** 2 + (y - dy / 2) ** 2) / ext
    )  # (dx, dy)

    rho = np.stack([np.hypot(x - cx_, y - cy_) for cx_, cy_ in centers])  # (2, dx, dy)
    rho_min = rho.min(axis=0)
    contact = rho_min <= radius

    z = np.arange(dz, dtype=np.float64)[None, None, :]
    d = z - height[:, :, None]  # signed distance to the sheet mid-surface

    image = np.full(config.dims, TISSUE, dtype=np.float64)
    # tibial plateau spans both condyles
    plateau = (np.abs(x - dx / 2) <= 0.42 * dx) & (np.abs(y - dy / 2) <= 0.38 * dy)
    tibia = plateau[:, :, None] & (d < -half)
    # femoral condyles: bottom follows the sheet inside the contact disc and curls up outside
    condyle_r = radius + 6
    lift = np.maximum(rho_min - radius, 0.0) ** 2 / 4.0
    femur = (rho_min <= condyle_r)[:, :, None] & (d > half + lift[:, :, None])
    xx, yy, zz = np.meshgrid(
        np.arange(dx) / dx, np.arange(dy) / dy, np.arange(dz) / dz, indexing="ij"
    )
    phase = rng.uniform(0, 2 * np.pi, size=3)
    texture = 0.04 * (
        np.sin(2 * np.pi * xx + phase[0]) * np.sin(2 * np.pi * yy + phase[1])
        + np.sin(2 * np.pi * zz + phase[2])
    ) / 2
    image[tibia | femur] = BONE + texture[tibia | femur]

    sheet = contact[:, :, None] & (np.abs(d) <= half)
    image[sheet] = _sheet_value(d[sheet], half)

    truth = np.zeros(config.dims, dtype=np.uint8)
    ix, iy = np.nonzero(contact)
    iz = np.rint(height[ix, iy]).astype(int)
    ok = (iz >= 0) & (iz < dz)
    truth[ix[ok], iy[ok], iz[ok]] = 1

    distractors = _place_distractors(config, rng, sheet | tibia | femur, image)

    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=config.dims)

    frac = truth.mean()
    target = config.target_positive_fraction
    if not 0.5 * target <= frac <= 2.0 * target:
        raise ValueError(f"phantom positive fraction {frac:.5f} outside [0.5x, 2x] of target {target}")
    sp = (config.spacing_mm,) * 3
    return Phantom(Volume.gray(image, sp), Volume.mask(truth, sp), sheet, distractors, radius)


def _place_distractors(config: PhantomConfig, rng, occupied: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Bright speckles (at most 3^3 voxels) in free tissue, kept 3 voxels clear
    of the sheet, the bones and each other."""
    dims = np.array(config.dims)
    out = np.zeros(config.dims, dtype=bool)
    blocked = occupied.copy()
    placed = tries = 0
    while placed < config.distractor_count:
        tries += 1
        if tries > 1000 * max(config.distractor_count, 1):
            raise ValueError(f"could only place {placed} of {config.distractor_count} distractors")
        size = rng.integers(1, 4, size=3)
        lo = rng.integers(3, dims - size - 3)
        hi = lo + size
        m = 3
        region = tuple(slice(max(a - m, 0), b + m) for a, b in zip(lo, hi))
        if blocked[region].any():
            continue
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        out[box] = True
        blocked[region] = True
        image[box] = rng.uniform(0.85, SHEET_PEAK)
        placed += 1
    return out


def generate_phantom(config: PhantomConfig) -> tuple[Volume, Volume]:
    p = make_phantom(config)
    return p.image, p.truth


# --- patches -------------------------------------------------------------

POSITIVE = "positive_centered"
NEGATIVE = "all_negative"
TILING = "tiling"
ROTATIONS = ("none", "r90", "r180", "r270")
_ROT_AXES = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple[int, int, int]
    size: int
    kind: str
    rotation: str = "none"
    axis: str = "x"


@dataclass
class Patch:
    spec: PatchSpec
    image: np.ndarray
    truth: np.ndarray | None = None


def _child_generators(rng, n: int) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return rng.spawn(n)
    seq = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(rng)
    return [np.random.default_rng(s) for s in seq.spawn(n)]


def rotate_patch(image: np.ndarray, truth: np.ndarray | None, rotation: str, axis: str = "x"):
    """Voxel-exact quarter-turn rotation about ``axis`` (default x: the y-z plane)."""
    if rotation not in ROTATIONS:
        raise ValueError(f"rotation must be one of {ROTATIONS}, got {rotation!r}")
    if axis not in _ROT_AXES:
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    if image.ndim != 3 or len(set(image.shape)) != 1:
        raise ValueError(f"rotation needs a cubic patch, got shape {image.shape}")
    if truth is not None and truth.shape != image.shape:
        raise ValueError(f"truth shape {truth.shape} differs from image {image.shape}")
    k = ROTATIONS.index(rotation)
    axes = _ROT_AXES[axis]
    img = np.ascontiguousarray(np.rot90(image, k, axes))
    tr = None if truth is None else np.ascontiguousarray(np.rot90(truth, k, axes))
    return img, tr


def _extract(vol: np.ndarray, origin, size: int) -> np.ndarray:
    x, y, z = origin
    return vol[x : x + size, y : y + size, z : z + size].copy()


def sample_training_patches(
    image: Volume | np.ndarray,
    truth: Volume | np.ndarray,
    count: int = 4,
    patch_size: int = 32,
    positive_ratio: float = 0.7,
    rng=0,
    augment: bool = False,
    axis: str = "x",
    max_retries: int = 1000,
) -> list[Patch]:
    """Draw ``count`` patches, each independently positive-centered with
    probability ``positive_ratio`` and otherwise all-negative.

    Every patch uses its own child stream of ``rng`` (seed, SeedSequence or
    Generator), so results do not depend on extraction order.
    """
    img = image.voxels if isinstance(image, Volume) else np.asarray(image)
    tru = truth.voxels if isinstance(truth, Volume) else np.asarray(truth)
    if img.shape != tru.shape:
        raise ValueError(f"image dims {img.shape} differ from truth dims {tru.shape}")
    if patch_size > min(img.shape):
        raise ValueError(f"patch size {patch_size} exceeds volume dims {img.shape}")
    if not 0.0 <= positive_ratio <= 1.0:
        raise ValueError(f"positive_ratio must lie in [0, 1], got {positive_ratio}")
    positives = np.argwhere(tru > 0)
    hi = np.array(img.shape) - patch_size
    half = patch_size // 2
    warned = False
    patches = []
    for child in _child_generators(rng, count):
        want_pos = child.random() < positive_ratio
        if want_pos and len(positives) == 0:
            if not warned:
                log.warning("no positive voxels; positive-centered patches fall back to all-negative")
                warned = True
            want_pos = False
        if want_pos:
            centre = positives[child.integers(len(positives))]
            origin = tuple(int(v) for v in np.clip(centre - half, 0, hi))
            kind = POSITIVE
        else:
            for _ in range(max_retries):
                origin = tuple(int(child.integers(0, h + 1)) for h in hi)
                if not _extract(tru, origin, patch_size).any():
                    break
            else:
                raise RuntimeError(f"no all-negative patch found in {max_retries} draws")
            kind = NEGATIVE
        rotation = ROTATIONS[child.integers(4)] if augment else "none"
        pi = _extract(img, origin, patch_size)
        pt = _extract(tru, origin, patch_size)
        if rotation != "none":
            pi, pt = rotate_patch(pi, pt, rotation, axis)
        patches.append(Patch(PatchSpec(origin, patch_size, kind, rotation, axis), pi, pt))
    return patches


# --- tiling --------------------------------------------------------------


def padded_dims(dims: Sequence[int], patch_size: int) -> tuple[int, int, int]:
    return tuple(-(-int(d) // patch_size) * patch_size for d in dims)


def tile_volume(volume, patch_size: int) -> list[PatchSpec]:
    """Disjoint cubic tiles covering ``volume`` (a Volume, array or dims tuple)
    zero-padded up to the next multiple of ``patch_size``."""
    if isinstance(volume, Volume):
        dims = volume.dims
    elif isinstance(volume, np.ndarray):
        dims = volume.shape
    else:
        dims = tuple(volume)
    if patch_size < 1:
        raise ValueError("patch_size must be positive")
    pd = padded_dims(dims, patch_size)
    return [
        PatchSpec((x, y, z), patch_size, TILING)
        for x in range(0, pd[0], patch_size)
        for y in range(0, pd[1], patch_size)
        for z in range(0, pd[2], patch_size)
    ]


def pad_volume(volume: Volume, patch_size: int) -> np.ndarray:
    """Pad up to a multiple of ``patch_size``: 0 for masks, the minimum for gray."""
    v = volume.voxels
    fill = 0 if volume.dtype == MASK_U8 else v.min()
    pd = padded_dims(v.shape, patch_size)
    return np.pad(v, [(0, p - d) for p, d in zip(pd, v.shape)], constant_values=fill)


def extract_tiles(volume: Volume, patch_size: int) -> list[Patch]:
    padded = pad_volume(volume, patch_size)
    return [Patch(s, _extract(padded, s.origin, s.size)) for s in tile_volume(volume, patch_size)]


def stitch(patches: Sequence[Patch], dims: Sequence[int], dtype=None) -> np.ndarray:
    """Write tiles back into place and crop the padding.

    The tiles must partition the padded grid exactly.
    """
    if not patches:
        raise ValueError("stitch: no patches")
    size = patches[0].spec.size
    pd = padded_dims(dims, size)
    expected = {s.origin for s in tile_volume(tuple(dims), size)}
    seen = set()
    out = np.zeros(pd, dtype=dtype or patches[0].image.dtype)
    for p in patches:
        o = p.spec.origin
        if p.spec.size != size or p.image.shape != (size,) * 3:
            raise ValueError(f"stitch: tile at {o} has size {p.image.shape}, expected {size}^3")
        if o not in expected:
            raise ValueError(f"stitch: tile origin {o} not on the {size}-grid of padded dims {pd}")
        if o in seen:
            raise ValueError(f"stitch: duplicate tile at {o}")
        seen.add(o)
        out[o[0] : o[0] + size, o[1] : o[1] + size, o[2] : o[2] + size] = p.image
    if seen != expected:
        raise ValueError(f"stitch: {len(expected - seen)} tiles missing for dims {tuple(dims)}")
    return out[: dims[0], : dims[1], : dims[2]].copy()


# --- splits --------------------------------------------------------------


def split_volumes(
    subject_ids: Sequence,
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    names: Sequence[str] = ("train", "val", "test"),
) -> dict[str, list[int]]:
    """Assign volume indices to splits so that no subject spans two splits.

    Subjects are shuffled, then dealt in order to each split until its
    rounded volume quota is met; the last split takes the remainder.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {list(fractions)}")
    n = len(subject_ids)
    groups: dict = {}
    for i, s in enumerate(subject_ids):
        groups.setdefault(s, []).append(i)
    order = list(groups)
    rng = np.random.default_rng(seed)
    order = [order[i] for i in rng.permutation(len(order))]
    quotas = [int(round(f * n)) for f in fractions[:-1]]
    out: dict[str, list[int]] = {name: [] for name in names}
    k = 0
    for name, quota in zip(names[:-1], quotas):
        while k < len(order) and len(out[name]) < quota:
            out[name] += groups[order[k]]
            k += 1
    for subj in order[k:]:
        out[names[-1]] += groups[subj]
    for name in names:
        out[name].sort()
    return out
