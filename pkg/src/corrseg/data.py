"""Synthetic multi-modal phantoms, preprocessing and volume file I/O.

Each case is a set of nested ellipsoids (edema > core > enhancing)
inside a brain ellipsoid, rendered into four modality volumes whose
contrast mimics the clinical roles of the sequences: FLAIR separates
the whole tumor from brain sharply, T1c separates core/enhancing,
T1 is nearly tumor-blind and T2 carries partial redundant contrast.

Volumes travel in the ``MMSV`` binary container (little-endian):

    offset  size  field
    0       4     magic b"MMSV"
    4       2     format version (u16) = 1
    6       12    D, H, W as u32
    18      1     modality count (u8)
    19      1     labels present (u8, 0/1)
    20      8     generator seed (i64)
    28      2     case id length (u16)
    30      n     case id, UTF-8
    ...           one f32 volume of D*H*W per modality, fixed order
    ...           u8 label volume of D*H*W when present
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (ConfigurationError, DataValidationError,
                     PreconditionError, VolumeFormatError, VolumeIOError,
                     VolumeShapeError, VolumeTruncatedError,
                     VolumeVersionError)

MODALITIES = ("FLAIR", "T1", "T1c", "T2")
GENERATOR_VERSION = 1
VALID_SIZES = (16, 32, 64)

MAGIC = b"MMSV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIBBqH")  # up to the case-id bytes
_MAX_EXTENT = 4096

# per-modality intensity of (air, brain, edema, necrotic core, enhancing).
# FLAIR lifts every tumor tissue far above brain (whole-tumor contrast)
# but also grades edema vs core, so no single class owns the whole
# tumor's FLAIR signature; T1c separates core (dark) and enhancing
# (bright); T1 is nearly tumor-blind; T2 carries partial redundancy.
TISSUE_INTENSITY = {
    "FLAIR": (0.05, 0.25, 1.15, 0.85, 0.75),
    "T1":    (0.05, 0.60, 0.52, 0.45, 0.50),
    "T1c":   (0.05, 0.45, 0.55, 0.15, 0.95),
    "T2":    (0.05, 0.40, 0.80, 0.58, 0.50),
}
# the intensity step each modality relies on; noise sigma is 10% of it
CONTRAST_STEP = {"FLAIR": 0.40, "T1": 0.10, "T1c": 0.40, "T2": 0.40}
NOISE_FRACTION = 0.1
BIAS_FIELD_AMPLITUDE = 0.08


@dataclass
class VolumeCase:
    """One subject: four modality volumes, labels and provenance."""

    case_id: str
    modalities: np.ndarray   # [4, D, H, W] float32
    labels: np.ndarray       # [D, H, W] uint8, values in {0,1,2,3}
    seed: int = 0

    def __post_init__(self):
        if self.modalities.shape[0] != len(MODALITIES):
            raise DataValidationError(
                f"expected {len(MODALITIES)} modalities, "
                f"got {self.modalities.shape[0]}")
        if self.modalities.shape[1:] != self.labels.shape:
            raise DataValidationError(
                f"modality shape {self.modalities.shape[1:]} != label "
                f"shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() > 3:
            raise DataValidationError("labels must lie in {0,1,2,3}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape


class ModalitySubset:
    """Nonempty set of available modalities, one bit per modality in
    FLAIR, T1, T1c, T2 order ("1011" means T1 missing)."""

    def __init__(self, flags):
        flags = tuple(bool(f) for f in flags)
        if len(flags) != len(MODALITIES):
            raise PreconditionError(
                f"need {len(MODALITIES)} flags, got {len(flags)}")
        if not any(flags):
            raise PreconditionError("at least one modality must be present")
        self.flags = flags

    @classmethod
    def from_bits(cls, bits: str) -> "ModalitySubset":
        if len(bits) != 4 or any(c not in "01" for c in bits):
            raise PreconditionError(
                f"subset must be 4 bits of 0/1, got {bits!r}")
        return cls(c == "1" for c in bits)

    @classmethod
    def full(cls) -> "ModalitySubset":
        return cls((True,) * 4)

    @property
    def bits(self) -> str:
        return "".join("1" if f else "0" for f in self.flags)

    def __contains__(self, modality: int) -> bool:
        return self.flags[modality]

    def __eq__(self, other) -> bool:
        return isinstance(other, ModalitySubset) and self.flags == other.flags

    def __hash__(self):
        return hash(self.flags)

    def __repr__(self):
        present = [m for m, f in zip(MODALITIES, self.flags) if f]
        return f"ModalitySubset({'+'.join(present)})"


# order of the fifteen combinations in the robustness report
SUBSET_SWEEP_ORDER = tuple(ModalitySubset.from_bits(b) for b in (
    "0001", "0010", "0100", "1000",
    "0011", "0110", "1100", "0101", "1001", "1010",
    "1110", "1101", "1011", "0111",
    "1111",
))


# ---------------------------------------------------------------------------
# synthesis


def _ellipsoid_mask(shape, center, axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, axes):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def _smooth_field(rng, shape) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4, 4))
    return _resize(coarse, shape, order=1)


def _resize(vol: np.ndarray, target, order: int) -> np.ndarray:
    coords = np.meshgrid(
        *[(np.arange(t) + 0.5) * s / t - 0.5
          for t, s in zip(target, vol.shape)],
        indexing="ij")
    return map_coordinates(vol.astype(np.float64), coords, order=order,
                           mode="nearest")


def generate_case(seed: int, size: int,
                  degrade_prob: float = 0.0) -> VolumeCase:
    """Deterministic synthetic case: nested ellipsoid tumor phantom.

    With ``degrade_prob`` > 0 a case may carry one low-quality
    non-FLAIR modality (tumor contrast squeezed toward brain), mimicking
    the variable scan quality that motivates cross-modality models.
    The default of 0 keeps the plain construction and its random
    stream untouched.
    """
    if size not in VALID_SIZES:
        raise ConfigurationError(
            f"size must be one of {VALID_SIZES}, got {size}")
    rng = np.random.Generator(
        np.random.PCG64([GENERATOR_VERSION, size, seed & 0xFFFFFFFF]))
    shape = (size, size, size)
    half = size / 2.0

    brain_c = half + rng.uniform(-0.03, 0.03, 3) * size
    brain_ax = rng.uniform(0.40, 0.45, 3) * size
    brain = _ellipsoid_mask(shape, brain_c, brain_ax)

    # tumor tissue volumes are kept comparable (rough thirds of the
    # whole tumor); a class far smaller than its siblings cannot win
    # against the joint dice objective's early downward pressure
    edema_c = brain_c + rng.uniform(-0.10, 0.10, 3) * size
    edema_ax = np.maximum(rng.uniform(0.24, 0.30, 3) * size, 3.2)
    edema = _ellipsoid_mask(shape, edema_c, edema_ax) & brain

    core_c = edema_c + rng.uniform(-0.10, 0.10, 3) * edema_ax
    core_ax = np.maximum(edema_ax * rng.uniform(0.84, 0.92, 3), 2.6)
    core = _ellipsoid_mask(shape, core_c, core_ax) & edema

    enh_c = core_c + rng.uniform(-0.10, 0.10, 3) * core_ax
    enh_ax = np.maximum(core_ax * rng.uniform(0.76, 0.86, 3), 2.2)
    enh = _ellipsoid_mask(shape, enh_c, enh_ax) & core

    labels = np.zeros(shape, dtype=np.uint8)
    labels[edema] = 2
    labels[core] = 1
    labels[enh] = 3

    degraded = -1
    if degrade_prob > 0 and rng.random() < degrade_prob:
        degraded = int(rng.integers(1, len(MODALITIES)))  # never FLAIR
        degrade_factor = rng.uniform(0.15, 0.35)

    tissue_maps = [~brain, brain & ~edema, edema & ~core, core & ~enh, enh]
    volumes = np.empty((len(MODALITIES),) + shape, dtype=np.float32)
    for m, name in enumerate(MODALITIES):
        means = np.array(TISSUE_INTENSITY[name])
        means = means + rng.uniform(-0.02, 0.02, means.shape)
        if m == degraded:
            # squeeze tumor tissues toward brain intensity; the noise
            # floor stays, so the channel turns near-uninformative
            means[2:] = means[1] + (means[2:] - means[1]) * degrade_factor
        vol = np.zeros(shape, dtype=np.float64)
        for mask, mean in zip(tissue_maps, means):
            vol[mask] = mean
        vol *= 1.0 + BIAS_FIELD_AMPLITUDE * _smooth_field(rng, shape)
        vol += rng.normal(0.0, NOISE_FRACTION * CONTRAST_STEP[name], shape)
        volumes[m] = vol.astype(np.float32)

    return VolumeCase(case_id=f"case_{seed:05d}", modalities=volumes,
                      labels=labels, seed=seed)


# ---------------------------------------------------------------------------
# preprocessing


def normalize(volume: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance rescaling of one modality volume."""
    vol = np.asarray(volume, dtype=np.float64)
    std = vol.std()
    if std == 0:
        raise DataValidationError("cannot normalize a constant volume")
    return ((vol - vol.mean()) / std).astype(np.float32)


def crop_resize(volume: np.ndarray, target: int,
                is_labels: bool = False) -> np.ndarray:
    """Center-crop to the bounding cube, then resize to target^3.

    Intensities are interpolated trilinearly, labels nearest-neighbor.
    """
    vol = np.asarray(volume)
    side = min(vol.shape)
    if target > side:
        raise PreconditionError(
            f"target {target} exceeds croppable extent {side}")
    starts = [(s - side) // 2 for s in vol.shape]
    cube = vol[tuple(slice(st, st + side) for st in starts)]
    if cube.shape == (target,) * 3:
        return cube.copy()
    out = _resize(cube, (target,) * 3, order=0 if is_labels else 1)
    return out.astype(vol.dtype) if is_labels else out.astype(np.float32)


def mask_volumes(volumes: np.ndarray, subset: ModalitySubset) -> np.ndarray:
    """Zero-fill the missing modalities of a [4,D,H,W] stack."""
    out = np.array(volumes, copy=True)
    for m in range(len(MODALITIES)):
        if m not in subset:
            out[m] = 0.0
    return out


def apply_modality_mask(case: VolumeCase,
                        subset: ModalitySubset) -> np.ndarray:
    """Normalized [4,D,H,W] network input with missing modalities zeroed."""
    stack = np.stack([normalize(case.modalities[m])
                      for m in range(len(MODALITIES))])
    return mask_volumes(stack, subset)


# ---------------------------------------------------------------------------
# MMSV container


def write_volume(path, obj, case_id: str | None = None) -> None:
    """Write a :class:`VolumeCase`, or a bare label / intensity volume."""
    if isinstance(obj, VolumeCase):
        case = obj
        mods, labels, seed, cid = (case.modalities, case.labels, case.seed,
                                   case.case_id)
    elif isinstance(obj, np.ndarray) and obj.ndim == 3:
        cid = case_id or "volume"
        if np.issubdtype(obj.dtype, np.integer):
            mods, labels, seed = None, obj, 0
        else:
            mods, labels, seed = obj[None], None, 0
    else:
        raise PreconditionError(
            f"cannot serialize object of type {type(obj).__name__}")

    shape = labels.shape if labels is not None else mods.shape[1:]
    n_mod = 0 if mods is None else mods.shape[0]
    cid_bytes = cid.encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *shape, n_mod,
                          int(labels is not None), seed, len(cid_bytes))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(cid_bytes)
        if mods is not None:
            for m in range(n_mod):
                fh.write(np.ascontiguousarray(mods[m], dtype="<f4").tobytes())
        if labels is not None:
            if labels.min() < 0 or labels.max() > 3:
                raise DataValidationError("labels must lie in {0,1,2,3}")
            fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_volume(path):
    """Read an MMSV file; full cases return :class:`VolumeCase`,
    label-only files the label array, single-modality files the volume."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise VolumeTruncatedError(f"{path}: shorter than a header")
    magic, version, d, h, w, n_mod, has_labels, seed, cid_len = \
        _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeVersionError(f"{path}: unsupported version {version}")
    if min(d, h, w) < 1 or max(d, h, w) > _MAX_EXTENT:
        raise VolumeShapeError(f"{path}: invalid dimensions {(d, h, w)}")
    if n_mod not in (0, 1, len(MODALITIES)) or has_labels not in (0, 1):
        raise VolumeShapeError(
            f"{path}: invalid layout (modalities={n_mod}, "
            f"labels={has_labels})")
    vox = d * h * w
    expected = (_HEADER.size + cid_len + 4 * vox * n_mod
                + vox * has_labels)
    if len(blob) < expected:
        raise VolumeTruncatedError(
            f"{path}: {len(blob)} bytes, header promises {expected}")
    if len(blob) > expected:
        raise VolumeShapeError(
            f"{path}: {len(blob) - expected} trailing bytes")

    pos = _HEADER.size
    case_id = blob[pos:pos + cid_len].decode("utf-8")
    pos += cid_len
    mods = None
    if n_mod:
        mods = np.frombuffer(blob, dtype="<f4", count=vox * n_mod,
                             offset=pos).reshape(n_mod, d, h, w).copy()
        pos += 4 * vox * n_mod
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype=np.uint8, count=vox,
                               offset=pos).reshape(d, h, w).copy()

    if n_mod == len(MODALITIES) and labels is not None:
        return VolumeCase(case_id=case_id, modalities=mods, labels=labels,
                          seed=seed)
    if labels is not None and mods is None:
        return labels
    if mods is not None and labels is None:
        return mods[0]
    raise VolumeShapeError(f"{path}: unsupported content combination")


def expected_file_size(size: int, case_id: str) -> int:
    """Exact byte length of a full 4-modality labeled case file."""
    vox = size ** 3
    return (_HEADER.size + len(case_id.encode("utf-8"))
            + 4 * vox * len(MODALITIES) + vox)


# ---------------------------------------------------------------------------
# dataset manifest

SPLITS = ("train", "val", "test")


def assign_splits(n_cases: int, seed: int) -> list[str]:
    """Seeded 70/10/20 train/val/test assignment."""
    if n_cases < 1:
        raise PreconditionError("need at least one case")
    rng = np.random.Generator(np.random.PCG64([seed, n_cases]))
    order = rng.permutation(n_cases)
    n_train = int(n_cases * 0.7)
    n_val = int(n_cases * 0.1)
    out = ["test"] * n_cases
    for i in order[:n_train]:
        out[i] = "train"
    for i in order[n_train:n_train + n_val]:
        out[i] = "val"
    return out


def write_manifest(path, entries: list[tuple[str, str]]) -> None:
    """Entries are (split, relative path) pairs, written one per line."""
    lines = []
    for split, rel in entries:
        if split not in SPLITS:
            raise PreconditionError(f"unknown split {split!r}")
        lines.append(f"{split}\t{rel}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[tuple[str, Path]]:
    """Parse a manifest; paths resolve relative to the manifest file."""
    base = Path(path).parent
    entries = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise VolumeIOError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[0] not in SPLITS:
            raise DataValidationError(
                f"{path}:{lineno}: expected '<split>\\t<path>', got {line!r}")
        entries.append((parts[0], base / parts[1]))
    if not entries:
        raise DataValidationError(f"{path}: empty manifest")
    return entries


def load_split(path, split: str) -> list[VolumeCase]:
    return [read_volume(p) for s, p in read_manifest(path) if s == split]
