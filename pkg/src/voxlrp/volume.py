"""Volumetric I/O, preprocessing, and the synthetic phantom dataset.

The file container is a deliberately small subset of NIfTI-1: uncompressed
single-file `.nii`, little-endian, 348-byte header, 3-D payload in one of
four datatypes.  In-memory volumes are row-major (D, H, W) float64 arrays;
on disk the fastest-varying axis comes first, so header dims are written
as (W, H, D) and the raw buffer round-trips bit for bit.

Phantoms are ellipsoidal "brains" with a bright rim whose thickness depends
on the class, standing in for a restricted clinical dataset: the rim is the
known discriminative structure, so a ground-truth mask of where the classes
differ comes for free.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError, NiftiError, PreprocessError
from .tensor import Tensor
from .trainer import Dataset, Sample

# ---------------------------------------------------------------------------
# Volume container


@dataclass
class Volume:
    """A (D, H, W) float64 volume with voxel size in mm and an optional mask."""

    data: Tensor
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mask: np.ndarray | None = None
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ConfigError(f"volume data must be 3-D, got {self.data.ndim} axes")
        if any(v <= 0 for v in self.voxel_size_mm):
            raise ConfigError(f"voxel sizes must be positive, got {self.voxel_size_mm}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise ConfigError(
                    f"mask shape {self.mask.shape} does not match data {self.data.shape}"
                )


# ---------------------------------------------------------------------------
# NIfTI-1 subset

_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_DTYPE_CODES = {"uint8": (2, 8), "int16": (4, 16), "float32": (16, 32), "float64": (64, 64)}
_HEADER_SIZE = 348
_VOX_OFFSET = 352


def read_nifti(path: str | Path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 volume.

    Applies scl_slope/scl_inter scaling and returns float64 data.  Raises
    NiftiError naming the offending header field on any format violation.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"file is {len(raw)} bytes, header needs {_HEADER_SIZE}")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HEADER_SIZE:
        raise NiftiError(
            "sizeof_hdr", f"expected {_HEADER_SIZE}, got {sizeof_hdr} (not little-endian NIfTI-1?)"
        )
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic != b"n+1\x00":
        raise NiftiError("magic", f"expected b'n+1\\x00', got {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError("dim", f"only 3-D volumes supported, dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise NiftiError("dim", f"non-positive extents {dim[1:4]}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiError("datatype", f"unsupported code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset)
    if offset < _HEADER_SIZE:
        raise NiftiError("vox_offset", f"offset {offset} overlaps the header")
    slope, inter = struct.unpack_from("<2f", raw, 112)
    dt = np.dtype(_DTYPES[datatype]).newbyteorder("<")
    count = nx * ny * nz
    if len(raw) - offset < count * dt.itemsize:
        raise NiftiError("payload", f"truncated: need {count * dt.itemsize} bytes after offset")
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    data = flat.reshape(nz, ny, nx).astype(np.float64)
    if slope == 0.0:
        slope = 1.0
    if (slope, inter) != (1.0, 0.0):
        data = data * slope + inter
    voxel = tuple(p if p > 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    return Volume(data, voxel, subject_id=path.stem)


def write_nifti(volume: Volume, path: str | Path, dtype: str = "float64") -> None:
    """Write the same NIfTI-1 subset, little-endian, vox_offset 352.

    Integer dtypes require already-integral values within range, so that a
    write/read round trip is exact for every supported datatype.
    """
    if dtype not in _DTYPE_CODES:
        raise NiftiError("datatype", f"unsupported dtype {dtype!r}")
    code, bitpix = _DTYPE_CODES[dtype]
    data = volume.data
    np_dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    if dtype in ("uint8", "int16"):
        info = np.iinfo(np_dtype)
        if np.any(data != np.round(data)) or data.min() < info.min or data.max() > info.max:
            raise NiftiError("datatype", f"values not representable as {dtype}")
    payload = np.ascontiguousarray(data, dtype=np_dtype).tobytes()
    d, h, w = data.shape
    vs = volume.voxel_size_mm
    hdr = bytearray(_VOX_OFFSET)  # 348-byte header + 4-byte extension flag (zeros)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, vs[2], vs[1], vs[0], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    descrip = b"voxlrp volume"
    struct.pack_into(f"<{len(descrip)}s", hdr, 148, descrip)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    Path(path).write_bytes(bytes(hdr) + payload)


# ---------------------------------------------------------------------------
# Preprocessing


def _center_crop_pad(arr: np.ndarray, target: tuple[int, ...], value=0) -> np.ndarray:
    out = arr
    for axis, tgt in enumerate(target):
        cur = out.shape[axis]
        if cur > tgt:
            start = (cur - tgt) // 2
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + tgt)
            out = out[tuple(sl)]
        elif cur < tgt:
            before = (tgt - cur) // 2
            width = [(0, 0)] * out.ndim
            width[axis] = (before, tgt - cur - before)
            out = np.pad(out, width, constant_values=value)
    return out


_STD_FLOOR = 1e-8
_MIN_MASK_VOXELS = 10
NORMALIZE_MODES = ("zscore", "none")


def preprocess(
    volume: Volume,
    target_dims: tuple[int, int, int] = (128, 96, 96),
    normalize: str = "zscore",
) -> Tensor:
    """Center-crop/zero-pad to `target_dims` and normalize within the brain mask.

    Voxels outside the mask are set to zero; without an explicit mask, the
    nonzero voxels serve as one.  `normalize="zscore"` standardizes by the
    in-mask mean and std; `"none"` keeps intensities as stored, for inputs
    that are already calibrated (synthetic phantoms, where per-subject
    statistics would themselves carry class information).  Returns a
    (1, D, H, W) tensor ready for the network.
    """
    if normalize not in NORMALIZE_MODES:
        raise ConfigError(f"normalize must be one of {NORMALIZE_MODES}, got {normalize!r}")
    data = _center_crop_pad(volume.data, target_dims)
    mask = volume.mask if volume.mask is not None else volume.data != 0
    mask = _center_crop_pad(mask, target_dims, value=False)
    n_in = int(mask.sum())
    if n_in < _MIN_MASK_VOXELS:
        raise PreprocessError(f"mask keeps only {n_in} voxels (need >= {_MIN_MASK_VOXELS})")
    if normalize == "zscore":
        values = data[mask]
        std = max(float(values.std()), _STD_FLOOR)
        out = np.where(mask, (data - float(values.mean())) / std, 0.0)
    else:
        out = np.where(mask, data, 0.0)
    return out[None]


# ---------------------------------------------------------------------------
# Synthetic phantoms

_RADIUS_FRACTION = 0.38
_RADIUS_JITTER = 0.05


@dataclass(frozen=True)
class PhantomSpec:
    """One class's phantom recipe: ellipsoid with a bright rim of given thickness."""

    dims: tuple[int, int, int] = (32, 24, 24)
    class_label: str = "term"
    rim_thickness: int = 1
    rim_intensity: float = 2.5
    interior_intensity: float = 1.0
    noise_sigma: float = 0.1

    def __post_init__(self):
        if min(self.dims) < 8:
            raise ConfigError(f"phantom dims must be >= 8 per axis, got {self.dims}")
        if self.rim_thickness < 1:
            raise ConfigError(f"rim_thickness must be >= 1, got {self.rim_thickness}")
        if self.rim_intensity < 0 or self.interior_intensity < 0:
            raise ConfigError("intensities must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        min_radius = _RADIUS_FRACTION * (1 - _RADIUS_JITTER) * min(self.dims)
        if self.rim_thickness >= min_radius:
            raise ConfigError(
                f"dims {self.dims} too small for rim thickness {self.rim_thickness}"
            )


def default_class_specs(
    dims: tuple[int, int, int] = (32, 24, 24),
    rim_term: int = 1,
    rim_preterm: int = 3,
    rim_intensity: float = 2.5,
    interior_intensity: float = 1.0,
    noise_sigma: float = 0.1,
) -> dict[str, PhantomSpec]:
    """Two classes differing only in rim thickness (thin = term, thick = preterm)."""
    common = dict(
        dims=tuple(dims),
        rim_intensity=rim_intensity,
        interior_intensity=interior_intensity,
        noise_sigma=noise_sigma,
    )
    return {
        "term": PhantomSpec(class_label="term", rim_thickness=rim_term, **common),
        "preterm": PhantomSpec(class_label="preterm", rim_thickness=rim_preterm, **common),
    }


def _phantom_clean(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Noise-free phantom image and its brain mask."""
    dims = spec.dims
    radii = np.array(dims, dtype=np.float64) * _RADIUS_FRACTION
    radii *= rng.uniform(1 - _RADIUS_JITTER, 1 + _RADIUS_JITTER, size=3)
    grids = np.meshgrid(
        *[np.arange(n, dtype=np.float64) - (n - 1) / 2 for n in dims], indexing="ij"
    )
    dist = np.sqrt(sum((g / r) ** 2 for g, r in zip(grids, radii)))
    brain = dist <= 1.0
    image = np.zeros(dims)
    image[brain] = spec.interior_intensity
    rim = brain & (dist > 1.0 - spec.rim_thickness / radii.mean())
    image[rim] = spec.rim_intensity
    return image, brain


def phantom_volumes(
    n_per_class: int,
    dims: tuple[int, int, int] = (32, 24, 24),
    seed: int = 0,
    class_specs: dict[str, PhantomSpec] | None = None,
) -> tuple[list[tuple[Volume, str]], dict[str, np.ndarray]]:
    """Raw noisy phantom volumes plus the ground-truth discriminative masks.

    Deterministic per (seed, class index, subject index).  The ground-truth
    mask per class is the set of voxels where the noise-free class means
    differ, i.e. exactly the rim-thickness difference region.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    specs = class_specs if class_specs is not None else default_class_specs(dims)
    if len(specs) < 2:
        raise ConfigError("need at least two phantom classes")
    volumes: list[tuple[Volume, str]] = []
    clean_mean: dict[str, Tensor] = {}
    for ci, (name, spec) in enumerate(specs.items()):
        if spec.dims != tuple(dims):
            raise ConfigError(f"class {name!r} dims {spec.dims} differ from requested {dims}")
        acc = np.zeros(dims)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, ci, i])
            clean, brain = _phantom_clean(spec, rng)
            acc += clean
            image = clean
            if spec.noise_sigma > 0:
                image = clean + rng.normal(0.0, spec.noise_sigma, size=dims)
            volumes.append(
                (Volume(image, mask=brain, subject_id=f"{name}_{i:03d}"), name)
            )
        clean_mean[name] = acc / n_per_class
    means = list(clean_mean.values())
    diff = np.zeros(dims, dtype=bool)
    for other in means[1:]:
        diff |= means[0] != other
    gt_masks = {name: diff.copy() for name in specs}
    return volumes, gt_masks


def phantom_dataset(
    n_per_class: int,
    dims: tuple[int, int, int] = (32, 24, 24),
    seed: int = 0,
    class_specs: dict[str, PhantomSpec] | None = None,
) -> Dataset:
    """Training-ready phantom dataset with ground-truth masks.

    Phantom intensities are calibrated by construction, so preprocessing
    keeps them as stored (normalize="none"): per-subject standardization of
    a brightness-separable signal would smear class information over every
    in-mask voxel and defeat the localization ground truth.
    """
    volumes, gt_masks = phantom_volumes(n_per_class, dims, seed, class_specs)
    class_names = tuple(dict.fromkeys(label for _, label in volumes))
    samples = [
        Sample(
            preprocess(vol, tuple(dims), normalize="none"),
            class_names.index(label),
            vol.subject_id,
        )
        for vol, label in volumes
    ]
    return Dataset(samples, class_names, gt_masks)


# ---------------------------------------------------------------------------
# Dataset manifest: one tab-separated record per subject
#
#   subject_id <TAB> label <TAB> volume-path [<TAB> mask-path]
#
# '-' stands for "no label" / "no mask".  Paths are relative to the
# manifest's directory.  A `# classes: a,b` comment pins the label order.


@dataclass
class ManifestEntry:
    subject_id: str
    label: str | None
    volume_path: Path
    mask_path: Path | None = None


def write_manifest(
    entries: list[ManifestEntry],
    path: str | Path,
    class_names: tuple[str, ...] | None = None,
    comments: list[str] | None = None,
) -> None:
    path = Path(path)
    lines = ["# voxlrp dataset manifest"]
    if class_names:
        lines.append("# classes: " + ",".join(class_names))
    for c in comments or []:
        lines.append(f"# {c}")
    for e in entries:
        mask = e.mask_path.name if e.mask_path is not None else "-"
        label = e.label if e.label is not None else "-"
        lines.append(f"{e.subject_id}\t{label}\t{e.volume_path.name}\t{mask}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> tuple[list[ManifestEntry], tuple[str, ...] | None]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    class_names: tuple[str, ...] | None = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("classes:"):
                class_names = tuple(
                    s.strip() for s in body[len("classes:") :].split(",") if s.strip()
                )
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
        subject_id, label, vol = parts[0], parts[1], parts[2]
        mask = parts[3] if len(parts) == 4 else "-"
        entries.append(
            ManifestEntry(
                subject_id=subject_id,
                label=None if label == "-" else label,
                volume_path=path.parent / vol,
                mask_path=None if mask == "-" else path.parent / mask,
            )
        )
    if not entries:
        raise ManifestError(f"{path}: no records")
    return entries, class_names


def load_entry_volume(entry: ManifestEntry) -> Volume:
    vol = read_nifti(entry.volume_path)
    vol.subject_id = entry.subject_id
    if entry.mask_path is not None:
        mask_vol = read_nifti(entry.mask_path)
        if mask_vol.data.shape != vol.data.shape:
            raise ManifestError(
                f"{entry.subject_id}: mask shape {mask_vol.data.shape} != volume {vol.data.shape}"
            )
        vol.mask = mask_vol.data != 0
    return vol


def load_dataset(
    manifest_path: str | Path,
    target_dims: tuple[int, int, int],
    class_names: tuple[str, ...] | None = None,
    normalize: str = "zscore",
) -> Dataset:
    """Load and preprocess every labeled record of a manifest."""
    entries, manifest_classes = read_manifest(manifest_path)
    names = class_names or manifest_classes
    if names is None:
        labels = sorted({e.label for e in entries if e.label is not None})
        names = tuple(labels)
    samples = []
    for e in entries:
        if e.label is None:
            raise ManifestError(f"{e.subject_id}: unlabeled record in a training manifest")
        if e.label not in names:
            raise ManifestError(f"{e.subject_id}: label {e.label!r} not in classes {names}")
        vol = load_entry_volume(e)
        samples.append(
            Sample(preprocess(vol, target_dims, normalize), names.index(e.label), e.subject_id)
        )
    return Dataset(samples, tuple(names))
