"""Volumes, preprocessing, augmentation, patching and the synthetic nodule generator."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .io import DataError, read_annotations, read_mhd, write_annotations, write_mhd

HU_MIN, HU_MAX = -1200.0, 600.0

# axis orders taking (z, y, x) arrays to each cross-section's slicing frame
REORIENT = {"axial": (0, 1, 2), "coronal": (1, 0, 2), "sagittal": (2, 0, 1)}


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    intensities: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lung_mask: np.ndarray | None = None
    annotations: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    irrelevant: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    series_id: str = ""

    def __post_init__(self):
        vol = np.asarray(self.intensities)
        if vol.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {vol.shape}")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("intensities", _frozen(vol))
        set_("spacing", _frozen(np.asarray(self.spacing, dtype=np.float64)))
        set_("origin", _frozen(np.asarray(self.origin, dtype=np.float64)))
        if self.lung_mask is not None:
            if np.shape(self.lung_mask) != vol.shape:
                raise DataError("lung mask shape differs from the volume")
            set_("lung_mask", _frozen(np.asarray(self.lung_mask, dtype=bool)))
        for name in ("annotations", "irrelevant"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 4)
            if np.any(arr[:, 3] <= 0):
                raise DataError(f"{name}: diameters must be positive")
            if np.any(arr[:, :3] < 0) or np.any(arr[:, :3] > np.array(vol.shape) - 1):
                raise DataError(f"{name}: centre outside the volume")
            set_(name, _frozen(arr))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape

    def with_(self, **changes) -> "Volume":
        return replace(self, **changes)


def load_mhd(header_path, series_id: str | None = None) -> Volume:
    arr, spacing, origin = read_mhd(header_path)
    return Volume(arr, spacing, origin, series_id=series_id or Path(header_path).stem)


def preprocess_hu(volume: Volume) -> Volume:
    """Clip to [-1200, 600] HU, rescale to [0, 1] and zero voxels outside the lung mask."""
    v = (np.clip(volume.intensities.astype(np.float64), HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
    if volume.lung_mask is not None:
        v = np.where(volume.lung_mask, v, 0.0)
    return volume.with_(intensities=v.astype(np.float32))


# -- cross-section reorientation ------------------------------------------
def reorient_array(arr: np.ndarray, plane: str) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(arr, REORIENT[plane]))


def restore_array(arr: np.ndarray, plane: str) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(arr, np.argsort(REORIENT[plane])))


def reorient_points(rows, plane: str) -> np.ndarray:
    """Permute the (z, y, x) part of (..., 4+) rows into the plane's frame."""
    rows = np.array(rows, dtype=np.float64, copy=True)
    rows[..., :3] = rows[..., list(REORIENT[plane])]
    return rows


def restore_points(rows, plane: str) -> np.ndarray:
    rows = np.array(rows, dtype=np.float64, copy=True)
    rows[..., :3] = rows[..., list(np.argsort(REORIENT[plane]))]
    return rows


def reorient(volume: Volume, plane: str) -> Volume:
    perm = list(REORIENT[plane])
    return volume.with_(
        intensities=reorient_array(volume.intensities, plane),
        spacing=volume.spacing[perm],
        origin=volume.origin[perm],
        lung_mask=None if volume.lung_mask is None else reorient_array(volume.lung_mask, plane),
        annotations=reorient_points(volume.annotations, plane),
        irrelevant=reorient_points(volume.irrelevant, plane),
    )


def restore(volume: Volume, plane: str) -> Volume:
    inv = list(np.argsort(REORIENT[plane]))
    return volume.with_(
        intensities=restore_array(volume.intensities, plane),
        spacing=volume.spacing[inv],
        origin=volume.origin[inv],
        lung_mask=None if volume.lung_mask is None else restore_array(volume.lung_mask, plane),
        annotations=restore_points(volume.annotations, plane),
        irrelevant=restore_points(volume.irrelevant, plane),
    )


def cross_section_augment(volume: Volume) -> list[Volume]:
    """The axial original plus its coronal and sagittal reorientations."""
    return [reorient(volume, p) for p in ("axial", "coronal", "sagittal")]


def shift_augment(crop: np.ndarray, annotations=None, shift=None, max_shift: int = 1, rng=None):
    """Integer translation with zero fill; annotations move by the same offset.

    ``shift`` defaults to a uniform draw from [-max_shift, max_shift]^3.
    """
    if shift is None:
        rng = rng or np.random.default_rng()
        shift = rng.integers(-max_shift, max_shift + 1, size=3)
    shift = tuple(int(s) for s in shift)
    out = np.zeros_like(crop)
    src, dst = [], []
    for s, n in zip(shift, crop.shape[-3:]):
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    lead = (slice(None),) * (crop.ndim - 3)
    out[lead + tuple(dst)] = crop[lead + tuple(src)]
    if annotations is None:
        return out
    ann = np.array(annotations, dtype=np.float64, copy=True).reshape(-1, 4)
    ann[:, :3] += shift
    return out, ann


# -- synthetic data --------------------------------------------------------
@dataclass
class SynthConfig:
    size: int = 96
    nodules: tuple[int, int] = (1, 3)
    diameter_mean: float = 8.32
    diameter_sigma: float = 0.35  # of log-diameter
    diameter_range: tuple[float, float] = (3.0, 30.0)
    tubes: tuple[int, int] = (2, 5)
    tube_radius: tuple[float, float] = (1.0, 2.5)
    noise: float = 60.0
    background: float = -850.0
    nodule_hu: float = 0.0
    tube_hu: tuple[float, float] = (-150.0, 50.0)
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        self.nodules = tuple(self.nodules)
        self.tubes = tuple(self.tubes)
        self.diameter_range = tuple(self.diameter_range)
        self.tube_radius = tuple(self.tube_radius)
        self.tube_hu = tuple(self.tube_hu)
        if self.diameter_mean <= 0 or self.diameter_range[0] <= 0:
            raise ValueError("diameters must be positive")
        if self.nodules[0] < 0 or self.nodules[1] < self.nodules[0]:
            raise ValueError(f"invalid nodule count range {self.nodules}")
        if self.size < 8:
            raise ValueError("volume size must be at least 8")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_diameters(cfg: SynthConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Lognormal diameters with mean ``diameter_mean``, redrawn outside ``diameter_range``."""
    mu = np.log(cfg.diameter_mean) - cfg.diameter_sigma**2 / 2
    lo, hi = cfg.diameter_range
    out = np.empty(n)
    filled = 0
    while filled < n:
        d = rng.lognormal(mu, cfg.diameter_sigma, size=n - filled)
        d = d[(d >= lo) & (d <= hi)]
        out[filled : filled + len(d)] = d
        filled += len(d)
    return out


def soft_profile(r: np.ndarray, radius: float) -> np.ndarray:
    """1 inside half the radius, cosine taper to 0 at ``radius``."""
    t = np.clip((r / radius - 0.5) * 2.0, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def synth_generate(config: SynthConfig, series_id: str = "synth") -> Volume:
    rng = np.random.default_rng(config.seed)
    n = int(config.size)
    count = int(rng.integers(config.nodules[0], config.nodules[1] + 1))
    diameters = sample_diameters(config, count, rng)
    centers: list[np.ndarray] = []
    for d in diameters:
        for _ in range(config.max_retries):
            c = rng.uniform(d / 2, n - 1 - d / 2, size=3)
            if all(np.linalg.norm(c - c2) >= (d + d2) / 2 + 2 for c2, d2 in zip(centers, diameters)):
                centers.append(c)
                break
        else:
            raise DataError(f"could not place {count} non-overlapping nodules in a {n}^3 volume")

    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float32),) * 3, indexing="ij"), axis=-1)
    signal = np.zeros((n, n, n), dtype=np.float32)
    nod_amp = config.nodule_hu - config.background
    ann = np.array([[*c, d] for c, d in zip(centers, diameters)]).reshape(-1, 4)
    for c, d in zip(centers, diameters):
        lo = np.maximum(np.floor(c - d / 2) - 1, 0).astype(int)
        hi = np.minimum(np.ceil(c + d / 2) + 2, n).astype(int)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        r = np.linalg.norm(grid[sl] - c.astype(np.float32), axis=-1)
        signal[sl] = np.maximum(signal[sl], nod_amp * soft_profile(r, d / 2))

    n_tubes = int(rng.integers(config.tubes[0], config.tubes[1] + 1))
    for _ in range(n_tubes):
        for _ in range(config.max_retries):
            p = rng.uniform(0, n - 1, size=3)
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            radius = rng.uniform(*config.tube_radius)
            # keep vessels off nodule centres so annotations stay unambiguous
            clear = all(
                np.linalg.norm(np.cross(c - p, u)) >= radius + d / 2 + 1 for c, d in zip(centers, diameters)
            )
            if clear:
                break
        else:
            continue
        amp = rng.uniform(*config.tube_hu) - config.background
        rel = grid - p.astype(np.float32)
        dist = np.linalg.norm(rel - (rel @ u.astype(np.float32))[..., None] * u.astype(np.float32), axis=-1)
        signal = np.maximum(signal, amp * soft_profile(dist, radius))

    noise = rng.normal(0.0, config.noise, size=(n, n, n)).astype(np.float32)
    vol = (config.background + signal + noise).astype(np.float32)
    return Volume(vol, annotations=ann, series_id=series_id)


# -- patches ----------------------------------------------------------------
@dataclass
class Patch:
    origin: tuple[int, int, int]
    data: np.ndarray
    annotations: np.ndarray  # local (z, y, x, d)


def tile_origins(size: int, patch: int, overlap: int) -> list[int]:
    """Stride ``patch - overlap`` origins with the final tile flush to the far edge."""
    if overlap < 0 or overlap >= patch:
        raise ValueError("overlap must lie in [0, patch)")
    if size <= patch:
        return [0]
    stride = patch - overlap
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] + patch < size:
        origins.append(size - patch)
    return origins


def pad_to(arr: np.ndarray, patch: int) -> np.ndarray:
    """Zero-pad (at the far end) every axis shorter than ``patch``."""
    pads = [(0, max(0, patch - s)) for s in arr.shape]
    return np.pad(arr, pads) if any(p for _, p in pads) else arr


def crop(arr: np.ndarray, origin, size) -> np.ndarray:
    """Zero-padded crop of ``size`` voxels per axis starting at ``origin`` (may be negative)."""
    size = (size,) * 3 if np.isscalar(size) else tuple(size)
    out = np.zeros(size, dtype=arr.dtype)
    src, dst = [], []
    for o, s, n in zip(origin, size, arr.shape):
        a, b = max(o, 0), min(o + s, n)
        if b <= a:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - o, b - o))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def local_annotations(ann: np.ndarray, origin, patch: int) -> np.ndarray:
    ann = np.asarray(ann, dtype=np.float64).reshape(-1, 4)
    local = ann.copy()
    local[:, :3] -= np.asarray(origin, dtype=np.float64)
    inside = np.all((local[:, :3] >= 0) & (local[:, :3] <= patch - 1), axis=1)
    return local[inside]


def patch_extract(
    volume: Volume,
    patch: int = 128,
    mode: str = "test",
    overlap: int = 32,
    n: int = 1,
    p_nodule: float = 0.7,
    rng=None,
) -> list[Patch]:
    """Training samples (``mode='train'``) or the deterministic inference tiling."""
    arr = volume.intensities
    if mode == "test":
        padded = pad_to(arr, patch)
        axes = [tile_origins(s, patch, overlap) for s in padded.shape]
        out = []
        for oz in axes[0]:
            for oy in axes[1]:
                for ox in axes[2]:
                    o = (oz, oy, ox)
                    out.append(Patch(o, crop(padded, o, patch), local_annotations(volume.annotations, o, patch)))
        return out
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng or np.random.default_rng()
    out = []
    ann = volume.annotations
    for _ in range(n):
        if len(ann) and rng.random() < p_nodule:
            z, y, x, d = ann[rng.integers(len(ann))]
            margin = min(patch // 2 - 1, int(np.ceil(d / 2)) + 2)
            pos = np.array([z, y, x])
            lo = np.ceil(pos + margin - patch + 1).astype(int)
            hi = np.floor(pos - margin).astype(int)
            # stay inside the volume when the nodule allows it
            lo2 = np.maximum(lo, 0)
            hi2 = np.minimum(hi, np.array(arr.shape) - patch)
            lo, hi = np.where(lo2 <= hi2, lo2, lo), np.where(lo2 <= hi2, hi2, hi)
            o = tuple(int(rng.integers(a, max(a, b) + 1)) for a, b in zip(lo, hi))
        else:
            o = tuple(int(rng.integers(0, max(1, s - patch + 1))) for s in arr.shape)
        out.append(Patch(o, crop(arr, o, patch), local_annotations(ann, o, patch)))
    return out


# -- dataset on disk ----------------------------------------------------------
MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.csv"


def write_dataset(out_dir, volumes: list[Volume], meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in volumes:
        write_mhd(out / f"{v.series_id}.mhd", v.intensities, v.spacing, v.origin)
        entries.append({"series_id": v.series_id, "file": f"{v.series_id}.mhd", "shape": list(v.shape)})
    write_annotations(out / ANNOTATIONS, {v.series_id: v.annotations for v in volumes})
    manifest = {"volumes": entries, **(meta or {})}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(root) -> list[Volume]:
    root = Path(root)
    if not (root / MANIFEST).exists():
        raise DataError(f"{root}: no {MANIFEST}")
    manifest = json.loads((root / MANIFEST).read_text())
    ann = read_annotations(root / ANNOTATIONS) if (root / ANNOTATIONS).exists() else {}
    vols = []
    for e in manifest["volumes"]:
        v = load_mhd(root / e["file"], e["series_id"])
        vols.append(v.with_(annotations=ann.get(e["series_id"], np.zeros((0, 4)))))
    return vols
