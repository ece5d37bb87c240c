"""Procedural (silhouette, voxel grid, label) triples of eight solid primitives.

Solids live in the normalized cube [-1, 1]^3 (z up). ``scale`` is the radius
of the disk that bounds the footprint, so a scale-1 sphere touches the grid
faces and no rotated solid clips at scale <= 1.
"""
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError
from .kernels import cast_silhouette

CATEGORIES = ("cube", "sphere", "cylinder", "cone", "pyramid", "torus", "cross", "L-block")
NUM_CATEGORIES = len(CATEGORIES)
SCALE_RANGE = (0.6, 1.0)
ELEVATION = np.deg2rad(20.0)
VOXEL_SIDE = 16
IMAGE_SIDE = 32


@dataclass(frozen=True)
class ShapeSpec:
    category: int
    scale: float
    yaw: float
    jitter_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.category < NUM_CATEGORIES:
            raise DomainError(f"category {self.category} outside [0, {NUM_CATEGORIES})")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise DomainError(f"scale {self.scale} outside {SCALE_RANGE}")
        if not 0.0 <= self.yaw < 2.0 * np.pi:
            raise DomainError(f"yaw {self.yaw} outside [0, 2pi)")

    @property
    def name(self) -> str:
        return CATEGORIES[self.category]


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int
    direction: str = field(default="train->test")

    def reversed(self) -> "DatasetSplit":
        """Train on the nominal test list and evaluate on the nominal train list."""
        flipped = "test->train" if self.direction == "train->test" else "train->test"
        return DatasetSplit(train=self.test, test=self.train, seed=self.seed, direction=flipped)


def _proportions(jitter_seed: int):
    # cube and sphere ignore these; other solids get +-8% on two proportions
    if jitter_seed == 0:
        return 1.0, 1.0
    gen = np.random.Generator(np.random.PCG64(jitter_seed))
    j1, j2 = gen.uniform(0.92, 1.08, size=2)
    return float(j1), float(j2)


def voxel_centers(D: int):
    c = (np.arange(D) + 0.5) * (2.0 / D) - 1.0
    return np.meshgrid(c, c, c, indexing="ij")


def _inside(category: int, x, y, z, R: float, j1: float, j2: float):
    rho2 = x * x + y * y
    if category == 0:
        a = R / np.sqrt(2.0)
        return (np.abs(x) <= a) & (np.abs(y) <= a) & (np.abs(z) <= a)
    if category == 1:
        return rho2 + z * z <= R * R
    if category == 2:
        r, h = 0.6 * R * j1, 0.9 * R * j2
        return (rho2 <= r * r) & (np.abs(z) <= h)
    if category == 3:
        rb, h = 0.7 * R * j1, 0.9 * R * j2
        frac = np.clip((h - z) / (2 * h), 0.0, None)
        return (np.abs(z) <= h) & (np.sqrt(rho2) <= rb * frac)
    if category == 4:
        a, h = 0.64 * R * j1, 0.55 * R * j2
        half = a * (h - z) / (2 * h)
        return (np.abs(z) <= h) & (np.abs(x) <= half) & (np.abs(y) <= half)
    if category == 5:
        major, minor = 0.62 * R * j1, 0.3 * R * j2
        return (np.sqrt(rho2) - major) ** 2 + z * z <= minor * minor
    if category == 6:
        arm, w, h = 0.9 * R, 0.22 * R * j1, 0.9 * R * j2
        bx = (np.abs(x) <= arm) & (np.abs(y) <= w) & (np.abs(z) <= w)
        by = (np.abs(y) <= arm) & (np.abs(x) <= w) & (np.abs(z) <= w)
        bz = (np.abs(z) <= h) & (np.abs(x) <= w) & (np.abs(y) <= w)
        return bx | by | bz
    if category == 7:
        a = 0.95 * R / np.sqrt(2.0)
        f = 0.8 * a * j1
        depth = 0.5 * a * j2
        slab = np.abs(y) <= depth
        foot = (np.abs(x) <= a) & (z >= -a) & (z <= -a + f)
        column = (x >= -a) & (x <= -a + f) & (np.abs(z) <= a)
        return slab & (foot | column)
    raise DomainError(f"unknown category {category}")


def generate_voxels(spec: ShapeSpec, D: int = VOXEL_SIDE) -> np.ndarray:
    """Binary ``(D, D, D)`` uint8 occupancy of the solid, centered, yaw-rotated."""
    X, Y, Z = voxel_centers(D)
    c, s = np.cos(spec.yaw), np.sin(spec.yaw)
    # express voxel centers in the solid's own frame
    xr = c * X + s * Y
    yr = -s * X + c * Y
    j1, j2 = _proportions(spec.jitter_seed)
    return _inside(spec.category, xr, yr, Z, spec.scale, j1, j2).astype(np.uint8)


def render_silhouette(grid: np.ndarray, elevation: float = ELEVATION, width: int = IMAGE_SIDE,
                      supersample: int = 4) -> np.ndarray:
    """Orthographic anti-aliased silhouette, values in [0, 1], row 0 at the top."""
    return cast_silhouette(np.asarray(grid, dtype=np.uint8), width, float(elevation), supersample)


def build_split(n_train_per_category: int, n_test_per_category: int, seed: int) -> DatasetSplit:
    if n_train_per_category < 1 or n_test_per_category < 1:
        raise DomainError("per-category counts must be >= 1")
    gen = np.random.Generator(np.random.PCG64(seed))

    def draw(n):
        specs = []
        for _ in range(n):
            for cat in range(NUM_CATEGORIES):
                scale = float(gen.uniform(*SCALE_RANGE))
                yaw = float(gen.uniform(0.0, 2.0 * np.pi))
                jitter = int(gen.integers(1, 2**63 - 1))
                specs.append(ShapeSpec(cat, scale, yaw, jitter))
        return specs

    train = draw(n_train_per_category)
    test = draw(n_test_per_category)
    if set(train) & set(test):  # pragma: no cover - 63-bit jitter seeds collide essentially never
        raise DomainError("train and test spec lists overlap; pick another seed")
    return DatasetSplit(train=train, test=test, seed=seed)


@dataclass
class Arrays:
    """Rasterized tensors for one spec list."""

    images: np.ndarray   # (n, W, W) float64
    voxels: np.ndarray   # (n, D, D, D) uint8
    labels: np.ndarray   # (n,) int64

    def __len__(self):
        return len(self.labels)


def rasterize(specs, D: int = VOXEL_SIDE, W: int = IMAGE_SIDE, elevation: float = ELEVATION) -> Arrays:
    n = len(specs)
    images = np.zeros((n, W, W))
    voxels = np.zeros((n, D, D, D), dtype=np.uint8)
    for k, spec in enumerate(specs):
        voxels[k] = generate_voxels(spec, D)
        images[k] = render_silhouette(voxels[k], elevation, W)
    labels = np.array([s.category for s in specs], dtype=np.int64)
    return Arrays(images, voxels, labels)


# --- nearest-template classification ------------------------------------------

def category_templates(D: int = VOXEL_SIDE, n_scales: int = 5, n_yaws: int = 24):
    """``(L, K, D^3)`` bool bank of clean solids over a scale x yaw lattice."""
    scales = np.linspace(*SCALE_RANGE, n_scales)
    yaws = np.arange(n_yaws) * (2.0 * np.pi / n_yaws)
    bank = np.zeros((NUM_CATEGORIES, n_scales * n_yaws, D ** 3), dtype=bool)
    for cat in range(NUM_CATEGORIES):
        k = 0
        for s in scales:
            for y in yaws:
                bank[cat, k] = generate_voxels(ShapeSpec(cat, float(s), float(y)), D).ravel() > 0
                k += 1
    return bank


def mean_category_templates(D: int = VOXEL_SIDE, bank=None):
    """``(L, 1, D^3)``: one template per category, the voxels occupied in most of its poses.

    This is the shape a category's prior modal should decode to: the modal
    stands for the whole category, not for any single scale or yaw.
    """
    bank = category_templates(D) if bank is None else bank
    return (bank.mean(axis=1) > 0.5)[:, None, :]


def template_scores(grids, templates) -> np.ndarray:
    """Best IoU of each binary grid against each category's templates, ``(n, L)``."""
    g = np.asarray(grids).reshape(len(grids), -1).astype(np.float64)
    L, K, V = templates.shape
    t = templates.reshape(L * K, V).astype(np.float64)
    inter = g @ t.T
    union = g.sum(1)[:, None] + t.sum(1)[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return iou.reshape(len(g), L, K).max(axis=2)


# --- cache file -----------------------------------------------------------------

CACHE_MAGIC = b"MMDS"
CACHE_VERSION = 1
_HEAD = struct.Struct("<4sHHHdqII B")
_SPEC = struct.Struct("<Bddq")


def pack_dataset(split: DatasetSplit, D: int = VOXEL_SIDE, W: int = IMAGE_SIDE,
                 elevation: float = ELEVATION, with_tensors: bool = True) -> bytes:
    parts = [_HEAD.pack(CACHE_MAGIC, CACHE_VERSION, D, W, elevation, split.seed,
                        len(split.train), len(split.test), int(with_tensors))]
    for spec in list(split.train) + list(split.test):
        parts.append(_SPEC.pack(spec.category, spec.scale, spec.yaw, spec.jitter_seed))
    if with_tensors:
        for specs in (split.train, split.test):
            arr = rasterize(specs, D, W, elevation)
            parts.append(arr.images.astype("<f8").tobytes())
            parts.append(np.packbits(arr.voxels.reshape(len(specs), -1), axis=1).tobytes())
    return b"".join(parts)


def write_dataset(path, split: DatasetSplit, **kw) -> str:
    """Write the cache and return its sha256 hex digest."""
    buf = pack_dataset(split, **kw)
    with open(path, "wb") as fh:
        fh.write(buf)
    return hashlib.sha256(buf).hexdigest()


@dataclass
class DatasetCache:
    split: DatasetSplit
    D: int
    W: int
    elevation: float
    train: Arrays
    test: Arrays
    sha256: str

    def reversed(self) -> "DatasetCache":
        return DatasetCache(self.split.reversed(), self.D, self.W, self.elevation,
                            self.test, self.train, self.sha256)


def read_dataset(path) -> DatasetCache:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEAD.size:
        raise FormatError(f"{path}: too short for a dataset cache")
    magic, version, D, W, elev, seed, n_tr, n_te, has_t = _HEAD.unpack_from(buf, 0)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEAD.size
    specs = []
    try:
        for _ in range(n_tr + n_te):
            cat, scale, yaw, jit = _SPEC.unpack_from(buf, pos)
            specs.append(ShapeSpec(cat, scale, yaw, jit))
            pos += _SPEC.size
    except struct.error:
        raise FormatError(f"{path}: truncated spec table") from None
    split = DatasetSplit(specs[:n_tr], specs[n_tr:], seed)
    if has_t:
        out = []
        nbytes = (D ** 3 + 7) // 8
        for sub in (split.train, split.test):
            n = len(sub)
            need = n * W * W * 8 + n * nbytes
            if pos + need > len(buf):
                raise FormatError(f"{path}: truncated tensor block")
            images = np.frombuffer(buf, "<f8", n * W * W, pos).reshape(n, W, W).astype(np.float64)
            pos += n * W * W * 8
            packed = np.frombuffer(buf, np.uint8, n * nbytes, pos).reshape(n, nbytes)
            pos += n * nbytes
            vox = np.unpackbits(packed, axis=1, count=D ** 3).reshape(n, D, D, D)
            out.append(Arrays(images, vox, np.array([s.category for s in sub], dtype=np.int64)))
        train, test = out
    else:
        train, test = rasterize(split.train, D, W, elev), rasterize(split.test, D, W, elev)
    return DatasetCache(split, D, W, elev, train, test, hashlib.sha256(buf).hexdigest())
