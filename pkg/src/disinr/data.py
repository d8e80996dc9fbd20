"""Synthetic phantom families, measurement simulation, splits and file formats."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError
from .physics import ForwardOperator, FourierOperator, operator_from_descriptor
from .seeding import rng_for

# (intensity, semi-axis a, semi-axis b, centre x, centre y, angle in degrees),
# on the [-1, 1]^2 square with y pointing down the rows.
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)

# A torso-like cross-section: body, two lungs, spine, liver, vessels.
ELLIPSE_BASE = (
    (0.55, 0.85, 0.65, 0.0, 0.0, 0.0),
    (-0.4, 0.28, 0.38, -0.38, -0.05, 10.0),
    (-0.4, 0.26, 0.36, 0.38, -0.05, -10.0),
    (0.4, 0.1, 0.1, 0.0, 0.45, 0.0),
    (0.15, 0.3, 0.18, 0.25, 0.32, 25.0),
    (0.3, 0.06, 0.06, -0.05, 0.1, 0.0),
    (0.2, 0.05, 0.08, 0.1, -0.25, 0.0),
)

BASE_LAYOUTS = {"shepp_logan": SHEPP_LOGAN, "ellipse": ELLIPSE_BASE}


@dataclass(frozen=True)
class PhantomFamilyConfig:
    family: str = "ellipse"
    shape: tuple = (64, 64)
    n: int = 10
    center_jitter: float = 0.03
    axis_jitter: float = 0.08
    angle_jitter: float = 5.0
    intensity_jitter: float = 0.1
    lesion_prob: float = 0.5
    lesion_size: tuple = (0.04, 0.09)
    lesion_intensity: tuple = (0.25, 0.45)
    smooth: float = 0.0
    supersample: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "lesion_size", tuple(self.lesion_size))
        object.__setattr__(self, "lesion_intensity", tuple(self.lesion_intensity))
        if self.family not in BASE_LAYOUTS:
            raise ConfigError(f"unknown phantom family {self.family!r}")
        if len(self.shape) != 2 or min(self.shape) < 1:
            raise ConfigError(f"bad phantom shape {self.shape}")
        if self.n < 1:
            raise ConfigError("population size must be >= 1")
        if not 0 <= self.axis_jitter < 1:
            raise ConfigError("axis_jitter must lie in [0, 1) or ellipses degenerate")
        if min(self.lesion_size) <= 0:
            raise ConfigError("lesion axes must be positive")
        if not 0 <= self.lesion_prob <= 1:
            raise ConfigError("lesion_prob must be a probability")
        if self.supersample < 1:
            raise ConfigError("supersample must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("shape", "lesion_size", "lesion_intensity"):
            d[k] = list(d[k])
        return d


def rasterize_ellipses(ellipses, shape, supersample: int = 1) -> np.ndarray:
    """Sum of uniform ellipses, averaged over ``supersample``^2 points per pixel."""
    h, w = shape
    s = supersample
    ys = (np.arange(h * s) + 0.5) / (h * s) * 2 - 1
    xs = (np.arange(w * s) + 0.5) / (w * s) * 2 - 1
    y, x = np.meshgrid(ys, xs, indexing="ij")
    img = np.zeros_like(x)
    for amp, a, b, x0, y0, deg in ellipses:
        if a <= 0 or b <= 0:
            raise ConfigError(f"degenerate ellipse axes ({a}, {b})")
        t = np.deg2rad(deg)
        dx, dy = x - x0, y - y0
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += amp
    return img.reshape(h, s, w, s).mean(axis=(1, 3))


def _perturb(base, cfg: PhantomFamilyConfig, rng: np.random.Generator):
    out = []
    for amp, a, b, x0, y0, deg in base:
        j = cfg.axis_jitter
        out.append((amp * (1 + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)),
                    a * (1 + rng.uniform(-j, j)),
                    b * (1 + rng.uniform(-j, j)),
                    x0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter),
                    y0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter),
                    deg + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter)))
    return out


def _lesion(base, cfg: PhantomFamilyConfig, rng: np.random.Generator):
    _, a, b, x0, y0, _ = base[0]
    r, phi = 0.55 * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
    return (rng.uniform(*cfg.lesion_intensity),
            rng.uniform(*cfg.lesion_size), rng.uniform(*cfg.lesion_size),
            x0 + r * a * np.cos(phi), y0 + r * b * np.sin(phi), rng.uniform(0, 180))


def gen_family(cfg: PhantomFamilyConfig) -> np.ndarray:
    """Population of ``cfg.n`` phantoms, shape (N, H, W), values in [0, 1].

    Every subject perturbs the same base layout; a subject may also carry
    one small bright lesion.  Deterministic in ``cfg`` alone.
    """
    base = BASE_LAYOUTS[cfg.family]
    images = np.empty((cfg.n,) + cfg.shape)
    for i in range(cfg.n):
        rng = rng_for(cfg.seed, "phantom", i)
        ellipses = _perturb(base, cfg, rng)
        if rng.uniform() < cfg.lesion_prob:
            ellipses.append(_lesion(base, cfg, rng))
        img = rasterize_ellipses(ellipses, cfg.shape, cfg.supersample)
        if cfg.smooth > 0:
            img = gaussian_filter(img, cfg.smooth)
        images[i] = np.clip(img, 0.0, 1.0)
    return images


def base_phantom(cfg: PhantomFamilyConfig) -> np.ndarray:
    """The unperturbed, lesion-free layout of a family."""
    img = rasterize_ellipses(BASE_LAYOUTS[cfg.family], cfg.shape, cfg.supersample)
    if cfg.smooth > 0:
        img = gaussian_filter(img, cfg.smooth)
    return np.clip(img, 0.0, 1.0)


def add_phase(images: np.ndarray, seed: int, strength: float = 0.5) -> np.ndarray:
    """Attach a smooth random phase to magnitude images: (N, H, W) -> (N, H, W, 2)."""
    n, h, w = images.shape
    y, x = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    out = np.empty(images.shape + (2,))
    for i in range(n):
        c = rng_for(seed, "phase", i).normal(0, strength, size=4)
        phase = c[0] + c[1] * x + c[2] * y + c[3] * x * y
        out[i, ..., 0] = images[i] * np.cos(phase)
        out[i, ..., 1] = images[i] * np.sin(phase)
    return out


@dataclass
class MeasurementRecord:
    id: str
    measurement: np.ndarray
    descriptor: dict
    arrays: dict = field(default_factory=dict)
    noise_sigma: float = 0.0
    ground_truth: np.ndarray | None = None
    _operator: ForwardOperator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be non-negative")

    @property
    def operator(self) -> ForwardOperator:
        if self._operator is None:
            self._operator = operator_from_descriptor(self.descriptor, self.arrays)
        return self._operator

    @property
    def image_shape(self) -> tuple:
        return tuple(self.operator.image_shape)


def _record_arrays(op: ForwardOperator) -> tuple[dict, dict]:
    desc, arrays = op.descriptor()
    return desc, {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}


def canonical_operator(op: ForwardOperator) -> ForwardOperator:
    """Rebuild ``op`` from its float32-stored descriptor.

    Records keep masks and coil maps in 32-bit; simulating through the
    rebuilt operator keeps data and reloaded operators bit-consistent.
    """
    desc, arrays = _record_arrays(op)
    if isinstance(op, FourierOperator):
        return operator_from_descriptor(desc, arrays)
    return op


def simulate_measurements(images, op: ForwardOperator, noise_sigma: float = 0.0,
                          seed: int = 0, ids=None) -> list[MeasurementRecord]:
    """``y = A x + sigma * n`` for each image, ground truth retained (float32)."""
    if noise_sigma < 0:
        raise ConfigError("noise sigma must be non-negative")
    op = canonical_operator(op)
    desc, arrays = _record_arrays(op)
    records = []
    for i, img in enumerate(images):
        gt = np.asarray(img, dtype=np.float32)
        if gt.shape != tuple(op.image_shape):
            raise DimensionError(f"image {gt.shape} does not fit operator {op.image_shape}")
        y = op.forward(gt)
        if noise_sigma > 0:
            noise = rng_for(seed, "noise", i).standard_normal(y.shape)
            if isinstance(op, FourierOperator):
                noise *= op.mask[None, :, :, None]
            y = (y + noise_sigma * noise).astype(np.float32)
        rid = ids[i] if ids is not None else f"{i:04d}"
        records.append(MeasurementRecord(rid, y, desc, arrays, float(noise_sigma), gt, op))
    return records


def split(records, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> dict[str, list]:
    """Disjoint, covering, seeded split into pretrain / test_in / test_out."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or fractions.sum() <= 0:
        raise ConfigError("fractions must be three non-negative numbers")
    fractions = fractions / fractions.sum()
    n = len(records)
    raw = fractions * n
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    order = rng_for(seed, "split").permutation(n)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    names = ("pretrain", "test_in", "test_out")
    return {name: [records[j] for j in sorted(order[bounds[k]:bounds[k + 1]])]
            for k, name in enumerate(names)}


# ---------------------------------------------------------------------------
# container format

DATA_MAGIC = b"DINRDAT1"
SECTION_TYPES = {"image": 1, "sinogram": 2, "kspace": 3, "mask": 4, "coilmaps": 5}
_SECTION_NAMES = {v: k for k, v in SECTION_TYPES.items()}


def container_bytes(sections, meta: dict | None = None) -> bytes:
    """Serialise ``[(type, name, array), ...]`` plus a JSON metadata block."""
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(sections)))
    for kind, name, arr in sections:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_raw = name.encode("utf-8")
        buf.write(struct.pack("<BH", SECTION_TYPES[kind], len(name_raw)))
        buf.write(name_raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_container(path, sections, meta: dict | None = None) -> None:
    Path(path).write_bytes(container_bytes(sections, meta))


def load_container(path) -> tuple[dict, dict]:
    """Return ``({name: (type, array)}, meta)``."""
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(8) != DATA_MAGIC:
        raise ConfigError(f"{path}: not a DisINR data container")
    (n,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(n).decode("utf-8"))
    (count,) = struct.unpack("<I", buf.read(4))
    sections = {}
    for _ in range(count):
        code, name_len = struct.unpack("<BH", buf.read(3))
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        size = int(np.prod(shape))
        arr = np.frombuffer(buf.read(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        sections[name] = (_SECTION_NAMES[code], arr)
    return sections, meta


_MEASUREMENT_TYPE = {"identity": "image", "fanbeam": "sinogram", "fourier": "kspace"}


def save_record(record: MeasurementRecord, path) -> None:
    sections = [(_MEASUREMENT_TYPE[record.descriptor["kind"]], "measurement", record.measurement)]
    if record.ground_truth is not None:
        sections.append(("image", "ground_truth", record.ground_truth))
    for name, arr in sorted(record.arrays.items()):
        sections.append((name, name, arr))
    meta = {"id": record.id, "operator": record.descriptor, "noise_sigma": record.noise_sigma}
    save_container(path, sections, meta)


def load_record(path) -> MeasurementRecord:
    sections, meta = load_container(path)
    arrays = {name: arr for name, (kind, arr) in sections.items() if name in ("mask", "coilmaps")}
    gt = sections.get("ground_truth", (None, None))[1]
    return MeasurementRecord(meta["id"], sections["measurement"][1], meta["operator"],
                             arrays, meta["noise_sigma"], gt)


# ---------------------------------------------------------------------------
# human-facing exports


def write_pgm(path, image: np.ndarray, window: tuple | None = None) -> tuple:
    """8-bit binary PGM with min-max (or given) windowing.

    The window is recorded next to the image in ``<path>.window.txt``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError("PGM export needs a 2D image")
    lo, hi = (float(image.min()), float(image.max())) if window is None else map(float, window)
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)
    h, w = pixels.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    Path(str(path) + ".window.txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
    return lo, hi


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
