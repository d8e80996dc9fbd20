"""Linear forward models and their adjoints, analytic baselines, sampling masks.

Operators act on plain numpy arrays; :func:`disinr.diffcore.linear_operator`
lifts any of them into the differentiation graph, using ``adjoint`` as the
backward rule.  Complex images and k-space carry a trailing (real, imag)
axis.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, DomainError
from .seeding import rng_for

# ---------------------------------------------------------------------------
# complex helpers


def to_complex(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != 2:
        raise DimensionError(f"expected a trailing (real, imag) axis, got {x.shape}")
    return x[..., 0] + 1j * x[..., 1]


def from_complex(z: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1).astype(dtype)


def magnitude(x: np.ndarray) -> np.ndarray:
    """Magnitude of a 2-channel complex image; 1-channel input is returned as |x|."""
    x = np.asarray(x)
    if x.ndim >= 3 and x.shape[-1] == 2:
        return np.hypot(x[..., 0], x[..., 1])
    return np.abs(x)


# ---------------------------------------------------------------------------
# operators


class ForwardOperator:
    """Linear map with an exact adjoint.

    Subclasses set ``image_shape`` and ``measurement_shape`` and implement
    ``forward``/``adjoint`` on numpy arrays of those shapes.
    """

    kind = ""
    image_shape: tuple
    measurement_shape: tuple

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _check(self, arr, shape, what):
        if tuple(arr.shape) != tuple(shape):
            raise DimensionError(f"{self.kind}: {what} shape {arr.shape} != {tuple(shape)}")

    def descriptor(self) -> tuple[dict, dict]:
        """JSON-able description plus named arrays needed to rebuild the operator."""
        raise NotImplementedError


class IdentityOperator(ForwardOperator):
    kind = "identity"

    def __init__(self, image_shape):
        self.image_shape = tuple(image_shape)
        self.measurement_shape = self.image_shape

    def forward(self, x):
        self._check(x, self.image_shape, "image")
        return np.array(x, copy=True)

    def adjoint(self, y):
        self._check(y, self.measurement_shape, "measurement")
        return np.array(y, copy=True)

    def descriptor(self):
        return {"kind": self.kind, "image_shape": list(self.image_shape)}, {}


# ---------------------------------------------------------------------------
# fan-beam CT


def view_angles(n_views: int, start: float = 0.0, span: float = 2 * math.pi) -> tuple:
    """``n_views`` equally spaced angles over ``[start, start + span)``."""
    if n_views < 1:
        raise DomainError("need at least one view")
    return tuple(float(start + span * k / n_views) for k in range(n_views))


@dataclass(frozen=True)
class FanBeamGeometry:
    """2D fan-beam geometry with a flat, equally spaced detector.

    Distances and spacings are in mm.  The source sits at ``-SOD * u`` and
    the detector centre at ``+ODD * u`` with ``u = (cos a, sin a)``;
    detector cells run along ``v = (-sin a, cos a)``.  Image column index
    maps to +x and row index to +y, both centred on the rotation axis.
    """

    image_shape: tuple = (128, 128)
    voxel_size: float = 1.0
    source_to_center: float = 150.0
    center_to_detector: float = 150.0
    n_detectors: int = 180
    detector_spacing: float = 2.0
    angles: tuple = field(default_factory=lambda: view_angles(60))

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if len(self.image_shape) != 2 or min(self.image_shape) < 1:
            raise ConfigError(f"bad image shape {self.image_shape}")
        for name in ("voxel_size", "source_to_center", "center_to_detector", "detector_spacing"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_detectors < 1:
            raise ConfigError("n_detectors must be positive")
        a = np.asarray(self.angles)
        if a.size == 0 or a.min() < 0 or a.max() >= 2 * math.pi or np.any(np.diff(a) <= 0):
            raise ConfigError("angles must be strictly increasing within [0, 2*pi)")
        if self.source_to_center <= self.half_diagonal:
            raise ConfigError("source must lie outside the image")

    @classmethod
    def preset(cls, name: str, n_views: int = 60) -> "FanBeamGeometry":
        if name == "paper":
            return cls((256, 256), 1.0, 300.0, 300.0, 500, 2.0, view_angles(n_views))
        if name == "desk":
            return cls((128, 128), 1.0, 150.0, 150.0, 180, 2.0, view_angles(n_views))
        raise ConfigError(f"unknown geometry preset {name!r}")

    @property
    def n_views(self) -> int:
        return len(self.angles)

    @property
    def half_diagonal(self) -> float:
        h, w = self.image_shape
        return 0.5 * math.hypot(h, w) * self.voxel_size

    @property
    def sinogram_shape(self) -> tuple:
        return (self.n_views, self.n_detectors)

    def detector_offsets(self) -> np.ndarray:
        n = self.n_detectors
        return (np.arange(n) - (n - 1) / 2.0) * self.detector_spacing

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["angles"] = list(self.angles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FanBeamGeometry":
        d = dict(d)
        d["image_shape"] = tuple(d["image_shape"])
        d["angles"] = tuple(d["angles"])
        return cls(**d)


def _bilinear_entries(geom: FanBeamGeometry, px: np.ndarray, py: np.ndarray):
    """Flat pixel indices and weights for bilinear sampling at world points."""
    h, w = geom.image_shape
    col = px / geom.voxel_size + (w - 1) / 2.0
    row = py / geom.voxel_size + (h - 1) / 2.0
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = col - c0
    fr = row - r0
    idx, wts, which = [], [], []
    for dr, dcol, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                          (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r, c = r0 + dr, c0 + dcol
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w) & (wgt > 0)
        idx.append(r[ok] * w + c[ok])
        wts.append(wgt[ok])
        which.append(np.flatnonzero(ok))
    return idx, wts, which


def fanbeam_system_matrix(geom: FanBeamGeometry, step: float | None = None) -> sp.csr_matrix:
    """Sparse (views*detectors) x (H*W) matrix of the sampled line integrals.

    Each ray runs from the source to a detector cell centre.  It is sampled
    at a fixed step (half a voxel by default) symmetrically about the
    point closest to the rotation axis; each sample contributes its
    bilinear weights times the step length.
    """
    step = 0.5 * geom.voxel_size if step is None else step
    h, w = geom.image_shape
    n_det = geom.n_detectors
    radius = geom.half_diagonal + geom.voxel_size
    n_samples = int(math.ceil(2 * radius / step)) + 1
    j = (np.arange(n_samples) - (n_samples - 1) / 2.0) * step
    offsets = geom.detector_offsets()
    sod, odd = geom.source_to_center, geom.center_to_detector
    blocks = []
    for view, angle in enumerate(geom.angles):
        u = np.array([math.cos(angle), math.sin(angle)])
        v = np.array([-math.sin(angle), math.cos(angle)])
        src = -sod * u
        det = odd * u[None, :] + offsets[:, None] * v[None, :]
        d = det - src
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t_mid = -(d @ src)
        t = t_mid[:, None] + j[None, :]
        px = src[0] + t * d[:, 0:1]
        py = src[1] + t * d[:, 1:2]
        ray = np.repeat(np.arange(n_det), n_samples)
        idx, wts, which = _bilinear_entries(geom, px.ravel(), py.ravel())
        rows = np.concatenate([ray[k] for k in which])
        cols = np.concatenate(idx)
        vals = np.concatenate(wts) * step
        block = sp.csr_matrix((vals, (rows, cols)), shape=(n_det, h * w))
        block.sum_duplicates()
        blocks.append(block)
    return sp.vstack(blocks, format="csr")


class FanBeamOperator(ForwardOperator):
    kind = "fanbeam"

    def __init__(self, geom: FanBeamGeometry):
        self.geom = geom
        self.image_shape = geom.image_shape
        self.measurement_shape = geom.sinogram_shape
        self.matrix = fanbeam_system_matrix(geom)
        self._typed = {}

    def _mats(self, dtype):
        key = np.dtype(dtype)
        if key not in self._typed:
            m = self.matrix.astype(key)
            self._typed[key] = (m, m.T.tocsr())
        return self._typed[key]

    def forward(self, x):
        x = np.asarray(x)
        self._check(x, self.image_shape, "image")
        m, _ = self._mats(x.dtype)
        return (m @ x.ravel()).reshape(self.measurement_shape)

    def adjoint(self, y):
        y = np.asarray(y)
        self._check(y, self.measurement_shape, "sinogram")
        _, mt = self._mats(y.dtype)
        return (mt @ y.ravel()).reshape(self.image_shape)

    def descriptor(self):
        return {"kind": self.kind, "geometry": self.geom.to_dict()}, {}


def fanbeam_forward(geom: FanBeamGeometry, image: np.ndarray) -> np.ndarray:
    return FanBeamOperator(geom).forward(image)


def fanbeam_adjoint(geom: FanBeamGeometry, sinogram: np.ndarray) -> np.ndarray:
    return FanBeamOperator(geom).adjoint(sinogram)


def ramp_filter(n: int, spacing: float) -> np.ndarray:
    """Band-limited Ram-Lak kernel sampled at ``spacing``, length ``2n - 1``."""
    k = np.arange(-(n - 1), n)
    h = np.zeros(k.shape)
    h[k == 0] = 1.0 / (4 * spacing**2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    return h


def fbp_reconstruct(geom: FanBeamGeometry, sinogram: np.ndarray) -> np.ndarray:
    """Filtered backprojection for a full-circle, flat-detector fan beam.

    Projections are rescaled to a virtual detector through the rotation
    axis, cosine weighted, ramp filtered in the frequency domain and
    backprojected with the 1/U^2 distance weight.
    """
    sinogram = np.asarray(sinogram, dtype=np.float64)
    if sinogram.shape != geom.sinogram_shape:
        raise DimensionError(f"sinogram {sinogram.shape} != {geom.sinogram_shape}")
    if geom.n_views < 2:
        raise DomainError("FBP needs at least two views")
    sod = geom.source_to_center
    sdd = sod + geom.center_to_detector
    n = geom.n_detectors
    a = geom.detector_spacing * sod / sdd
    s = geom.detector_offsets() * sod / sdd
    weighted = sinogram * (sod / np.sqrt(sod**2 + s**2))[None, :]

    kernel = ramp_filter(n, a)
    size = 1 << int(math.ceil(math.log2(len(kernel) + n - 1)))
    spectrum = np.fft.rfft(kernel, size)
    filtered = np.fft.irfft(np.fft.rfft(weighted, size, axis=1) * spectrum[None, :], size, axis=1)
    filtered = filtered[:, n - 1:2 * n - 1] * a

    h, w = geom.image_shape
    xs = (np.arange(w) - (w - 1) / 2.0) * geom.voxel_size
    ys = (np.arange(h) - (h - 1) / 2.0) * geom.voxel_size
    x, y = np.meshgrid(xs, ys)
    image = np.zeros((h, w))
    for q, angle in zip(filtered, geom.angles):
        ca, sa = math.cos(angle), math.sin(angle)
        along = sod + x * ca + y * sa
        s_hit = sod * (-x * sa + y * ca) / along
        image += np.interp(s_hit, s, q, left=0.0, right=0.0) * (sod / along) ** 2
    dbeta = 2 * math.pi / geom.n_views
    return image * dbeta / 2.0


# ---------------------------------------------------------------------------
# MRI


class FourierOperator(ForwardOperator):
    """Masked, centred, unitary 2D FFT of coil-weighted complex images.

    ``image_shape`` is (H, W, 2) and ``measurement_shape`` (C, H, W, 2).
    """

    kind = "fourier"

    def __init__(self, mask: np.ndarray, coil_maps: np.ndarray | None = None):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 2:
            raise DimensionError("mask must be 2D")
        if coil_maps is None:
            coil_maps = np.zeros(mask.shape + (2,))[None]
            coil_maps[..., 0] = 1.0
        coil_maps = np.asarray(coil_maps, dtype=np.float64)
        if coil_maps.ndim != 4 or coil_maps.shape[1:3] != mask.shape:
            raise DimensionError(f"coil maps {coil_maps.shape} do not match mask {mask.shape}")
        self.mask = mask
        self.coil_maps = coil_maps
        self._maps = to_complex(coil_maps)
        self.image_shape = mask.shape + (2,)
        self.measurement_shape = (coil_maps.shape[0],) + mask.shape + (2,)

    @property
    def n_coils(self) -> int:
        return self.coil_maps.shape[0]

    def forward(self, x):
        x = np.asarray(x)
        self._check(x, self.image_shape, "image")
        z = self._maps * to_complex(x)[None]
        k = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(z, axes=(-2, -1)), norm="ortho"),
                            axes=(-2, -1))
        return from_complex(self.mask * k, x.dtype)

    def adjoint(self, y):
        y = np.asarray(y)
        self._check(y, self.measurement_shape, "k-space")
        k = self.mask * to_complex(y)
        z = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho"),
                            axes=(-2, -1))
        return from_complex((np.conj(self._maps) * z).sum(axis=0), y.dtype)

    def descriptor(self):
        return {"kind": self.kind}, {"mask": self.mask, "coilmaps": self.coil_maps}


def fourier_forward(mask, coil_maps, image):
    return FourierOperator(mask, coil_maps).forward(image)


def fourier_adjoint(mask, coil_maps, kspace):
    return FourierOperator(mask, coil_maps).adjoint(kspace)


def zero_filled(op: FourierOperator, kspace: np.ndarray) -> np.ndarray:
    """Zero-filling reconstruction; by definition the adjoint applied to the data."""
    return op.adjoint(kspace)


def make_coil_maps(shape, n_coils: int, seed: int = 0) -> np.ndarray:
    """Smooth synthetic sensitivities, shape (C, H, W, 2).

    Gaussian magnitude lobes sit on a ring around the field of view with
    random smooth phase ramps.  Maps are normalised to unit root-sum-of-
    squares and phase-referenced to coil 0, so a single coil is exactly 1.
    """
    if n_coils < 1:
        raise ConfigError("need at least one coil")
    h, w = shape
    rng = rng_for(seed, "coilmaps")
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h - 0.5, (np.arange(w) + 0.5) / w - 0.5,
                         indexing="ij")
    maps = np.empty((n_coils, h, w), dtype=complex)
    for c in range(n_coils):
        ang = 2 * np.pi * c / n_coils + rng.uniform(-0.2, 0.2)
        cy, cx = 0.6 * np.sin(ang), 0.6 * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.45**2))
        phase = rng.uniform(-np.pi, np.pi) + rng.normal(0, 1.0) * xx + rng.normal(0, 1.0) * yy
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt((np.abs(maps) ** 2).sum(axis=0, keepdims=True))
    ref = maps[0] / np.abs(maps[0])
    maps *= np.conj(ref)[None]
    if n_coils == 1:
        maps[0] = 1.0
    return from_complex(maps)


# ---------------------------------------------------------------------------
# sampling masks

MASK_PATTERNS = ("cartesian", "radial", "poisson")


@dataclass(frozen=True)
class SamplingMaskConfig:
    pattern: str = "cartesian"
    acceleration: float = 6.0
    acs: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in MASK_PATTERNS:
            raise ConfigError(f"unknown mask pattern {self.pattern!r}")
        if not self.acceleration >= 1:
            raise ConfigError("acceleration factor must be >= 1")
        if self.acs < 0:
            raise ConfigError("acs must be non-negative")


def realized_acceleration(mask: np.ndarray, pattern: str = "radial") -> float:
    """Full over acquired samples; Cartesian masks count phase-encode lines."""
    mask = np.asarray(mask)
    if pattern == "cartesian":
        lines = mask.any(axis=1)
        return mask.shape[0] / max(int(lines.sum()), 1)
    return mask.size / max(int(mask.sum()), 1)


def _cartesian_mask(cfg: SamplingMaskConfig, shape) -> np.ndarray:
    n, m = shape
    budget = int(round(n / cfg.acceleration))
    if cfg.acs > budget:
        raise ConfigError(f"ACS of {cfg.acs} lines exceeds the budget of {budget} "
                          f"lines at AF={cfg.acceleration} on {n} lines")
    lines = np.zeros(n, dtype=bool)
    start = n // 2 - cfg.acs // 2
    lines[start:start + cfg.acs] = True
    outer = np.flatnonzero(~lines)
    extra = budget - cfg.acs
    if extra > 0:
        pick = np.unique(np.round(np.linspace(0, len(outer) - 1, extra)).astype(int))
        lines[outer[pick]] = True
    mask = np.zeros(shape)
    mask[lines, :] = 1.0
    return mask


GOLDEN_ANGLE = math.pi * (math.sqrt(5) - 1) / 2  # ~111.25 degrees


def _radial_mask(cfg: SamplingMaskConfig, shape) -> np.ndarray:
    h, w = shape
    target = h * w / cfg.acceleration
    cy, cx = h // 2, w // 2
    radius = math.hypot(h, w) / 2
    t = np.arange(-radius, radius + 0.25, 0.5)
    mask = np.zeros(shape)
    spoke = 0
    while mask.sum() < target:
        ang = spoke * GOLDEN_ANGLE
        r = np.round(cy + t * math.sin(ang)).astype(int)
        c = np.round(cx + t * math.cos(ang)).astype(int)
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        mask[r[ok], c[ok]] = 1.0
        spoke += 1
    return mask


def _poisson_disc(shape, r0: float, slope: float, centre: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    cy, cx = h // 2, w // 2
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rho = np.hypot(yy - cy, xx - cx) / math.hypot(h / 2, w / 2)
    rmin = r0 * (1 + slope * rho)
    taken = centre.copy()
    reach = int(math.ceil(rmin.max()))
    dy, dx = np.meshgrid(np.arange(-reach, reach + 1), np.arange(-reach, reach + 1), indexing="ij")
    dist = np.hypot(dy, dx)
    for flat in rng.permutation(h * w):
        y, x = divmod(int(flat), w)
        if taken[y, x]:
            continue
        r = rmin[y, x]
        k = int(math.ceil(r))
        y0, y1, x0, x1 = max(y - k, 0), min(y + k + 1, h), max(x - k, 0), min(x + k + 1, w)
        win = taken[y0:y1, x0:x1]
        d = dist[reach - (y - y0):reach + (y1 - y), reach - (x - x0):reach + (x1 - x)]
        if not np.any(win & (d < r)):
            taken[y, x] = True
    return taken


def _poisson_mask(cfg: SamplingMaskConfig, shape) -> np.ndarray:
    h, w = shape
    target = h * w / cfg.acceleration
    centre = np.zeros(shape, dtype=bool)
    a = cfg.acs
    if a * a > target:
        raise ConfigError(f"calibration square {a}x{a} exceeds the sample budget at "
                          f"AF={cfg.acceleration}")
    centre[h // 2 - a // 2:h // 2 - a // 2 + a, w // 2 - a // 2:w // 2 - a // 2 + a] = True
    lo, hi = 0.5, math.sqrt(cfg.acceleration) * 2.0
    best = None
    for i in range(24):
        r0 = math.sqrt(lo * hi)
        mask = _poisson_disc(shape, r0, 2.0, centre, rng_for(cfg.seed, "poisson", i))
        count = mask.sum()
        if best is None or abs(count - target) < abs(best.sum() - target):
            best = mask
        if abs(count - target) <= 0.05 * target:
            break
        if count > target:
            lo = r0
        else:
            hi = r0
    return best.astype(np.float64)


def make_mask(cfg: SamplingMaskConfig, shape) -> np.ndarray:
    """Binary k-space sampling mask with the DC sample at ``(H//2, W//2)``.

    Cartesian masks sample whole rows (phase-encode lines) with a centred
    fully sampled ACS block; radial masks rasterise golden-angle spokes;
    Poisson masks use variable-density Poisson-disc sampling around a fully
    sampled ``acs`` x ``acs`` calibration square.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2:
        raise DimensionError("k-space mask shape must be 2D")
    if cfg.acceleration == 1:
        return np.ones(shape)
    if cfg.pattern == "cartesian":
        return _cartesian_mask(cfg, shape)
    if cfg.pattern == "radial":
        return _radial_mask(cfg, shape)
    return _poisson_mask(cfg, shape)


# ---------------------------------------------------------------------------
# descriptors


@functools.lru_cache(maxsize=4)
def _shared_fanbeam(geom: FanBeamGeometry) -> FanBeamOperator:
    # records of one dataset share a geometry; build its matrix once
    return FanBeamOperator(geom)


def operator_from_descriptor(desc: dict, arrays: dict | None = None) -> ForwardOperator:
    arrays = arrays or {}
    kind = desc["kind"]
    if kind == "identity":
        return IdentityOperator(desc["image_shape"])
    if kind == "fanbeam":
        return _shared_fanbeam(FanBeamGeometry.from_dict(desc["geometry"]))
    if kind == "fourier":
        return FourierOperator(arrays["mask"], arrays.get("coilmaps"))
    raise ConfigError(f"unknown operator kind {kind!r}")


def adjoint_test(op: ForwardOperator, rng: np.random.Generator, dtype=np.float32) -> float:
    """Relative mismatch of <Ax, y> and <x, A^T y> for random x, y."""
    x = rng.standard_normal(op.image_shape).astype(dtype)
    y = rng.standard_normal(op.measurement_shape).astype(dtype)
    lhs = float(np.vdot(op.forward(x).astype(np.float64), y.astype(np.float64)))
    rhs = float(np.vdot(x.astype(np.float64), op.adjoint(y).astype(np.float64)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30)
