"""Coordinate encoders: multi-resolution hash grid, Fourier features, sine layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, DomainError

# Spatial-hash primes, one per coordinate axis.
HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashEncodingConfig:
    levels: int = 8
    table_size: int = 2**14
    features: int = 4
    base_resolution: int = 2
    per_level_scale: float = 2.0
    init_scale: float = 1e-4

    def __post_init__(self):
        if min(self.levels, self.table_size, self.features, self.base_resolution) < 1:
            raise ConfigError("hash encoding sizes must be positive")
        if self.table_size & (self.table_size - 1):
            raise ConfigError(f"table_size must be a power of two, got {self.table_size}")
        if not self.per_level_scale > 1:
            raise ConfigError("per_level_scale must exceed 1")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.per_level_scale**level))

    def resolutions(self) -> list[int]:
        return [self.resolution(level) for level in range(self.levels)]

    def level_size(self, level: int, dims: int) -> int:
        """Table rows at ``level``: dense vertex count when it fits, else T."""
        return min(self.table_size, (self.resolution(level) + 1) ** dims)

    def is_dense(self, level: int, dims: int) -> bool:
        return (self.resolution(level) + 1) ** dims <= self.table_size

    def parameter_count(self, dims: int) -> int:
        return self.features * sum(self.level_size(level, dims) for level in range(self.levels))

    def to_dict(self) -> dict:
        return asdict(self)


HASH_PRESETS = {
    "desk": HashEncodingConfig(levels=8, table_size=2**14, features=4,
                               base_resolution=2, per_level_scale=2.0),
    "paper": HashEncodingConfig(levels=10, table_size=2**18, features=8,
                                base_resolution=2, per_level_scale=2.0),
}


class CoordinateGrid:
    """Pixel-centre coordinates of a lattice, normalised to [0, 1]^d.

    Rows enumerate the lattice in C (row-major) order, so the last axis
    varies fastest and ``coords.reshape(*extents, d)`` recovers the lattice.
    """

    def __init__(self, extents):
        extents = tuple(int(e) for e in extents)
        if not extents or any(e < 1 for e in extents):
            raise DomainError(f"grid extents must be >= 1, got {extents}")
        self.extents = extents

    @property
    def dims(self) -> int:
        return len(self.extents)

    @property
    def size(self) -> int:
        return int(np.prod(self.extents))

    @cached_property
    def coords(self) -> np.ndarray:
        axes = [(np.arange(e, dtype=np.float64) + 0.5) / e for e in self.extents]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def tensor(self) -> Tensor:
        return Tensor(self.coords)

    def __repr__(self):
        return f"CoordinateGrid({list(self.extents)})"


def make_grid(extents) -> CoordinateGrid:
    return CoordinateGrid(extents)


def _check_unit_cube(coords: np.ndarray):
    if coords.ndim != 2:
        raise DimensionError(f"coords must be R x d, got {coords.shape}")
    if coords.size and (coords.min() < 0 or coords.max() > 1):
        raise DomainError("coordinates must lie in [0, 1]^d")


def hash_indices(corners: np.ndarray, resolution: int, size: int, dense: bool) -> np.ndarray:
    """Map integer vertex coordinates (R x d) to table rows at one level."""
    corners = corners.astype(np.uint64)
    if dense:
        stride = np.uint64(1)
        index = np.zeros(len(corners), dtype=np.uint64)
        for axis in range(corners.shape[1]):
            index += corners[:, axis] * stride
            stride *= np.uint64(resolution + 1)
        return index.astype(np.int64)
    index = np.zeros(len(corners), dtype=np.uint64)
    for axis in range(corners.shape[1]):
        index ^= corners[:, axis] * np.uint64(HASH_PRIMES[axis])
    return (index % np.uint64(size)).astype(np.int64)


class HashPlan:
    """Per-level sparse interpolation matrices for a fixed coordinate batch.

    ``matrices[l]`` is R x level_size with 2^d nonzeros per row, so the
    level-l features are ``matrices[l] @ table_l`` and the table gradient
    is ``matrices[l].T @ g``.
    """

    def __init__(self, cfg: HashEncodingConfig, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.float64)
        _check_unit_cube(coords)
        rows, dims = coords.shape
        if dims > len(HASH_PRIMES):
            raise DimensionError(f"at most {len(HASH_PRIMES)} coordinate axes supported")
        self.dims = dims
        self.matrices = []
        offsets = np.array(np.meshgrid(*[[0, 1]] * dims, indexing="ij")).reshape(dims, -1).T
        row_ids = np.repeat(np.arange(rows), len(offsets))
        for level in range(cfg.levels):
            res = cfg.resolution(level)
            size = cfg.level_size(level, dims)
            scaled = coords * res
            cell = np.minimum(np.floor(scaled), res - 1).astype(np.int64)
            frac = scaled - cell
            cols, vals = [], []
            for off in offsets:
                w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
                cols.append(hash_indices(cell + off, res, size, cfg.is_dense(level, dims)))
                vals.append(w)
            cols = np.stack(cols, axis=1).ravel()
            vals = np.stack(vals, axis=1).ravel()
            mat = sp.csr_matrix((vals, (row_ids, cols)), shape=(rows, size))
            self.matrices.append(mat)
        self._typed = {}

    def typed(self, dtype):
        """Forward and transposed matrices cast to ``dtype`` (cached)."""
        key = np.dtype(dtype)
        if key not in self._typed:
            fwd = [m.astype(key) for m in self.matrices]
            self._typed[key] = (fwd, [m.T.tocsr() for m in fwd])
        return self._typed[key]


def hash_encode(cfg: HashEncodingConfig, tables, coords, plan: HashPlan | None = None) -> Tensor:
    """Multi-resolution hash encoding, levels concatenated coarse to fine.

    ``tables`` holds one (level_size x F) Tensor per level.  The result is
    linear in the table entries, which is what the backward pass uses.
    """
    if plan is None:
        coords = coords.data if isinstance(coords, Tensor) else coords
        plan = HashPlan(cfg, coords)
    if len(tables) != cfg.levels:
        raise DimensionError(f"expected {cfg.levels} tables, got {len(tables)}")
    dtype = tables[0].data.dtype
    mats, mats_t = plan.typed(dtype)
    feats = [m @ t.data for m, t in zip(mats, tables)]
    out = np.concatenate(feats, axis=1)
    f = cfg.features

    def backward(g):
        return tuple(mt @ g[:, i * f:(i + 1) * f] if t.requires_grad else None
                     for i, (mt, t) in enumerate(zip(mats_t, tables)))

    return dc.make_node(out, tuple(tables), backward)


def init_hash_tables(cfg: HashEncodingConfig, dims: int, rng: np.random.Generator,
                     prefix: str = "hash") -> list[Tensor]:
    s = cfg.init_scale
    return [Tensor(rng.uniform(-s, s, size=(cfg.level_size(level, dims), cfg.features)),
                   requires_grad=True, name=f"{prefix}.level{level}")
            for level in range(cfg.levels)]


class HashEncoder:
    """Trainable hash-grid front end; caches its plan per coordinate batch."""

    def __init__(self, cfg: HashEncodingConfig, dims: int, rng: np.random.Generator):
        self.cfg = cfg
        self.dims = dims
        self.tables = init_hash_tables(cfg, dims, rng)
        self._plan_key = None
        self._plan = None

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def parameters(self) -> list[Tensor]:
        return list(self.tables)

    def __call__(self, coords: Tensor) -> Tensor:
        if self._plan_key is not coords:
            self._plan = HashPlan(self.cfg, coords.data)
            self._plan_key = coords
        return hash_encode(self.cfg, self.tables, coords, plan=self._plan)


def fourier_encode(coords, num_freqs: int) -> Tensor:
    """Positional encoding ``[sin(2^k pi c), cos(2^k pi c)]``.

    Column layout, for k = 0..num_freqs-1 in order: the d sine terms of
    frequency k followed by its d cosine terms.
    """
    if num_freqs < 1:
        raise DomainError("num_freqs must be >= 1")
    c = coords.data if isinstance(coords, Tensor) else np.asarray(coords)
    if c.ndim != 2:
        raise DimensionError(f"coords must be R x d, got {c.shape}")
    blocks = []
    for k in range(num_freqs):
        arg = (2.0**k) * np.pi * c
        blocks += [np.sin(arg), np.cos(arg)]
    return Tensor(np.concatenate(blocks, axis=1))


class FourierEncoder:
    """Fixed NeRF-style positional encoding; no trainable parameters."""

    def __init__(self, dims: int, num_freqs: int = 8):
        self.dims = dims
        self.num_freqs = num_freqs
        self._cache = (None, None)

    @property
    def output_dim(self) -> int:
        return 2 * self.dims * self.num_freqs

    def parameters(self) -> list[Tensor]:
        return []

    def __call__(self, coords: Tensor) -> Tensor:
        if self._cache[0] is not coords:
            self._cache = (coords, fourier_encode(coords, self.num_freqs))
        return self._cache[1]


class SineEncoder:
    """SIREN first layer, ``sin(omega0 * (c W + b))`` with SIREN's init."""

    def __init__(self, dims: int, width: int, rng: np.random.Generator, omega0: float = 30.0):
        self.dims = dims
        self.width = width
        self.omega0 = omega0
        bound = 1.0 / dims
        self.weight = Tensor(rng.uniform(-bound, bound, size=(dims, width)),
                             requires_grad=True, name="sine.weight")
        self.bias = Tensor(rng.uniform(-bound, bound, size=(width,)),
                           requires_grad=True, name="sine.bias")

    @property
    def output_dim(self) -> int:
        return self.width

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, coords: Tensor) -> Tensor:
        return dc.sin(dc.scale(dc.linear(coords, self.weight, self.bias), self.omega0))
