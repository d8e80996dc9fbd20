"""DisINR, the naive single-network INR and a STRAINER-style baseline.

All three are built from the same pieces: an encoder (coordinate front end
followed by two ReLU layers of ``hidden`` units) and a decoder (one ReLU
hidden layer and a linear output with one channel per image channel).

* DisINR: ``decoder(concat(shared_encoder(c), subject_encoder_i(c)))``.
* Naive INR: ``decoder(encoder(c))``, one network per subject.
* STRAINER-like: ``subject_decoder_i(shared_encoder(c))``.

Parameters are grouped into named partitions inside a :class:`ParameterSet`
so that whole groups can be frozen.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoders import HASH_PRESETS, FourierEncoder, HashEncoder, HashEncodingConfig, SineEncoder
from .errors import ConfigError, DimensionError
from .seeding import rng_for

KINDS = ("disinr", "naive", "strainer")
BACKBONES = ("ngp", "nerf", "siren")

SHARED_ENCODER = "shared_encoder"
SHARED_DECODER = "shared_decoder"


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "disinr"
    backbone: str = "ngp"
    dims: int = 2
    channels: int = 1
    hidden: int = 128
    decoder_hidden: int = 128
    hash: HashEncodingConfig = field(default_factory=lambda: HASH_PRESETS["desk"])
    fourier_freqs: int = 8
    siren_omega: float = 30.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.dims not in (2, 3):
            raise ConfigError("dims must be 2 or 3")
        if self.channels < 1:
            raise ConfigError("channels must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in HASH_PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        return cls(hash=HASH_PRESETS[name], **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("hash"), dict):
            d["hash"] = HashEncodingConfig(**d["hash"])
        return cls(**d)


class ParameterSet:
    """Ordered named partitions of trainable tensors with freeze flags."""

    def __init__(self):
        self._parts: dict[str, list[Tensor]] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, tensors) -> None:
        if name in self._parts:
            raise KeyError(f"partition {name!r} already exists")
        tensors = list(tensors)
        known = {id(t) for t in self.tensors()}
        if any(id(t) in known for t in tensors):
            raise ValueError("a tensor may belong to only one partition")
        self._parts[name] = tensors

    def remove(self, name: str) -> None:
        del self[name]

    def __delitem__(self, name):
        self._check(name)
        del self._parts[name]
        self._frozen.discard(name)

    def __getitem__(self, name: str) -> list[Tensor]:
        self._check(name)
        return self._parts[name]

    def __contains__(self, name) -> bool:
        return name in self._parts

    def _check(self, name):
        if name not in self._parts:
            raise KeyError(f"no partition named {name!r}")

    def names(self) -> list[str]:
        return list(self._parts)

    def tensors(self, trainable_only: bool = False) -> list[Tensor]:
        return [t for name, ts in self._parts.items()
                if not (trainable_only and name in self._frozen) for t in ts]

    def freeze(self, names) -> "ParameterSet":
        for name in names:
            self._check(name)
        for name in names:
            self._frozen.add(name)
            for t in self._parts[name]:
                t.requires_grad = False
                t.grad = None
        return self

    def unfreeze(self, names=None) -> "ParameterSet":
        for name in (self.names() if names is None else names):
            self._check(name)
            self._frozen.discard(name)
            for t in self._parts[name]:
                t.requires_grad = True
        return self

    def is_frozen(self, name: str) -> bool:
        self._check(name)
        return name in self._frozen

    def frozen(self) -> list[str]:
        return [n for n in self._parts if n in self._frozen]

    def count(self, trainable_only: bool = False, names=None) -> int:
        names = self.names() if names is None else names
        return sum(t.size for n in names for t in self[n]
                   if not (trainable_only and n in self._frozen))

    def snapshot(self, names=None) -> dict[str, list[np.ndarray]]:
        names = self.names() if names is None else names
        return {n: [t.data.copy() for t in self[n]] for n in names}

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None


def freeze(params: ParameterSet, partitions) -> ParameterSet:
    """Exclude ``partitions`` from gradient computation and optimizer updates."""
    return params.freeze(partitions)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class MLP:
    """Fully connected stack; ``activations`` has one entry per layer."""

    def __init__(self, in_dim: int, widths, activations, rng: np.random.Generator,
                 omega0: float = 30.0, name: str = "mlp"):
        if len(widths) != len(activations):
            raise ValueError("one activation per layer")
        self.activations = tuple(activations)
        self.omega0 = omega0
        self.weights, self.biases = [], []
        fan_in = in_dim
        for i, (width, act) in enumerate(zip(widths, activations)):
            if act == "relu":
                bound = np.sqrt(6.0 / fan_in)
            elif act == "sin":
                bound = np.sqrt(6.0 / fan_in) / omega0
            else:
                bound = np.sqrt(1.0 / fan_in)
            self.weights.append(Tensor(_uniform(rng, bound, (fan_in, width)),
                                       requires_grad=True, name=f"{name}.{i}.weight"))
            self.biases.append(Tensor(np.zeros(width), requires_grad=True,
                                      name=f"{name}.{i}.bias"))
            fan_in = width
        self.out_dim = fan_in

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = dc.linear(x, w, b)
            if act == "relu":
                x = dc.relu(x)
            elif act == "sin":
                x = dc.sin(dc.scale(x, self.omega0))
        return x


class Encoder:
    """Coordinate front end followed by two hidden layers."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str = "encoder"):
        if cfg.backbone == "ngp":
            self.front = HashEncoder(cfg.hash, cfg.dims, rng)
        elif cfg.backbone == "nerf":
            self.front = FourierEncoder(cfg.dims, cfg.fourier_freqs)
        else:
            self.front = SineEncoder(cfg.dims, cfg.hidden, rng, cfg.siren_omega)
        act = "sin" if cfg.backbone == "siren" else "relu"
        self.mlp = MLP(self.front.output_dim, [cfg.hidden, cfg.hidden], [act, act], rng,
                       omega0=cfg.siren_omega, name=name)
        self.out_dim = cfg.hidden

    def parameters(self) -> list[Tensor]:
        return self.front.parameters() + self.mlp.parameters()

    def __call__(self, coords: Tensor) -> Tensor:
        return self.mlp(self.front(coords))


class Decoder(MLP):
    def __init__(self, in_dim: int, cfg: ModelConfig, rng: np.random.Generator,
                 name: str = "decoder"):
        super().__init__(in_dim, [cfg.decoder_hidden, cfg.channels], ["relu", "none"], rng,
                         name=name)


def subject_partition(kind: str, subject) -> str:
    prefix = "subject_encoder" if kind == "disinr" else "subject_decoder"
    return f"{prefix}/{subject}"


class INRModel:
    """Common plumbing: config, parameter partitions, image rendering."""

    kind = ""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.kind != self.kind:
            cfg = replace(cfg, kind=self.kind)
        self.cfg = cfg
        self.seed = seed
        self.params = ParameterSet()

    def forward(self, subject, coords: Tensor) -> Tensor:
        raise NotImplementedError

    def subjects(self) -> list:
        return []

    def render(self, subject, coords: Tensor, image_shape) -> np.ndarray:
        """Evaluate without a graph and reshape rows to ``image_shape``."""
        with dc.no_grad():
            out = self.forward(subject, coords)
        return to_image(out, image_shape).data

    def parameter_count(self, trainable_only: bool = False) -> int:
        return self.params.count(trainable_only=trainable_only)


def to_image(rows: Tensor, image_shape) -> Tensor:
    """Map R x channels network output onto an image array.

    Single-channel outputs become ``image_shape``; two-channel outputs
    become ``(*image_shape, 2)`` (real, imaginary).
    """
    image_shape = tuple(image_shape)
    channels = rows.shape[1]
    target = image_shape if channels == 1 else image_shape + (channels,)
    if int(np.prod(target)) != rows.size:
        raise DimensionError(f"cannot view {rows.shape} as {target}")
    return dc.reshape(rows, target)


class DisINR(INRModel):
    kind = "disinr"

    def __init__(self, cfg: ModelConfig, n_subjects: int = 0, seed: int = 0):
        super().__init__(cfg, seed)
        self.shared_encoder = Encoder(self.cfg, rng_for(seed, SHARED_ENCODER), SHARED_ENCODER)
        self.decoder = Decoder(2 * self.cfg.hidden, self.cfg, rng_for(seed, SHARED_DECODER),
                               SHARED_DECODER)
        self.params.add(SHARED_ENCODER, self.shared_encoder.parameters())
        self.params.add(SHARED_DECODER, self.decoder.parameters())
        self.subject_encoders: dict = {}
        for i in range(n_subjects):
            self.add_subject(i, rng_for(seed, "subject", i))

    def add_subject(self, key, rng: np.random.Generator) -> Encoder:
        name = subject_partition(self.kind, key)
        enc = Encoder(self.cfg, rng, name)
        self.params.add(name, enc.parameters())
        self.subject_encoders[key] = enc
        return enc

    def remove_subject(self, key) -> None:
        self.params.remove(subject_partition(self.kind, key))
        del self.subject_encoders[key]

    def subjects(self) -> list:
        return list(self.subject_encoders)

    def subject_encoder(self, subject) -> Encoder:
        try:
            return self.subject_encoders[subject]
        except KeyError:
            raise KeyError(f"no subject encoder for {subject!r}") from None

    def shared_features(self, coords: Tensor) -> Tensor:
        return self.shared_encoder(coords)

    def subject_features(self, subject, coords: Tensor) -> Tensor:
        return self.subject_encoder(subject)(coords)

    def decode(self, shared: Tensor, subject_feats: Tensor) -> Tensor:
        # shared features first; the decoder's first layer depends on this order
        return self.decoder(dc.concat(shared, subject_feats))

    def forward(self, subject, coords: Tensor, shared: Tensor | None = None) -> Tensor:
        enc = self.subject_encoder(subject)
        if shared is None:
            shared = self.shared_features(coords)
        return self.decode(shared, enc(coords))


class NaiveINR(INRModel):
    """Single encoder + decoder fitted from scratch for one subject."""

    kind = "naive"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__(cfg, seed)
        self.encoder = Encoder(self.cfg, rng_for(seed, "encoder"), "encoder")
        self.decoder = Decoder(self.cfg.hidden, self.cfg, rng_for(seed, "decoder"), "decoder")
        self.params.add("encoder", self.encoder.parameters())
        self.params.add("decoder", self.decoder.parameters())

    def forward(self, subject, coords: Tensor) -> Tensor:
        return self.decoder(self.encoder(coords))


class StrainerLike(INRModel):
    """Shared encoder with one decoder per subject."""

    kind = "strainer"

    def __init__(self, cfg: ModelConfig, n_subjects: int = 0, seed: int = 0):
        super().__init__(cfg, seed)
        self.shared_encoder = Encoder(self.cfg, rng_for(seed, SHARED_ENCODER), SHARED_ENCODER)
        self.params.add(SHARED_ENCODER, self.shared_encoder.parameters())
        self.decoders: dict = {}
        for i in range(n_subjects):
            self.add_subject(i, rng_for(seed, "subject", i))

    def add_subject(self, key, rng: np.random.Generator, copy_from=None) -> Decoder:
        name = subject_partition(self.kind, key)
        dec = Decoder(self.cfg.hidden, self.cfg, rng, name)
        if copy_from is not None:
            for dst, src in zip(dec.parameters(), self.subject_decoder(copy_from).parameters()):
                dst.data = src.data.copy()
        self.params.add(name, dec.parameters())
        self.decoders[key] = dec
        return dec

    def remove_subject(self, key) -> None:
        self.params.remove(subject_partition(self.kind, key))
        del self.decoders[key]

    def subjects(self) -> list:
        return list(self.decoders)

    def subject_decoder(self, subject) -> Decoder:
        try:
            return self.decoders[subject]
        except KeyError:
            raise KeyError(f"no subject decoder for {subject!r}") from None

    def shared_features(self, coords: Tensor) -> Tensor:
        return self.shared_encoder(coords)

    def forward(self, subject, coords: Tensor, shared: Tensor | None = None) -> Tensor:
        dec = self.subject_decoder(subject)
        if shared is None:
            shared = self.shared_features(coords)
        return dec(shared)


def build_model(cfg: ModelConfig, n_subjects: int = 0, seed: int = 0) -> INRModel:
    if cfg.kind == "disinr":
        return DisINR(cfg, n_subjects, seed)
    if cfg.kind == "strainer":
        return StrainerLike(cfg, n_subjects, seed)
    return NaiveINR(cfg, seed)


def spawn_subject_encoder(model: INRModel, seed: int, key="test", copy_from=None) -> ParameterSet:
    """Add a freshly initialised subject partition named by ``key``.

    DisINR gains a subject encoder, StrainerLike a subject decoder (fresh by
    default, or copied from an existing subject's decoder).  An existing
    partition under ``key`` is replaced.
    """
    if not isinstance(model, (DisINR, StrainerLike)):
        raise TypeError("only DisINR and StrainerLike models have subject partitions")
    if key in model.subjects():
        model.remove_subject(key)
    rng = rng_for(seed, "spawn", key)
    if isinstance(model, StrainerLike):
        model.add_subject(key, rng, copy_from=copy_from)
    else:
        model.add_subject(key, rng)
    return model.params


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts for one encoder, one decoder and totals.

    Matches ``ParameterSet.count`` without allocating hash tables, which
    matters for the large preset.
    """
    def mlp_count(in_dim, widths):
        total, fan_in = 0, in_dim
        for w in widths:
            total += fan_in * w + w
            fan_in = w
        return total

    if cfg.backbone == "ngp":
        front, front_dim = cfg.hash.parameter_count(cfg.dims), cfg.hash.output_dim
    elif cfg.backbone == "nerf":
        front, front_dim = 0, 2 * cfg.dims * cfg.fourier_freqs
    else:
        front, front_dim = cfg.dims * cfg.hidden + cfg.hidden, cfg.hidden
    encoder = front + mlp_count(front_dim, [cfg.hidden, cfg.hidden])
    disinr_decoder = mlp_count(2 * cfg.hidden, [cfg.decoder_hidden, cfg.channels])
    plain_decoder = mlp_count(cfg.hidden, [cfg.decoder_hidden, cfg.channels])
    return {
        "encoder": encoder,
        "disinr_decoder": disinr_decoder,
        "plain_decoder": plain_decoder,
        # shared pair + one subject encoder
        "disinr_pretrain": 2 * encoder + disinr_decoder,
        "disinr_adapt": encoder,
        "naive": encoder + plain_decoder,
        "strainer_pretrain": encoder + plain_decoder,
        "strainer_adapt": encoder + plain_decoder,
    }


# -- checkpoint container ----------------------------------------------------

CHECKPOINT_MAGIC = b"DISINR01"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def _subject_key_to_json(key):
    return key if isinstance(key, (int, str)) else str(key)


def checkpoint_bytes(model: INRModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    header = {"config": model.cfg.to_dict(), "seed": model.seed,
              "subjects": [_subject_key_to_json(k) for k in model.subjects()]}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    names = model.params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        _write_str(buf, name)
        buf.write(struct.pack("<B", int(model.params.is_frozen(name))))
        tensors = model.params[name]
        buf.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
            _write_str(buf, t.name or "")
            buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(model: INRModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path, expected: ModelConfig | None = None) -> INRModel:
    """Rebuild a model from a checkpoint file.

    With ``expected`` given, a checkpoint written under a different model
    configuration is rejected with :class:`ConfigError`.
    """
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), expected, source=str(path))


def checkpoint_from_bytes(raw: bytes, expected: ModelConfig | None = None,
                          source: str = "<bytes>") -> INRModel:
    path = source
    buf = io.BytesIO(raw)
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a DisINR checkpoint")
    (n,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(n).decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None and expected != cfg:
        raise ConfigError(f"{path}: checkpoint config does not match the requested model")
    model = build_model(cfg, 0, header["seed"])
    for key in header["subjects"]:
        model.add_subject(key, np.random.default_rng(0))
    (n_parts,) = struct.unpack("<I", buf.read(4))
    if n_parts != len(model.params.names()):
        raise ConfigError(f"{path}: partition layout does not match config")
    frozen = []
    for _ in range(n_parts):
        name = _read_str(buf)
        (is_frozen,) = struct.unpack("<B", buf.read(1))
        (n_t,) = struct.unpack("<I", buf.read(4))
        tensors = model.params[name]
        if n_t != len(tensors):
            raise ConfigError(f"{path}: partition {name!r} tensor count mismatch")
        for t in tensors:
            _read_str(buf)
            code, ndim = struct.unpack("<BB", buf.read(2))
            shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
            if tuple(shape) != t.shape:
                raise ConfigError(f"{path}: tensor shape {shape} != {t.shape} in {name!r}")
            dtype = _CODE_DTYPES[code]
            count = int(np.prod(shape))
            t.data = np.frombuffer(buf.read(count * dtype.itemsize), dtype=dtype) \
                .reshape(shape).astype(dtype.newbyteorder("="))
        if is_frozen:
            frozen.append(name)
    model.params.freeze(frozen)
    return model
