"""Adam, the step-decay schedule, pre-training and test-time adaptation loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .data import MeasurementRecord
from .diffcore import Tensor
from .encoders import CoordinateGrid
from .errors import ConfigError, DivergenceError, EvaluationError
from .evaluation import MetricReport, image_metrics, normalized_magnitude, psnr
from .models import (SHARED_DECODER, SHARED_ENCODER, DisINR, INRModel, ModelConfig, NaiveINR,
                     ParameterSet, StrainerLike, checkpoint_bytes, checkpoint_from_bytes, save_checkpoint,
                     spawn_subject_encoder, subject_partition, to_image)
from .seeding import subseed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 4000
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_interval: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "l1"
    log_interval: int = 100
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.iterations < 1 or self.log_interval < 1 or self.decay_interval < 1:
            raise ConfigError("iterations, log_interval and decay_interval must be >= 1")
        if self.loss != "l1":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for zero-based ``iteration``."""
        return self.lr * self.lr_decay ** (iteration // self.decay_interval)

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam with bias correction; moment buffers are kept per partition.

    Only the partitions named at construction are stepped, and frozen
    partitions are skipped even if named.
    """

    def __init__(self, params: ParameterSet, partitions=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.partitions = list(params.names() if partitions is None else partitions)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    @classmethod
    def from_config(cls, params, cfg: TrainConfig, partitions=None) -> "Adam":
        return cls(params, partitions, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, lr: float) -> None:
        for name in self.partitions:
            if self.params.is_frozen(name):
                continue
            tensors = self.params[name]
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"t": 0,
                                         "m": [np.zeros_like(p.data) for p in tensors],
                                         "v": [np.zeros_like(p.data) for p in tensors]}
            st["t"] += 1
            t = st["t"]
            c1 = 1 - self.beta1**t
            c2 = 1 - self.beta2**t
            for p, m, v in zip(tensors, st["m"], st["v"]):
                if p.grad is None:
                    g = np.zeros_like(p.data)
                else:
                    g = p.grad
                    if not np.all(np.isfinite(g)):
                        raise EvaluationError(
                            f"non-finite gradient in {name!r} tensor {p.name!r} at step {t}")
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * (g * g)
                step = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - step).astype(p.data.dtype)


def adam_step(optimizer: Adam, lr: float) -> None:
    optimizer.step(lr)


@dataclass
class LogRow:
    iteration: int
    subject_id: str
    loss: float
    psnr: float | None
    wall_ms: float


@dataclass
class RunLog:
    method: str = ""
    rows: list = field(default_factory=list)

    def add(self, iteration, subject_id, loss, psnr_db, wall_ms) -> None:
        if not math.isfinite(loss):
            raise EvaluationError(f"non-finite loss at iteration {iteration}")
        self.rows.append(LogRow(int(iteration), str(subject_id), float(loss),
                                None if psnr_db is None else float(psnr_db), float(wall_ms)))

    def losses(self, subject_id=None) -> list[float]:
        return [r.loss for r in self.rows if subject_id is None or r.subject_id == str(subject_id)]

    def psnr_curve(self, subject_id=None) -> dict[int, float]:
        return {r.iteration: r.psnr for r in self.rows
                if r.psnr is not None and (subject_id is None or r.subject_id == str(subject_id))}

    def deterministic_rows(self) -> list[tuple]:
        """Rows without wall-clock time, for reproducibility comparisons."""
        return [(r.iteration, r.subject_id, r.loss, r.psnr) for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("iteration", "subject_id", "loss", "psnr", "wall_ms"))
            for r in self.rows:
                writer.writerow((r.iteration, r.subject_id, repr(r.loss),
                                 "" if r.psnr is None else repr(r.psnr), f"{r.wall_ms:.3f}"))


def image_geometry(record: MeasurementRecord) -> tuple[tuple, int]:
    """Spatial shape and channel count of a record's image domain."""
    shape = tuple(record.image_shape)
    if record.descriptor["kind"] == "fourier":
        return shape[:-1], 2
    return shape, 1


def _check_records(records, cfg: ModelConfig) -> tuple:
    if not records:
        raise ConfigError("need at least one measurement record")
    spatial, channels = image_geometry(records[0])
    for rec in records:
        if image_geometry(rec) != (spatial, channels):
            raise ConfigError("all records must share one image domain")
        if tuple(rec.measurement.shape) != tuple(rec.operator.measurement_shape):
            raise ConfigError(f"record {rec.id}: measurement shape does not match its operator")
    if channels != cfg.channels:
        raise ConfigError(f"model has {cfg.channels} channels but the data needs {channels}")
    if len(spatial) != cfg.dims:
        raise ConfigError(f"model is {cfg.dims}D but images are {len(spatial)}D")
    return spatial, channels


def _psnr_against(record: MeasurementRecord, image: np.ndarray):
    if record.ground_truth is None:
        return None
    gt = record.ground_truth
    if gt.ndim == 3 and gt.shape[-1] == 2:
        a, b = normalized_magnitude(image, gt)
    else:
        a, b = image, gt
    return psnr(a, b)


def _measurement_loss(model_out: Tensor, spatial, record: MeasurementRecord):
    image = to_image(model_out, spatial)
    pred = dc.linear_operator(record.operator, image)
    return dc.l1_loss(pred, record.measurement), image


def evaluate_loss(model: INRModel, subject, record: MeasurementRecord) -> float:
    """Measurement loss of ``model``'s current parameters on one record."""
    spatial, _ = image_geometry(record)
    coords = CoordinateGrid(spatial).tensor()
    with dc.no_grad():
        loss, _ = _measurement_loss(model.forward(subject, coords), spatial, record)
    return float(loss.data)


def _guard(loss: float, cfg: TrainConfig, iteration: int, model: INRModel, dump_path):
    if math.isfinite(loss) and loss <= cfg.divergence_threshold:
        return
    if dump_path is not None:
        save_checkpoint(model, dump_path)
    raise DivergenceError(f"loss {loss:.4g} exceeded the divergence guard at iteration "
                          f"{iteration}", iteration=iteration, loss=loss)


def pretrain(records, model_cfg: ModelConfig, train_cfg: TrainConfig,
             model: INRModel | None = None, dump_path=None,
             method: str | None = None) -> tuple[INRModel, RunLog]:
    """Jointly fit the shared pair and one subject partition per record.

    Each iteration evaluates every subject's measurement loss with a single
    shared-encoder pass, back-propagates all of them, then applies one Adam
    step to every partition: subject partitions see only their own loss,
    the shared partitions see the sum.  Works for DisINR and StrainerLike.
    """
    spatial, _ = _check_records(records, model_cfg)
    if model is None:
        init_seed = subseed(train_cfg.seed, "init")
        if model_cfg.kind == "strainer":
            model = StrainerLike(model_cfg, len(records), init_seed)
        elif model_cfg.kind == "disinr":
            model = DisINR(model_cfg, len(records), init_seed)
        else:
            raise ConfigError("pretraining needs a DisINR or StrainerLike model")
    coords = CoordinateGrid(spatial).tensor()
    opt = Adam.from_config(model.params, train_cfg)
    runlog = RunLog(method or model.kind)
    subjects = list(range(len(records)))
    start = time.perf_counter()
    for t in range(train_cfg.iterations):
        model.params.zero_grad()
        shared = model.shared_features(coords)
        shared_leaf = Tensor(shared.data, requires_grad=shared.requires_grad)
        losses, images = [], []
        for i, rec in zip(subjects, records):
            out = model.forward(i, coords, shared=shared_leaf)
            loss, image = _measurement_loss(out, spatial, rec)
            loss.backward()
            losses.append(float(loss.data))
            images.append(image.data)
        if shared.requires_grad and shared_leaf.grad is not None:
            shared.backward(shared_leaf.grad)
        _guard(max(losses), train_cfg, t, model, dump_path)
        opt.step(train_cfg.lr_at(t))
        if (t + 1) % train_cfg.log_interval == 0:
            wall = 1000 * (time.perf_counter() - start)
            for i, rec, loss, image in zip(subjects, records, losses, images):
                runlog.add(t + 1, rec.id, loss, _psnr_against(rec, image), wall)
    return model, runlog


@dataclass
class FitResult:
    image: np.ndarray
    log: RunLog
    model: INRModel
    first_loss: float


def clone_model(model: INRModel) -> INRModel:
    """Deep copy through the checkpoint serialiser."""
    return checkpoint_from_bytes(checkpoint_bytes(model))


def fit_subject(model: INRModel, subject, record: MeasurementRecord, train_cfg: TrainConfig,
                partitions, method: str, dump_path=None) -> FitResult:
    """Optimise ``partitions`` of ``model`` against one record's measurements."""
    spatial, _ = _check_records([record], model.cfg)
    coords = CoordinateGrid(spatial).tensor()
    opt = Adam.from_config(model.params, train_cfg, partitions)
    runlog = RunLog(method)
    shared_cache = None
    shared_frozen = (isinstance(model, (DisINR, StrainerLike))
                     and model.params.is_frozen(SHARED_ENCODER))
    if shared_frozen:
        with dc.no_grad():
            shared_cache = model.shared_features(coords)
    first_loss = None
    start = time.perf_counter()
    for t in range(train_cfg.iterations):
        model.params.zero_grad()
        if shared_cache is not None:
            out = model.forward(subject, coords, shared=shared_cache)
        else:
            out = model.forward(subject, coords)
        loss, image = _measurement_loss(out, spatial, record)
        loss.backward()
        value = float(loss.data)
        if first_loss is None:
            first_loss = value
        _guard(value, train_cfg, t, model, dump_path)
        opt.step(train_cfg.lr_at(t))
        if (t + 1) % train_cfg.log_interval == 0:
            runlog.add(t + 1, record.id, value, _psnr_against(record, image.data),
                       1000 * (time.perf_counter() - start))
    final = model.render(subject, coords, spatial)
    return FitResult(final, runlog, model, first_loss)


def _shared_names(model: INRModel) -> list[str]:
    if isinstance(model, DisINR):
        return [SHARED_ENCODER, SHARED_DECODER]
    return [SHARED_ENCODER]


def adapt(record: MeasurementRecord, pretrained: INRModel, train_cfg: TrainConfig,
          freeze_shared: bool | None = None, seed: int | None = None, key="test",
          copy_from=None, in_place: bool = False, method: str | None = None,
          dump_path=None) -> FitResult:
    """Test-time adaptation of a fresh subject partition to a new measurement.

    DisINR freezes its shared encoder-decoder pair by default and trains
    only the new subject encoder; StrainerLike trains everything by
    default.  The pretrained model is cloned first unless ``in_place``.
    """
    if not isinstance(pretrained, (DisINR, StrainerLike)):
        raise ConfigError("adapt needs a pretrained DisINR or StrainerLike model")
    if freeze_shared is None:
        freeze_shared = isinstance(pretrained, DisINR)
    seed = train_cfg.seed if seed is None else seed
    model = pretrained if in_place else clone_model(pretrained)
    spawn_subject_encoder(model, subseed(seed, "adapt"), key, copy_from=copy_from)
    shared = _shared_names(model)
    if freeze_shared:
        model.params.freeze(shared)
    else:
        model.params.unfreeze(shared)
    partitions = [subject_partition(model.kind, key)] + ([] if freeze_shared else shared)
    label = method or f"{model.kind}{'_frozen' if freeze_shared else '_full'}"
    return fit_subject(model, key, record, train_cfg, partitions, label, dump_path)


def fit_naive(record: MeasurementRecord, model_cfg: ModelConfig, train_cfg: TrainConfig,
              seed: int | None = None, dump_path=None) -> FitResult:
    """Plain INR fitted from scratch to one record."""
    seed = train_cfg.seed if seed is None else seed
    cfg = ModelConfig(**{**model_cfg.__dict__, "kind": "naive"})
    model = NaiveINR(cfg, subseed(seed, "naive"))
    return fit_subject(model, None, record, train_cfg, model.params.names(), "naive",
                       dump_path)


def ground_truth_records(records) -> list[MeasurementRecord]:
    """Identity-operator records built from the ground-truth images."""
    from .physics import IdentityOperator

    out = []
    for rec in records:
        if rec.ground_truth is None:
            raise ConfigError(f"record {rec.id} has no ground truth")
        op = IdentityOperator(rec.ground_truth.shape)
        desc, _ = op.descriptor()
        out.append(MeasurementRecord(rec.id, rec.ground_truth.copy(), desc, {}, 0.0,
                                     rec.ground_truth, op))
    return out


def pretrain_strainer(records, model_cfg: ModelConfig, train_cfg: TrainConfig,
                      use_ground_truth: bool = True) -> tuple[StrainerLike, RunLog]:
    """STRAINER-style pre-training; by default on clean images, as that method assumes."""
    cfg = ModelConfig(**{**model_cfg.__dict__, "kind": "strainer"})
    data = ground_truth_records(records) if use_ground_truth else records
    return pretrain(data, cfg, train_cfg, method="strainer")


ABLATION_MODES = ("strainer_full", "strainer_freeze_encoder", "freeze_none", "freeze_all_shared")
ABLATION_LABELS = {
    "strainer_full": ("STRAINER (w/o Frozen)", "N/A"),
    "strainer_freeze_encoder": ("STRAINER (w/ Frozen)", "Shared Encoder"),
    "freeze_none": ("DisINR (w/o Frozen)", "N/A"),
    "freeze_all_shared": ("DisINR (w/ Frozen)", "Shared Encoder-Decoder Pair"),
    "naive": ("NGP (from scratch)", "N/A"),
}


@dataclass
class AblationResult:
    reports: dict = field(default_factory=dict)
    first_losses: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)

    def table_rows(self) -> list[tuple]:
        rows = []
        for mode, report in self.reports.items():
            s = report.summary()
            method, frozen = ABLATION_LABELS[mode]
            rows.append((mode, method, frozen, s["psnr_mean"], s["psnr_std"],
                         s["ssim_mean"], s["ssim_std"]))
        return rows

    def markdown(self) -> str:
        lines = ["| Method | Frozen Components | PSNR | SSIM |", "|---|---|---|---|"]
        for _, method, frozen, pm, ps, sm, ss in self.table_rows():
            lines.append(f"| {method} | {frozen} | {pm:.2f} ± {ps:.2f} | {sm:.3f} ± {ss:.3f} |")
        return "\n".join(lines) + "\n"


def run_ablation(test_records, disinr: DisINR | None, strainer: StrainerLike | None,
                 train_cfg: TrainConfig, modes=ABLATION_MODES, seed: int | None = None,
                 include_naive: bool = False, model_cfg: ModelConfig | None = None
                 ) -> AblationResult:
    """Adapt every test record under each freezing configuration and score it."""
    seed = train_cfg.seed if seed is None else seed
    result = AblationResult()
    modes = list(modes) + (["naive"] if include_naive else [])
    for mode in modes:
        if mode not in ABLATION_LABELS:
            raise ConfigError(f"unknown ablation mode {mode!r}")
        if mode.startswith("strainer") and strainer is None:
            raise ConfigError(f"mode {mode!r} needs a pretrained STRAINER-style model")
        if mode.startswith("freeze") and disinr is None:
            raise ConfigError(f"mode {mode!r} needs a pretrained DisINR model")
        report = MetricReport(mode)
        result.first_losses[mode] = []
        result.logs[mode] = []
        for rec in test_records:
            rec_seed = subseed(seed, "record", rec.id)
            if mode == "naive":
                fit = fit_naive(rec, model_cfg or disinr.cfg, train_cfg, seed=rec_seed)
            elif mode.startswith("strainer"):
                fit = adapt(rec, strainer, train_cfg, seed=rec_seed,
                            freeze_shared=(mode == "strainer_freeze_encoder"), method=mode)
            else:
                fit = adapt(rec, disinr, train_cfg, seed=rec_seed,
                            freeze_shared=(mode == "freeze_all_shared"), method=mode)
            p, s = image_metrics(fit.image, rec.ground_truth)
            report.add(rec.id, p, s)
            result.first_losses[mode].append(fit.first_loss)
            result.logs[mode].append(fit.log)
            log.info("%s %s psnr=%.2f ssim=%.3f", mode, rec.id, p, s)
        result.reports[mode] = report
    return result
