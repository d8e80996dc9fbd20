"""Command-line front end.

``disinr <command> [--config FILE] [--out DIR] [--seed N] [--preset NAME]``

Commands share one run directory (``--out``, default taken from the
config) with this layout::

    dataset/           simulated records, split and summary
    pretrain/          checkpoint, training log, fitted pre-training images
    pretrain_strainer/ the same for the STRAINER-style baseline
    adapt/<method>/<record>/  reconstruction, curve, metrics, checkpoint
    ablate/            freezing ablation table
    eval/              aggregated metric report and convergence curves
    viz/<record>/      PCA feature images and error map

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data as dmod
from .config import ExperimentConfig, dataset_summary, load_config, simulate_dataset
from .errors import ConfigError, DimensionError, DivergenceError, DomainError, EvaluationError
from .evaluation import (
    MetricReport, curve_report, image_metrics, pca_features, write_curves_csv, write_report_csv,
)
from .models import (
    DisINR, StrainerLike, count_parameters, load_checkpoint, save_checkpoint,
    subject_partition,
)
from .physics import FanBeamOperator, FourierOperator, fbp_reconstruct, magnitude, zero_filled
from .seeding import subseed
from .training import (
    ABLATION_MODES, adapt, evaluate_loss, fit_naive, ground_truth_records, pretrain,
    pretrain_strainer, run_ablation,
)
from .encoders import CoordinateGrid

log = logging.getLogger("disinr")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
BASELINES = ("naive", "strainer", "fbp", "zf")
COMMANDS = ("simulate", "pretrain", "adapt", "ablate", "eval", "viz")
CONFIG_ECHO = "config.yaml"


# ---------------------------------------------------------------------------
# run-directory helpers


class Run:
    """Paths and cached artefacts of one experiment directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = Path(out)

    @property
    def dataset(self) -> Path:
        return self.out / "dataset"

    def pretrain_dir(self, strainer: bool = False) -> Path:
        return self.out / ("pretrain_strainer" if strainer else "pretrain")

    def checkpoint(self, strainer: bool = False) -> Path:
        return self.pretrain_dir(strainer) / "model.ckpt"

    def stage(self, *parts) -> Path:
        path = self.out.joinpath(*parts)
        path.mkdir(parents=True, exist_ok=True)
        (path / CONFIG_ECHO).write_text(self.cfg.to_yaml())
        return path

    def splits(self) -> dict:
        path = self.dataset / "splits.json"
        if not path.is_file():
            raise ConfigError(f"no dataset at {self.dataset}; run 'disinr simulate' first")
        ids = json.loads(path.read_text())
        return {name: [self.record(rid) for rid in rids] for name, rids in ids.items()}

    def record(self, rid: str) -> dmod.MeasurementRecord:
        path = self.dataset / "records" / f"{rid}.dinr"
        if not path.is_file():
            raise ConfigError(f"record {rid!r} not found in {self.dataset}")
        return dmod.load_record(path)

    def load_model(self, path=None, strainer: bool = False):
        path = Path(path) if path is not None else self.checkpoint(strainer)
        if not path.is_file():
            what = "STRAINER-style " if strainer else ""
            raise ConfigError(f"no {what}checkpoint at {path}; run 'disinr pretrain' first")
        return load_checkpoint(path)


def _split_of(splits: dict, rid: str) -> str | None:
    for name, recs in splits.items():
        if any(r.id == rid for r in recs):
            return name
    return None


def _pick_record(run: Run, splits: dict, rid: str | None) -> dmod.MeasurementRecord:
    if rid is None:
        pool = splits["test_in"] or splits["test_out"]
        if not pool:
            raise ConfigError("dataset has no test records; pass --record")
        return pool[0]
    where = _split_of(splits, rid)
    if where is None:
        raise ConfigError(f"record {rid!r} is not part of the dataset")
    if where == "pretrain":
        log.warning("record %s belongs to the pre-training split", rid)
    return run.record(rid)


def _display(image: np.ndarray) -> np.ndarray:
    return magnitude(image) if image.ndim == 3 else image


def _export_image(path: Path, image: np.ndarray) -> None:
    dmod.write_pgm(path, _display(image), window=(0.0, 1.0))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_metrics(path: Path, method: str, rid: str, psnr_db: float, ssim_score: float) -> None:
    report = MetricReport(method)
    report.add(rid, psnr_db, ssim_score)
    write_report_csv(path, [report])


def _parameter_report(cfg: ExperimentConfig, model) -> dict:
    counts = count_parameters(model.cfg)
    if isinstance(model, DisINR):
        trainable, pretrain_total = counts["disinr_adapt"], counts["disinr_pretrain"]
    else:
        trainable, pretrain_total = counts["strainer_adapt"], counts["strainer_pretrain"]
    return {"preset": cfg.preset, "kind": model.kind,
            "trainable_adapt": trainable, "pretrain_network": pretrain_total,
            "checkpoint_total": model.params.count(),
            "ratio": trainable / pretrain_total}


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: ExperimentConfig, run: Run, args) -> dict:
    splits, op = simulate_dataset(cfg)
    out = run.stage("dataset")
    (out / "records").mkdir(exist_ok=True)
    (out / "ground_truth").mkdir(exist_ok=True)
    for part in splits.values():
        for rec in part:
            dmod.save_record(rec, out / "records" / f"{rec.id}.dinr")
            _export_image(out / "ground_truth" / f"{rec.id}.pgm", rec.ground_truth)
    _write_json(out / "splits.json", {k: [r.id for r in v] for k, v in splits.items()})
    summary = dataset_summary(cfg, splits, op)
    _write_json(out / "summary.json", summary)
    line = (f"simulated {summary['n']} records "
            f"(pretrain {summary['split']['pretrain']}, test_in {summary['split']['test_in']}, "
            f"test_out {summary['split']['test_out']}); image {tuple(summary['image_shape'])}, "
            f"measurement {tuple(summary['measurement_shape'])}")
    if "acceleration" in summary:
        line += (f"; acceleration {summary['acceleration']:.2f} "
                 f"(requested {cfg.operator.acceleration:g})")
    print(line)
    return summary


def cmd_pretrain(cfg: ExperimentConfig, run: Run, args) -> dict:
    splits = run.splits()
    records = splits["pretrain"]
    if not records:
        raise ConfigError("the pre-training split is empty")
    strainer = args.baseline == "strainer" or cfg.model.kind == "strainer"
    if args.baseline not in (None, "strainer"):
        raise ConfigError(f"pretrain supports --baseline strainer only, not {args.baseline!r}")
    if cfg.model.kind == "naive":
        raise ConfigError("a naive INR has nothing to pre-train; use 'adapt --baseline naive'")
    out = run.stage(run.pretrain_dir(strainer).name)
    tc = cfg.train_config("pretrain")
    mcfg = cfg.model_config()
    dump = out / "diverged.ckpt"
    if strainer:
        model, runlog = pretrain_strainer(records, mcfg, tc)
    else:
        model, runlog = pretrain(records, mcfg, tc, dump_path=dump)
    save_checkpoint(model, run.checkpoint(strainer))
    runlog.to_csv(out / "log.csv")
    (out / "images").mkdir(exist_ok=True)
    spatial = records[0].ground_truth.shape[:2]
    coords = CoordinateGrid(spatial).tensor()
    first, final = {}, {}
    for i, rec in enumerate(records):
        image = model.render(i, coords, spatial)
        _export_image(out / "images" / f"{rec.id}.pgm", image)
        losses = runlog.losses(rec.id)
        first[rec.id] = losses[0] if losses else None
        # loss of the saved parameters, i.e. after the last update
        final[rec.id] = evaluate_loss(model, i, ground_truth_records([rec])[0] if strainer else rec)
    _write_json(out / "subjects.json", {str(i): rec.id for i, rec in enumerate(records)})
    counts = {"parameters": model.params.count(), "subjects": len(records),
              "first_logged_loss": first, "final_loss": final}
    _write_json(out / "summary.json", counts)
    print(f"pre-trained {model.kind} on {len(records)} subjects for {tc.iterations} "
          f"iterations; {model.params.count()} parameters; checkpoint {run.checkpoint(strainer)}")
    return counts


def _baseline_image(method: str, rec: dmod.MeasurementRecord) -> np.ndarray:
    op = rec.operator
    if method == "fbp":
        if not isinstance(op, FanBeamOperator):
            raise ConfigError("--baseline fbp needs fan-beam CT data")
        return fbp_reconstruct(op.geom, rec.measurement).astype(np.float32)
    if not isinstance(op, FourierOperator):
        raise ConfigError("--baseline zf needs Fourier (MRI) data")
    return zero_filled(op, rec.measurement)


def cmd_adapt(cfg: ExperimentConfig, run: Run, args) -> dict:
    splits = run.splits()
    rec = _pick_record(run, splits, args.record)
    method = args.baseline or "disinr"
    if method not in ("disinr",) + BASELINES:
        raise ConfigError(f"unknown baseline {method!r}; choose from {BASELINES}")
    tc = cfg.train_config("adapt")
    rec_seed = subseed(cfg.seed, "record", rec.id)
    result = {"record": rec.id, "method": method, "split": _split_of(splits, rec.id)}
    model = None
    if method in ("disinr", "strainer"):
        strainer = method == "strainer"
        model = run.load_model(args.checkpoint, strainer=strainer)
        if strainer != isinstance(model, StrainerLike):
            raise ConfigError("checkpoint kind does not match the requested method")
        result["parameters"] = _parameter_report(cfg, model)
    elif method in ("fbp", "zf"):
        image = _baseline_image(method, rec)
    out = run.stage("adapt", method, rec.id)
    fit = None
    if method == "naive":
        fit = fit_naive(rec, cfg.model_config(), tc, seed=rec_seed)
    elif model is not None:
        p = result["parameters"]
        print(f"trainable parameters during adaptation: {p['trainable_adapt']} of "
              f"{p['pretrain_network']} pre-training parameters ({100 * p['ratio']:.2f}%)")
        fit = adapt(rec, model, tc, seed=rec_seed, dump_path=out / "diverged.ckpt")
        save_checkpoint(fit.model, out / "adapted.ckpt")
    if fit is not None:
        image = fit.image
        fit.log.to_csv(out / "curve.csv")
    dmod.save_container(out / "recon.dinr", [("image", "recon", image)],
                        {"record": rec.id, "method": method})
    _export_image(out / "recon.pgm", image)
    if rec.ground_truth is not None:
        p, s = image_metrics(image, rec.ground_truth)
        _write_metrics(out / "metrics.csv", method, rec.id, p, s)
        result.update(psnr=p, ssim=s)
        print(f"{method} {rec.id}: PSNR {p:.2f} dB, SSIM {s:.4f}")
    _write_json(out / "result.json", result)
    return result


def cmd_ablate(cfg: ExperimentConfig, run: Run, args) -> dict:
    splits = run.splits()
    records = splits["test_in"] or splits["test_out"]
    if args.record is not None:
        records = [_pick_record(run, splits, args.record)]
    if not records:
        raise ConfigError("no test records to ablate on")
    disinr = run.load_model(args.checkpoint)
    modes = list(ABLATION_MODES)
    try:
        strainer = run.load_model(strainer=True)
    except ConfigError:
        strainer = None
        modes = [m for m in modes if not m.startswith("strainer")]
        log.warning("no STRAINER-style checkpoint; ablating DisINR rows only")
    tc = cfg.train_config("adapt")
    result = run_ablation(records, disinr, strainer, tc, modes=modes,
                          seed=subseed(cfg.seed, "ablate"), include_naive=True,
                          model_cfg=cfg.model_config())
    out = run.stage("ablate")
    table = result.markdown()
    (out / "ablation.md").write_text(table)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("mode", "method", "frozen", "psnr_mean", "psnr_std",
                         "ssim_mean", "ssim_std"))
        for row in result.table_rows():
            writer.writerow([row[0], row[1], row[2]] + [repr(float(v)) for v in row[3:]])
    write_report_csv(out / "metrics.csv", list(result.reports.values()))
    logs = [lg for mode in result.logs for lg in result.logs[mode]]
    write_curves_csv(out / "curves.csv", curve_report(logs))
    print(table, end="")
    return {"rows": result.table_rows()}


def _read_metric_rows(path: Path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(r["method"], r["record_id"], float(r["psnr_db"]), float(r["ssim"]))
                for r in reader]


def cmd_eval(cfg: ExperimentConfig, run: Run, args) -> dict:
    """Aggregate every adaptation result of the run into one report."""
    from .training import RunLog

    root = run.out / "adapt"
    metric_files = sorted(root.glob("*/*/metrics.csv")) if root.is_dir() else []
    if not metric_files:
        raise ConfigError(f"no adaptation results under {root}; run 'disinr adapt' first")
    splits = run.splits()
    reports: dict[str, MetricReport] = {}
    for path in metric_files:
        for method, rid, p, s in _read_metric_rows(path):
            where = _split_of(splits, rid) or "unknown"
            label = f"{method}/{where}"
            reports.setdefault(label, MetricReport(label)).add(rid, p, s)
    logs = []
    for path in sorted(root.glob("*/*/curve.csv")):
        runlog = RunLog(path.parent.parent.name)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                psnr_db = float(row["psnr"]) if row["psnr"] else None
                runlog.add(int(row["iteration"]), row["subject_id"], float(row["loss"]),
                           psnr_db, float(row["wall_ms"]))
        logs.append(runlog)
    out = run.stage("eval")
    ordered = [reports[k] for k in sorted(reports)]
    write_report_csv(out / "report.csv", ordered)
    write_curves_csv(out / "curves.csv", curve_report(logs))
    lines = ["| Method / split | N | PSNR | SSIM |", "|---|---|---|---|"]
    summaries = []
    for report in ordered:
        s = report.summary()
        summaries.append(s)
        lines.append(f"| {s['method']} | {s['n']} | {s['psnr_mean']:.2f} ± {s['psnr_std']:.2f} "
                     f"| {s['ssim_mean']:.4f} ± {s['ssim_std']:.4f} |")
    text = "\n".join(lines) + "\n"
    (out / "summary.md").write_text(text)
    print(text, end="")
    return {"summaries": summaries}


def _component_images(components: np.ndarray, spatial) -> list[np.ndarray]:
    return [components[:, j].reshape(spatial) for j in range(components.shape[1])]


def cmd_viz(cfg: ExperimentConfig, run: Run, args) -> dict:
    """PCA of shared and subject features plus the reconstruction error map.

    Pre-training subjects use their own encoder from the checkpoint; any
    other record uses its adapted checkpoint, adapting first if needed.
    """
    splits = run.splits()
    rec = _pick_record(run, splits, args.record)
    pre_ids = [r.id for r in splits["pretrain"]]
    if rec.id in pre_ids:
        model = run.load_model(args.checkpoint)
        subject = pre_ids.index(rec.id)
    else:
        adapted = run.out / "adapt" / "disinr" / rec.id / "adapted.ckpt"
        if adapted.is_file() and args.checkpoint is None:
            model = load_checkpoint(adapted)
        else:
            base = run.load_model(args.checkpoint)
            model = adapt(rec, base, cfg.train_config("adapt"),
                          seed=subseed(cfg.seed, "record", rec.id)).model
        subject = "test"
    if not isinstance(model, DisINR):
        raise ConfigError("viz needs a DisINR checkpoint")
    if subject_partition(model.kind, subject) not in model.params:
        raise ConfigError(f"checkpoint has no subject encoder for {rec.id}")
    spatial = rec.ground_truth.shape[:2]
    coords = CoordinateGrid(spatial).tensor()
    from .diffcore import no_grad

    with no_grad():
        shared = model.shared_features(coords).data
        own = model.subject_features(subject, coords).data
    recon = model.render(subject, coords, spatial)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        shared_pc, shared_ratio = pca_features(shared, 3)
        subject_pc, subject_ratio = pca_features(own, 3)
    out = run.stage("viz", rec.id)
    sections = []
    written = []
    for tag, comps in (("shared", shared_pc), ("subject", subject_pc)):
        for j, img in enumerate(_component_images(comps, spatial)):
            name = f"{tag}_pc{j + 1}"
            dmod.write_pgm(out / f"{name}.pgm", img)
            sections.append(("image", name, img.astype(np.float32)))
            written.append(name)
    error = np.abs(_display(recon) - _display(rec.ground_truth))
    dmod.write_pgm(out / "error.pgm", error, window=(0.0, max(float(error.max()), 1e-12)))
    sections.append(("image", "error", error.astype(np.float32)))
    dmod.save_container(out / "components.dinr", sections,
                        {"record": rec.id, "shared_ratio": shared_ratio.tolist(),
                         "subject_ratio": subject_ratio.tolist()})
    print(f"wrote {len(written)} component images and 1 error map to {out}")
    return {"images": written + ["error"], "out": str(out)}


HANDLERS = {"simulate": cmd_simulate, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "ablate": cmd_ablate, "eval": cmd_eval, "viz": cmd_viz}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disinr", description="Disentangled INR reconstruction experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML experiment file (default: built-in desk config)")
    parser.add_argument("--out", help="run directory (overrides the config's 'out')")
    parser.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    parser.add_argument("--preset", choices=("paper", "desk"), help="model/geometry preset")
    parser.add_argument("--baseline", help="naive | strainer | fbp | zf")
    parser.add_argument("--record", help="record id for adapt / viz (default: first test record)")
    parser.add_argument("--checkpoint", help="pre-trained checkpoint (default: from the run dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve(args) -> tuple[ExperimentConfig, Run]:
    cfg = load_config(args.config)
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    cfg = cfg.with_overrides(seed=args.seed, preset=args.preset, out=args.out)
    cfg = ExperimentConfig.from_dict(cfg.resolved().to_dict())
    return cfg, Run(cfg, Path(cfg.out))


def run_command(argv=None) -> tuple[int, dict | None]:
    """Parse ``argv``, run the command and return ``(exit_code, result)``."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return (EXIT_OK if exc.code == 0 else EXIT_INPUT), None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, run = resolve(args)
        return EXIT_OK, HANDLERS[args.command](cfg, run, args)
    except (ConfigError, DimensionError, DomainError, FileNotFoundError) as exc:
        print(f"disinr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT, None
    except DivergenceError as exc:
        print(f"disinr {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, None
    except (EvaluationError, FloatingPointError) as exc:
        print(f"disinr {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC, None


def main(argv=None) -> int:
    return run_command(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
