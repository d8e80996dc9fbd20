import json

import numpy as np
import pytest

from disinr.cli import main, run_command
from disinr.config import ExperimentConfig, load_config, parse_config, simulate_dataset
from disinr.data import load_container, load_record
from disinr.errors import ConfigError
from disinr.models import SHARED_DECODER, SHARED_ENCODER, load_checkpoint
from disinr.physics import to_complex
from disinr.training import evaluate_loss

TINY = """
# small identity experiment
task: volume_fit
seed: 3
phantom: {{shape: [32, 32], n: 5, lesion_prob: 1.0}}
pretrain: {{iterations: 20, log_interval: 5}}
adapt: {{iterations: 10, log_interval: 5}}
out: {out}
"""

TINY_MRI = """
task: mri
seed: 1
phantom: {{shape: [32, 32], n: 5}}
operator: {{kind: fourier, pattern: cartesian, acceleration: 4, acs: 4}}
pretrain: {{iterations: 4, log_interval: 2}}
adapt: {{iterations: 4, log_interval: 2}}
out: {out}
"""


def write_config(tmp_path, template=TINY, name="cfg.yaml"):
    out = tmp_path / "run"
    path = tmp_path / name
    path.write_text(template.format(out=out))
    return str(path), out


def ok(argv):
    code, result = run_command(argv)
    assert code == 0, argv
    return result


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg, out = write_config(tmp)
    ok(["simulate", "--config", cfg])
    ok(["pretrain", "--config", cfg])
    return cfg, out


# -- configuration -------------------------------------------------------------


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        parse_config("task: ct\nbogus: 1\n")
    with pytest.raises(ConfigError):
        parse_config("phantom: {shape: [8, 8], colour: red}\n")
    with pytest.raises(ConfigError):
        parse_config("pretrain: {iterations: 10, momentum: 0.9}\n")
    with pytest.raises(ConfigError):
        parse_config("task: mri\n")  # identity operator does not fit MRI
    with pytest.raises(ConfigError):
        parse_config("task: [unclosed\n")


def test_defaults():
    cfg = load_config()
    assert cfg.task == "volume_fit" and cfg.preset == "desk"
    assert cfg.phantom_config().n == 10
    assert cfg.train_config("pretrain").seed != cfg.train_config("adapt").seed
    ct = parse_config("task: ct\noperator: {kind: fanbeam}\n")
    assert ct.phantom_config().shape == (128, 128) and ct.geometry().n_views == 60


def test_resolved_echo_round_trips(tmp_path):
    cfg_path, out = write_config(tmp_path, TINY_MRI)
    ok(["simulate", "--config", cfg_path, "--seed", "9"])
    echo = load_config(out / "dataset" / "config.yaml")
    direct = load_config(cfg_path).with_overrides(seed=9).resolved()
    assert echo == ExperimentConfig.from_dict(direct.to_dict())
    assert echo.seed == 9 and echo.phantom["shape"] == (32, 32)


def test_default_simulate_gives_ten_records(tmp_path, capsys):
    ok(["simulate", "--out", str(tmp_path / "d")])
    splits = json.loads((tmp_path / "d" / "dataset" / "splits.json").read_text())
    assert [len(splits[k]) for k in ("pretrain", "test_in", "test_out")] == [6, 2, 2]
    assert "simulated 10 records" in capsys.readouterr().out


def test_mri_summary_reports_acceleration(tmp_path, capsys):
    cfg_path, out = write_config(tmp_path, TINY_MRI)
    ok(["simulate", "--config", cfg_path])
    summary = json.loads((out / "dataset" / "summary.json").read_text())
    assert abs(summary["acceleration"] / 4 - 1) <= 0.15
    assert "acceleration" in capsys.readouterr().out


def test_out_of_domain_split(tmp_path):
    text = TINY.format(out=tmp_path / "r") + "split: {out_of_domain: {family: shepp_logan}}\n"
    splits, _ = simulate_dataset(parse_config(text))
    assert all(r.id.startswith("o") for r in splits["test_out"])
    assert all(r.id.startswith("s") for r in splits["pretrain"])


# -- exit codes ------------------------------------------------------------------


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("task: volume_fit\nunknown: 1\n")
    assert main(["simulate", "--config", str(bad)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["pretrain", "--out", str(tmp_path / "empty")]) == 2
    assert main(["nonsense"]) == 2
    assert main(["simulate", "--seed", "-1"]) == 2


def test_divergence_exits_three(tmp_path):
    text = TINY + "  \n"
    cfg_path, out = write_config(tmp_path, text.replace("log_interval: 5}}\nadapt",
                                                        "log_interval: 5, divergence_threshold: "
                                                        "1.0e-9}}\nadapt", 1))
    ok(["simulate", "--config", cfg_path])
    assert main(["pretrain", "--config", cfg_path]) == 3
    assert (out / "pretrain" / "diverged.ckpt").is_file()


def test_baseline_mismatch_leaves_no_stage(tiny_run):
    cfg, out = tiny_run
    assert main(["adapt", "--config", cfg, "--baseline", "fbp"]) == 2
    assert not (out / "adapt" / "fbp").exists()
    assert main(["adapt", "--config", cfg, "--baseline", "bogus"]) == 2


# -- pipeline --------------------------------------------------------------------


def test_pretrain_outputs(tiny_run):
    cfg, out = tiny_run
    pre = out / "pretrain"
    rows = (pre / "log.csv").read_text().splitlines()[1:]
    subjects = json.loads((pre / "subjects.json").read_text())
    assert len(rows) == (20 // 5) * len(subjects)
    summary = json.loads((pre / "summary.json").read_text())
    model = load_checkpoint(pre / "model.ckpt")
    for idx, rid in subjects.items():
        rec = load_record(out / "dataset" / "records" / f"{rid}.dinr")
        assert summary["final_loss"][rid] < summary["first_logged_loss"][rid]
        assert evaluate_loss(model, int(idx), rec) == pytest.approx(summary["final_loss"][rid],
                                                                    abs=1e-6)
        assert (pre / "images" / f"{rid}.pgm").is_file()
    assert (pre / "config.yaml").is_file()


def test_adapt_keeps_shared_partitions(tiny_run, capsys):
    cfg, out = tiny_run
    result = ok(["adapt", "--config", cfg])
    assert "trainable parameters during adaptation" in capsys.readouterr().out
    stage = out / "adapt" / "disinr" / result["record"]
    pre = load_checkpoint(out / "pretrain" / "model.ckpt").params.snapshot()
    post = load_checkpoint(stage / "adapted.ckpt").params.snapshot()
    for name in (SHARED_ENCODER, SHARED_DECODER):
        for x, y in zip(pre[name], post[name]):
            assert x.tobytes() == y.tobytes()
    metrics = (stage / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "method,record_id,psnr_db,ssim" and len(metrics) == 2
    assert np.isfinite(result["psnr"])
    for name in ("recon.dinr", "recon.pgm", "curve.csv", "result.json", "config.yaml"):
        assert (stage / name).is_file()


def test_adapt_on_pretrain_record_warns(tiny_run, caplog):
    cfg, out = tiny_run
    rid = json.loads((out / "dataset" / "splits.json").read_text())["pretrain"][0]
    ok(["adapt", "--config", cfg, "--record", rid, "--baseline", "naive"])
    assert any("pre-training split" in r.message for r in caplog.records)


def test_ablate_eval_and_viz(tiny_run):
    cfg, out = tiny_run
    ok(["pretrain", "--config", cfg, "--baseline", "strainer"])
    result = ok(["ablate", "--config", cfg])
    assert len(result["rows"]) == 5
    assert all(np.isfinite(r[3]) and np.isfinite(r[5]) for r in result["rows"])
    again = ok(["ablate", "--config", cfg])
    assert again["rows"] == result["rows"]
    table = (out / "ablate" / "ablation.md").read_text()
    assert table.count("\n") == 7

    ok(["adapt", "--config", cfg])
    summary = ok(["eval", "--config", cfg])
    assert any(s["method"].startswith("disinr/") for s in summary["summaries"])
    assert (out / "eval" / "report.csv").is_file()

    splits = json.loads((out / "dataset" / "splits.json").read_text())
    shared = []
    for rid in splits["pretrain"][:2]:
        res = ok(["viz", "--config", cfg, "--record", rid])
        assert sorted(res["images"]) == sorted(
            [f"{t}_pc{j}" for t in ("shared", "subject") for j in (1, 2, 3)] + ["error"])
        sections, _ = load_container(out / "viz" / rid / "components.dinr")
        shared.append(sections["shared_pc1"][1])
    assert shared[0].tobytes() == shared[1].tobytes()


def test_zero_filled_baseline_is_adjoint(tmp_path):
    cfg, out = write_config(tmp_path, TINY_MRI)
    ok(["simulate", "--config", cfg])
    res = ok(["adapt", "--config", cfg, "--baseline", "zf"])
    rec = load_record(out / "dataset" / "records" / f"{res['record']}.dinr")
    sections, _ = load_container(out / "adapt" / "zf" / res["record"] / "recon.dinr")
    np.testing.assert_array_equal(sections["recon"][1], rec.operator.adjoint(rec.measurement))
    assert np.iscomplexobj(to_complex(sections["recon"][1]))


def test_simulate_is_idempotent(tmp_path):
    cfg, out = write_config(tmp_path)
    ok(["simulate", "--config", cfg])
    first = {p.name: p.read_bytes() for p in sorted((out / "dataset" / "records").iterdir())}
    ok(["simulate", "--config", cfg])
    second = {p.name: p.read_bytes() for p in sorted((out / "dataset" / "records").iterdir())}
    assert first == second
