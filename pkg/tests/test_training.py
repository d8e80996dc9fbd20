import numpy as np
import pytest

from disinr import diffcore as dc
from disinr.data import PhantomFamilyConfig, gen_family, simulate_measurements
from disinr.diffcore import Tensor
from disinr.encoders import CoordinateGrid, HashEncodingConfig
from disinr.errors import ConfigError, DivergenceError, EvaluationError
from disinr.models import (
    SHARED_DECODER, SHARED_ENCODER, DisINR, ModelConfig, ParameterSet, checkpoint_bytes,
    subject_partition,
)
from disinr.physics import FourierOperator, IdentityOperator
from disinr.training import (
    Adam, RunLog, TrainConfig, adapt, fit_naive, pretrain, pretrain_strainer, run_ablation,
)

SMALL = ModelConfig(hash=HashEncodingConfig(levels=4, table_size=2**8, features=2), hidden=16,
                    decoder_hidden=16)


def family_records(n, shape=(16, 16), seed=0):
    imgs = gen_family(PhantomFamilyConfig(shape=shape, n=n, seed=seed))
    return simulate_measurements(imgs, IdentityOperator(shape), ids=[f"s{i}" for i in range(n)])


def single_param(value):
    ps = ParameterSet()
    w = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    ps.add("w", [w])
    return ps, w


# -- optimiser -----------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    ps, w = single_param(1.5)
    w.grad = np.zeros(1)
    opt = Adam(ps)
    for _ in range(3):
        opt.step(0.1)
    assert w.data[0] == 1.5


def test_adam_minimises_quadratic():
    with dc.precision(64):
        ps, w = single_param(0.0)
        opt = Adam(ps)
        for _ in range(500):
            ps.zero_grad()
            diff = dc.sub(w, Tensor([3.0]))
            dc.total(dc.mul(diff, diff)).backward()
            opt.step(0.1)
    assert abs(w.data[0] - 3) < 1e-2


def test_adam_rejects_nan_gradient():
    ps, w = single_param(1.0)
    w.grad = np.array([np.nan])
    with pytest.raises(EvaluationError):
        Adam(ps).step(0.1)


def test_adam_keeps_state_per_partition():
    ps = ParameterSet()
    a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    ps.add("a", [a])
    ps.add("b", [b])
    opt = Adam(ps)
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    ps.freeze(["b"])
    opt.step(0.1)
    assert set(opt.state) == {"a"} and b.data[0] == 1.0


def test_lr_schedule_is_exact():
    cfg = TrainConfig(lr=2e-3)
    for t, expected in [(0, 2e-3), (999, 2e-3), (1000, 1e-3), (2500, 5e-4), (3999, 2.5e-4)]:
        assert cfg.lr_at(t) == expected
    assert TrainConfig().iterations == 4000 and TrainConfig().lr == 1e-3
    with pytest.raises(ConfigError):
        TrainConfig(loss="l2")
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0)


# -- pre-training ----------------------------------------------------------------


def test_pretrain_loss_trend_and_log():
    recs = family_records(2)
    _, log = pretrain(recs, SMALL, TrainConfig(iterations=60, lr=1e-2, log_interval=6, seed=1))
    for rid in ("s0", "s1"):
        losses = log.losses(rid)
        assert len(losses) == 10
        assert np.mean(losses[-1:]) < np.mean(losses[:1])
        assert list(log.psnr_curve(rid)) == list(range(6, 61, 6))


def test_pretrain_subject_isolation():
    recs = family_records(2)
    model = DisINR(SMALL, 2, seed=0)
    coords = CoordinateGrid((16, 16)).tensor()
    out = model.forward(0, coords)
    dc.l1_loss(dc.reshape(out, (16, 16)), recs[0].measurement).backward()
    for t in model.params[subject_partition("disinr", 1)]:
        assert t.grad is None or not t.grad.any()
    assert any(t.grad is not None and t.grad.any()
               for t in model.params[subject_partition("disinr", 0)])


def test_pretrain_is_deterministic():
    recs = family_records(2)
    cfg = TrainConfig(iterations=10, log_interval=5, seed=3)
    m1, l1 = pretrain(recs, SMALL, cfg)
    m2, l2 = pretrain(recs, SMALL, cfg)
    assert checkpoint_bytes(m1) == checkpoint_bytes(m2)
    assert l1.deterministic_rows() == l2.deterministic_rows()


def test_pretrain_validation():
    with pytest.raises(ConfigError):
        pretrain([], SMALL, TrainConfig(iterations=1))
    mixed = family_records(1) + family_records(1, shape=(12, 12))
    with pytest.raises(ConfigError):
        pretrain(mixed, SMALL, TrainConfig(iterations=1))
    with pytest.raises(ConfigError):
        pretrain(family_records(1), ModelConfig(**{**SMALL.__dict__, "channels": 2}),
                 TrainConfig(iterations=1))


def test_divergence_guard_dumps_checkpoint(tmp_path):
    recs = family_records(1)
    dump = tmp_path / "dump.ckpt"
    with pytest.raises(DivergenceError) as info:
        pretrain(recs, SMALL, TrainConfig(iterations=5, divergence_threshold=1e-9), dump_path=dump)
    assert info.value.iteration == 0 and dump.exists()


def test_strainer_pretrain_runs_on_images():
    model, log = pretrain_strainer(family_records(2), SMALL, TrainConfig(iterations=4,
                                                                         log_interval=2))
    assert model.kind == "strainer" and log.method == "strainer"


@pytest.mark.slow
def test_single_subject_pretrain_fits_image():
    # one subject through the identity operator is plain image fitting
    img = gen_family(PhantomFamilyConfig(shape=(64, 64), n=1, smooth=1.0, seed=2))
    rec = simulate_measurements(img, IdentityOperator((64, 64)))
    _, log = pretrain(rec, ModelConfig.preset("desk"),
                      TrainConfig(iterations=2000, log_interval=100, seed=0))
    assert log.psnr_curve()[2000] >= 35


# -- adaptation ------------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained():
    recs = family_records(3, seed=4)
    model, _ = pretrain(recs[:2], SMALL, TrainConfig(iterations=20, lr=1e-2, seed=0))
    return model, recs[2]


def test_adapt_never_touches_shared_partitions(pretrained):
    model, rec = pretrained
    before = checkpoint_bytes(model)
    snap = model.params.snapshot([SHARED_ENCODER, SHARED_DECODER])
    fit = adapt(rec, model, TrainConfig(iterations=15, lr=1e-2, log_interval=5))
    assert checkpoint_bytes(model) == before
    after = fit.model.params.snapshot([SHARED_ENCODER, SHARED_DECODER])
    for name in snap:
        for x, y in zip(snap[name], after[name]):
            assert x.tobytes() == y.tobytes()
    assert fit.image.shape == (16, 16)
    assert len(fit.log.losses()) == 3


def test_adapt_is_deterministic(pretrained):
    model, rec = pretrained
    cfg = TrainConfig(iterations=8, log_interval=4, seed=2)
    a, b = adapt(rec, model, cfg), adapt(rec, model, cfg)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.log.deterministic_rows() == b.log.deterministic_rows()


def test_adapt_unfrozen_moves_shared(pretrained):
    model, rec = pretrained
    fit = adapt(rec, model, TrainConfig(iterations=3, lr=1e-2), freeze_shared=False)
    before = model.params.snapshot([SHARED_DECODER])[SHARED_DECODER]
    after = fit.model.params.snapshot([SHARED_DECODER])[SHARED_DECODER]
    assert any(not np.array_equal(x, y) for x, y in zip(before, after))


def test_adapt_rejects_naive(pretrained):
    _, rec = pretrained
    naive = fit_naive(rec, SMALL, TrainConfig(iterations=2)).model
    with pytest.raises(ConfigError):
        adapt(rec, naive, TrainConfig(iterations=2))


def test_ablation_first_losses_agree(pretrained):
    model, rec = pretrained
    strainer, _ = pretrain_strainer(family_records(2, seed=4), SMALL, TrainConfig(iterations=5))
    res = run_ablation([rec], model, strainer, TrainConfig(iterations=4, log_interval=2),
                       seed=7, include_naive=True)
    assert res.first_losses["freeze_none"] == res.first_losses["freeze_all_shared"]
    assert res.first_losses["strainer_full"] == res.first_losses["strainer_freeze_encoder"]
    rows = res.table_rows()
    assert len(rows) == 5 and all(np.isfinite(r[3]) for r in rows)
    assert "DisINR (w/ Frozen)" in res.markdown()


def test_ablation_needs_models(pretrained):
    _, rec = pretrained
    with pytest.raises(ConfigError):
        run_ablation([rec], None, None, TrainConfig(iterations=1), modes=["freeze_none"])


@pytest.mark.slow
def test_full_mask_mri_adaptation():
    shape = (64, 64)
    from disinr.data import add_phase

    imgs = add_phase(gen_family(PhantomFamilyConfig(shape=shape, n=3, seed=5)), seed=5)
    recs = simulate_measurements(imgs, FourierOperator(np.ones(shape)),
                                 ids=["a", "b", "c"])
    cfg = ModelConfig.preset("desk", channels=2)
    model, _ = pretrain(recs[:2], cfg, TrainConfig(iterations=300, log_interval=100))
    fit = adapt(recs[2], model, TrainConfig(iterations=1500, log_interval=500))
    assert fit.log.psnr_curve()[1500] >= 40


def test_runlog_csv(tmp_path):
    log = RunLog("m")
    log.add(1, "a", 0.5, None, 2.0)
    log.add(2, "a", 0.25, 31.5, 4.0)
    with pytest.raises(EvaluationError):
        log.add(3, "a", float("nan"), None, 1.0)
    log.to_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "iteration,subject_id,loss,psnr,wall_ms"
    assert lines[1] == "1,a,0.5,,2.000"
