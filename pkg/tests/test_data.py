import numpy as np
import pytest

from disinr.data import (
    PhantomFamilyConfig, add_phase, base_phantom, container_bytes, gen_family, load_container,
    load_record, rasterize_ellipses, read_pgm, save_container, save_record, simulate_measurements,
    split, write_pgm,
)
from disinr.errors import ConfigError, DimensionError
from disinr.physics import (
    FanBeamGeometry, FanBeamOperator, FourierOperator, IdentityOperator, SamplingMaskConfig,
    adjoint_test, make_coil_maps, make_mask, view_angles,
)

STILL = dict(center_jitter=0, axis_jitter=0, angle_jitter=0, intensity_jitter=0, lesion_prob=0)


def test_family_is_pure_in_config():
    cfg = PhantomFamilyConfig(shape=(32, 32), n=4, seed=3)
    a = gen_family(cfg)
    assert a.tobytes() == gen_family(cfg).tobytes()
    assert a.min() >= 0 and a.max() <= 1 and a.shape == (4, 32, 32)
    assert not np.array_equal(a, gen_family(PhantomFamilyConfig(shape=(32, 32), n=4, seed=4)))


@pytest.mark.parametrize("family", ["ellipse", "shepp_logan"])
def test_zero_perturbation_gives_identical_subjects(family):
    imgs = gen_family(PhantomFamilyConfig(family=family, shape=(24, 24), n=3, **STILL))
    assert all(np.array_equal(imgs[0], im) for im in imgs[1:])
    np.testing.assert_array_equal(imgs[0], base_phantom(PhantomFamilyConfig(family=family,
                                                                             shape=(24, 24))))


def test_family_mean_correlates_with_base():
    cfg = PhantomFamilyConfig(shape=(48, 48), n=50, seed=1)
    mean = gen_family(cfg).mean(axis=0)
    r = np.corrcoef(mean.ravel(), base_phantom(cfg).ravel())[0, 1]
    assert r > 0.9


def test_family_config_validation():
    with pytest.raises(ConfigError):
        PhantomFamilyConfig(family="cat")
    with pytest.raises(ConfigError):
        PhantomFamilyConfig(n=0)
    with pytest.raises(ConfigError):
        PhantomFamilyConfig(lesion_size=(0.0, 0.1))
    with pytest.raises(ConfigError):
        rasterize_ellipses([(1.0, 0.0, 0.2, 0, 0, 0)], (8, 8))


def test_add_phase_keeps_magnitude():
    imgs = gen_family(PhantomFamilyConfig(shape=(16, 16), n=2))
    cplx = add_phase(imgs, seed=2)
    assert cplx.shape == (2, 16, 16, 2)
    np.testing.assert_allclose(np.hypot(cplx[..., 0], cplx[..., 1]), imgs, atol=1e-12)


def test_noiseless_measurements_are_exact(rng):
    imgs = rng.uniform(size=(3, 8, 8))
    recs = simulate_measurements(imgs, IdentityOperator((8, 8)))
    for rec, img in zip(recs, imgs):
        np.testing.assert_array_equal(rec.measurement, img.astype(np.float32))
        np.testing.assert_array_equal(rec.ground_truth, img.astype(np.float32))
    geom = FanBeamGeometry((16, 16), 1.0, 40.0, 40.0, 24, 1.0, view_angles(8))
    op = FanBeamOperator(geom)
    rec = simulate_measurements(rng.uniform(size=(1, 16, 16)), op)[0]
    np.testing.assert_array_equal(rec.measurement, op.forward(rec.ground_truth))


def test_noise_level():
    img = np.zeros((1, 200, 200))
    rec = simulate_measurements(img, IdentityOperator((200, 200)), noise_sigma=0.3, seed=5)[0]
    assert abs(rec.measurement.std() / 0.3 - 1) <= 0.05
    again = simulate_measurements(img, IdentityOperator((200, 200)), noise_sigma=0.3, seed=5)[0]
    assert rec.measurement.tobytes() == again.measurement.tobytes()


def test_simulation_errors():
    with pytest.raises(DimensionError):
        simulate_measurements(np.zeros((1, 4, 4)), IdentityOperator((5, 5)))
    with pytest.raises(ConfigError):
        simulate_measurements(np.zeros((1, 4, 4)), IdentityOperator((4, 4)), noise_sigma=-1)


def test_split_properties():
    recs = list(range(10))
    parts = split(recs, (0.6, 0.2, 0.2), seed=1)
    assert [len(parts[k]) for k in ("pretrain", "test_in", "test_out")] == [6, 2, 2]
    flat = sum(parts.values(), [])
    assert sorted(flat) == recs and len(set(flat)) == 10
    assert parts == split(recs, (0.6, 0.2, 0.2), seed=1)
    assert split(recs, (1, 0, 0))["pretrain"] == recs
    with pytest.raises(ConfigError):
        split(recs, (0.5, 0.5))


def test_container_roundtrip(tmp_path, rng):
    sections = [("image", "a", rng.normal(size=(3, 4)).astype(np.float32)),
                ("kspace", "k", rng.normal(size=(2, 3, 4, 2)).astype(np.float32))]
    path = tmp_path / "x.dinr"
    save_container(path, sections, {"note": "hi"})
    assert path.read_bytes()[:8] == b"DINRDAT1"
    loaded, meta = load_container(path)
    assert meta == {"note": "hi"}
    for kind, name, arr in sections:
        assert loaded[name][0] == kind
        assert loaded[name][1].tobytes() == arr.tobytes()
    assert container_bytes(sections, {"note": "hi"}) == path.read_bytes()
    bad = tmp_path / "bad.dinr"
    bad.write_bytes(b"NOTMAGIC")
    with pytest.raises(ConfigError):
        load_container(bad)


def record_operators():
    shape = (16, 16)
    mask = make_mask(SamplingMaskConfig("cartesian", 4.0, 2), shape)
    return [
        IdentityOperator(shape),
        FanBeamOperator(FanBeamGeometry(shape, 1.0, 40.0, 40.0, 24, 1.0, view_angles(8))),
        FourierOperator(mask, make_coil_maps(shape, 2, seed=1)),
    ]


@pytest.mark.parametrize("which", [0, 1, 2])
def test_record_roundtrip_and_operator(which, tmp_path, rng):
    op = record_operators()[which]
    imgs = rng.uniform(size=(1,) + tuple(op.image_shape))
    rec = simulate_measurements(imgs, op, noise_sigma=0.01, seed=2, ids=["r0"])[0]
    path = tmp_path / "r.dinr"
    save_record(rec, path)
    back = load_record(path)
    assert back.id == "r0" and back.noise_sigma == pytest.approx(0.01)
    assert back.measurement.tobytes() == rec.measurement.tobytes()
    assert back.ground_truth.tobytes() == rec.ground_truth.tobytes()
    assert max(adjoint_test(back.operator, rng) for _ in range(5)) <= 1e-4
    x = rec.ground_truth
    np.testing.assert_array_equal(back.operator.forward(x), rec.operator.forward(x))


def test_pgm_export(tmp_path):
    img = np.linspace(0, 2, 12).reshape(3, 4)
    lo, hi = write_pgm(tmp_path / "a.pgm", img)
    assert (lo, hi) == (0.0, 2.0)
    pixels = read_pgm(tmp_path / "a.pgm")
    assert pixels.shape == (3, 4) and pixels[0, 0] == 0 and pixels[-1, -1] == 255
    assert "max 2.0" in (tmp_path / "a.pgm.window.txt").read_text()
    write_pgm(tmp_path / "b.pgm", img, window=(0, 1))
    assert read_pgm(tmp_path / "b.pgm")[-1, -1] == 255
    with pytest.raises(DimensionError):
        write_pgm(tmp_path / "c.pgm", np.zeros((2, 2, 2)))
