import math

import numpy as np
import pytest

from disinr.errors import ConfigError, DimensionError, DomainError
from disinr.physics import (
    FanBeamGeometry, FanBeamOperator, FourierOperator, IdentityOperator, SamplingMaskConfig,
    adjoint_test, fbp_reconstruct, make_coil_maps, make_mask, operator_from_descriptor,
    realized_acceleration, to_complex, view_angles, zero_filled,
)

SMALL_GEOM = FanBeamGeometry((32, 32), 1.0, 60.0, 60.0, 48, 1.5, view_angles(12))


@pytest.fixture(scope="module")
def desk_ct():
    return FanBeamOperator(FanBeamGeometry.preset("desk", 60))


@pytest.fixture(scope="module")
def small_ct():
    return FanBeamOperator(SMALL_GEOM)


def soft_disk(shape, radius, width=1.5):
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    return 1 / (1 + np.exp((np.hypot(yy, xx) - radius) / width))


def fourier_ops():
    shape = (32, 32)
    coils = make_coil_maps(shape, 4, seed=3)
    return [
        FourierOperator(make_mask(SamplingMaskConfig("cartesian", 4.0, 4), shape)),
        FourierOperator(make_mask(SamplingMaskConfig("radial", 4.0), shape), coils),
        FourierOperator(make_mask(SamplingMaskConfig("poisson", 4.0, 4, seed=1), shape), coils),
    ]


# -- adjoint and linearity -----------------------------------------------------


def test_adjoint_identity_and_fourier(rng):
    for op in [IdentityOperator((8, 9))] + fourier_ops():
        errs = [adjoint_test(op, rng) for _ in range(20)]
        assert max(errs) <= 1e-4
        assert adjoint_test(op, rng, np.float64) <= 1e-10


def test_adjoint_fanbeam(desk_ct, rng):
    assert max(adjoint_test(desk_ct, rng) for _ in range(20)) <= 1e-4
    assert adjoint_test(desk_ct, rng, np.float64) <= 1e-10


def test_linearity(small_ct, rng):
    for op in [small_ct] + fourier_ops():
        x = rng.standard_normal(op.image_shape)
        z = rng.standard_normal(op.image_shape)
        a, b = rng.standard_normal(2)
        lhs = op.forward(a * x + b * z)
        rhs = a * op.forward(x) + b * op.forward(z)
        assert np.abs(lhs - rhs).max() <= 1e-5 * np.abs(rhs).max()


def test_zero_in_zero_out(small_ct):
    assert not small_ct.forward(np.zeros(small_ct.image_shape)).any()
    assert not small_ct.adjoint(np.zeros(small_ct.measurement_shape)).any()
    assert not fbp_reconstruct(SMALL_GEOM, np.zeros(SMALL_GEOM.sinogram_shape)).any()
    op = fourier_ops()[1]
    assert not op.forward(np.zeros(op.image_shape)).any()


def test_shape_mismatch_raises(small_ct):
    with pytest.raises(DimensionError):
        small_ct.forward(np.zeros((31, 32)))
    with pytest.raises(DimensionError):
        small_ct.adjoint(np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        fourier_ops()[0].forward(np.zeros((32, 32)))


# -- fan beam --------------------------------------------------------------------


def test_geometry_validation():
    with pytest.raises(ConfigError):
        FanBeamGeometry(angles=(0.5, 0.1))
    with pytest.raises(ConfigError):
        FanBeamGeometry(angles=(0.0, 7.0))
    with pytest.raises(ConfigError):
        FanBeamGeometry(detector_spacing=0.0)
    with pytest.raises(ConfigError):
        FanBeamGeometry.preset("huge")
    geom = FanBeamGeometry.preset("paper", 60)
    assert geom.image_shape == (256, 256) and geom.n_detectors == 500
    assert FanBeamGeometry.from_dict(geom.to_dict()) == geom


def test_centered_disk_sinogram_is_symmetric(desk_ct):
    sino = desk_ct.forward(soft_disk((128, 128), 30.0))
    err = np.abs(sino - sino[:, ::-1]).max() / np.abs(sino).max()
    assert err <= 1e-3


def test_central_ray_through_unit_pixel():
    # odd grid and odd detector count put a ray straight through the centre pixel
    geom = FanBeamGeometry((9, 9), 1.0, 40.0, 40.0, 5, 1.0, (0.0,))
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    sino = FanBeamOperator(geom).forward(img)
    # the chord through a unit pixel along an axis has length 1
    assert sino[0, 2] == pytest.approx(1.0, rel=0.05)


def test_shift_along_central_ray_is_invariant():
    # moving a blob along the central ray of view 0 keeps that ray's integral
    geom = FanBeamGeometry((33, 33), 1.0, 80.0, 80.0, 31, 1.0, (0.0,))
    op = FanBeamOperator(geom)
    img = np.zeros((33, 33))
    img[15:18, 10:13] = [[0.2, 0.5, 0.1], [0.7, 1.0, 0.3], [0.4, 0.6, 0.9]]
    shifted = np.roll(img, 1, axis=1)
    a, b = op.forward(img)[0, 15], op.forward(shifted)[0, 15]
    assert a == pytest.approx(b, rel=1e-6)


def test_one_hot_adjoint_stays_on_the_ray(small_ct):
    geom = small_ct.geom
    sino = np.zeros(geom.sinogram_shape)
    view, det = 3, 20
    sino[view, det] = 1.0
    back = small_ct.adjoint(sino)
    rows, cols = np.nonzero(back)
    assert rows.size > 0
    angle = geom.angles[view]
    u = np.array([math.cos(angle), math.sin(angle)])
    v = np.array([-math.sin(angle), math.cos(angle)])
    src = -geom.source_to_center * u
    end = geom.center_to_detector * u + geom.detector_offsets()[det] * v
    d = (end - src) / np.linalg.norm(end - src)
    h, w = geom.image_shape
    pts = np.stack([cols - (w - 1) / 2, rows - (h - 1) / 2], axis=1) - src
    dist = np.abs(pts[:, 0] * d[1] - pts[:, 1] * d[0])
    # a bilinear sample touches pixels at most one voxel diagonal away
    assert dist.max() <= math.sqrt(2) + 1e-9


def test_fbp_full_and_sparse_views():
    phantom = soft_disk((128, 128), 35.0, 1.0) * 0.8
    scores = {}
    for views in (360, 60):
        geom = FanBeamGeometry.preset("desk", views)
        recon = fbp_reconstruct(geom, FanBeamOperator(geom).forward(phantom))
        mse = np.mean((recon - phantom) ** 2)
        scores[views] = 10 * np.log10(1 / mse)
    assert scores[360] >= 25
    assert scores[60] < scores[360]


def test_fbp_needs_two_views():
    geom = FanBeamGeometry((16, 16), 1.0, 40.0, 40.0, 24, 1.0, (0.0,))
    with pytest.raises(DomainError):
        fbp_reconstruct(geom, np.zeros(geom.sinogram_shape))


def test_descriptor_roundtrip(small_ct, rng):
    for op in [small_ct, IdentityOperator((4, 5))] + fourier_ops():
        desc, arrays = op.descriptor()
        back = operator_from_descriptor(desc, arrays)
        x = rng.standard_normal(op.image_shape)
        np.testing.assert_array_equal(back.forward(x), op.forward(x))


# -- masks -----------------------------------------------------------------------


def test_cartesian_example_256_lines():
    mask = make_mask(SamplingMaskConfig("cartesian", 6.0, 24), (256, 256))
    lines = mask.any(axis=1)
    assert lines[128 - 12:128 + 12].all()
    assert 5.1 <= realized_acceleration(mask, "cartesian") <= 6.9
    # whole rows are either sampled or not
    assert set(np.unique(mask.sum(axis=1))) <= {0.0, 256.0}


@pytest.mark.parametrize("pattern,af,acs", [("cartesian", 4.0, 8), ("cartesian", 6.0, 6),
                                            ("radial", 10.0, 0), ("poisson", 20.0, 8),
                                            ("poisson", 6.0, 12)])
def test_realized_acceleration_within_tolerance(pattern, af, acs):
    mask = make_mask(SamplingMaskConfig(pattern, af, acs, seed=2), (64, 64))
    assert abs(realized_acceleration(mask, pattern) / af - 1) <= 0.15
    assert mask[32, 32] == 1
    if pattern == "poisson":
        assert mask[32 - acs // 2:32 - acs // 2 + acs, 32 - acs // 2:32 - acs // 2 + acs].all()


def test_mask_edge_cases():
    assert make_mask(SamplingMaskConfig("poisson", 1.0, 0), (8, 8)).all()
    with pytest.raises(ConfigError):
        make_mask(SamplingMaskConfig("cartesian", 6.0, 24), (64, 64))
    with pytest.raises(ConfigError):
        make_mask(SamplingMaskConfig("poisson", 20.0, 30), (64, 64))
    with pytest.raises(ConfigError):
        SamplingMaskConfig("spiral")
    with pytest.raises(ConfigError):
        SamplingMaskConfig("cartesian", 0.5)


def test_poisson_mask_is_seeded():
    cfg = SamplingMaskConfig("poisson", 8.0, 6, seed=5)
    a, b = make_mask(cfg, (48, 48)), make_mask(cfg, (48, 48))
    assert a.tobytes() == b.tobytes()
    other = make_mask(SamplingMaskConfig("poisson", 8.0, 6, seed=6), (48, 48))
    assert not np.array_equal(a, other)


# -- Fourier ---------------------------------------------------------------------


def test_fft_of_constant_is_dc_delta():
    h, w, k = 16, 12, 0.7
    op = FourierOperator(np.ones((h, w)))
    img = np.zeros((h, w, 2))
    img[..., 0] = k
    ks = to_complex(op.forward(img))[0]
    assert ks[h // 2, w // 2] == pytest.approx(k * h * w / math.sqrt(h * w))
    ks[h // 2, w // 2] = 0
    assert np.abs(ks).max() < 1e-12


def test_full_mask_round_trip_is_identity(rng):
    shape = (24, 20)
    op = FourierOperator(np.ones(shape), make_coil_maps(shape, 3, seed=1))
    x = rng.standard_normal(shape + (2,)).astype(np.float32)
    back = op.adjoint(op.forward(x))
    assert np.abs(back - x).max() <= 1e-4 * np.abs(x).max()


def test_masked_round_trip_is_non_expansive(rng):
    for op in fourier_ops():
        x = rng.standard_normal(op.image_shape)
        assert np.linalg.norm(op.adjoint(op.forward(x))) <= np.linalg.norm(x) * (1 + 1e-9)


def test_zero_filled_is_adjoint(rng):
    op = fourier_ops()[2]
    y = rng.standard_normal(op.measurement_shape)
    np.testing.assert_array_equal(zero_filled(op, y), op.adjoint(y))


def test_coil_maps():
    one = make_coil_maps((10, 12), 1, seed=0)
    np.testing.assert_array_equal(to_complex(one), np.ones((1, 10, 12)))
    maps = make_coil_maps((20, 20), 6, seed=4)
    rss = (np.abs(to_complex(maps)) ** 2).sum(axis=0)
    assert np.abs(rss - 1).max() <= 1e-6
    assert maps.tobytes() == make_coil_maps((20, 20), 6, seed=4).tobytes()
    with pytest.raises(ConfigError):
        make_coil_maps((4, 4), 0)
