"""Forward models and the classical baselines.

Builds the three measurement operators, checks each adjoint with the
dot-product test and writes FBP and zero-filled reconstructions next to
the ground truth so the artefacts of sparse sampling are visible.

    python demos/01_operators.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from disinr.data import PhantomFamilyConfig, add_phase, gen_family, write_pgm
from disinr.evaluation import image_metrics
from disinr.physics import (
    FanBeamGeometry, FanBeamOperator, FourierOperator, IdentityOperator, SamplingMaskConfig,
    adjoint_test, fbp_reconstruct, magnitude, make_mask, realized_acceleration, zero_filled,
)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/operators")
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(0)

# sparse-view CT on the desk geometry
phantom = gen_family(PhantomFamilyConfig("shepp_logan", (128, 128), n=1, seed=0))[0]
for views in (360, 60):
    geom = FanBeamGeometry.preset("desk", views)
    op = FanBeamOperator(geom)
    sino = op.forward(phantom)
    recon = np.clip(fbp_reconstruct(geom, sino), 0, 1)
    p, s = image_metrics(recon, phantom)
    print(f"fan beam, {views:3d} views: adjoint error {adjoint_test(op, rng):.1e}, "
          f"FBP {p:.2f} dB / SSIM {s:.3f}")
    write_pgm(out / f"fbp_{views}.pgm", recon, window=(0, 1))
    write_pgm(out / f"sinogram_{views}.pgm", sino)
write_pgm(out / "ct_truth.pgm", phantom, window=(0, 1))

# undersampled MRI: each mask pattern with its zero-filled image
image = add_phase(gen_family(PhantomFamilyConfig("ellipse", (64, 64), n=1, seed=1)), seed=1)[0]
for pattern, af, acs in (("cartesian", 6.0, 6), ("radial", 10.0, 0), ("poisson", 20.0, 8)):
    mask = make_mask(SamplingMaskConfig(pattern, af, acs, seed=0), (64, 64))
    op = FourierOperator(mask)
    zf = zero_filled(op, op.forward(image))
    p, s = image_metrics(zf, image)
    print(f"{pattern:9s} AF {af:4.1f} (realised {realized_acceleration(mask, pattern):5.2f}): "
          f"adjoint error {adjoint_test(op, rng):.1e}, zero-filled {p:.2f} dB / SSIM {s:.3f}")
    write_pgm(out / f"mask_{pattern}.pgm", mask)
    write_pgm(out / f"zf_{pattern}.pgm", magnitude(zf), window=(0, 1))

print(f"identity adjoint error {adjoint_test(IdentityOperator((8, 8)), rng):.1e}")
print(f"images written to {out}")
