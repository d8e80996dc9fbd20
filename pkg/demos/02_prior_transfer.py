"""Does a population prior speed up fitting a new subject?

Pre-trains the shared encoder-decoder pair on a few members of one
phantom family, then fits a held-out member twice: once with only a new
subject encoder on top of the frozen pair, once with a plain INR from
scratch.  The PSNR curves show how much the prior buys.

    python demos/02_prior_transfer.py [pretrain_iters] [adapt_iters]
"""

import sys

from disinr.data import PhantomFamilyConfig, gen_family, simulate_measurements
from disinr.models import ModelConfig, count_parameters
from disinr.physics import IdentityOperator
from disinr.training import TrainConfig, adapt, fit_naive, pretrain

pre_iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
adapt_iters = int(sys.argv[2]) if len(sys.argv) > 2 else 500

images = gen_family(PhantomFamilyConfig("ellipse", (64, 64), n=7, seed=0))
records = simulate_measurements(images, IdentityOperator((64, 64)),
                                ids=[f"e{i}" for i in range(7)])
cfg = ModelConfig.preset("desk")
counts = count_parameters(cfg)
print(f"pre-training network {counts['disinr_pretrain']} parameters, "
      f"{counts['disinr_adapt']} trainable at test time, naive INR {counts['naive']}")

model, log = pretrain(records[:6], cfg, TrainConfig(iterations=pre_iters, log_interval=min(100, pre_iters)))
print("pre-training PSNR of subject e0:", {k: round(v, 1) for k, v in log.psnr_curve("e0").items()})

tc = TrainConfig(iterations=adapt_iters, log_interval=min(50, adapt_iters))
ours = adapt(records[6], model, tc).log.psnr_curve()
naive = fit_naive(records[6], cfg, tc).log.psnr_curve()
print(f"{'iteration':>9} {'DisINR':>8} {'naive':>8}")
for it in ours:
    print(f"{it:9d} {ours[it]:8.2f} {naive[it]:8.2f}")
