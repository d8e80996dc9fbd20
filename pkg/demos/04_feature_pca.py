"""What do the shared and subject encoders learn?

After a short pre-training run on a family whose members each carry a
lesion, the first principal components of the shared features are the
same for every subject, while the subject features differ from member to
member.  Component images are written as PGM files.

    python demos/04_feature_pca.py [out_dir]
"""

import sys
import warnings
from pathlib import Path

import numpy as np

from disinr.data import PhantomFamilyConfig, gen_family, simulate_measurements, write_pgm
from disinr.diffcore import no_grad
from disinr.encoders import CoordinateGrid
from disinr.evaluation import pca_features
from disinr.models import ModelConfig
from disinr.physics import IdentityOperator
from disinr.training import TrainConfig, pretrain

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/pca")
out.mkdir(parents=True, exist_ok=True)
shape = (64, 64)
images = gen_family(PhantomFamilyConfig("ellipse", shape, n=3, lesion_prob=1.0, seed=4))
records = simulate_measurements(images, IdentityOperator(shape))
model, _ = pretrain(records, ModelConfig.preset("desk"), TrainConfig(iterations=300))

coords = CoordinateGrid(shape).tensor()
with no_grad(), warnings.catch_warnings():
    warnings.simplefilter("ignore")
    shared, ratio = pca_features(model.shared_features(coords).data, 3)
    print("shared explained variance:", np.round(ratio, 3))
    for j in range(3):
        write_pgm(out / f"shared_pc{j + 1}.pgm", shared[:, j].reshape(shape))
    for i in range(len(records)):
        comps, ratio = pca_features(model.subject_features(i, coords).data, 3)
        print(f"subject {i} explained variance:", np.round(ratio, 3))
        for j in range(3):
            write_pgm(out / f"subject{i}_pc{j + 1}.pgm", comps[:, j].reshape(shape))
        write_pgm(out / f"subject{i}_truth.pgm", images[i], window=(0, 1))
print(f"component images written to {out}")
