"""
Training a toy model
====================

Renders a small aligned-action dataset, builds appearance-motion arrays with
the five-crop augmentation and trains the toy network for 300 iterations,
about a minute on one core. With four categories this short run already
classifies the held-out clips and ranks most attributes well; the
localization head needs the longer schedule used in the acceptance tests.
"""
import tempfile
import time
from pathlib import Path

import numpy as np

from dap3d import data, evaluation, layers, model

root = Path(tempfile.mkdtemp()) / "clips"
t = time.time()
data.generate_dataset(root, num_categories=4, clips_per_category=20, seed=0)
train, test = data.build_manifest(root, (9, 1), seed=0)
print("%d train / %d test clips in %.0fs" % (len(train.entries), len(test.entries), time.time() - t))

cfg = model.toy_profile(4)
for name, shape in model.layer_shapes(cfg):
    print("  %-6s %s" % (name, shape))

vols = {}
tr = data.build_arrays(train, cfg.input_shape, "am", True, seed=0, volumes=vols)
te = data.build_arrays(test, cfg.input_shape, "am", False, seed=1, volumes=vols)
print("training samples:", tr.x.shape)

opt = layers.OptimizerConfig(learning_rate=0.005, momentum=0.9, batch_size=20, max_iterations=300,
                             lr_step_iterations=200, lr_decay_factor=0.3)


def report(row):
    if (row["iteration"] + 1) % 50 == 0:
        print("iteration %4d  loss %.3f" % (row["iteration"] + 1, row["total"]))


state = model.train(model.build(cfg, 0), tr, opt, seed=0, on_step=report)
out = state.model.predict(te.x)
acc = (out.class_probs.argmax(1) == te.labels).mean()
h1, h2 = evaluation.attribute_report(out.h1_probs, te.h1, out.h2_probs, te.h2)
print("held-out accuracy %.2f  mean AUC H1 %.2f  H2 %.2f" % (acc, h1.mean_auc or np.nan, h2.mean_auc or np.nan))

model.save_checkpoint(root.parent / "toy.apck", state.model, state.iteration)
print("checkpoint written to", root.parent / "toy.apck")
