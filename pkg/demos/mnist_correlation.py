"""How well does the linearized robustness track an actual attack on MNIST?

Uses IDX files from $SALIENCY_MNIST_DIR, or else writes the small sample
that ships with mlxtend.  A short training run is enough to see the
relationship; the acceptance suite trains longer and analyzes more points.

    python demos/mnist_correlation.py [epochs] [samples]
"""
import logging
import os
import sys
import tempfile

from scipy import stats

from saliency_align import attacks as A
from saliency_align.data import load_mnist, write_mnist_subset
from saliency_align.harness import aggregate, analyze_model
from saliency_align.network import build_network
from saliency_align.training import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
for name in ("saliency_align.attacks", "saliency_align.harness", "saliency_align.metrics"):
    logging.getLogger(name).setLevel(logging.ERROR)

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
n = int(sys.argv[2]) if len(sys.argv) > 2 else 50

directory = os.environ.get("SALIENCY_MNIST_DIR") or write_mnist_subset(tempfile.mkdtemp())
ds = load_mnist(directory, n_train=10000, n_validation=1000, strict=False)
net, hist = train(build_network("mnist-paper", seed=0), ds, TrainConfig(epochs=epochs))

cfgs = {k: A.default_config(k, ds.value_range) for k in A.ATTACK_NAMES}
recs = analyze_model(net, ds, cfgs, n)
s = aggregate(recs, 0.0, "mnist")
pairs = [(r.rho_tilde, r.rho_cw) for r in recs if r.rho_tilde is not None and r.rho_cw is not None]
print(f"validation accuracy {hist.val_accuracy[-1]:.3f}")
print("medians: " + ", ".join(f"{k} {s.medians[k]:.3f}" for k in ("rho_tilde", "rho_cw", "rho_pgd", "rho_grad", "alpha")))
print(f"Pearson(rho~, rho_cw) over {len(pairs)} samples: {stats.pearsonr(*zip(*pairs))[0]:.3f}")
print(f"bound violations: {s.bound_violations}")
