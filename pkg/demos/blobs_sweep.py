"""Gradient-norm regularization on synthetic blobs.

Trains one small ReLU network per lambda from a shared initialization and
shows how the median linearized robustness and the median alignment move
together.  Reports land in ``demo_out/``.

    python demos/blobs_sweep.py
"""
import logging
from pathlib import Path

from saliency_align import attacks as A
from saliency_align import network as nw
from saliency_align.data import synth_gaussian_blobs
from saliency_align.harness import aggregate, analyze_model, write_long_csv, write_summary
from saliency_align.training import TrainConfig, lambda_sweep

logging.basicConfig(level=logging.WARNING)
out = Path("demo_out")
out.mkdir(exist_ok=True)

ds = synth_gaussian_blobs(4, 200, 20, 3.0, seed=0)
spec = [nw.dense(20, 32), nw.relu(), nw.dense(32, 4)]
entries = lambda_sweep(TrainConfig(epochs=20, learning_rate=1e-2, batch_size=50), [0.0, 0.3, 1.0, 3.0, 10.0],
                       ds, spec=spec)

cfgs = {k: A.default_config(k) for k in A.ATTACK_NAMES}
per_model = []
print(f"{'lambda':>7} {'val acc':>8} {'rho~':>8} {'alpha':>8} {'cw':>8} {'pgd':>8} {'grad':>8}")
for e in entries:
    if e.network is None:
        print(f"{e.lam:>7g} failed: {e.error}")
        continue
    recs = analyze_model(e.network, ds, cfgs, 100)
    s = aggregate(recs, e.lam, f"lambda_{e.lam:g}")
    per_model.append((s, recs))
    m = s.medians
    print(f"{e.lam:>7g} {e.history.val_accuracy[-1]:>8.3f} {m['rho_tilde']:>8.3f} {m['alpha']:>8.3f} "
          f"{m['rho_cw']:>8.3f} {m['rho_pgd']:>8.3f} {m['rho_grad']:>8.3f}")

write_summary([s for s, _ in per_model], out / "summary.csv", out / "summary.json")
write_long_csv(per_model, out / "figures_long.csv")
print(f"\nreports written to {out}/")
