"""
Short pretraining run and KNN evaluation
========================================

Trains the desk configuration for a few epochs in baseline mode (contrastive
loss only) and in CLSA mode from the same seed, then scores both encoders
with a 20-nearest-neighbour classifier on centre crops and on strongly
augmented views. Ten epochs take a few minutes on one CPU core; the
acceptance suite uses 60.
"""
import sys
from pathlib import Path

from clsa.config import load_config
from clsa.data import synth_dataset
from clsa.evaluation import extract_features, knn_eval, plot_knn_summary
from clsa.trainer import pretrain

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
out = Path("demos/out")

train = synth_dataset(0, 4, 256)
test = synth_dataset(1, 4, 256)
desk = load_config("configs/desk.yaml")

results = {"center_crop": {}, "strong": {}}
for mode in ("baseline", "clsa"):
    cfg = desk.with_overrides({"loss.mode": mode, "epochs": epochs})
    state = pretrain(cfg, train, out / f"run_{mode}")
    first, last = state.history[0], state.history[-1]
    print(f"{mode}: {state.step} steps, L_C {first['loss_contrastive']:.3f} -> {last['loss_contrastive']:.3f}")

    for view in results:
        tr = extract_features(state.pair.query, train, view, seed=1234, strong=desk.strong)
        te = extract_features(state.pair.query, test, view, seed=1235, strong=desk.strong)
        results[view][mode] = knn_eval(tr, te, k=20)
        print(f"  knn {view:11s} {results[view][mode]:.4f}")

plot_knn_summary(results, out / "knn_summary.png")
print("wrote", out / "knn_summary.png")
