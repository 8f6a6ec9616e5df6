"""
Positive-slot probabilities at initialisation
=============================================

With an untrained network, weak and strong queries give nearly the same
distribution of p_pos. Training separates them; the CLSA objective pulls the
strong distribution back towards the weak one.
"""
from pathlib import Path

from clsa.config import load_config
from clsa.data import synth_dataset
from clsa.evaluation import distribution_diagnostics, plot_diagnostics
from clsa.trainer import init_state

out = Path("demos/out")
out.mkdir(parents=True, exist_ok=True)

cfg = load_config("configs/desk.yaml").replace(bank_size=1024)
state = init_state(cfg)
data = synth_dataset(0, 4, 256)

diag = distribution_diagnostics(state.pair, state.bank, data, 512, seed=0, weak=cfg.weak,
                                strong=cfg.strong, tau=cfg.loss.tau)
for key, value in diag.summary().items():
    print(f"{key:24s} {value:.5g}")

# the same measurement with the smaller strong crop
small = cfg.with_overrides({"strong.crop_sizes": [16]})
diag16 = distribution_diagnostics(state.pair, state.bank, data, 512, seed=0, weak=small.weak,
                                  strong=small.strong, tau=small.loss.tau)
print("KS with 16 px strong crops", round(diag16.ks_pos, 3))

plot_diagnostics(diag, out / "init_diagnostics.png", title="random init")
print("wrote", out / "init_diagnostics.png")
