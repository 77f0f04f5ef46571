"""How the five stacking strategies combine per-layer decoder outputs.

Run:  python3 demos/02_stacking_strategies.py
"""

import numpy as np

from msedf.autodiff import Tensor
from msedf.stacking import StackConfig, StackWeights, normalize_weights, stack_forward

D = [Tensor([[1.0, 0.0, 4.0]]), Tensor([[2.0, 2.0, 2.0]]), Tensor([[3.0, 8.0, 0.0]])]
print("layer outputs:")
for i, d in enumerate(D, 1):
    print(f"  D{i} = {d.values[0].tolist()}")

weights = StackWeights.create(3, 3)
print("\nwith freshly initialised (zero) logits every weight is uniform:")
for strategy in ("ss", "cs", "gws", "lws"):
    out = stack_forward(StackConfig(strategy, 3), weights, D)
    print(f"  {strategy.upper():>3}: {out.values[0].round(4).tolist()}")

# Global weights pick one mixing proportion for all components; local weights
# choose per component.  Both stay on the simplex because they are softmaxes.
weights.gws_logits.values[...] = [[0.0, 1.0, 3.0]]
weights.lws_logits.values[...] = np.array([[4.0, -4.0, 0.0], [0.0, 0.0, 0.0], [-4.0, 4.0, 0.0]])
alpha, W = normalize_weights(weights)
print("\nlearned-looking logits:")
print("  alpha =", alpha.values[0].round(3).tolist(), " sum", alpha.values.sum().round(12))
print("  W column sums =", W.values.sum(axis=0).round(12).tolist())
for strategy in ("gws", "lws"):
    out = stack_forward(StackConfig(strategy, 3), weights, D)
    print(f"  {strategy.upper():>3}: {out.values[0].round(4).tolist()}")
