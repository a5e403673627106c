"""Memory-efficient full-rank training with low-rank optimizer state.

The package implements a training rule that keeps Adam statistics only
for a low-rank projection of each gradient while still applying the
full-rank gradient: the residual (the part outside the projected
subspace) is rescaled per column by the ratio that Adam applied inside
the subspace, then passed through a norm-growth limiter that suppresses
loss spikes.  Baselines (SGD, Adam, GaLore, GaLore with raw residual,
LoRA), a desk-scale training harness, a memory estimator and the
statistical tools used to study the method ship alongside.
"""

from fira.backend import COMPILED, backend_name

__version__ = "0.1.0"

__all__ = ["COMPILED", "backend_name", "__version__"]
