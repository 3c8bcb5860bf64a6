"""Long-tailed classification on a numpy autodiff core.

Stage 1 learns a representation with perturbation-consistency and relation
(Gram) terms under an EMA teacher; stage 2 calibrates the classifier on
class-balanced virtual features drawn from per-class Gaussians.
"""

__version__ = "0.1.0"
