"""Transform-dependent adversarial perturbation toolkit."""

__version__ = "0.1.0"

from . import attack, config, data, evaluation, nn, rng, tensor, transforms  # noqa: F401
