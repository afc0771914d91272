"""Self-adaptive loss weights: two-way softmax of average gradient and entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ccfusion.metrics import average_gradient, entropy


def softmax2(a, b):
    """Stable two-way softmax; swapping the arguments swaps the outputs exactly."""
    m = max(a, b)
    ea = math.exp(a - m)
    eb = math.exp(b - m)
    s = ea + eb
    return ea / s, eb / s


@dataclass(frozen=True)
class AdaptiveWeights:
    """(sigma_a, sigma_b) weight the SSIM terms, (gamma_a, gamma_b) the MSE terms.

    The ``a`` member belongs to the visible source, ``b`` to the infrared one.
    """

    sigma_a: float
    sigma_b: float
    gamma_a: float
    gamma_b: float

    @classmethod
    def from_statistics(cls, ag_v, ag_r, en_v, en_r):
        return cls(*softmax2(ag_v, ag_r), *softmax2(en_v, en_r))

    def swapped(self):
        return AdaptiveWeights(self.sigma_b, self.sigma_a, self.gamma_b, self.gamma_a)

    def as_tuple(self):
        return (self.sigma_a, self.sigma_b, self.gamma_a, self.gamma_b)


def image_statistics(img):
    """(average gradient, entropy) of one plane."""
    return average_gradient(img), entropy(img)


def compute_adaptive_weights(v, r):
    ag_v, en_v = image_statistics(v)
    ag_r, en_r = image_statistics(r)
    return AdaptiveWeights.from_statistics(ag_v, ag_r, en_v, en_r)


def is_degenerate(stats_v, stats_r):
    """True when both members of a patch pair are flat in AG or in EN."""
    (ag_v, en_v), (ag_r, en_r) = stats_v, stats_r
    return (ag_v == 0.0 and ag_r == 0.0) or (en_v == 0.0 and en_r == 0.0)
