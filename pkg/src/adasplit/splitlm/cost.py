"""FLOPs cost model of the UE-side layers."""

from __future__ import annotations

from fractions import Fraction

from ..exceptions import InvalidSplitError
from .config import LmConfig


def flops_per_layer(config: LmConfig) -> int | Fraction:
    """Approximate FLOPs of one transformer layer (attention + feed-forward).

    ``3 d_in d^2 / kappa + 2 d_in^2 d / kappa + 9 d_in d^2`` in exact
    arithmetic: an ``int`` when kappa divides the head terms, otherwise a
    ``Fraction``.
    """
    d_in, d, kappa = config.context, config.width, config.n_heads
    value = Fraction(3 * d_in * d * d + 2 * d_in * d_in * d, kappa) + 9 * d_in * d * d
    return value.numerator if value.denominator == 1 else value


def c_ue(config: LmConfig, p: int) -> int:
    """Computational load of running layers 1..p on the UE."""
    if not 1 <= p <= config.n_layers:
        raise InvalidSplitError(f"p must be in [1, {config.n_layers}], got {p}")
    return p * flops_per_layer(config)
