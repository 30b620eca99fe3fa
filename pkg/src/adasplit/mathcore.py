"""Seeded random streams, samplers, quadrature and root finding."""

from __future__ import annotations

import copy
import hashlib
import math
from typing import Callable

import numpy as np
from scipy import integrate

from .exceptions import AccuracyError, BracketError, InvalidParameterError

__all__ = [
    "RngStream",
    "derive_stream_id",
    "gaussian_sample",
    "nakagami_sample",
    "quad_adaptive",
    "bisect",
]


def derive_stream_id(*parts) -> int:
    """Stable 64-bit id for a dotted stream name such as ``env.reset.3``."""
    name = ".".join(str(p) for p in parts)
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Streams with different ids are seeded from distinct ``SeedSequence``
    entropy and are therefore independent by construction.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream_id & (2**64 - 1)])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *name) -> "RngStream":
        """Named sub-stream, e.g. ``rng.child("channel", 4)``."""
        return RngStream(self.seed, derive_stream_id(self.stream_id, *name))

    def copy(self) -> "RngStream":
        return copy.deepcopy(self)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def as_stream(rng) -> RngStream:
    """Accept an ``RngStream`` or an int seed."""
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        raise InvalidParameterError("an explicit seed or RngStream is required")
    return RngStream(int(rng))


def gaussian_sample(rng: RngStream, mean: float, std: float, size=None):
    """Draw from N(mean, std^2). ``std == 0`` returns ``mean`` exactly."""
    if not std >= 0:
        raise InvalidParameterError(f"std must be >= 0, got {std}")
    if std == 0:
        if size is None:
            return float(mean)
        return np.full(size, float(mean))
    out = rng.generator.normal(mean, std, size)
    return float(out) if size is None else out


def nakagami_sample(rng: RngStream, m: float, omega: float, size=None):
    """Nakagami-m gain as the square root of a Gamma(m, omega/m) draw.

    numpy's Gamma generator is the Marsaglia-Tsang method.
    """
    if not m > 0:
        raise InvalidParameterError(f"Nakagami shape m must be > 0, got {m}")
    if not omega > 0:
        raise InvalidParameterError(f"Nakagami spread omega must be > 0, got {omega}")
    power = rng.generator.gamma(m, omega / m, size)
    out = np.sqrt(power)
    return float(out) if size is None else out


def quad_adaptive(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10,
                  max_subdivisions: int = 200) -> float:
    """Integrate ``f`` over ``[a, b]`` with adaptive Gauss-Kronrod refinement.

    Raises
    ------
    AccuracyError
        If the error estimate still exceeds ``tol`` after ``max_subdivisions``.
    """
    if b < a:
        raise InvalidParameterError(f"need a <= b, got [{a}, {b}]")
    if a == b:
        return 0.0
    value, err, info = integrate.quad(
        f, a, b, epsabs=tol, epsrel=0.0, limit=max_subdivisions, full_output=1
    )[:3]
    # QUADPACK may flag round-off even when the estimate is within tolerance.
    if not math.isfinite(value) or err > tol:
        raise AccuracyError(
            f"quadrature did not converge on [{a}, {b}] (error estimate {err:.3g} > {tol:.3g})",
            estimate=value,
            error=err,
        )
    return float(value)


def bisect(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10,
           max_iter: int = 500) -> float:
    """Root of ``f`` on a sign-changing bracket, to a bracket width of ``tol``."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return float(lo)
    if fhi == 0:
        return float(hi)
    if flo * fhi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: f(lo)={flo:.6g}, f(hi)={fhi:.6g}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if fmid == 0:
            return float(mid)
        if (fmid < 0) == (flo < 0):
            lo, flo = mid, fmid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    return float(0.5 * (lo + hi))
