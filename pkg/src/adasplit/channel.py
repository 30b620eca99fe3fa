"""Wireless impairment between the UE half and the edge half of the model.

Each element of the intermediate tensor is treated as its own packet. A
Nakagami-m gain ``h`` is drawn per element; elements whose gain falls below
``h_th`` are lost (zeroed), the rest arrive as ``h * y + n`` with Gaussian
noise ``n ~ N(0, sigma^2)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import CalibrationError, InvalidParameterError
from .mathcore import RngStream, as_stream, bisect, nakagami_sample, quad_adaptive

DEFAULT_OMEGA = 1.0
DEFAULT_H_TH = 0.5
M_BRACKET = (0.1, 50.0)


@dataclass(frozen=True)
class ChannelParams:
    """Fading and noise description.

    In ``awgn`` mode the gain is fixed at 1, so ``m`` and ``h_th`` are ignored
    and nothing is ever lost.
    """

    mode: str = "nakagami"
    m: float = 1.0
    omega: float = DEFAULT_OMEGA
    sigma: float = 0.0
    h_th: float = DEFAULT_H_TH
    per_tensor: bool = False
    equalize: bool = False

    def __post_init__(self):
        if self.mode not in ("awgn", "nakagami"):
            raise InvalidParameterError(f"channel mode must be 'awgn' or 'nakagami', got {self.mode!r}")
        if not self.sigma >= 0:
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        if self.mode == "nakagami":
            if not self.m > 0 or not self.omega > 0:
                raise InvalidParameterError(f"need m > 0 and omega > 0, got m={self.m}, omega={self.omega}")
            if not self.h_th >= 0:
                raise InvalidParameterError(f"h_th must be >= 0, got {self.h_th}")

    @classmethod
    def ideal(cls) -> "ChannelParams":
        return cls(mode="awgn", sigma=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        return cls(**d)

    @property
    def loss_probability(self) -> float:
        if self.mode == "awgn":
            return 0.0
        return packet_loss_prob(self.m, self.omega, self.h_th)


@dataclass(frozen=True)
class ChannelStats:
    loss_fraction: float
    mean_gain: float


def apply_channel(y: np.ndarray, params: ChannelParams, rng: RngStream):
    """Pass ``y`` through the channel. Returns ``(y_hat, ChannelStats)``.

    With ``per_tensor`` the gain is shared across each sequence (the leading
    axis of a 3-d batch, or the whole array otherwise). ``equalize`` divides
    the noise by the gain instead of scaling the signal.
    """
    y = np.asarray(y, dtype=np.float64)
    if params.mode == "awgn":
        if params.sigma == 0:
            return y.copy(), ChannelStats(0.0, 1.0)
        noise = rng.generator.normal(0.0, params.sigma, y.shape)
        return y + noise, ChannelStats(0.0, 1.0)

    if params.per_tensor:
        gain_shape = (y.shape[0],) + (1,) * (y.ndim - 1) if y.ndim == 3 else (1,) * y.ndim
        h = nakagami_sample(rng, params.m, params.omega, size=gain_shape)
        h = np.broadcast_to(h, y.shape)
    else:
        h = nakagami_sample(rng, params.m, params.omega, size=y.shape)
    lost = h < params.h_th
    if params.sigma > 0:
        noise = rng.generator.normal(0.0, params.sigma, y.shape)
    else:
        noise = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        received = y + noise / h if params.equalize else h * y + noise
    y_hat = np.where(lost, 0.0, received)
    survivors = h[~lost]
    mean_gain = float(survivors.mean()) if survivors.size else 0.0
    return y_hat, ChannelStats(float(lost.mean()), mean_gain)


def nakagami_pdf(h, m: float, omega: float):
    """Nakagami-m density, evaluated in log space for stability."""
    if not m > 0 or not omega > 0:
        raise InvalidParameterError(f"need m > 0 and omega > 0, got m={m}, omega={omega}")
    h = np.asarray(h, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logf = (np.log(2.0) + m * np.log(m) - special.gammaln(m) - m * np.log(omega)
                + (2 * m - 1) * np.log(h) - m * h * h / omega)
    at_zero = 0.0 if m > 0.5 else (np.inf if m < 0.5 else np.sqrt(2.0 / (np.pi * omega)))
    out = np.where(h > 0, np.exp(logf), np.where(h == 0, at_zero, 0.0))
    return float(out) if out.ndim == 0 else out


def nakagami_tail_cutoff(m: float, omega: float, tail: float = 1e-16) -> float:
    """Gain above which the Nakagami tail mass is below ``tail``."""
    x = special.gammainccinv(m, tail)
    return float(np.sqrt(x * omega / m))


def packet_loss_prob(m: float, omega: float, h_th: float, tol: float = 1e-9) -> float:
    """Probability that the gain is below ``h_th``, by numerical quadrature."""
    if not m > 0 or not omega > 0:
        raise InvalidParameterError(f"need m > 0 and omega > 0, got m={m}, omega={omega}")
    if not h_th >= 0:
        raise InvalidParameterError(f"h_th must be >= 0, got {h_th}")
    if h_th == 0:
        return 0.0
    upper = min(h_th, nakagami_tail_cutoff(m, omega))
    value = quad_adaptive(lambda h: nakagami_pdf(h, m, omega), 0.0, upper, tol=tol)
    return float(min(max(value, 0.0), 1.0))


def packet_loss_prob_closed_form(m: float, omega: float, h_th: float) -> float:
    """Same probability via the regularized lower incomplete gamma function."""
    return float(special.gammainc(m, m * h_th * h_th / omega))


def calibrate_m(p_target: float, omega: float = DEFAULT_OMEGA, h_th: float = DEFAULT_H_TH,
                bracket: tuple = M_BRACKET, tol: float = 1e-10) -> float:
    """Shape parameter ``m`` whose packet-loss probability equals ``p_target``."""
    if not 0.0 < p_target < 1.0:
        raise CalibrationError(f"target loss probability must lie in (0, 1), got {p_target}",
                               bracket=bracket)
    lo, hi = bracket
    p_lo = packet_loss_prob(lo, omega, h_th)
    p_hi = packet_loss_prob(hi, omega, h_th)
    if not min(p_lo, p_hi) <= p_target <= max(p_lo, p_hi):
        raise CalibrationError(
            f"loss probability {p_target} is outside the achievable range "
            f"[{min(p_lo, p_hi):.3g}, {max(p_lo, p_hi):.3g}] for m in [{lo}, {hi}]",
            bracket=bracket,
            bracket_probs=(p_lo, p_hi),
        )
    return bisect(lambda m: packet_loss_prob(m, omega, h_th) - p_target, lo, hi, tol=tol)


class ShapeCalibrator:
    """Tabulated inverse of the loss probability in ``m``.

    Calling :func:`calibrate_m` costs a few dozen quadratures; the environment
    redraws the channel every step, so it interpolates this table instead.
    Targets outside the achievable range are clamped to the bracket ends.
    """

    def __init__(self, omega: float = DEFAULT_OMEGA, h_th: float = DEFAULT_H_TH,
                 bracket: tuple = M_BRACKET, n_grid: int = 4001):
        self.omega = omega
        self.h_th = h_th
        self.bracket = bracket
        log_m = np.linspace(np.log(bracket[0]), np.log(bracket[1]), n_grid)
        probs = special.gammainc(np.exp(log_m), np.exp(log_m) * h_th * h_th / omega)
        if not np.all(np.diff(probs) < 0):
            raise InvalidParameterError(
                "loss probability is not decreasing in m for these omega/h_th; "
                "calibration needs h_th well below sqrt(omega)")
        # np.interp wants increasing abscissae
        self._probs = probs[::-1]
        self._log_m = log_m[::-1]

    @property
    def achievable(self) -> tuple:
        return float(self._probs[0]), float(self._probs[-1])

    def __call__(self, p_target):
        p = np.clip(p_target, self._probs[0], self._probs[-1])
        out = np.exp(np.interp(p, self._probs, self._log_m))
        return float(out) if np.ndim(out) == 0 else out


def snr_to_sigma(snr_db: float, signal_rms: float) -> float:
    """Noise std giving ``snr_db`` (amplitude ratio) for a signal of ``signal_rms``."""
    if not signal_rms > 0:
        raise InvalidParameterError(f"signal_rms must be > 0, got {signal_rms}")
    return float(signal_rms / 10.0 ** (snr_db / 20.0))


class NakagamiChannel(TransformerMixin, BaseEstimator):
    """Estimator-style wrapper around :func:`apply_channel`.

    ``fit`` only validates the parameters and seeds the stream; ``transform``
    impairs whatever tensor it is given.
    """

    def __init__(self, mode="nakagami", m=1.0, omega=DEFAULT_OMEGA, sigma=0.0,
                 h_th=DEFAULT_H_TH, per_tensor=False, equalize=False, random_state=0):
        self.mode = mode
        self.m = m
        self.omega = omega
        self.sigma = sigma
        self.h_th = h_th
        self.per_tensor = per_tensor
        self.equalize = equalize
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.params_ = ChannelParams(self.mode, self.m, self.omega, self.sigma, self.h_th,
                                     self.per_tensor, self.equalize)
        self.rng_ = as_stream(self.random_state).child("channel")
        self.last_stats_ = None
        return self

    def transform(self, X):
        if not hasattr(self, "params_"):
            self.fit()
        y_hat, self.last_stats_ = apply_channel(X, self.params_, self.rng_)
        return y_hat
