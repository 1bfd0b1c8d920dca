"""Analytic valuation layer: Black-Scholes price/delta, the lognormal-SABR
implied-volatility expansion, practitioner delta, and Bartlett delta.

All functions accept scalars or numpy arrays (broadcast) and return a float
for all-scalar inputs. They are pure and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError

# Log-moneyness below this is treated as at-the-money in the implied-vol
# expansion; below _PHI_SERIES_EPS the phi/chi ratio uses its series limit.
_ATM_LOG_EPS = 1e-8
_PHI_SERIES_EPS = 1e-6


@dataclass(frozen=True)
class OptionSpec:
    """European call."""

    strike: float
    expiry: float
    kind: str = "call"

    def __post_init__(self):
        if not (self.strike > 0):
            raise ValidationError(f"strike must be positive, got {self.strike}")
        if not (self.expiry > 0):
            raise ValidationError(f"expiry must be positive, got {self.expiry}")
        if self.kind != "call":
            raise ValidationError(f"kind must be 'call', got {self.kind!r}")


@dataclass(frozen=True)
class RateSpec:
    risk_free: float = 0.0
    dividend_yield: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.risk_free) or not np.isfinite(self.dividend_yield):
            raise ValidationError("rates must be finite")


def std_normal_cdf(x):
    """N(x) to double precision (abs error well below 1e-10)."""
    out = ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


def _as_arrays(*vals):
    arrs = np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in vals])
    scalar = all(np.ndim(v) == 0 for v in vals)
    return arrs, scalar


def _ret(x: np.ndarray, scalar: bool):
    return float(x) if scalar else x


def bs_price(spot, option: OptionSpec, rates: RateSpec, sigma, tau):
    """Black-Scholes call price. Degenerate inputs (tau=0 or sigma=0) return
    the discounted-intrinsic limit."""
    (s, sig, t), scalar = _as_arrays(spot, sigma, tau)
    if np.any(s <= 0):
        raise ValidationError("spot must be positive")
    if np.any(t < 0):
        raise ValidationError("tau must be >= 0")
    if np.any(sig < 0):
        raise ValidationError("sigma must be >= 0")
    k = option.strike
    r, q = rates.risk_free, rates.dividend_yield
    df_q = np.exp(-q * t)
    df_r = np.exp(-r * t)
    intrinsic = np.maximum(s * df_q - k * df_r, 0.0)

    live = (t > 0) & (sig > 0)
    s_l = np.where(live, s, 1.0)
    sig_l = np.where(live, sig, 1.0)
    t_l = np.where(live, t, 1.0)
    sqrt_t = np.sqrt(t_l)
    d1 = (np.log(s_l / k) + (r - q + 0.5 * sig_l**2) * t_l) / (sig_l * sqrt_t)
    d2 = d1 - sig_l * sqrt_t
    value = s_l * np.exp(-q * t_l) * ndtr(d1) - k * np.exp(-r * t_l) * ndtr(d2)
    return _ret(np.where(live, value, intrinsic), scalar)


def bs_delta(spot, option: OptionSpec, rates: RateSpec, sigma, tau):
    """Call delta e^{-q tau} N(d1). At tau=0 (or sigma=0) the step-function
    limit applies, with 0.5 at the kink."""
    (s, sig, t), scalar = _as_arrays(spot, sigma, tau)
    if np.any(s <= 0):
        raise ValidationError("spot must be positive")
    if np.any(t < 0):
        raise ValidationError("tau must be >= 0")
    k = option.strike
    r, q = rates.risk_free, rates.dividend_yield

    live = (t > 0) & (sig > 0)
    s_l = np.where(live, s, 1.0)
    sig_l = np.where(live, sig, 1.0)
    t_l = np.where(live, t, 1.0)
    d1 = (np.log(s_l / k) + (r - q + 0.5 * sig_l**2) * t_l) / (sig_l * np.sqrt(t_l))
    value = np.exp(-q * t_l) * ndtr(d1)

    # Degenerate limit: step on the forward against the strike.
    fwd = s * np.exp((r - q) * t)
    step = np.where(fwd > k, 1.0, np.where(fwd < k, 0.0, 0.5)) * np.exp(-q * t)
    return _ret(np.where(live, value, step), scalar)


def hagan_implied_vol(forward, strike, sigma0, vol_of_vol, rho, tau):
    """Lognormal-SABR (beta=1) implied volatility:

        B   = 1 + (rho*v*sigma0/4 + (2 - 3 rho^2) v^2 / 24) * tau
        phi = (v / sigma0) * ln(F/K)
        chi = ln((sqrt(1 - 2 rho phi + phi^2) + phi - rho) / (1 - rho))

    returning sigma0*B at the money and sigma0*B*phi/chi otherwise, with the
    series limit phi/chi -> 1 - rho*phi/2 for small |phi|.
    """
    (f, k, sig0, v, rh, t), scalar = _as_arrays(forward, strike, sigma0, vol_of_vol, rho, tau)
    if np.any(f <= 0):
        raise ValidationError("forward must be positive")
    if np.any(k <= 0):
        raise ValidationError("strike must be positive")
    if np.any(t <= 0):
        raise ValidationError("tau must be positive")
    if np.any(sig0 <= 0):
        raise ValidationError("sigma0 must be positive")
    if np.any(rh >= 1.0):
        raise ValidationError("rho = 1 makes the chi denominator degenerate")

    b = 1.0 + (rh * v * sig0 / 4.0 + (2.0 - 3.0 * rh**2) * v**2 / 24.0) * t
    log_m = np.log(f / k)
    phi = v / sig0 * log_m

    series = (np.abs(log_m) < _ATM_LOG_EPS) | (np.abs(phi) < _PHI_SERIES_EPS)
    phi_s = np.where(series, 0.0, phi)
    root = np.sqrt(1.0 - 2.0 * rh * phi_s + phi_s**2)
    numer = root + phi_s - rh
    if np.any(numer <= 0):
        raise ValidationError("implied-vol expansion breaks down (sqrt(...)+phi-rho <= 0)")
    chi = np.log(numer / (1.0 - rh))
    ratio = np.where(series, 1.0 - rh * phi / 2.0, phi_s / np.where(series, 1.0, chi))
    return _ret(sig0 * b * ratio, scalar)


def sabr_price(spot, option: OptionSpec, rates: RateSpec, sigma0, vol_of_vol, rho, tau):
    """Black-Scholes price evaluated at the SABR implied volatility."""
    (s, t), scalar = _as_arrays(spot, tau)
    t_pos = np.maximum(t, np.finfo(float).tiny)
    fwd = s * np.exp((rates.risk_free - rates.dividend_yield) * t_pos)
    vol = hagan_implied_vol(fwd, option.strike, sigma0, vol_of_vol, rho, t_pos)
    live = t > 0
    out = bs_price(s, option, rates, np.where(live, vol, 0.0), t)
    return _ret(np.asarray(out), scalar)


def practitioner_delta(spot, option: OptionSpec, rates: RateSpec, sigma0, vol_of_vol, rho, tau):
    """Black-Scholes delta at the current implied volatility, holding that
    volatility fixed while differentiating."""
    (s, t), scalar = _as_arrays(spot, tau)
    t_pos = np.maximum(t, np.finfo(float).tiny)
    fwd = s * np.exp((rates.risk_free - rates.dividend_yield) * t_pos)
    vol = hagan_implied_vol(fwd, option.strike, sigma0, vol_of_vol, rho, t_pos)
    live = t > 0
    out = bs_delta(s, option, rates, np.where(live, vol, 0.0), t)
    return _ret(np.asarray(out), scalar)


def bartlett_delta(spot, option: OptionSpec, rates: RateSpec, sigma0, vol_of_vol, rho, tau):
    """SABR-aware delta: central difference of sabr_price under the joint bump
    (spot +/- h, sigma0 +/- h*rho*v/spot), which folds in the expected
    volatility move that accompanies a spot move."""
    (s, sig0, t), scalar = _as_arrays(spot, sigma0, tau)
    if np.any(t <= 0):
        raise ValidationError("tau must be positive")
    h = 1e-4 * s
    dsig = h * rho * vol_of_vol / s
    up = sabr_price(s + h, option, rates, sig0 + dsig, vol_of_vol, rho, t)
    dn = sabr_price(s - h, option, rates, sig0 - dsig, vol_of_vol, rho, t)
    return _ret((np.asarray(up) - np.asarray(dn)) / (2.0 * h), scalar)
