import logging
from dataclasses import dataclass

import numpy as np

# Configuration
MAX_BISECTION = 200
BISECTION_TOL = 1e-15

@dataclass(frozen=True)
class PowerAllocation:
    """
    Transmit powers p (K x Nc, watts), zero wherever a tone is inactive.

    `tone_power` holds the power every (user, tone) would carry if it were
    active under the same water level; the ML receiver scores candidate
    patterns with it.
    """
    p: np.ndarray
    mu: float
    tone_power: np.ndarray

    @property
    def total(self):
        return float(self.p.sum())

    def blocks(self, N):
        """View as K x Lb x N"""
        return self.p.reshape(self.p.shape[0], -1, N)

def effective_gains(S_eff, sigma2):
    """|h_k g_k|^2 / sigma2 per (user, tone), shaped K x Nc"""
    desired = np.abs(np.einsum('ikk->ki', S_eff)) ** 2
    with np.errstate(divide='ignore'):
        return desired / sigma2 if sigma2 > 0 else np.where(desired > 0, np.inf, 0.0)

def waterfill(gains, Pt, Z=None):
    """Classic water-filling p = max(0, mu - 1/gain) over the active links"""
    gains = np.asarray(gains, dtype=float)
    active = gains > 0 if Z is None else np.asarray(Z, dtype=bool)
    if active.shape != gains.shape:
        raise ValueError(f"activation shape {active.shape} does not match gains shape {gains.shape}")
    if not active.any():
        raise ValueError("water-filling needs at least one active link")
    if Pt < 0:
        raise ValueError(f"power budget must be non-negative, got {Pt}")
    if Pt == 0:
        zeros = np.zeros_like(gains)
        return PowerAllocation(p=zeros, mu=0.0, tone_power=zeros.copy())

    with np.errstate(divide='ignore'):
        inverse = np.where(gains > 0, 1.0 / np.where(gains > 0, gains, 1.0), np.inf)
    levels = inverse[active]
    finite = levels[np.isfinite(levels)]
    if finite.size == 0:
        raise ValueError("no active link has a positive gain")

    low, high = 0.0, Pt + finite.min()
    for _ in range(MAX_BISECTION):
        mid = 0.5 * (low + high)
        if np.maximum(mid - finite, 0.0).sum() > Pt:
            high = mid
        else:
            low = mid
        if high - low <= BISECTION_TOL * high:
            break

    # Closed-form level of the converged support
    support = finite < 0.5 * (low + high)
    if not support.any():
        support = finite == finite.min()
    mu = (Pt + finite[support].sum()) / support.sum()

    tone_power = np.maximum(mu - inverse, 0.0)
    p = np.where(active, tone_power, 0.0)
    logging.debug(f"Water level {mu:.4e} over {support.sum()}/{active.sum()} links")
    return PowerAllocation(p=p, mu=float(mu), tone_power=tone_power)

def uniform_active(Z, Pt):
    """Equal share of the budget on every active link"""
    Z = np.asarray(getattr(Z, 'Z', Z), dtype=float)
    count = Z.sum()
    if count == 0:
        raise ValueError("uniform allocation needs at least one active link")
    share = Pt / count
    return PowerAllocation(p=Z * share, mu=float(share), tone_power=np.full(Z.shape, share))
