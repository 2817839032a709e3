from dataclasses import dataclass

import numpy as np
from scipy.special import comb, erfc

from system_config import noise_power_per_tone

# Configuration
QUADRATURE_POINTS = 64
TIE_TOLERANCE = 1e-9
DEFAULT_OVERSAMPLE = 4

_nodes, _weights = np.polynomial.legendre.leggauss(QUADRATURE_POINTS)
# Gauss-Legendre rule mapped from [-1, 1] onto [0, pi/2]
ZETA = np.pi / 4 * (_nodes + 1)
ZETA_WEIGHTS = np.pi / 4 * _weights
_INV_SIN2 = 1 / (4 * np.sin(ZETA) ** 2)

def q_function(x):
    """Gaussian tail probability"""
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2))

def craig_integral(s):
    """(1/pi) * integral over [0, pi/2] of exp(-s / (4 sin^2 z)), i.e. Q(sqrt(s/2))"""
    s = np.asarray(s, dtype=float)
    integrand = np.exp(-s[..., None] * _INV_SIN2)
    return integrand @ ZETA_WEIGHTS / np.pi

def worst_link(gamma, active, tol=TIE_TOLERANCE):
    """
    Flat index of the smallest active SINR.

    Entries within tol (relative) of the minimum count as tied and the
    smallest flat index wins, which is the lexicographic order of (k, l, n).
    """
    gamma = np.asarray(gamma).ravel()
    active = np.asarray(active, dtype=bool).ravel()
    if not active.any():
        raise ValueError("no active links")
    values = np.where(active, gamma, np.inf)
    low = values.min()
    threshold = low + tol * max(abs(low), np.finfo(float).tiny) if np.isfinite(low) else low
    return int(np.flatnonzero(active & (values <= threshold))[0])

@dataclass(frozen=True)
class SinrTensor:
    """Linear SINR shaped K x Lb x N; inactive entries hold 0"""
    gamma: np.ndarray
    active: np.ndarray
    argmin: tuple

    @property
    def K(self):
        return self.gamma.shape[0]

    @property
    def Nc(self):
        return self.gamma.shape[1] * self.gamma.shape[2]

    def tones(self):
        """View as K x Nc"""
        return self.gamma.reshape(self.K, -1)

    @classmethod
    def from_tones(cls, gamma, Z, N):
        K, Nc = gamma.shape
        active = np.asarray(Z, dtype=bool).reshape(K, Nc // N, N)
        gamma = np.where(active, gamma.reshape(K, Nc // N, N), 0.0)
        argmin = None
        if active.any():
            argmin = tuple(int(v) for v in np.unravel_index(worst_link(gamma, active), gamma.shape))
        return cls(gamma=gamma, active=active, argmin=argmin)

def sinr_from_effective(S_eff, Z, p, sigma2):
    """
    Per-tone SINR from effective gains S_eff[i, k, j] = h_k(i) g_j(i).

    Returns K x Nc; the interference at user k sums Z_j p_j |h_k g_j|^2 over j != k.
    """
    Z = np.asarray(Z, dtype=float)
    p = np.asarray(p, dtype=float)
    if Z.shape != p.shape or S_eff.shape != (Z.shape[1], Z.shape[0], Z.shape[0]):
        raise ValueError(f"shape mismatch: S_eff {S_eff.shape}, Z {Z.shape}, p {p.shape}")
    received = np.abs(S_eff) ** 2 * (Z * p).T[:, None, :]
    desired = np.einsum('ikk->ik', received)
    interference = received.sum(axis=2) - desired
    denominator = interference + sigma2
    with np.errstate(divide='ignore', invalid='ignore'):
        gamma = np.where(denominator > 0, desired / denominator, np.where(desired > 0, np.inf, 0.0))
    return (Z.T * gamma).T

def effective_channel(H, G):
    """S_eff[i, k, j] = h_k(i) g_j(i)"""
    return np.einsum('ikm,imj->ikj', H, G)

def sinr(cfg, H, state, Z, p):
    """SINR tensor of a channel under the current SIM phases"""
    H = getattr(H, 'H', H)
    Z = getattr(Z, 'Z', Z)
    p = getattr(p, 'p', p)
    G = state.cascade_all()
    gamma = sinr_from_effective(effective_channel(H, G), Z, p, noise_power_per_tone(cfg))
    return SinrTensor.from_tones(gamma, Z, cfg.N)

@dataclass(frozen=True, eq=False)
class ErrorClassTable:
    """Nearest-neighbour error events of one subblock codebook"""
    names: tuple
    beta: np.ndarray
    multiplicity: np.ndarray
    bit_errors: np.ndarray
    weight: np.ndarray
    n: int
    q: int
    d_idx: float

    @property
    def beta_max(self):
        return float(self.beta.max())

    def index(self, c):
        return self.names.index(c) if isinstance(c, str) else int(c)

def index_hamming_average(code):
    """Mean index-bit Hamming distance between legal patterns one tone swap apart"""
    distances = []
    for a, first in enumerate(code.patterns):
        for b, second in enumerate(code.patterns):
            if a != b and len(set(first) & set(second)) == code.V - 1:
                distances.append(bin(a ^ b).count('1'))
    return float(np.mean(distances)) if distances else 1.0

def error_classes(code):
    """
    Class table of the union bound.

    Multiplicities count the neighbours of one codeword, so averaging the
    union over all n codewords cancels n and the weight is N_c w_c / (pi q).
    """
    N, V, Ms = code.N, code.V, code.Ms
    d_idx = index_hamming_average(code)
    d_sym = 1.0
    candidates = [
        ('C1', code.Es, V * (N - V), d_idx),
        ('C2', code.d_min2, V * (Ms - 1), d_sym),
        ('C3', code.Es + code.d_min2, V * (N - V) * (Ms - 1), d_idx + d_sym),
    ]
    kept = [c for c in candidates if c[2] > 0]
    n = int(comb(N, V, exact=True)) * Ms ** V
    multiplicity = np.array([c[2] for c in kept], dtype=float)
    bit_errors = np.array([c[3] for c in kept], dtype=float)
    return ErrorClassTable(
        names=tuple(c[0] for c in kept),
        beta=np.array([c[1] for c in kept], dtype=float),
        multiplicity=multiplicity,
        bit_errors=bit_errors,
        weight=multiplicity * bit_errors / (np.pi * code.q),
        n=n,
        q=code.q,
        d_idx=d_idx,
    )

def pep_class(gamma, c, table, delta2=None):
    """Craig-integral pairwise error probability of class c over a subblock SINR profile"""
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("SINR profile must be finite")
    if np.any(gamma < 0):
        raise ValueError("SINR profile must be non-negative")
    delta2 = np.ones_like(gamma) if delta2 is None else np.asarray(delta2, dtype=float)
    beta = table.beta[table.index(c)]
    return float(craig_integral(beta * np.sum(gamma * delta2)))

def _bound_at_worst(worst, table):
    """Union bound with every class placed on a tone of SINR `worst`"""
    worst = np.asarray(worst, dtype=float)
    pep = craig_integral(worst[..., None] * table.beta)
    return np.pi * pep @ table.weight

def _worst_per_subblock(sinr):
    return np.where(sinr.active, sinr.gamma, np.inf).min(axis=2)

def ber_bound_user(sinr, table, k, l):
    """Three-class union bound on the bit error rate of user k, subblock l"""
    active = sinr.active[k, l]
    worst = sinr.gamma[k, l][active].min() if active.any() else 0.0
    return float(_bound_at_worst(worst, table))

def frame_ber_bound(sinr, table):
    """Per-user bound averaged over subblocks, length K"""
    worst = np.where(sinr.active.any(axis=2), _worst_per_subblock(sinr), 0.0)
    return _bound_at_worst(worst, table).mean(axis=1)

def average_ber_bound(sinr, table):
    return float(frame_ber_bound(sinr, table).mean())

def worst_link_ber_bound(sinr, table):
    """Largest per-subblock bound over all users and subblocks"""
    k, l, _ = sinr.argmin
    return ber_bound_user(sinr, table, k, l)

def worst_link_surrogate(sinr, table):
    """Worst active SINR normalised by the largest class coefficient"""
    if sinr.argmin is None:
        raise ValueError("no active tones")
    return float(sinr.gamma[sinr.argmin] / table.beta_max)

def eta_bound(eta, table):
    """Union bound with every subblock's worst tone held at SINR beta_max * eta"""
    return float(_bound_at_worst(table.beta_max * eta, table))

def sum_rate(sinr, Z=None):
    """Shannon sum rate per tone over the active links"""
    if Z is None:
        active = sinr.active
    else:
        active = np.asarray(getattr(Z, 'Z', Z), dtype=bool).reshape(sinr.gamma.shape)
    rates = np.log2(1 + np.where(active, sinr.gamma, 0.0))
    return float(rates.sum() / sinr.Nc)

def oversampled(samples, oversample=DEFAULT_OVERSAMPLE):
    """Band-limited interpolation by zero-padding the spectrum along the last axis"""
    samples = np.asarray(samples)
    n = samples.shape[-1]
    spectrum = np.fft.fft(samples, axis=-1)
    padded = np.zeros(samples.shape[:-1] + (oversample * n,), dtype=complex)
    positive = (n + 1) // 2
    padded[..., :positive] = spectrum[..., :positive]
    if n - positive:
        padded[..., -(n - positive):] = spectrum[..., positive:]
    return np.fft.ifft(padded, axis=-1) * oversample

def papr(samples, oversample=DEFAULT_OVERSAMPLE):
    """Peak-to-average power ratio in dB of each waveform along the last axis"""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise ValueError("empty waveform")
    if np.any(np.max(np.abs(samples), axis=-1) == 0):
        raise ValueError("all-zero waveform has no PAPR")
    power = np.abs(oversampled(samples, oversample)) ** 2
    mean = power.mean(axis=-1)
    ratio = 10 * np.log10(power.max(axis=-1) / mean)
    return float(ratio) if np.ndim(ratio) == 0 else ratio

def burst_papr(symbols, oversample=DEFAULT_OVERSAMPLE):
    """
    PAPR in dB of a run of consecutive OFDM symbols.

    The last two axes are (symbol, sample). Each symbol is interpolated on
    its own, then peak and mean power are taken over the whole run.
    """
    symbols = np.asarray(symbols)
    if symbols.ndim < 2 or symbols.size == 0:
        raise ValueError(f"expected a nonempty (symbol, sample) array, got shape {symbols.shape}")
    if np.any(np.max(np.abs(symbols), axis=(-2, -1)) == 0):
        raise ValueError("all-zero burst has no PAPR")
    power = np.abs(oversampled(symbols, oversample)) ** 2
    power = power.reshape(power.shape[:-2] + (-1,))
    ratio = 10 * np.log10(power.max(axis=-1) / power.mean(axis=-1))
    return float(ratio) if np.ndim(ratio) == 0 else ratio

def ber_confidence(errors, bits, z=1.96):
    """Normal-approximation confidence interval of a Monte Carlo BER"""
    if bits == 0:
        return 0.0, 1.0
    ber = errors / bits
    half = z * np.sqrt(ber * (1 - ber) / bits)
    return max(0.0, ber - half), min(1.0, ber + half)
