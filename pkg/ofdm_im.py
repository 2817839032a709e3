import os
import logging
from functools import lru_cache
from itertools import combinations
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import comb

# Index-selection table for N=4, V=2 (0-based tones); rows follow the bit patterns 00, 01, 10, 11
PAIR_PATTERNS_4_2 = ((0, 2), (1, 3), (0, 3), (1, 2))

# (N, V) pairs of the throughput / detection-complexity study
TRADEOFF_PATTERNS = ((2, 1), (4, 1), (4, 2), (4, 3), (8, 4))

class IllegalPatternError(ValueError):
    pass

def int_to_bits(value, width):
    """MSB-first bits of an integer"""
    return np.array([(value >> (width - 1 - b)) & 1 for b in range(width)], dtype=np.uint8)

def bits_to_int(bits):
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value

def _rows_to_int(bits):
    """Big-endian integer value of every row of a 2-D bit array"""
    if bits.shape[1] == 0:
        return np.zeros(bits.shape[0], dtype=np.int64)
    weights = 1 << np.arange(bits.shape[1] - 1, -1, -1, dtype=np.int64)
    return bits.astype(np.int64) @ weights

def gray_constellation(Ms):
    """Unit-energy Gray-mapped PSK; entry b is the point carrying bit label b"""
    if Ms == 2:
        return np.array([1.0 + 0j, -1.0 + 0j])
    points = np.empty(Ms, dtype=complex)
    for position in range(Ms):
        points[position ^ (position >> 1)] = np.exp(2j * np.pi * position / Ms)
    return points

@dataclass(frozen=True, eq=False)
class ImCode:
    """
    OFDM-IM codec for one subblock of N tones with V active.

    Candidate c of the ML codebook carries the q bits whose big-endian value
    is c: the pattern index is c // Ms**V and the symbol labels are the
    base-Ms digits of c % Ms**V.
    """
    N: int
    V: int
    Ms: int
    q1: int
    q2: int
    patterns: tuple
    constellation: np.ndarray
    d_min2: float
    codebook: np.ndarray
    masks: np.ndarray

    @property
    def q(self):
        return self.q1 + self.q2

    @property
    def bits_per_symbol(self):
        return int(np.log2(self.Ms))

    @property
    def candidates(self):
        return self.codebook.shape[0]

    @property
    def Es(self):
        return float(np.mean(np.abs(self.constellation) ** 2))

@lru_cache(maxsize=None)
def make_code(N, V, Ms=2):
    """Build the codec; V == N gives the full-tone code with no index bits"""
    if not 0 < V <= N:
        raise ValueError(f"need 0 < V <= N, got N={N}, V={V}")
    if Ms < 2 or Ms & (Ms - 1):
        raise ValueError(f"Ms must be a power of two, got {Ms}")

    subsets = int(comb(N, V, exact=True))
    q1 = subsets.bit_length() - 1
    bits_per_symbol = Ms.bit_length() - 1
    q2 = V * bits_per_symbol

    if (N, V) == (4, 2):
        patterns = PAIR_PATTERNS_4_2
    else:
        patterns = tuple(c for _, c in zip(range(2 ** q1), combinations(range(N), V)))

    constellation = gray_constellation(Ms)
    diffs = np.abs(constellation[:, None] - constellation[None, :]) ** 2
    d_min2 = float(np.min(diffs[~np.eye(Ms, dtype=bool)]))

    count = 2 ** q1 * Ms ** V
    codebook = np.zeros((count, N), dtype=complex)
    masks = np.zeros((count, N), dtype=bool)
    for c in range(count):
        pattern = patterns[c // Ms ** V]
        combo = c % Ms ** V
        for v, tone in enumerate(pattern):
            label = (combo // Ms ** (V - 1 - v)) % Ms
            codebook[c, tone] = constellation[label]
            masks[c, tone] = True
    constellation.setflags(write=False)
    codebook.setflags(write=False)
    masks.setflags(write=False)

    return ImCode(N=N, V=V, Ms=Ms, q1=q1, q2=q2, patterns=patterns, constellation=constellation,
                  d_min2=d_min2, codebook=codebook, masks=masks)

def code_from_config(cfg):
    """Subblock codebook of a system configuration"""
    return make_code(cfg.N, cfg.V, cfg.Ms)

def split_bits(code):
    return code.q1, code.q2, code.q

def index_map(code, bits):
    """Active tone pattern selected by the index bits"""
    if len(bits) != code.q1:
        raise ValueError(f"expected {code.q1} index bits, got {len(bits)}")
    return code.patterns[bits_to_int(bits)]

def index_unmap(code, subset):
    """Index bits of a legal active tone pattern"""
    subset = tuple(sorted(int(n) for n in subset))
    try:
        return int_to_bits(code.patterns.index(subset), code.q1)
    except ValueError:
        raise IllegalPatternError(f"illegal pattern {subset}")

def encode_user(code, bits, Lb):
    """Map q*Lb bits to the user's activation row and frequency-domain symbols"""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape != (code.q * Lb,):
        raise ValueError(f"expected {code.q * Lb} bits, got {bits.size}")
    index = _rows_to_int(bits.reshape(Lb, code.q))
    x = code.codebook[index].reshape(-1)
    z_row = code.masks[index].reshape(-1).astype(np.uint8)
    return z_row, x

def frame_to_time(cfg, x):
    """Unitary IDFT along the last axis followed by cyclic-prefix insertion"""
    x = np.asarray(x)
    if x.shape[-1] != cfg.Nc:
        raise ValueError(f"expected {cfg.Nc} tones, got {x.shape[-1]}")
    samples = np.fft.ifft(x, norm='ortho')
    if cfg.Ncp == 0:
        return samples
    return np.concatenate([samples[..., -cfg.Ncp:], samples], axis=-1)

def time_to_freq(cfg, samples):
    """Strip the cyclic prefix and return the unitary FFT of each symbol"""
    samples = np.asarray(samples)
    if samples.shape[-1] != cfg.Nc + cfg.Ncp:
        raise ValueError(f"expected {cfg.Nc + cfg.Ncp} samples, got {samples.shape[-1]}")
    return np.fft.fft(samples[..., cfg.Ncp:], norm='ortho')

def ml_detect_subblock(code, y, heff, sigma2=None):
    """
    Exhaustive ML detection over the legal codebook.

    Equal-variance Gaussian noise makes the decision independent of sigma2;
    the first minimum wins on ties.
    """
    y = np.asarray(y)
    heff = np.asarray(heff)
    metric = np.sum(np.abs(y[None, :] - heff[None, :] * code.codebook) ** 2, axis=1)
    best = int(np.argmin(metric))
    return int_to_bits(best, code.q), code.codebook[best].copy()

def detect_user(code, y, heff):
    """ML detection of every subblock of one user; returns (bits, x_hat)"""
    y = np.asarray(y).reshape(-1, code.N)
    heff = np.asarray(heff).reshape(-1, code.N)
    residual = y[:, None, :] - heff[:, None, :] * code.codebook[None, :, :]
    best = np.argmin(np.sum(np.abs(residual) ** 2, axis=2), axis=1)
    bits = np.stack([int_to_bits(int(c), code.q) for c in best]).reshape(-1)
    return bits, code.codebook[best].reshape(-1)

@dataclass(frozen=True)
class ActivationMatrix:
    Z: np.ndarray
    N: int

    @property
    def K(self):
        return self.Z.shape[0]

    @property
    def Nc(self):
        return self.Z.shape[1]

    def blocks(self):
        """View as K x Lb x N"""
        return self.Z.reshape(self.K, -1, self.N)

def build_activation(rows, code):
    """Validate an activation matrix against a codebook"""
    Z = np.atleast_2d(np.asarray(rows, dtype=np.uint8))
    if Z.shape[1] % code.N:
        raise ValueError(f"row length {Z.shape[1]} is not a multiple of N={code.N}")
    if np.any((Z != 0) & (Z != 1)):
        raise ValueError("activation entries must be 0 or 1")
    sums = Z.reshape(Z.shape[0], -1, code.N).sum(axis=2)
    bad = np.argwhere(sums != code.V)
    if bad.size:
        k, block = bad[0]
        raise ValueError(f"user {k} subblock {block} has {sums[k, block]} active tones, expected V={code.V}")
    return ActivationMatrix(Z=Z, N=code.N)

@dataclass(frozen=True)
class ImFrame:
    bits: np.ndarray
    activation: ActivationMatrix
    x: np.ndarray
    samples: np.ndarray

    @property
    def Z(self):
        return self.activation.Z

def encode_frame(code, cfg, bits):
    """Encode one OFDM-IM symbol for every user; bits is K x (q * Lb)"""
    bits = np.asarray(bits, dtype=np.uint8)
    Lb = cfg.Nc // code.N
    encoded = [encode_user(code, row, Lb) for row in bits]
    activation = build_activation([z for z, _ in encoded], code)
    x = np.stack([symbols for _, symbols in encoded])
    return ImFrame(bits=bits, activation=activation, x=x, samples=frame_to_time(cfg, x))

def random_bits(code, cfg, rng):
    """Uniform bitstream filling one frame for every user"""
    return rng.integers(0, 2, size=(cfg.K, code.q * (cfg.Nc // code.N)), dtype=np.uint8)

def spectral_efficiency(code, K, Nc, Ncp):
    """Bits per second per hertz including the cyclic-prefix overhead"""
    return K * code.q * (Nc // code.N) / (Nc + Ncp)

def detector_candidates(N, V, Lb, Ms=2):
    """Per-symbol ML search size counting every V-subset of each subblock"""
    return Lb * int(comb(N, V, exact=True)) * Ms ** V

def save_bits(bits, path):
    np.packbits(np.asarray(bits, dtype=np.uint8).reshape(-1)).tofile(path)

def load_bits(path, count):
    """Read the first `count` bits of a packed bit file"""
    packed = np.fromfile(path, dtype=np.uint8)
    bits = np.unpackbits(packed)
    if bits.size < count:
        raise ValueError(f"{path} holds {bits.size} bits, {count} requested")
    return bits[:count]

def dump_frame(frame, path):
    """Write frequency-domain symbols as text rows (tone, user, real, imag)"""
    K, Nc = frame.x.shape
    tone, user = np.meshgrid(np.arange(Nc), np.arange(K), indexing='xy')
    df = pd.DataFrame({
        'tone': tone.ravel(),
        'user': user.ravel(),
        'real': frame.x.real.ravel(),
        'imag': frame.x.imag.ravel(),
    })
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    df.to_csv(path, index=False)
    logging.info(f"Saved frame dump ({K} users, {Nc} tones) to {path}")
