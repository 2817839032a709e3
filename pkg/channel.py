import os
import logging
from dataclasses import dataclass

import numpy as np
from scipy.constants import speed_of_light

from system_config import subcarrier_frequencies

@dataclass(frozen=True)
class PathSet:
    """Per-user multipath parameters, every array shaped K x P"""
    gains: np.ndarray
    delays: np.ndarray
    elevations: np.ndarray
    azimuths: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.gains)
        for name in ('delays', 'elevations', 'azimuths'):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} shape {np.shape(getattr(self, name))} does not match gains shape {shape}")
        if np.any(self.delays < 0):
            raise ValueError("path delays must be non-negative")
        _check_angles(self.elevations, self.azimuths)

    @property
    def K(self):
        return self.gains.shape[0]

    @property
    def count(self):
        return self.gains.shape[1]

    def scaled(self, factor):
        return PathSet(self.gains * factor, self.delays, self.elevations, self.azimuths)

@dataclass(frozen=True)
class ChannelRealization:
    """H[i, k, :] is the row vector h_k at tone i (0-based)"""
    H: np.ndarray
    paths: PathSet
    seed: int = None

def _check_angles(elevation, azimuth):
    elevation = np.asarray(elevation)
    azimuth = np.asarray(azimuth)
    if np.any(elevation < 0) or np.any(elevation >= np.pi):
        raise ValueError("elevation out of range [0, pi)")
    if np.any(azimuth < -np.pi / 2) or np.any(azimuth > np.pi / 2):
        raise ValueError("azimuth out of range [-pi/2, pi/2]")

def _array_response(cfg, elevation, azimuth, f):
    """Steering vectors broadcast over the leading shapes of the angle and frequency arrays"""
    elevation = np.asarray(elevation, dtype=float)
    azimuth = np.asarray(azimuth, dtype=float)
    scale = 2j * np.pi * cfg.rm * np.asarray(f, dtype=float)[..., None] / speed_of_light
    mx = np.arange(cfg.Mx)
    mz = np.arange(cfg.Mz)
    ax = np.exp(scale * (np.sin(elevation) * np.sin(azimuth))[..., None] * mx)
    az = np.exp(scale * np.cos(elevation)[..., None] * mz)
    # Atom m = mx * Mz + mz, the ordering of kron(ax, az)
    alpha = ax[..., :, None] * az[..., None, :]
    return alpha.reshape(alpha.shape[:-2] + (cfg.Mx * cfg.Mz,))

def steering_vector(cfg, elevation, azimuth, f):
    """Array response of all meta-atoms of the last layer, kron(alpha_x, alpha_z)"""
    _check_angles(elevation, azimuth)
    return _array_response(cfg, float(elevation), float(azimuth), float(f))

def user_distance(cfg, k):
    """3-D distance from the transmitter to user k on the street"""
    offset = (k - (cfg.K - 1) / 2) * cfg.ue_spacing
    return np.sqrt(cfg.ue_distance ** 2 + offset ** 2 + cfg.bs_height ** 2)

def pathloss(cfg, k):
    """Linear large-scale gain of user k, antenna gains included"""
    reference = (cfg.wavelength / (4 * np.pi)) ** 2
    antenna_gain = 10 ** ((cfg.gain_bs_dBi + cfg.gain_ue_dBi) / 10)
    return antenna_gain * reference * user_distance(cfg, k) ** (-cfg.pathloss_exponent)

def power_profile(cfg, k):
    """Expected tap powers of user k, decaying exponentially and summing to the pathloss"""
    if cfg.paths == 1:
        weights = np.ones(1)
    else:
        weights = 10 ** (-cfg.tap_decay_db * np.arange(cfg.paths) / (cfg.paths - 1) / 10)
    return pathloss(cfg, k) * weights / weights.sum()

def draw_paths(cfg, rng):
    """Draw the tapped-delay-line parameters of every user"""
    shape = (cfg.K, cfg.paths)
    max_delay = cfg.delay_fraction * cfg.Ncp / cfg.Bw
    delays = np.sort(rng.uniform(0.0, max_delay, size=shape), axis=1)
    profile = np.stack([power_profile(cfg, k) for k in range(cfg.K)])
    gains = np.sqrt(profile / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    elevations = rng.uniform(0.0, np.pi, size=shape)
    azimuths = rng.uniform(-np.pi / 2, np.pi / 2, size=shape)
    return PathSet(gains=gains, delays=delays, elevations=elevations, azimuths=azimuths)

def realize_channel(cfg, paths, seed=None):
    """Evaluate h_k(i) = sum_p g_p exp(-j 2 pi f_i tau_p) alpha_p(i)^H on every tone"""
    if paths.K != cfg.K:
        raise ValueError(f"path set has {paths.K} users, config has K={cfg.K}")
    if cfg.Ncp > 0 and np.any(paths.delays >= cfg.Ncp / cfg.Bw):
        raise ValueError("path delay exceeds the cyclic prefix duration")

    freqs = subcarrier_frequencies(cfg)
    # Nc x K x P
    phase = np.exp(-2j * np.pi * freqs[:, None, None] * paths.delays[None, :, :])
    weights = paths.gains[None, :, :] * phase
    # Nc x K x P x M
    alpha = _array_response(cfg, paths.elevations[None, :, :], paths.azimuths[None, :, :],
                            np.broadcast_to(freqs[:, None, None], phase.shape))
    H = np.einsum('ikp,ikpm->ikm', weights, np.conj(alpha))
    return ChannelRealization(H=H, paths=paths, seed=seed)

def generate_channel(cfg, seed):
    """Draw and realize a channel from a single integer seed"""
    rng = np.random.default_rng(seed)
    return realize_channel(cfg, draw_paths(cfg, rng), seed=seed)

def save_channel(channel, path):
    """Write a channel tensor and its metadata to a .npz file"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Nc, K, M = channel.H.shape
    seed = -1 if channel.seed is None else int(channel.seed)
    with open(path, 'wb') as handle:
        np.savez(handle, Nc=Nc, K=K, M=M, seed=seed, H=channel.H,
                 gains=channel.paths.gains, delays=channel.paths.delays,
                 elevations=channel.paths.elevations, azimuths=channel.paths.azimuths)
    logging.info(f"Saved channel ({Nc} tones, {K} users, {M} atoms) to {path}")

def load_channel(path, cfg):
    """Load a channel tensor file and check it against the configuration"""
    with np.load(path) as data:
        header = tuple(int(data[key]) for key in ('Nc', 'K', 'M'))
        expected = (cfg.Nc, cfg.K, cfg.M)
        if header != expected or data['H'].shape != expected:
            raise ValueError(f"channel file {path} has shape {data['H'].shape}, expected {expected}")
        paths = PathSet(gains=data['gains'], delays=data['delays'],
                        elevations=data['elevations'], azimuths=data['azimuths'])
        seed = int(data['seed'])
        H = np.array(data['H'])
    if not np.all(np.isfinite(H)):
        raise ValueError(f"channel file {path} contains non-finite entries")
    return ChannelRealization(H=H, paths=paths, seed=None if seed < 0 else seed)
