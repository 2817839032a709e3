import os
import logging
from dataclasses import dataclass

import numpy as np
from scipy.constants import speed_of_light

from system_config import subcarrier_frequencies

TWO_PI = 2 * np.pi

def wrap_phases(theta):
    """Project phases onto [0, 2*pi)"""
    wrapped = np.mod(theta, TWO_PI)
    # mod of a tiny negative number rounds up to exactly 2*pi
    wrapped[wrapped >= TWO_PI] = 0.0
    return wrapped

class SimGeometry:
    """
    Atom coordinates of the stacked metasurface.

    Layers are planes normal to the y axis spaced dm apart, and every layer
    shares the same in-plane grid, so only the atom grid (at y = 0) and the
    feed line (dm behind it) are stored. Atoms form a centered Mx x Mz grid
    with spacing rm; the S feeds lie on a centered line along x with spacing
    rm * Mx / S.
    """

    def __init__(self, cfg):
        self.Mx, self.Mz, self.L, self.S = cfg.Mx, cfg.Mz, cfg.L, cfg.S
        self.rm = cfg.rm
        self.dm = cfg.dm
        self.Sm = cfg.Sm

        mx, mz = np.meshgrid(np.arange(cfg.Mx), np.arange(cfg.Mz), indexing='ij')
        x = (mx.ravel() - (cfg.Mx - 1) / 2) * cfg.rm
        z = (mz.ravel() - (cfg.Mz - 1) / 2) * cfg.rm
        self.atoms = np.column_stack([x, np.zeros_like(x), z])

        feed_x = (np.arange(cfg.S) - (cfg.S - 1) / 2) * cfg.rm * cfg.Mx / cfg.S
        self.feeds = np.column_stack([feed_x, np.full(cfg.S, -cfg.dm), np.zeros(cfg.S)])

        # Receiving atom along rows, transmitting element along columns
        self.layer_distance = self._distances(self.atoms, self.atoms, cfg.dm)
        self.feed_distance = self._distances(self.atoms, self.feeds, cfg.dm)

    @staticmethod
    def _distances(receivers, transmitters, axial):
        lateral = receivers[:, None, [0, 2]] - transmitters[None, :, [0, 2]]
        return np.sqrt(axial ** 2 + np.sum(lateral ** 2, axis=-1))

    @property
    def M(self):
        return self.Mx * self.Mz

    def distance(self, l, m, m_prime):
        """Distance into atom m of layer l from element m' of the layer (or feed line) behind it"""
        if not 0 <= l < self.L:
            raise ValueError(f"layer index {l} out of range 0..{self.L - 1}")
        table = self.feed_distance if l == 0 else self.layer_distance
        if not 0 <= m < table.shape[0] or not 0 <= m_prime < table.shape[1]:
            raise ValueError(f"atom pair ({m}, {m_prime}) out of range for layer {l}")
        return table[m, m_prime]

def rs_kernel(t, f, Sm, dm):
    """Rayleigh-Sommerfeld transmission coefficient over distance t at frequency f"""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("propagation distance must be positive")
    k = np.asarray(f, dtype=float) / speed_of_light
    return (Sm * dm / t ** 2) * (1 / (TWO_PI * t) - 1j * k) * np.exp(1j * TWO_PI * t * k)

def rs_coefficient(geom, l, m, m_prime, f):
    """Transmission coefficient into atom m of layer l from element m' of the stage before it"""
    return complex(rs_kernel(geom.distance(l, m, m_prime), f, geom.Sm, geom.dm))

@dataclass(frozen=True)
class PropagationSet:
    """
    Per-tone transmission matrices of the stack.

    `first` (Nc x M x S) carries the feeds into layer 0; `inter` (Nc x M x M)
    carries every later hop, all of which share one geometry.
    """
    first: np.ndarray
    inter: np.ndarray
    L: int

    def __post_init__(self):
        Nc, M, _ = self.first.shape
        if self.L > 1 and self.inter.shape != (Nc, M, M):
            raise ValueError(f"inter-layer shape {self.inter.shape} does not match ({Nc}, {M}, {M})")

    @property
    def Nc(self):
        return self.first.shape[0]

    @property
    def M(self):
        return self.first.shape[1]

    @property
    def S(self):
        return self.first.shape[2]

    def layer(self, l):
        return self.first if l == 0 else self.inter

def build_propagation(cfg, geom=None):
    """Per-tone propagation matrices of every layer, including the feed stage"""
    geom = geom or SimGeometry(cfg)
    freqs = subcarrier_frequencies(cfg)[:, None, None]
    first = rs_kernel(geom.feed_distance[None, :, :], freqs, geom.Sm, geom.dm)
    inter = rs_kernel(geom.layer_distance[None, :, :], freqs, geom.Sm, geom.dm)
    logging.debug(f"Built propagation set: {cfg.Nc} tones, L={cfg.L}, M={cfg.M}")
    return PropagationSet(first=first, inter=inter, L=cfg.L)

def cascade_tensor(prop, phases):
    """G(i) = Phi^L W^L ... Phi^1 W^1 for every tone at once, Nc x M x S"""
    G = phases[0][None, :, None] * prop.first
    for l in range(1, prop.L):
        G = phases[l][None, :, None] * (prop.inter @ G)
    return G

class SimState:
    """Phase tensor of the stack with a cascade cache keyed on the phase version"""

    def __init__(self, prop, theta=None):
        self.prop = prop
        self.version = 0
        self._cascade = None
        self._cached_version = -1
        self.theta = np.zeros((prop.L, prop.M)) if theta is None else theta

    @property
    def theta(self):
        return self._theta.copy()

    @theta.setter
    def theta(self, value):
        value = np.array(value, dtype=float)
        if value.shape != (self.prop.L, self.prop.M):
            raise ValueError(f"phase tensor shape {value.shape}, expected ({self.prop.L}, {self.prop.M})")
        self._theta = wrap_phases(value)
        self._phases = np.exp(1j * self._theta)
        self.version += 1

    @property
    def phases(self):
        return self._phases

    def phase_matrix(self, l):
        return np.diag(self._phases[l])

    def cascade_all(self):
        if self._cached_version != self.version:
            self._cascade = cascade_tensor(self.prop, self._phases)
            self._cached_version = self.version
        return self._cascade

def cascade(state, i):
    return state.cascade_all()[i]

def cascade_partial(state, i, l, m):
    """dG(i)/d theta_m^l through the split at layer l"""
    prop = state.prop
    if not 0 <= l < prop.L or not 0 <= m < prop.M:
        raise ValueError(f"invalid phase index (l={l}, m={m})")
    phases = state.phases

    below = prop.first[i]
    for j in range(1, l + 1):
        below = prop.inter[i] @ (phases[j - 1][:, None] * below)

    above = np.eye(prop.M, dtype=complex)
    for j in range(l + 1, prop.L):
        above = (phases[j][:, None] * prop.inter[i]) @ above

    return 1j * phases[l][m] * np.outer(above[:, m], below[m, :])

def save_phases(theta, path):
    """Write an L x M phase matrix as text"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    np.savetxt(path, np.asarray(theta), fmt='%.17g')
    logging.info(f"Saved phase tensor {np.shape(theta)} to {path}")

def load_phases(path, L, M):
    """Read an L x M phase matrix written by save_phases"""
    theta = np.loadtxt(path, ndmin=2)
    if theta.shape != (L, M):
        raise ValueError(f"phase file {path} has shape {theta.shape}, expected ({L}, {M})")
    return wrap_phases(theta)
