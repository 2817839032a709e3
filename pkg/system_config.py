import os
import re
import hashlib
import logging
from dataclasses import dataclass, fields, replace, asdict

import numpy as np
from scipy.constants import speed_of_light

# Configuration
DEFAULT_F0 = 28e9
DEFAULT_PT_DBM = 10.0
DEFAULT_N0_DBM_HZ = -174.0
DESK_OVERRIDES = {'Mx': 4, 'Mz': 4, 'L': 3, 'Nc': 16, 'T': 30}

# Keys that may appear in a config file but are derived from other fields
DERIVED_KEYS = ('M', 'dm', 'Lb')
INT_FIELDS = ('Nc', 'Ncp', 'K', 'S', 'Mx', 'Mz', 'L', 'N', 'V', 'Ms', 'T', 'seed', 'paths')

LINE_PATTERN = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.+?)\s*$')

class ConfigError(ValueError):
    """Invalid configuration value; `field` names the offending entry"""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field

def dbm_to_watt(dbm):
    """Convert dBm to watts"""
    return 10.0 ** ((dbm - 30.0) / 10.0)

def watt_to_dbm(watt):
    return 10.0 * np.log10(watt) + 30.0

@dataclass(frozen=True)
class SystemConfig:
    """
    Every scalar parameter of the SIM-aided OFDM-IM downlink.

    Powers are stored in SI units: Pt in watts, N0 in W/Hz. The atom spacing
    and atom area default to half a wavelength and its square at f0.
    """
    f0: float = DEFAULT_F0
    Bw: float = 60e6
    Nc: int = 16
    Ncp: int = 8
    K: int = 4
    S: int = 4
    Mx: int = 10
    Mz: int = 10
    L: int = 7
    Dm: float = 0.05
    rm: float = None
    Sm: float = None
    Pt: float = dbm_to_watt(DEFAULT_PT_DBM)
    N0: float = dbm_to_watt(DEFAULT_N0_DBM_HZ)
    gain_bs_dBi: float = 3.0
    gain_ue_dBi: float = 0.0
    N: int = 4
    V: int = 2
    Ms: int = 2
    T: int = 30
    seed: int = 0
    # Channel model
    paths: int = 10
    delay_fraction: float = 0.8
    tap_decay_db: float = 20.0
    pathloss_exponent: float = 2.2
    bs_height: float = 10.0
    ue_distance: float = 250.0
    ue_spacing: float = 30.0

    def __post_init__(self):
        wavelength = speed_of_light / self.f0 if self.f0 and self.f0 > 0 else None
        if self.rm is None and wavelength is not None:
            object.__setattr__(self, 'rm', wavelength / 2)
        if self.Sm is None and wavelength is not None:
            object.__setattr__(self, 'Sm', (wavelength / 2) ** 2)
        validate(self)

    @property
    def M(self):
        return self.Mx * self.Mz

    @property
    def dm(self):
        return self.Dm / self.L

    @property
    def Lb(self):
        return self.Nc // self.N

    @property
    def delta_f(self):
        return self.Bw / self.Nc

    @property
    def wavelength(self):
        return speed_of_light / self.f0

    @property
    def Pt_dBm(self):
        return watt_to_dbm(self.Pt)

def validate(cfg):
    """Check the configuration invariants, raising ConfigError on the first violation"""
    for name in ('f0', 'Bw', 'Dm', 'rm', 'Sm', 'Pt', 'bs_height', 'ue_distance'):
        value = getattr(cfg, name)
        if value is None or not np.isfinite(value) or value <= 0:
            raise ConfigError(name, f"must be strictly positive, got {value}")
    for name in ('Nc', 'K', 'S', 'Mx', 'Mz', 'L', 'N', 'V', 'paths'):
        if getattr(cfg, name) < 1:
            raise ConfigError(name, f"must be at least 1, got {getattr(cfg, name)}")
    if cfg.Ncp < 0:
        raise ConfigError('Ncp', f"must be non-negative, got {cfg.Ncp}")
    if cfg.T < 0:
        raise ConfigError('T', f"must be non-negative, got {cfg.T}")
    if cfg.N0 < 0 or not np.isfinite(cfg.N0):
        raise ConfigError('N0', f"must be non-negative, got {cfg.N0}")
    if cfg.ue_spacing < 0:
        raise ConfigError('ue_spacing', f"must be non-negative, got {cfg.ue_spacing}")
    if not 0 < cfg.delay_fraction <= 1:
        raise ConfigError('delay_fraction', f"must lie in (0, 1], got {cfg.delay_fraction}")
    if cfg.S != cfg.K:
        raise ConfigError('S', f"S must equal K (got S={cfg.S}, K={cfg.K})")
    if cfg.Nc % cfg.N != 0:
        raise ConfigError('N', f"Nc not divisible by N (Nc={cfg.Nc}, N={cfg.N})")
    if not 0 < cfg.V < cfg.N:
        raise ConfigError('V', f"V must be < N (V={cfg.V}, N={cfg.N})")
    if cfg.Ms < 2 or cfg.Ms & (cfg.Ms - 1):
        raise ConfigError('Ms', f"must be a power of two, got {cfg.Ms}")

def subcarrier_frequency(cfg, i):
    """Frequency of tone number i, counted 1..Nc"""
    if not 1 <= i <= cfg.Nc:
        raise ValueError(f"tone index {i} out of range 1..{cfg.Nc}")
    return cfg.f0 + (i - (cfg.Nc + 1) / 2) * cfg.delta_f

def subcarrier_frequencies(cfg):
    """Centre frequency of every subcarrier, lowest first"""
    return cfg.f0 + (np.arange(1, cfg.Nc + 1) - (cfg.Nc + 1) / 2) * cfg.delta_f

def noise_power_per_tone(cfg):
    """Thermal noise power in one subcarrier bandwidth"""
    return cfg.N0 * cfg.delta_f

def desk_config(cfg=None):
    """Shrink a configuration to the laptop-sized preset"""
    return replace(cfg or SystemConfig(), **DESK_OVERRIDES)

def _parse_value(key, text):
    try:
        if key in INT_FIELDS:
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse value '{text}'")

def from_mapping(values):
    """Build a config from a flat key/value mapping, accepting dBm power keys"""
    values = dict(values)
    known = {f.name for f in fields(SystemConfig)}
    derived = {key: values.pop(key) for key in DERIVED_KEYS if key in values}

    if 'Pt_dBm' in values:
        if 'Pt' in values:
            raise ConfigError('Pt', "give either Pt or Pt_dBm, not both")
        values['Pt'] = dbm_to_watt(float(values.pop('Pt_dBm')))
    if 'N0_dBm_Hz' in values:
        if 'N0' in values:
            raise ConfigError('N0', "give either N0 or N0_dBm_Hz, not both")
        values['N0'] = dbm_to_watt(float(values.pop('N0_dBm_Hz')))

    unknown = set(values) - known
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(name, "unknown configuration key")

    cfg = SystemConfig(**values)

    if 'M' in derived and int(derived['M']) != cfg.M:
        raise ConfigError('M', f"M must equal Mx*Mz={cfg.M}, got {derived['M']}")
    if 'Lb' in derived and int(derived['Lb']) != cfg.Lb:
        raise ConfigError('Lb', f"Lb must equal Nc/N={cfg.Lb}, got {derived['Lb']}")
    if 'dm' in derived and not np.isclose(float(derived['dm']) * cfg.L, cfg.Dm, rtol=1e-12, atol=0):
        raise ConfigError('dm', f"dm*L must equal Dm={cfg.Dm}, got dm={derived['dm']}")
    return cfg

def load_config(path):
    """Read a flat `key = value` config file"""
    values = {}
    with open(path, 'r', encoding='utf-8') as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            match = LINE_PATTERN.match(line)
            if not match:
                raise ConfigError(f"line {number}", f"cannot parse '{raw.strip()}'")
            key, text = match.groups()
            if key in values:
                raise ConfigError(key, f"duplicate key on line {number}")
            values[key] = text if key in DERIVED_KEYS else _parse_value(key, text)

    cfg = from_mapping(values)
    logging.info(f"Loaded configuration from {path}")
    return cfg

def config_text(cfg):
    """Canonical text form, one field per line in declaration order"""
    lines = []
    for name, value in asdict(cfg).items():
        lines.append(f"{name} = {value!r}")
    return '\n'.join(lines) + '\n'

def save_config(cfg, path):
    """Write a config in the key = value format load_config reads"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write("# SIM OFDM-IM system configuration (SI units)\n")
        handle.write(config_text(cfg))

def config_hash(cfg):
    """SHA-256 of the canonical config text"""
    return hashlib.sha256(config_text(cfg).encode('utf-8')).hexdigest()
