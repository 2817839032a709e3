import logging
from dataclasses import dataclass, replace
from concurrent.futures import ThreadPoolExecutor, as_completed

import numpy as np
import pandas as pd
from tqdm import tqdm

from channel import draw_paths, realize_channel
from metrics import (SinrTensor, average_ber_bound, ber_confidence, burst_papr, effective_channel,
                     error_classes, sinr_from_effective, sum_rate, worst_link_surrogate)
from ofdm_im import code_from_config, detect_user, encode_frame, make_code, random_bits, spectral_efficiency
from power_alloc import uniform_active
from sim_device import build_propagation, cascade_tensor
from system_config import dbm_to_watt, noise_power_per_tone
from upgd import context_from_channel, refresh_power, solve_phases

# Configuration
SCHEMES = ('ofdm_zf', 'ofdmim_zf', 'sim_ofdmim')
CONDITION_LIMIT = 1e10
RIDGE = 1e-9
MIN_ERRORS = 100
TRIAL_CAP = 2000
PAPR_BURST = 10

METRIC_COLUMNS = ['scheme', 'Pt_dBm', 'seed', 'BER', 'bound', 'sum_rate', 'papr_db', 'eta',
                  'errors', 'bits', 'trials', 'trial_cap', 'ci_low', 'ci_high',
                  'spectral_efficiency', 'radiated_W']

@dataclass(frozen=True, eq=False)
class ZfPrecoder:
    """Digital zero-forcing precoder of one tone; columns already carry the power normalization"""
    matrix: np.ndarray
    scale: float
    regularized: bool
    leakage: float

def zf_precoder(H_i, p):
    """Pseudo-inverse precoder with a common column scale meeting the tone budget sum(p)"""
    H_i = np.asarray(H_i, dtype=complex)
    K = H_i.shape[0]
    if H_i.shape != (K, K):
        raise ValueError(f"direct channel must be square, got {H_i.shape}")
    if not np.any(H_i):
        raise ValueError("zero channel matrix cannot be zero-forced")

    regularized = not np.isfinite(np.linalg.cond(H_i)) or np.linalg.cond(H_i) > CONDITION_LIMIT
    if regularized:
        gram = H_i @ H_i.conj().T
        ridge = RIDGE * np.trace(gram).real
        raw = H_i.conj().T @ np.linalg.inv(gram + ridge * np.eye(K))
    else:
        raw = np.linalg.pinv(H_i)

    weights = np.asarray(p, dtype=float)
    if weights.sum() <= 0:
        weights = np.ones(K)
    scale = np.sqrt(weights.sum() / (weights @ np.sum(np.abs(raw) ** 2, axis=0)))
    matrix = scale * raw

    gains = np.abs(H_i @ matrix)
    off = gains - np.diag(np.diag(gains))
    leakage = float(np.max(off / np.diag(gains)[None, :])) if K > 1 else 0.0
    if regularized:
        logging.warning(f"Ill-conditioned tone regularized, leakage {leakage:.3e}")
    return ZfPrecoder(matrix=matrix, scale=float(scale), regularized=regularized, leakage=leakage)

@dataclass(frozen=True, eq=False)
class FrameResult:
    bits: int
    errors: int
    sinr: SinrTensor
    waveforms: np.ndarray
    radiated: float

def scheme_code(scheme, cfg):
    """Subblock codebook a scheme transmits with"""
    if scheme == 'ofdm_zf':
        return make_code(cfg.N, cfg.N, cfg.Ms)
    return code_from_config(cfg)

def direct_config(cfg):
    """K transmit antennas on a line with the metasurface atom spacing"""
    return replace(cfg, Mx=cfg.K, Mz=1)

def _transmit_sim(cfg, paths, frame, prop, solver, optimize):
    H = realize_channel(cfg, paths).H
    ctx = context_from_channel(cfg, H, frame.Z, prop)
    theta = ctx.zero_phases()
    if optimize:
        theta = solver(ctx)
        ctx = refresh_power(ctx, theta)
    S = effective_channel(H, cascade_tensor(prop, np.exp(1j * theta)))
    streams = np.sqrt(ctx.p) * frame.x
    # Each feed radiates its own stream; the metasurface is passive
    return S, ctx.p, ctx.tone_power, streams, float(ctx.p.sum())

def _transmit_zf(cfg, paths, frame):
    Hd = realize_channel(direct_config(cfg), paths).H
    allocation = uniform_active(frame.Z, cfg.Pt)
    streams = np.sqrt(allocation.p) * frame.x
    E = np.empty_like(Hd)
    antennas = np.empty_like(streams)
    radiated = 0.0
    for i in range(cfg.Nc):
        tone = zf_precoder(Hd[i], allocation.p[:, i])
        E[i] = Hd[i] @ tone.matrix
        antennas[:, i] = tone.matrix @ streams[:, i]
        radiated += float(allocation.p[:, i] @ np.sum(np.abs(tone.matrix) ** 2, axis=0))
    return E, allocation.p, allocation.tone_power, antennas, radiated

def simulate_frame(scheme, cfg, rng, prop=None, solver=None, optimize=True, paths=None):
    """
    One OFDM symbol end to end: encode, transmit, add noise, detect.

    Passing `paths` reuses a channel instead of drawing one from `rng`.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}', expected one of {SCHEMES}")
    code = scheme_code(scheme, cfg)
    sigma2 = noise_power_per_tone(cfg)

    paths = draw_paths(cfg, rng) if paths is None else paths
    frame = encode_frame(code, cfg, random_bits(code, cfg, rng))
    noise = np.sqrt(sigma2 / 2) * (rng.standard_normal((cfg.K, cfg.Nc)) + 1j * rng.standard_normal((cfg.K, cfg.Nc)))

    if scheme == 'sim_ofdmim':
        prop = prop or build_propagation(cfg)
        solver = solver or (lambda ctx: solve_phases(ctx, iterations=cfg.T))
        S, p, tone_power, antennas, radiated = _transmit_sim(cfg, paths, frame, prop, solver, optimize)
        transmitted = antennas
    else:
        S, p, tone_power, antennas, radiated = _transmit_zf(cfg, paths, frame)
        transmitted = np.sqrt(p) * frame.x

    y = np.einsum('ikj,ji->ki', S, transmitted) + noise
    heff = np.sqrt(tone_power) * np.einsum('ikk->ki', S)

    errors = 0
    for k in range(cfg.K):
        detected, _ = detect_user(code, y[k], heff[k])
        errors += int(np.count_nonzero(detected != frame.bits[k]))

    gamma = sinr_from_effective(S, frame.Z, p, sigma2)
    return FrameResult(bits=int(frame.bits.size), errors=errors,
                       sinr=SinrTensor.from_tones(gamma, frame.Z, code.N),
                       waveforms=np.fft.ifft(antennas, axis=-1, norm='ortho'), radiated=radiated)

def trial_rng(seed, trial):
    """Trial streams are shared across schemes and power points (common random numbers)"""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trial,)))

def _burst_paprs(waveforms, burst=PAPR_BURST):
    """(burst, antenna, dB) for every run of `burst` symbols; waveforms are symbol x antenna x sample"""
    waveforms = np.asarray(waveforms)
    rows = []
    for number, start in enumerate(range(0, len(waveforms), burst)):
        block = np.swapaxes(waveforms[start:start + burst], 0, 1)
        for antenna, run in enumerate(block):
            if np.any(run != 0):
                rows.append((number, antenna, burst_papr(run)))
    return rows

def _run_point(scheme, cfg, seed, pt_dbm, prop, solver, min_errors, trial_cap, optimize):
    cfg_pt = replace(cfg, Pt=dbm_to_watt(pt_dbm))
    code = scheme_code(scheme, cfg)
    table = error_classes(code)
    errors = bits = trials = 0
    bounds, rates, waveforms, etas, radiated = [], [], [], [], []

    while trials < trial_cap:
        result = simulate_frame(scheme, cfg_pt, trial_rng(seed, trials), prop, solver, optimize)
        trials += 1
        errors += result.errors
        bits += result.bits
        bounds.append(average_ber_bound(result.sinr, table))
        rates.append(sum_rate(result.sinr))
        etas.append(worst_link_surrogate(result.sinr, table))
        waveforms.append(result.waveforms)
        radiated.append(result.radiated)
        if min_errors and errors >= min_errors:
            break

    ber = errors / bits
    paprs = [value for _, _, value in _burst_paprs(waveforms)]
    low, high = ber_confidence(errors, bits)
    return {
        'scheme': scheme,
        'Pt_dBm': float(pt_dbm),
        'seed': int(seed),
        'BER': ber,
        'bound': float(np.mean(bounds)),
        'sum_rate': float(np.mean(rates)),
        'papr_db': float(np.mean(paprs)) if paprs else float('nan'),
        'eta': float(np.mean(etas)),
        'errors': errors,
        'bits': bits,
        'trials': trials,
        'trial_cap': trial_cap,
        'ci_low': low,
        'ci_high': high,
        'spectral_efficiency': spectral_efficiency(code, cfg.K, cfg.Nc, cfg.Ncp),
        'radiated_W': float(np.mean(radiated)),
    }

def run_baseline(scheme, cfg, seeds, pt_sweep, prop=None, solver=None, min_errors=MIN_ERRORS,
                 trial_cap=TRIAL_CAP, workers=1, optimize=True, progress=True):
    """Monte Carlo metric rows over the (seed, Pt) grid of one scheme"""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}', expected one of {SCHEMES}")
    if scheme == 'sim_ofdmim':
        prop = prop or build_propagation(cfg)
    grid = [(seed, pt) for seed in seeds for pt in pt_sweep]
    logging.info(f"Running {scheme} over {len(grid)} (seed, Pt) points")

    rows = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {
            executor.submit(_run_point, scheme, cfg, seed, pt, prop, solver, min_errors, trial_cap, optimize): (seed, pt)
            for seed, pt in grid
        }
        for future in tqdm(as_completed(futures), total=len(futures), desc=scheme, disable=not progress):
            row = future.result()
            logging.debug(f"{scheme} Pt={row['Pt_dBm']} dBm seed={row['seed']}: "
                          f"BER {row['BER']:.3e} ({row['errors']} errors, {row['trials']} trials)")
            rows.append(row)

    df = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    return df.sort_values(['Pt_dBm', 'seed']).reset_index(drop=True)

def papr_study(cfg, count, seed, schemes=SCHEMES, prop=None, burst=PAPR_BURST):
    """Per-antenna PAPR over bursts of `burst` consecutive symbols, `count` symbols per scheme"""
    if count < 1 or burst < 1:
        raise ValueError(f"need at least one symbol and a positive burst, got count={count}, burst={burst}")
    rows = []
    for scheme in schemes:
        if scheme == 'sim_ofdmim':
            prop = prop or build_propagation(cfg)
        for number, start in enumerate(tqdm(range(0, count, burst), desc=f"PAPR {scheme}")):
            # One channel per burst; the data changes from symbol to symbol
            paths = draw_paths(cfg, trial_rng(seed, number))
            waveforms = [simulate_frame(scheme, cfg, trial_rng(seed, symbol), prop, optimize=False,
                                        paths=paths).waveforms
                         for symbol in range(start, min(start + burst, count))]
            for _, antenna, value in _burst_paprs(waveforms, burst):
                rows.append({'scheme': scheme, 'seed': seed, 'burst': number,
                             'antenna': antenna, 'papr_db': value})
    return pd.DataFrame(rows, columns=['scheme', 'seed', 'burst', 'antenna', 'papr_db'])
