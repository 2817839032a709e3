import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ofdm_im import (IllegalPatternError, PAIR_PATTERNS_4_2, TRADEOFF_PATTERNS, build_activation,
                     detect_user, detector_candidates, dump_frame, encode_frame, encode_user, frame_to_time,
                     gray_constellation, index_map, index_unmap, int_to_bits, load_bits, make_code,
                     ml_detect_subblock, random_bits, save_bits, spectral_efficiency, split_bits, time_to_freq)
from system_config import SystemConfig, desk_config

def test_bit_split_for_four_tones_two_active():
    assert split_bits(make_code(4, 2, 2)) == (2, 2, 4)

@pytest.mark.parametrize('bits, subset', [
    ((0, 0), (0, 2)),
    ((0, 1), (1, 3)),
    ((1, 0), (0, 3)),
    ((1, 1), (1, 2)),
])
def test_index_selection_table(bits, subset):
    code = make_code(4, 2, 2)
    assert index_map(code, bits) == subset
    assert tuple(index_unmap(code, subset)) == bits

def test_pair_patterns_are_the_selection_table():
    assert make_code(4, 2, 2).patterns == PAIR_PATTERNS_4_2

def test_unlisted_pattern_is_illegal():
    with pytest.raises(IllegalPatternError):
        index_unmap(make_code(4, 2, 2), (0, 1))

@pytest.mark.parametrize('N, V, efficiency, candidates', [
    (2, 1, 2.67, 32),
    (4, 1, 2.0, 32),
    (4, 2, 2.67, 96),
    (4, 3, 3.33, 128),
    (8, 4, 3.33, 2240),
])
def test_throughput_and_detector_size(N, V, efficiency, candidates):
    code = make_code(N, V, 2)
    assert round(spectral_efficiency(code, 4, 16, 8), 2) == efficiency
    assert detector_candidates(N, V, 16 // N, 2) == candidates

def test_tradeoff_patterns_cover_five_rows():
    assert TRADEOFF_PATTERNS == ((2, 1), (4, 1), (4, 2), (4, 3), (8, 4))

@pytest.mark.parametrize('N, V', [(4, 1), (4, 2), (4, 3), (2, 1)])
def test_every_codeword_survives_noiseless_detection(N, V):
    code = make_code(N, V, 2)
    for value in range(2 ** code.q):
        bits = int_to_bits(value, code.q)
        z_row, x = encode_user(code, bits, 1)
        assert z_row.sum() == V
        detected, x_hat = ml_detect_subblock(code, x, np.ones(N))
        assert np.array_equal(detected, bits)
        assert np.allclose(x_hat, x)

def test_full_tone_code_has_no_index_bits():
    code = make_code(4, 4, 2)
    assert (code.q1, code.q2) == (0, 4)
    assert np.all(code.masks.sum(axis=1) == 4)

def test_invalid_codes_raise():
    with pytest.raises(ValueError):
        make_code(4, 0, 2)
    with pytest.raises(ValueError):
        make_code(4, 2, 3)

@pytest.mark.parametrize('Ms', [2, 4, 8])
def test_gray_constellation_neighbours_differ_in_one_bit(Ms):
    points = gray_constellation(Ms)
    assert np.allclose(np.abs(points), 1.0)
    angles = np.mod(np.angle(points), 2 * np.pi)
    order = np.argsort(angles)
    for a, b in zip(order, np.roll(order, -1)):
        assert bin(int(a) ^ int(b)).count('1') == 1

def test_codebook_is_read_only():
    code = make_code(4, 2, 2)
    with pytest.raises(ValueError):
        code.codebook[0, 0] = 0

@given(st.integers(min_value=0, max_value=2 ** 16 - 1))
@settings(max_examples=50, deadline=None)
def test_user_bits_roundtrip_through_detection(value):
    code = make_code(4, 2, 2)
    bits = int_to_bits(value, 16)
    _, x = encode_user(code, bits, 4)
    gains = np.exp(1j * np.linspace(0, 3, 16))
    detected, _ = detect_user(code, gains * x, gains)
    assert np.array_equal(detected, bits)

def test_encode_user_rejects_wrong_length():
    with pytest.raises(ValueError):
        encode_user(make_code(4, 2, 2), np.zeros(5, dtype=np.uint8), 4)

def test_frame_activation_has_v_tones_per_subblock(rng):
    cfg = desk_config()
    code = make_code(cfg.N, cfg.V, cfg.Ms)
    frame = encode_frame(code, cfg, random_bits(code, cfg, rng))
    assert frame.Z.shape == (cfg.K, cfg.Nc)
    assert np.all(frame.activation.blocks().sum(axis=2) == cfg.V)
    assert np.all((frame.x != 0) == (frame.Z == 1))
    assert frame.samples.shape == (cfg.K, cfg.Nc + cfg.Ncp)

def test_activation_with_wrong_row_sum_is_rejected():
    with pytest.raises(ValueError, match="expected V=2"):
        build_activation([[1, 1, 1, 0]], make_code(4, 2, 2))

def test_cyclic_prefix_is_the_symbol_tail_and_is_removed(rng):
    cfg = SystemConfig()
    x = rng.standard_normal(cfg.Nc) + 1j * rng.standard_normal(cfg.Nc)
    samples = frame_to_time(cfg, x)
    assert np.allclose(samples[:cfg.Ncp], samples[-cfg.Ncp:])
    assert np.allclose(time_to_freq(cfg, samples), x)
    # Unitary transform keeps the energy of the useful part
    assert np.sum(np.abs(samples[cfg.Ncp:]) ** 2) == pytest.approx(np.sum(np.abs(x) ** 2))

def test_bit_file_roundtrip(tmp_path, rng):
    bits = rng.integers(0, 2, 37, dtype=np.uint8)
    path = str(tmp_path / 'bits.bin')
    save_bits(bits, path)
    assert np.array_equal(load_bits(path, 37), bits)
    with pytest.raises(ValueError):
        load_bits(path, 100)

def test_frame_dump_lists_every_tone(tmp_path, rng):
    cfg = desk_config()
    code = make_code(cfg.N, cfg.V, cfg.Ms)
    frame = encode_frame(code, cfg, random_bits(code, cfg, rng))
    path = tmp_path / 'frame.csv'
    dump_frame(frame, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == 'tone,user,real,imag'
    assert len(lines) == cfg.K * cfg.Nc + 1

def test_subblock_detector_under_a_faded_channel():
    code = make_code(4, 2, 2)
    heff = np.array([1.0, 0.5j, -2.0, 0.8 + 0.3j])
    for index, word in enumerate(code.codebook):
        bits, x_hat = ml_detect_subblock(code, heff * word, heff)
        assert np.array_equal(bits, int_to_bits(index, code.q))
        assert np.array_equal(x_hat, word)

def test_subblock_detector_takes_the_first_candidate_on_ties():
    code = make_code(4, 2, 2)
    bits, x_hat = ml_detect_subblock(code, np.zeros(4), np.zeros(4))
    assert not bits.any()
    assert np.array_equal(x_hat, code.codebook[0])

def test_subblock_detector_agrees_with_the_user_detector(rng):
    code = make_code(4, 2, 2)
    heff = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    y = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    bits, x_hat = detect_user(code, y, heff)
    for l in range(2):
        block = slice(l * 4, (l + 1) * 4)
        sub_bits, sub_x = ml_detect_subblock(code, y[block], heff[block])
        assert np.array_equal(bits[l * code.q:(l + 1) * code.q], sub_bits)
        assert np.array_equal(x_hat[block], sub_x)
