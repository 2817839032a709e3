import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from harness import ExperimentSpec, pt_at_ber, run, stage_counts, summarize
from main import main
from system_config import config_hash, desk_config

def test_spec_validation():
    with pytest.raises(ValueError, match="unknown experiment"):
        ExperimentSpec('fig9')
    with pytest.raises(ValueError):
        ExperimentSpec('papr', trials=0)
    with pytest.raises(ValueError, match="out of order"):
        ExperimentSpec('ber-vs-pt', pt_min=10, pt_max=0)
    with pytest.raises(ValueError):
        ExperimentSpec('papr', scale='huge')

def test_pt_sweep_includes_both_bounds():
    assert ExperimentSpec('ber-vs-pt', pt_min=0, pt_max=10, pt_step=5).pt_sweep == [0.0, 5.0, 10.0]

def test_interpolated_pt_lies_between_bracketing_points():
    pt = [0.0, 5.0, 10.0, 15.0]
    ber = [1e-1, 1e-2, 2e-4, 1e-5]
    crossing = pt_at_ber(pt, ber, 1e-3)
    assert 5.0 < crossing < 10.0
    # log-linear: 1e-3 sits log10(10)/log10(50) of the way from 1e-2 to 2e-4
    assert crossing == pytest.approx(5.0 + 5.0 * 1 / np.log10(50))

def test_interpolation_without_crossing_is_nan():
    assert np.isnan(pt_at_ber([0.0, 10.0], [0.5, 0.1], 1e-3))

def test_exact_hit_and_error_free_tail():
    assert pt_at_ber([0.0, 5.0, 10.0], [1e-2, 1e-3, 1e-4], 1e-3) == pytest.approx(5.0)
    assert pt_at_ber([0.0, 5.0], [1e-2, 0.0], 1e-3) == 5.0

def test_empty_directory_reports_no_results(tmp_path):
    assert "no results" in summarize(str(tmp_path))

def test_missing_columns_raise(tmp_path):
    pd.DataFrame({'scheme': ['ofdm_zf']}).to_csv(tmp_path / 'papr.csv', index=False)
    with pytest.raises(ValueError, match="missing columns"):
        summarize(str(tmp_path))

def test_papr_summary_is_sorted_by_mean(tmp_path):
    pd.DataFrame({
        'scheme': ['ofdm_zf', 'ofdm_zf', 'sim_ofdmim', 'ofdmim_zf'],
        'papr_db': [8.0, 7.0, 3.5, 5.5],
    }).to_csv(tmp_path / 'papr.csv', index=False)
    report = summarize(str(tmp_path))
    assert report.index('sim_ofdmim') < report.index('ofdmim_zf') < report.index('ofdm_zf')

def test_ber_summary_reports_gain(tmp_path):
    rows = []
    for scheme, offset in (('sim_ofdmim', 0.0), ('ofdmim_zf', 2.0), ('ofdm_zf', 4.0)):
        for pt in (0.0, 5.0, 10.0, 15.0, 20.0, 25.0):
            ber = 10 ** (-(pt - offset) / 5)
            rows.append({'scheme': scheme, 'Pt_dBm': pt, 'BER': ber, 'errors': ber * 1e6, 'bits': 1e6})
    pd.DataFrame(rows).to_csv(tmp_path / 'ber_vs_pt.csv', index=False)
    report = summarize(str(tmp_path))
    assert "gain over ofdmim_zf: 2.00 dB" in report
    assert "gain over ofdm_zf: 4.00 dB" in report

def test_stage_counts():
    df = pd.DataFrame({
        'context': [0, 0, 0],
        'stage': [0, 1, 2],
        'upgd': [0.0, -10.0, np.nan],
        'fixed': [0.0, -5.0, -10.0],
        'backtracking': [0.0, -2.0, -4.0],
    })
    counts = stage_counts(df)
    assert counts['upgd'] == 1
    assert counts['fixed'] == 2
    assert np.isnan(counts['backtracking'])

def test_im_tradeoff_run_writes_table_and_manifest(tmp_path):
    manifest = run(ExperimentSpec('im-tradeoff', out=str(tmp_path)))
    df = pd.read_csv(tmp_path / 'im_tradeoff.csv')
    assert list(df['spectral_efficiency']) == [2.67, 2.0, 2.67, 3.33, 3.33]
    assert list(df['candidates']) == [32, 32, 96, 128, 2240]
    assert manifest['checks'] == {'tradeoff_table_matches': True}

    on_disk = json.loads((tmp_path / 'manifest.json').read_text())
    assert on_disk['schema_version'] == 1
    assert on_disk['config_hash'] == config_hash(desk_config())
    assert 'im_tradeoff.csv' in on_disk['files']
    assert on_disk['seeds'] == [0]

def test_runs_are_reproducible(tmp_path):
    first, second = tmp_path / 'a', tmp_path / 'b'
    for out in (first, second):
        run(ExperimentSpec('layers-sweep', out=str(out), seeds=(0, 1),
                           config=replace(desk_config(), T=3)))
    assert (first / 'layers_sweep.csv').read_text() == (second / 'layers_sweep.csv').read_text()
    df = pd.read_csv(first / 'layers_sweep.csv')
    assert sorted(df['L'].unique()) == [1, 2, 3, 4, 5]
    assert set(df['seed']) == {0, 1}

def test_manifest_hash_tracks_config(tmp_path):
    base = run(ExperimentSpec('im-tradeoff', out=str(tmp_path / 'a')))
    changed = run(ExperimentSpec('im-tradeoff', out=str(tmp_path / 'b'),
                                 config=replace(desk_config(), ue_distance=300.0)))
    assert base['config_hash'] != changed['config_hash']

@pytest.mark.slow
def test_papr_run_on_a_few_symbols(tmp_path):
    manifest = run(ExperimentSpec('papr', out=str(tmp_path), symbols=5,
                                  config=replace(desk_config(), T=3)))
    assert set(manifest['checks']) == {'papr_ordering', 'ofdm_papr_in_range'}
    df = pd.read_csv(tmp_path / 'papr.csv')
    assert set(df['scheme']) == {'ofdm_zf', 'ofdmim_zf', 'sim_ofdmim'}

def test_cli_run_and_summarize(tmp_path, capsys):
    out = str(tmp_path / 'run')
    assert main(['run', 'im-tradeoff', '--out', out]) == 0
    assert main(['summarize', out]) == 0
    assert "Index-selection trade-off" in capsys.readouterr().out

def test_cli_reports_bad_config_and_exits_with_one(tmp_path):
    assert main(['train', '--config', str(tmp_path / 'missing.conf')]) == 1
