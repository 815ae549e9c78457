#!/usr/bin/env python3
"""
test_harness.py
---

  Trials, the trial dataset and the sweep outputs.

"""

import os
import json

import numpy as np
import pandas as pd
import pytest

import src.sim.measurement as _measurement
import src.data.trial_dataset as _trial_dataset
import src.harness.two_phase as _two_phase
import src.harness.sweep as _sweep
import src.utils.errors as _errors

FAST = _two_phase.ExperimentConfig(M=4, N_p=8, N_s=4, Q=16, P=4, K_B=1, L_B=1, O=1, max_outer=2, max_inner=5,
  max_turbo=2, bp_sweeps=3, sbl_max_iter=10, rcg_max_iter=5)

def test_parse_seeds():
  assert _sweep.parse_seeds('0..3') == [0, 1, 2, 3]
  assert _sweep.parse_seeds('4, 9,2') == [4, 9, 2]
  assert _sweep.parse_seeds(7) == [7]
  for bad in ('a..b', '', '3..1'):
    with pytest.raises(_errors.ConfigurationError):
      _sweep.parse_seeds(bad)

def test_sweep_points():
  configs = _sweep.sweep_points(FAST, 'elements', [24.0, 48])
  assert [c.N_p for c in configs] == [24, 48] and all(isinstance(c.N_p, int) for c in configs)
  configs = _sweep.sweep_points(FAST, 'power', [0, 5])
  assert [c.tx_power_dbm for c in configs] == [0.0, 5.0]
  assert _sweep.sweep_points(FAST, 'none', [1, 2]) == [FAST]
  with pytest.raises(_errors.ConfigurationError):
    _sweep.sweep_points(FAST, 'bandwidth', [1])

def test_experiment_config():
  assert FAST.K == 2 and FAST.L == 2 and FAST.overlap == 1
  assert np.isclose(FAST.overlap_ratio, 1 / 3)
  assert FAST.replaced(K_B=2, L_B=3, gamma_o=0.25).overlap == 2
  assert FAST.pilots(_two_phase.SP_TVBI) == (4, 4, 0, 0)
  assert FAST.pilots(_two_phase.AS_TVBI) == (2, 2, 2, 2)
  assert FAST.estimator_config(_two_phase.TP_SBL).estimator == 'sbl'
  assert FAST.estimator_config(_two_phase.AS_TVBI_GA).mstep_rule == 'ga'
  assert FAST.config_hash() == FAST.replaced().config_hash()
  assert FAST.config_hash() != FAST.replaced(N_p=16).config_hash()
  with pytest.raises(_errors.ConfigurationError):
    _two_phase.ExperimentConfig(T1=0)
  with pytest.raises(_errors.ConfigurationError):
    _two_phase.ExperimentConfig(detection_threshold=1.0)

def test_tiled_schedule():
  rng = np.random.default_rng(0)
  base = _measurement.ReflectionSchedule(np.exp(2j * np.pi * rng.random((4, 2))),
    np.exp(2j * np.pi * rng.random((4, 2))))
  tiled = _two_phase.tiled_schedule(base, 3, 1)
  assert tiled.phase == _measurement.PHASE_II
  assert np.array_equal(tiled.Phi_r, base.Phi_r[:, [0, 1, 0]])
  assert np.array_equal(tiled.Phi_c, base.Phi_c[:, [0]])
  assert _two_phase.tiled_schedule(base, 0, 0).Phi_r.shape == (4, 0)

def test_trial_dataset():
  ds = _trial_dataset.TrialDataset([FAST, FAST.replaced(tx_power_dbm=0.0)], [_two_phase.AS_TVBI, _two_phase.TP_OMP],
    [3, 4, 5])
  assert len(ds) == 12
  assert ds.items[0] == (0, _two_phase.AS_TVBI, 3)
  assert ds.items[3] == (0, _two_phase.TP_OMP, 3)
  assert ds.items[6] == (1, _two_phase.AS_TVBI, 3)
  with pytest.raises(AssertionError):
    _trial_dataset.TrialDataset([FAST], ['MUSIC'], [0])
  results = [_two_phase.TrialResult(point=0, scheme=_two_phase.AS_TVBI, seed=s, tx_power_dbm=0.0, gamma_o=0.0, N_p=8)
    for s in range(2)]
  assert _trial_dataset._collate_fn(results) == results

def test_trial_runs():
  result = _two_phase.run_two_phase(FAST, _two_phase.AS_TVBI, 0)
  assert not result.failed, result.error
  assert 1 <= result.iterations_I <= FAST.max_outer and 1 <= result.iterations_II <= FAST.max_outer
  assert np.isfinite(result.nmse['total']) and np.isfinite(result.rmse)
  assert set(result.traces) >= {'nmse_I', 'nmse_II', 'outer_I', 'outer_II'}
  assert len(result.traces['nmse_I']) == result.iterations_I
  row = result.row()
  assert 'runtime' not in row and 'traces' not in row
  assert 'nmse_total' in row and 'nmse_ITS' in row

def test_trial_is_deterministic():
  a = _two_phase.run_two_phase(FAST, _two_phase.TP_OMP, 1)
  b = _two_phase.run_two_phase(FAST, _two_phase.TP_OMP, 1)
  assert pd.DataFrame([a.row()]).equals(pd.DataFrame([b.row()]))

def test_single_phase_skips_design():
  result = _two_phase.run_two_phase(FAST, _two_phase.SP_TVBI, 2)
  assert not result.failed, result.error
  assert result.iterations_II == 0 and result.rcg_iterations == 0
  assert 'rcg' not in result.traces and np.isnan(result.crb_diag)

def test_empty_scene_trial():
  empty = FAST.replaced(K_B=0, L_B=0, O=0)
  assert empty.K == 0 and empty.overlap == 0 and empty.overlap_ratio == 0.0
  result = _two_phase.run_two_phase(empty, _two_phase.AS_TVBI, 3)
  assert not result.failed, result.error
  assert result.gamma_o == 0.0
  # Only the user carries energy, so the sensing blocks have no reference.
  assert np.isnan(result.nmse['sensing'])
  assert np.isfinite(result.nmse['total']) and np.isfinite(result.rmse)

def test_genie_skips_phase_one_estimate():
  result = _two_phase.run_two_phase(FAST, _two_phase.GENIE, 0)
  assert not result.failed, result.error
  assert result.iterations_I == 0
  assert 'outer_I' not in result.traces and 'nmse_I' not in result.traces
  assert 1 <= result.iterations_II <= FAST.max_outer
  assert np.isfinite(result.nmse['total'])

def test_failed_trial_is_captured():
  result = _two_phase.run_two_phase(FAST.replaced(O=3), _two_phase.AS_TVBI, 0, point=2)
  assert result.failed and result.point == 2
  assert result.error.startswith('ConfigurationError')
  assert np.isnan(result.rmse)

def _synthetic_frame():
  rows = []
  for point in range(3):
    for scheme in (_two_phase.AS_TVBI, _two_phase.TP_OMP):
      for seed in range(10):
        row = {'point': point, 'scheme': scheme, 'seed': seed, 'failed': seed == 0 and scheme == _two_phase.TP_OMP}
        for m in _sweep.METRICS:
          row[m] = float(point + seed)
        if row['failed']:
          row.update({m: float('nan') for m in _sweep.METRICS})
        rows.append(row)
  return pd.DataFrame(rows)

def test_aggregate():
  frame = _synthetic_frame()
  assert len(frame) == 60
  configs = _sweep.sweep_points(FAST, 'power', [0, 5, 10])
  summary = _sweep.aggregate(frame, configs, 'power')
  assert len(summary) == 6
  assert list(summary.columns[:3]) == ['point', 'tx_power_dbm', 'scheme']
  assert summary['trials'].tolist() == [10] * 6
  assert summary['failures'].tolist() == [0, 1] * 3
  first = summary.iloc[0]
  assert first['tx_power_dbm'] == 0.0 and np.isclose(first['rmse'], 4.5)
  # The failed seed 0 is left out of the mean.
  assert np.isclose(summary.iloc[1]['rmse'], 5.0)

def test_aggregate_overlap_axis():
  configs = _sweep.sweep_points(FAST.replaced(K_B=2, L_B=3), 'overlap', [0.1, 0.25, 0.4])
  summary = _sweep.aggregate(_synthetic_frame(), configs, 'overlap')
  # The realized ratio of the rounded overlap count is reported.
  assert np.allclose(summary['gamma_o'].unique(), [1 / 9, 2 / 8, 3 / 7])

def test_padded_mean():
  mean = _sweep._padded_mean([[3.0, 2.0, 1.0], [5.0], []])
  assert np.allclose(mean, [4.0, 3.5, 3.0])
  assert len(_sweep._padded_mean([])) == 0

def test_run_sweep(tmp_path):
  schemes = [_two_phase.AS_TVBI, _two_phase.TP_OMP]
  out_a = os.path.join(str(tmp_path), 'a')
  frame, summary = _sweep.run_sweep(FAST, schemes, [0, 1], out_a, emit_plots=True, keep_traces=True,
    tensorboard=True, progress=False)
  assert len(frame) == 4 and len(summary) == 2
  with open(os.path.join(out_a, _sweep.SUMMARY_FILE)) as fin:
    doc = json.load(fin)
  assert doc['schema_version'] == _sweep.SCHEMA_VERSION
  assert doc['trials'] == 4 and doc['trials_per_point'] == 2
  assert doc['config_hash'] == FAST.config_hash()
  assert doc['seeds'] == {'first': 0, 'last': 1, 'count': 2}
  assert len(doc['points']) == 2
  with open(os.path.join(out_a, _sweep.TRACES_FILE)) as fin:
    assert len(fin.readlines()) == 4
  assert os.path.isfile(os.path.join(out_a, 'plots', 'outer_convergence.csv'))
  assert os.listdir(os.path.join(out_a, 'tensorboard'))

  out_b = os.path.join(str(tmp_path), 'b')
  _sweep.run_sweep(FAST, schemes, [0, 1], out_b, progress=False)
  with open(os.path.join(out_a, _sweep.RESULTS_FILE), 'rb') as fa, open(os.path.join(out_b, _sweep.RESULTS_FILE),
                                                                        'rb') as fb:
    assert fa.read() == fb.read()

if __name__ == '__main__':
  test_parse_seeds()
  test_sweep_points()
  test_experiment_config()
  test_tiled_schedule()
  test_trial_dataset()
  test_trial_runs()
  test_trial_is_deterministic()
  test_single_phase_skips_design()
  test_empty_scene_trial()
  test_genie_skips_phase_one_estimate()
  test_failed_trial_is_captured()
  test_aggregate()
  test_aggregate_overlap_axis()
  test_padded_mean()
