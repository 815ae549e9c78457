#!/usr/bin/env python3
"""
test_baselines.py
---

  OMP and SBL baselines, NMSE and localization RMSE.

"""

import numpy as np
import pytest

import src.sim.scene as _scene
import src.sim.measurement as _measurement
import src.models.astvbi.mstep as _mstep
import src.models.baselines.omp as _omp
import src.models.baselines.sbl as _sbl
import src.models.baselines.metrics as _metrics
import src.harness.oracles as _oracles
import src.harness.two_phase as _two_phase
import src.utils.errors as _errors

SMALL = _two_phase.ExperimentConfig(M=8, N_p=16, N_s=8, Q=16, P=4, K_B=1, L_B=1, O=1)

def _dictionary(rng, rows=30, cols=12):
  return rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))

def test_block_budgets():
  budgets = _omp.block_budgets(2, 3)
  assert budgets == {'ITS': 2, 'CTS': 2, 'ITB': 2, 'CTB': 2, 'BNL': 3, 'INL': 3, 'BL': 1, 'IL': 1}

def test_omp_part_recovers_sparse_vector():
  rng = np.random.default_rng(0)
  F = _dictionary(rng)
  y = 2.0 * F[:, 1] + (3.0 - 1j) * F[:, 8]
  blocks = {'A': slice(0, 6), 'B': slice(6, 12)}
  x, support, r = _omp.omp_part(F, y, blocks, {'A': 1, 'B': 1})
  assert sorted(support) == [1, 8]
  assert np.allclose(x[[1, 8]], [2.0, 3.0 - 1j])
  assert np.linalg.norm(r) < 1e-10 * np.linalg.norm(y)

def test_omp_part_respects_budgets():
  rng = np.random.default_rng(1)
  F = _dictionary(rng)
  y = F[:, 0] + F[:, 2] + F[:, 7]
  x, support, _ = _omp.omp_part(F, y, {'A': slice(0, 6), 'B': slice(6, 12)}, {'A': 0, 'B': 2})
  assert len(support) == 2 and all(i >= 6 for i in support)
  assert np.all(x[:6] == 0)
  _, support, _ = _omp.omp_part(F, y, {'A': slice(0, 6), 'B': slice(6, 12)}, {})
  assert support == []

def test_omp_on_measurement_model():
  case = _oracles.make_case(SMALL, 0)
  scale = 1.0 / np.sqrt(case.scene.noise_power)
  y_parts = {p: v * scale for p, v in case.observation.parts.items()}
  model = case.builder.build(case.offsets)
  budgets = _omp.block_budgets(case.truth.K, case.truth.L)
  res = _omp.omp(y_parts, model, budgets)
  assert res.x.shape == (6 * SMALL.Q + 2 * SMALL.P,)
  sl = _measurement.block_slices(SMALL.Q, SMALL.P)
  for j in _measurement.BLOCKS:
    assert np.count_nonzero(res.x[sl[j]]) <= budgets[j]
  assert set(res.residual_norms) == set(_measurement.PARTS)
  assert len(set(res.support)) == len(res.support)

def test_log_evidence():
  rng = np.random.default_rng(2)
  F = _dictionary(rng, rows=4, cols=3)
  gamma = np.array([1.0, 2.0, 4.0])
  y = rng.standard_normal(4) + 1j * rng.standard_normal(4)
  C = 0.5 * np.eye(4) + F @ np.diag(1 / gamma) @ F.conj().T
  expected = -4 * np.log(np.pi) - np.log(np.linalg.det(C).real) - np.vdot(y, np.linalg.solve(C, y)).real
  assert np.isclose(_sbl.log_evidence(F, gamma, y, 0.5), expected)

def test_sbl_evidence_is_monotone():
  rng = np.random.default_rng(3)
  F = _dictionary(rng, rows=30, cols=20)
  x = np.zeros(20, dtype=complex)
  x[[4, 13]] = [3.0, -2.0 + 1j]
  sigma2 = 0.01
  y = F @ x + np.sqrt(sigma2 / 2) * (rng.standard_normal(30) + 1j * rng.standard_normal(30))
  mu, Sigma, gamma, trace, it = _sbl.sbl_part(F, y, sigma2, max_iter=100)
  assert len(trace) >= 2
  trace = np.array(trace)
  assert np.all(np.diff(trace) >= -1e-5 * np.abs(trace[1:]))
  assert set(np.argsort(-np.abs(mu))[:2]) == {4, 13}
  assert np.allclose(mu[[4, 13]], x[[4, 13]], atol=0.1)
  # Pruned coefficients carry neither mean nor covariance.
  pruned = ~np.isfinite(gamma)
  assert np.all(mu[pruned] == 0) and np.all(Sigma[pruned] == 0)

def test_sbl_on_measurement_model():
  case = _oracles.make_case(SMALL, 1)
  scale = 1.0 / np.sqrt(case.scene.noise_power)
  y_parts = {p: v * scale for p, v in case.observation.parts.items()}
  res = _sbl.sbl(y_parts, case.builder.build(case.offsets), sigma2=1.0, max_iter=50)
  assert res.x.shape == (6 * SMALL.Q + 2 * SMALL.P,)
  assert set(res.Sigma) == set(_measurement.BLOCKS)
  assert res.Sigma['BL'].shape == (SMALL.P, SMALL.P)
  assert 1 <= res.iterations <= 50
  assert np.all(np.isfinite(res.x))

def test_nmse():
  x = np.array([1.0, 2.0, 0.0])
  assert np.isclose(_metrics.nmse(np.array([1.0, 1.0, 1.0]), x), 2.0 / 5.0)
  with pytest.raises(_errors.MetricError):
    _metrics.nmse(x, np.zeros(3))

def test_nmse_report():
  Q, P = 4, 1
  sl = _measurement.block_slices(Q, P)
  x_true = np.zeros(6 * Q + 2 * P, dtype=complex)
  x_true[sl['ITS']][1] = 2.0
  x_hat = x_true.copy()
  x_hat[sl['ITS']][1] = 1.0
  report = _metrics.nmse_report(x_hat, x_true, Q, P)
  assert np.isclose(report['ITS'], 0.25) and np.isclose(report['sensing'], 0.25)
  assert np.isclose(report['total'], 0.25)
  assert np.isnan(report['BNL']) and np.isnan(report['comm'])

def test_rmse_with_missed_objects():
  detected = {_metrics.TARGET: [[0.0, 0.0], [10.0, 0.0]], _metrics.USER: [[1.0, 1.0]]}
  truth = {_metrics.TARGET: [[10.0, 0.0], [0.0, 1.0]], _metrics.SCATTERER: [[5.0, 5.0]], _metrics.USER: [[1.0, 2.0]]}
  value, meta = _metrics.rmse(detected, truth, 3.0)
  assert np.isclose(value, np.sqrt((1.0 + 9.0 + 1.0) / 4))
  assert meta['missed'] == {_metrics.TARGET: 0, _metrics.SCATTERER: 1, _metrics.USER: 0}
  assert meta['false_alarms'][_metrics.TARGET] == 0

def test_rmse_false_alarms():
  detected = {_metrics.TARGET: [[0.0, 0.0], [50.0, 50.0], [20.0, 0.0]]}
  truth = {_metrics.TARGET: [[19.0, 0.0]]}
  value, meta = _metrics.rmse(detected, truth, {_metrics.TARGET: 5.0, _metrics.SCATTERER: 5.0, _metrics.USER: 1.0})
  assert np.isclose(value, 1.0)
  assert meta['false_alarms'][_metrics.TARGET] == 2
  with pytest.raises(_errors.MetricError):
    _metrics.rmse(detected, {}, 1.0)

def test_grid_penalties():
  scene = _scene.SceneConfig()
  grids = _scene.build_grids(scene.soi_R, scene.soi_Ru, 16, 4)
  pen = _metrics.grid_penalties(grids)
  assert np.isclose(pen[_metrics.TARGET], 10.0 * np.sqrt(2))
  assert np.isclose(pen[_metrics.USER], 7.5 * np.sqrt(2))

def test_detected_positions():
  case = _oracles.make_case(SMALL, 2)
  scale = 1.0 / np.sqrt(case.scene.noise_power)
  post = _mstep.point_posterior(case.x_true * scale, case.grids.Q, case.grids.P)
  found = _metrics.detected_positions(post, case.grids, case.offsets)
  value, meta = _metrics.rmse(found, _metrics.truth_positions(case.truth), _metrics.grid_penalties(case.grids))
  # Exact supports with the true offsets reproduce the ground truth.
  assert value < 1e-9
  assert sum(meta['missed'].values()) == 0

if __name__ == '__main__':
  test_block_budgets()
  test_omp_part_recovers_sparse_vector()
  test_omp_part_respects_budgets()
  test_omp_on_measurement_model()
  test_log_evidence()
  test_sbl_evidence_is_monotone()
  test_sbl_on_measurement_model()
  test_nmse()
  test_nmse_report()
  test_rmse_with_missed_objects()
  test_rmse_false_alarms()
  test_grid_penalties()
  test_detected_positions()
