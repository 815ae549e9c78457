#!/usr/bin/env python3
"""
test_measurement.py
---

  Reflection schedules, the sparse measurement model and its agreement with the per-symbol simulation.

"""

import os

import numpy as np
import pytest

import src.sim.measurement as _measurement
import src.harness.oracles as _oracles
import src.harness.two_phase as _two_phase
import src.utils.errors as _errors

SMALL = _two_phase.ExperimentConfig(M=8, N_p=16, N_s=8, Q=16, P=4, K_B=1, L_B=1, O=1)

def test_block_layout():
  Q, P = 16, 4
  sl = _measurement.block_slices(Q, P)
  assert list(sl) == list(_measurement.BLOCKS)
  assert sl['ITS'] == slice(0, 16) and sl['CTB'] == slice(48, 64)
  assert sl['BL'] == slice(96, 100) and sl['IL'] == slice(100, 104)
  parts = _measurement.part_slices(Q, P)
  assert parts == {'sr': slice(0, 32), 'Br': slice(32, 64), 'c': slice(64, 104)}
  inner = _measurement.part_block_slices(Q, P)
  assert inner['ITB'] == slice(0, 16) and inner['INL'] == slice(16, 32) and inner['IL'] == slice(36, 40)

def test_scanning_codebook():
  W = _measurement.scanning_codebook(32, 4)
  assert W.shape == (32, 4)
  assert np.allclose(np.abs(W), 1.0)
  edges = np.linspace(np.pi / 2, np.pi, 5)
  mids = (edges[:-1] + edges[1:]) / 2
  gains = _measurement.beam_gain(W, mids)
  # Each sector is covered best by its own beam.
  assert np.array_equal(np.argmax(gains, axis=1), np.arange(4))

def test_scanning_codebook_size():
  with pytest.raises(_errors.ConfigurationError):
    _measurement.scanning_codebook(16, 3)

def test_reflection_schedule():
  rng = np.random.default_rng(0)
  Phi_r = np.exp(2j * np.pi * rng.random((6, 2)))
  Phi_c = np.exp(2j * np.pi * rng.random((6, 3)))
  s = _measurement.ReflectionSchedule(Phi_r, Phi_c)
  assert s.T_s == 2 and s.T_c == 3
  phi = s.vectorize()
  # Column-major: the first N_p entries are the first sensing pilot.
  assert np.allclose(phi[:6], Phi_r[:, 0]) and np.allclose(phi[12:18], Phi_c[:, 0])
  t = _measurement.ReflectionSchedule.from_vector(phi, 6, 2, 3)
  assert np.allclose(t.Phi_r, Phi_r) and np.allclose(t.Phi_c, Phi_c)
  stacked = s.stack(t)
  assert stacked.T_s == 4 and stacked.T_c == 6
  with pytest.raises(AssertionError):
    _measurement.ReflectionSchedule(2 * Phi_r, Phi_c)

def test_model_shapes():
  case = _oracles.make_case(SMALL, 0)
  model = case.builder.build(case.offsets)
  T1, T2 = SMALL.T1, SMALL.T2
  assert model.F_sr.shape == (SMALL.N_s * T1, 2 * SMALL.Q)
  assert model.F_Br.shape == (SMALL.M * T1, 2 * SMALL.Q)
  assert model.F_c.shape == ((SMALL.N_s + SMALL.M) * T2, 2 * SMALL.Q + 2 * SMALL.P)
  assert model.F.shape == (model.F_sr.shape[0] + model.F_Br.shape[0] + model.F_c.shape[0], 6 * SMALL.Q + 2 * SMALL.P)
  assert model.block('BNL').shape == ((SMALL.N_s + SMALL.M) * T2, SMALL.Q)
  # Sensors do not see the BS-side non-LoS paths.
  assert np.allclose(model.block('BNL')[:SMALL.N_s * T2], 0.0)
  x = case.x_true
  assert np.linalg.norm(model.apply(x) - model.F @ x) <= 1e-12 * np.linalg.norm(model.F @ x)

def test_model_matches_per_symbol_simulation():
  for seed in range(3):
    case = _oracles.make_case(SMALL, seed, noiseless=True)
    assert _oracles.consistency_error(case) < _oracles.TOLERANCES['consistency']
    assert np.count_nonzero(case.x_true) == 4 * case.truth.K + 2 * case.truth.L + 2

def test_model_matches_after_stacking():
  case = _oracles.make_case(SMALL, 4, noiseless=True)
  tail = _two_phase.tiled_schedule(case.schedule, 2, 2)
  rng = np.random.default_rng(1)
  tail = _measurement.ReflectionSchedule(tail.Phi_r * np.exp(2j * np.pi * rng.random(tail.Phi_r.shape)),
    tail.Phi_c, phase=_measurement.PHASE_II)
  stacked = case.schedule.stack(tail)
  obs = case.observation.stack(_measurement.synthesize_observation(case.channels, tail, case.scene, rng,
    noiseless=True))
  y = case.builder.with_schedule(stacked).build(case.offsets).apply(case.x_true)
  assert np.max(np.abs(y - obs.y)) / np.max(np.abs(obs.y)) < 1e-10

def test_noise_level():
  case = _oracles.make_case(SMALL, 5)
  clean = _measurement.synthesize_observation(case.channels, case.schedule, case.scene, np.random.default_rng(0),
    noiseless=True)
  n = case.observation.y - clean.y
  assert 0.5 < np.mean(np.abs(n) ** 2) / case.scene.noise_power < 1.5

def test_dump_format(tmp_path):
  a = np.arange(6).reshape(2, 3) * (1 + 2j)
  path = os.path.join(str(tmp_path), 'F.bin')
  _measurement.dump_array(path, a)
  with open(path, 'rb') as fin:
    assert fin.read(4) == b'JSCE'
  assert os.path.getsize(path) == 4 + 8 + 16 + 16 * 6
  assert np.array_equal(_measurement.load_array(path), a)

if __name__ == '__main__':
  test_block_layout()
  test_scanning_codebook()
  test_scanning_codebook_size()
  test_reflection_schedule()
  test_model_shapes()
  test_model_matches_per_symbol_simulation()
  test_model_matches_after_stacking()
  test_noise_level()
