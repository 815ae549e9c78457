#!/usr/bin/env python3
"""
test_mstep.py
---

  Surrogate objective, offset gradients, update rules and the outer AS-TVBI loop.

"""

import numpy as np

import src.sim.scene as _scene
import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.models.astvbi.mstep as _mstep
import src.harness.oracles as _oracles
import src.harness.two_phase as _two_phase

SMALL = _two_phase.ExperimentConfig(M=8, N_p=16, N_s=8, Q=16, P=4, K_B=1, L_B=1, O=1)

def _normalized(case):
  scale = 1.0 / np.sqrt(case.scene.noise_power)
  return {p: v * scale for p, v in case.observation.parts.items()}, scale

def test_ddg_direction():
  g_BS = np.array([[1.0, -1.0], [1.0, 0.0], [-2.0, 3.0]])
  g_IRS = np.array([[2.0, -3.0], [-1.0, 5.0], [-0.5, 0.1]])
  assert np.array_equal(_mstep.ddg_direction(g_BS, g_IRS), [[1.0, -1.0], [0.0, 0.0], [-1.0, 1.0]])

def test_ga_direction():
  g = np.array([[3.0, 4.0], [0.0, 0.0]])
  assert np.allclose(_mstep.ga_direction(g), [[0.6, 0.8], [0.0, 0.0]])

def test_step_schedule():
  scene = _scene.SceneConfig()
  grids = _scene.build_grids(scene.soi_R, scene.soi_Ru, 16, 4)
  sched = _mstep.StepSchedule.from_grids(grids)
  assert np.allclose(sched.step_r, 10.0 / 8) and np.allclose(sched.floor_z, 7.5 / 256)
  assert not sched.at_floor
  for _ in range(5):
    sched = sched.shrunk()
  assert sched.at_floor
  assert np.allclose(sched.step_r, sched.floor_r)

def test_ddg_update_is_clamped_to_candidates():
  scene = _scene.SceneConfig()
  grids = _scene.build_grids(scene.soi_R, scene.soi_Ru, 16, 4)
  sched = _mstep.StepSchedule.from_grids(grids, step_frac=1.0)
  ones_r, ones_z = np.ones((16, 2)), np.ones((4, 2))
  grads = _mstep.SurrogateGradients(ones_r, ones_r, ones_z, -ones_z)
  moved = _mstep.ddg_update(_scene.OffsetState.zeros(grids), grads, sched, [3], grids)
  # A full cell step ends on the half-cell box.
  assert np.allclose(moved.dr[3], grids.clamp_r)
  assert np.allclose(np.delete(moved.dr, 3, axis=0), 0.0)
  # Disagreeing gradient sources leave the user grids in place.
  assert np.allclose(moved.dz, 0.0)

def test_select_candidates():
  post = _mstep.point_posterior(np.zeros(6 * 4 + 2 * 1, dtype=complex), 4, 1)
  post.pi_T = np.array([0.9, 0.1, 0.1, 0.1])
  post.pi_NL = np.array([0.1, 0.1, 0.6, 0.1])
  assert list(_mstep.select_candidates(post, 0)) == [0, 2]
  post.mu['ITS'] = np.array([0.0, 2.0, 0.0, 1.0], dtype=complex)
  assert list(_mstep.select_candidates(post, 1)) == [0, 1, 2]
  assert list(_mstep.select_candidates(post, 4)) == [0, 1, 2, 3]
  # Strictly above the threshold.
  post.pi_NL = np.array([0.1, 0.1, 0.5, 0.1])
  assert list(_mstep.select_candidates(post, 0)) == [0]
  assert list(_mstep.select_candidates(post, 0, threshold=0.0)) == [0, 1, 2, 3]

def test_select_candidates_without_evidence():
  post = _mstep.point_posterior(np.zeros(6 * 6 + 2 * 1, dtype=complex), 6, 1)
  assert not post.pi_T.any() and not post.pi_NL.any()
  # Equal (zero) energies fall back to the lowest indices.
  assert list(_mstep.select_candidates(post, 2)) == [0, 1]
  assert len(_mstep.select_candidates(post, 0)) == 0

def test_point_posterior():
  x = np.zeros(6 * 4 + 2 * 2, dtype=complex)
  sl = _measurement.block_slices(4, 2)
  x[sl['CTB']][1] = 1.0
  x[sl['INL']][3] = 2.0
  x[sl['BL']][0] = 3.0
  post = _mstep.point_posterior(x, 4, 2)
  assert np.array_equal(post.pi_T, [0, 1, 0, 0])
  assert np.array_equal(post.pi_NL, [0, 0, 0, 1])
  assert np.array_equal(post.pi_L, [1, 0])
  assert np.array_equal(post.x, x)

def test_gradients_match_finite_differences():
  rng = np.random.default_rng(0)
  for seed in range(2):
    case = _oracles.make_case(SMALL, seed)
    assert _oracles.gradient_error(case, rng) < _oracles.TOLERANCES['gradients']

def test_gradients_respect_candidates():
  case = _oracles.make_case(SMALL, 1)
  y_parts, scale = _normalized(case)
  post = _mstep.point_posterior(case.x_true * scale, case.grids.Q, case.grids.P)
  offsets = _scene.OffsetState.zeros(case.grids)
  g = _mstep.gradients(case.builder, offsets, y_parts, post, candidates=[2, 5])
  rows = np.delete(np.arange(case.grids.Q), [2, 5])
  assert np.allclose(g.g_BS_r[rows], 0.0) and np.allclose(g.g_IRS_r[rows], 0.0)

def test_mstep_never_decreases_surrogate():
  case = _oracles.make_case(SMALL, 2)
  y_parts, scale = _normalized(case)
  post = _mstep.point_posterior(case.x_true * scale, case.grids.Q, case.grids.P)
  offsets = _scene.OffsetState.zeros(case.grids)
  sched = _mstep.StepSchedule.from_grids(case.grids)
  candidates = np.concatenate([case.index_map.q_T, case.index_map.q_S])
  q0 = _mstep.surrogate_Q(case.builder.build(offsets), y_parts, post)
  for rule in _mstep.MSTEP_RULES:
    moved, q1, _, accepted = _mstep.mstep(case.builder, offsets, y_parts, post, sched, candidates, rule=rule)
    assert q1 >= q0
    assert np.isclose(q1, _mstep.surrogate_Q(case.builder.build(moved), y_parts, post))
    assert accepted or (np.array_equal(moved.dr, offsets.dr) and np.array_equal(moved.dz, offsets.dz))

def test_surrogate_is_maximal_at_truth_without_noise():
  case = _oracles.make_case(SMALL, 3, noiseless=True)
  y_parts, scale = _normalized(case)
  post = _mstep.point_posterior(case.x_true * scale, case.grids.Q, case.grids.P)
  assert abs(_mstep.surrogate_Q(case.builder.build(case.offsets), y_parts, post)) < 1e-12
  assert _mstep.surrogate_Q(case.builder.build(_scene.OffsetState.zeros(case.grids)), y_parts, post) < 0

def test_near_bs_case():
  for seed in range(3):
    case = _oracles.make_near_bs_case(SMALL, seed)
    assert case.truth.K == 1 and case.truth.L == 0
    assert np.linalg.norm(case.truth.targets[0] - np.asarray(case.scene.p_B)) < 3.0
    assert list(case.index_map.q_T) == [0]
    assert np.all(np.abs(case.offsets.dr[0]) <= case.grids.clamp_r)

def test_ddg_beats_gradient_ascent_near_bs():
  cfg = SMALL.replaced(max_outer=8, max_turbo=2, max_inner=5)
  wins = 0
  for seed in range(10):
    q_ddg, q_ga = _oracles.paired_mstep_rules(_oracles.make_near_bs_case(cfg, seed), cfg)
    wins += q_ddg >= q_ga
  assert wins >= 8

def test_validate_ddg_suite():
  cfg = SMALL.replaced(max_outer=2, max_turbo=1, max_inner=3)
  report = _oracles.validate('ddg', cfg=cfg, cases=2, seed=4)
  assert report['suite'] == 'ddg' and list(report['errors']) == ['loss_rate']
  err = report['errors']['loss_rate']
  assert err['error'] in (0.0, 0.5, 1.0) and err['tolerance'] == _oracles.TOLERANCES['ddg']
  assert report['passed'] == (err['error'] <= err['tolerance'])

def _run(case, **changes):
  cfg = SMALL.replaced(max_outer=4, **changes).estimator_config(_two_phase.AS_TVBI)
  hyper = _priors.hyperparams_from_scene(case.scene, case.grids, num_paths=case.truth.L + 1)
  probs = _priors.SupportProbs.from_counts(case.truth.K, case.truth.L, 1, case.grids.P)
  mrf = _priors.MRFParams.from_grids(case.grids)
  calls = []

  def on_iteration(n, q_value, dmu, step_r, x):
    calls.append((n, x))

  res = _mstep.run_as_tvbi(case.observation, case.builder, hyper, probs, mrf, case.scene.noise_power,
    case.truth.K, case.truth.L, cfg, on_iteration=on_iteration)
  return res, calls

def test_run_as_tvbi():
  case = _oracles.make_case(SMALL, 0)
  res, calls = _run(case, max_turbo=2, max_inner=5)
  assert 1 <= res.iterations <= 4
  assert len(res.trace) == res.iterations == len(calls)
  assert [c[0] for c in calls] == list(range(1, res.iterations + 1))
  # The posterior comes back in observation units.
  assert np.allclose(calls[-1][1], res.posterior.x, rtol=1e-10, atol=0)
  assert np.all(np.abs(res.offsets.dr) <= case.grids.clamp_r + 1e-12)
  assert np.all(np.abs(res.offsets.dz) <= case.grids.clamp_z + 1e-12)

def test_run_with_point_estimators():
  case = _oracles.make_case(SMALL, 1)
  for estimator in ('omp', 'sbl'):
    cfg = _mstep.AsTvbiConfig(estimator=estimator, max_outer=2)
    hyper = _priors.hyperparams_from_scene(case.scene, case.grids, num_paths=case.truth.L + 1)
    probs = _priors.SupportProbs.from_counts(case.truth.K, case.truth.L, 1, case.grids.P)
    mrf = _priors.MRFParams.from_grids(case.grids)
    res = _mstep.run_as_tvbi(case.observation, case.builder, hyper, probs, mrf, case.scene.noise_power,
      case.truth.K, case.truth.L, cfg)
    assert res.iterations <= 2
    assert np.all(np.isfinite(res.posterior.x))

if __name__ == '__main__':
  test_ddg_direction()
  test_ga_direction()
  test_step_schedule()
  test_ddg_update_is_clamped_to_candidates()
  test_select_candidates()
  test_select_candidates_without_evidence()
  test_point_posterior()
  test_gradients_match_finite_differences()
  test_gradients_respect_candidates()
  test_mstep_never_decreases_surrogate()
  test_surrogate_is_maximal_at_truth_without_noise()
  test_near_bs_case()
  test_ddg_beats_gradient_ascent_near_bs()
  test_validate_ddg_suite()
  test_run_as_tvbi()
  test_run_with_point_estimators()
