#!/usr/bin/env python3
"""
test_estep.py
---

  Module A (mean-field updates), module B (MRF message passing) and the turbo loop.

"""

import numpy as np

import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.models.astvbi.estep as _estep
import src.harness.oracles as _oracles
import src.harness.two_phase as _two_phase

SMALL = _two_phase.ExperimentConfig(M=8, N_p=16, N_s=8, Q=16, P=4, K_B=1, L_B=1, O=1)

def _system(case):
  scale = 1.0 / np.sqrt(case.scene.noise_power)
  y_parts = {p: v * scale for p, v in case.observation.parts.items()}
  hyper = _priors.hyperparams_from_scene(case.scene, case.grids, num_paths=case.truth.L + 1)
  return _estep.BlockSystem(case.builder.build(case.offsets), y_parts), hyper

def test_extrinsic():
  assert np.isclose(_estep.extrinsic(0.3, 0.3), 0.5)
  assert np.isclose(_estep.extrinsic(0.0, 0.0), 0.5)
  assert np.isclose(_estep.extrinsic(0.9, 0.5), 0.9)
  out = _estep.extrinsic(np.array([0.8, 0.2]), np.array([0.2, 0.8]))
  assert out[0] > 0.9 and out[1] < 0.1

def test_bp_exact_on_chains():
  errs = _oracles.bp_errors(np.random.default_rng(0), shapes=((1, 3), (1, 4), (1, 5)))
  for shape, err in errs.items():
    assert err < _oracles.TOLERANCES['bp_tree'], "BP error '{}' on chain {}".format(err, shape)

def test_bp_close_on_loops():
  errs = _oracles.bp_errors(np.random.default_rng(1), shapes=((2, 2), (2, 3)), beta=0.25)
  for shape, err in errs.items():
    assert err < _oracles.TOLERANCES['bp_loopy'], "BP error '{}' on lattice {}".format(err, shape)

def test_mrf_without_coupling():
  mrf = _priors.MRFParams(alpha=0.0, beta=0.0, Qx=2, Qy=3)
  pi_in = np.linspace(0.1, 0.9, 6)
  marg, _ = _estep.mrf_marginals(pi_in, mrf)
  assert np.allclose(marg, pi_in)

def test_module_b_neutral_evidence():
  mrf = _priors.MRFParams(alpha=0.3, beta=0.5, Qx=3, Qy=3)
  probs = _priors.SupportProbs(p_T=0.5, p_NL=0.75, p_L=0.25)
  msgs = _estep.module_b_pass(np.full(9, 0.5), np.full(9, 0.5), probs, mrf)
  assert np.allclose(msgs.pi_in, 0.5)
  assert np.all((msgs.gamma_T > 0) & (msgs.gamma_T <= probs.p_T))
  assert np.all((msgs.gamma_NL > 0) & (msgs.gamma_NL <= probs.p_NL))

def test_posterior_matches_dense_solve():
  for seed in range(2):
    case = _oracles.make_case(SMALL, seed)
    assert _oracles.posterior_error(case) < _oracles.TOLERANCES['posterior']

def test_module_a_elbo_is_monotone():
  case = _oracles.make_case(SMALL, 3)
  system, hyper = _system(case)
  Q = case.grids.Q
  state = _estep.init_posteriors(system, hyper, np.full(Q, 0.3), np.full(Q, 0.5), 0.25)
  it = _estep.run_module_a(state, system, hyper, cfg=_estep.EStepConfig(max_inner=10, inner_tol=0.0))
  assert it == 10 and len(state.elbo_trace) == 10
  trace = np.array(state.elbo_trace)
  assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1.0, np.abs(trace[1:])))
  for name in ('pi_T', 'pi_NL', 'pi_L'):
    p = getattr(state, name)
    assert np.all((p >= 0) & (p <= 1))

def test_run_estep():
  case = _oracles.make_case(SMALL.replaced(tx_power_dbm=20.0), 0)
  system, hyper = _system(case)
  probs = _priors.SupportProbs.from_counts(case.truth.K, case.truth.L, 1, case.grids.P)
  mrf = _priors.MRFParams.from_grids(case.grids)
  state = _estep.run_estep(system, hyper, probs, mrf, cfg=_estep.EStepConfig(max_turbo=3))
  assert 1 <= state.turbo_rounds <= 3
  assert state.x.shape == (6 * case.grids.Q + 2 * case.grids.P,)
  assert np.all(np.isfinite(state.x))
  for j in _measurement.BLOCKS:
    assert state.Sigma[j].shape == (len(state.mu[j]),) * 2
  warm = _estep.run_estep(system, hyper, probs, mrf, cfg=_estep.EStepConfig(max_turbo=1), warm=state)
  assert warm.turbo_rounds == 1

def test_pure_noise_scene_stays_empty():
  cfg = SMALL.replaced(K_B=0, L_B=0, O=0)
  quiet = 0
  for seed in range(10):
    case = _oracles.make_case(cfg, seed)
    assert case.truth.K == 0 and case.truth.L == 0
    system, hyper = _system(case)
    probs = _priors.SupportProbs.from_counts(0, 0, 0, case.grids.P)
    mrf = _priors.MRFParams.from_grids(case.grids)
    state = _estep.run_estep(system, hyper, probs, mrf, cfg=_estep.EStepConfig(max_turbo=3))
    quiet += bool(np.all(state.pi_T < 0.5) and np.all(state.pi_NL < 0.5))
  assert quiet >= 9

def test_scaled_posterior():
  case = _oracles.make_case(SMALL, 1)
  system, hyper = _system(case)
  Q = case.grids.Q
  state = _estep.init_posteriors(system, hyper, np.full(Q, 0.5), np.full(Q, 0.5), 0.25)
  scaled = state.scaled(2.0)
  assert np.allclose(scaled.x, 2 * state.x)
  assert np.allclose(scaled.Sigma['ITS'], 4 * state.Sigma['ITS'])
  assert np.allclose(scaled.a_t['ITS'] / scaled.b_t['ITS'], state.a_t['ITS'] / state.b_t['ITS'] / 4)
  # Scaling works on a copy.
  assert not np.allclose(state.x, scaled.x)

if __name__ == '__main__':
  test_extrinsic()
  test_bp_exact_on_chains()
  test_bp_close_on_loops()
  test_mrf_without_coupling()
  test_module_b_neutral_evidence()
  test_posterior_matches_dense_solve()
  test_module_a_elbo_is_monotone()
  test_run_estep()
  test_pure_noise_scene_stays_empty()
  test_scaled_posterior()
