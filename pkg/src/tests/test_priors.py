#!/usr/bin/env python3
"""
test_priors.py
---

  Support prior, Ising prior and hyperparameters.

"""

import numpy as np

import src.sim.scene as _scene
import src.sim.channel as _channel
import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.harness.oracles as _oracles

def test_mrf_lattice():
  mrf = _priors.MRFParams(Qx=3, Qy=2)
  assert mrf.Q == 6
  edges = mrf.edges()
  assert len(edges) == 7
  assert (0, 1) in edges and (0, 2) in edges and (1, 2) not in edges
  s = np.array([1, -1, 1, 1, -1, 1], dtype=float)
  nb = mrf.neighbor_sum(s)
  expected = np.zeros(6)
  for q, r in edges:
    expected[q] += s[r]
    expected[r] += s[q]
  assert np.allclose(nb, expected)

def test_ising_logprob():
  mrf = _priors.MRFParams(alpha=0.3, beta=0.5, Qx=2, Qy=2)
  s = np.array([1, 1, -1, 1], dtype=float)
  pairs = sum(s[q] * s[r] for q, r in mrf.edges())
  assert np.isclose(_priors.ising_unnorm_logprob(s, mrf), -0.3 * s.sum() + 0.5 * pairs)

def test_coupled_support_logprior():
  mrf = _priors.MRFParams(Qx=1, Qy=2)
  probs = _priors.SupportProbs(p_T=0.5, p_NL=0.75, p_L=0.25)
  s_L = np.array([1, -1, -1, -1])
  # Active target on an inactive union grid.
  assert _priors.coupled_support_logprior([1, -1], [-1, -1], s_L, [-1, -1], probs, mrf) == -np.inf
  logp = _priors.coupled_support_logprior([1, -1], [1, -1], s_L, [1, -1], probs, mrf)
  expected = np.log(0.5) + np.log(0.75) + np.log(0.25) + 3 * np.log(0.75) \
    + _priors.ising_unnorm_logprob([1, -1], mrf)
  assert np.isclose(logp, expected)

def test_support_probs_from_counts():
  probs = _priors.SupportProbs.from_counts(4, 6, 2, 9)
  assert np.isclose(probs.p_T, 0.5) and np.isclose(probs.p_NL, 0.75) and np.isclose(probs.p_L, 1 / 9)
  # No targets: floored instead of zero.
  probs = _priors.SupportProbs.from_counts(0, 6, 0, 9)
  assert np.isclose(probs.p_T, 1 / 24) and np.isclose(probs.p_NL, 1.0)
  # Empty scene: both floored as for a single object.
  probs = _priors.SupportProbs.from_counts(0, 0, 0, 4)
  assert np.isclose(probs.p_T, 0.25) and np.isclose(probs.p_NL, 0.25) and np.isclose(probs.p_L, 0.25)

def test_sample_support_is_union_consistent():
  mrf = _priors.MRFParams(alpha=0.0, beta=0.2, Qx=6, Qy=6)
  probs = _priors.SupportProbs.from_counts(2, 4, 1, 9)
  rng = np.random.default_rng(0)
  n_on, n_T, n_NL = 0, 0, 0
  for _ in range(40):
    state = _priors.sample_support(probs, mrf, rng, sweeps=5, P=9)
    assert state.union_consistent()
    assert state.s_L.shape == (9,)
    on = state.s_U == 1
    n_on += on.sum()
    n_T += (state.s_T[on] == 1).sum()
    n_NL += (state.s_NL[on] == 1).sum()
  assert n_on > 100
  assert abs(n_T / n_on - probs.p_T) < 0.1
  assert abs(n_NL / n_on - probs.p_NL) < 0.1

def test_gibbs_matches_enumeration():
  mrf = _priors.MRFParams(alpha=0.3, beta=0.5, Qx=2, Qy=2)
  probs = _priors.SupportProbs(p_T=0.5, p_NL=0.75, p_L=0.25)
  rng = np.random.default_rng(1)
  draws = np.array([_priors.sample_support(probs, mrf, rng, sweeps=20, P=4).s_U == 1 for _ in range(2000)])
  exact = _oracles.ising_marginals_exact(np.zeros(4), mrf)
  assert np.max(np.abs(draws.mean(axis=0) - exact)) < 0.05

def test_hyperparams_from_scene():
  scene = _scene.SceneConfig(M=8, N_p=16, N_s=8)
  grids = _scene.build_grids(scene.soi_R, scene.soi_Ru, 16, 4)
  hyper = _priors.hyperparams_from_scene(scene, grids, num_paths=3)
  for j in _measurement.BLOCKS:
    n = grids.Q if j in _measurement.R_BLOCKS else grids.P
    assert hyper.a[j].shape == (n,) and np.allclose(hyper.a[j], 1.0)
    assert np.allclose(hyper.b_bar[j], 1.0 / _priors.INACTIVE_PRECISION)
    assert np.all(hyper.b[j] > 0)
  G = np.sqrt(scene.tx_power) * _channel.path_loss(_channel.IRS_TARGET_SENSOR, scene, grids.r[5], scene.rcs)
  assert np.isclose(hyper.b['ITS'][5], G ** 2 / scene.noise_power)
  raw = _priors.hyperparams_from_scene(scene, grids, num_paths=3, normalize=False)
  assert np.isclose(raw.b['IL'][0] / hyper.b['IL'][0], scene.noise_power)

def test_checkerboard_logprob():
  mrf = _priors.MRFParams(alpha=0.0, beta=0.5, Qx=2, Qy=2)
  uniform = _priors.ising_unnorm_logprob(np.ones(4), mrf)
  checker = _priors.ising_unnorm_logprob(np.array([1, -1, -1, 1], dtype=float), mrf)
  assert np.isclose(uniform - checker, 2 * 0.5 * len(mrf.edges()))

def test_field_lowers_enumerated_marginals():
  previous = None
  for alpha in (0.0, 0.2, 0.4, 0.8):
    marg = _oracles.ising_marginals_exact(np.zeros(4), _priors.MRFParams(alpha=alpha, beta=0.5, Qx=2, Qy=2))
    if previous is not None:
      assert np.all(marg < previous)
    previous = marg

if __name__ == '__main__':
  test_mrf_lattice()
  test_ising_logprob()
  test_coupled_support_logprior()
  test_support_probs_from_counts()
  test_sample_support_is_union_consistent()
  test_gibbs_matches_enumeration()
  test_hyperparams_from_scene()
  test_checkerboard_logprob()
  test_field_lowers_enumerated_marginals()
