"""
oracles.py
---

  Reference computations the estimators are checked against: exhaustive enumeration of the support prior,
  central finite differences of the surrogate and of the noiseless mean, the dense linear-Gaussian posterior and the
  per-symbol simulation of the pilots, plus a paired run of both M-step rules on near-BS scenes. `validate` runs them
  as named suites on random scenes.

"""

import os
import itertools
import dataclasses

import numpy as np
import scipy.special

import src.sim.scene as _scene
import src.sim.channel as _channel
import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.models.astvbi.estep as _estep
import src.models.astvbi.mstep as _mstep
import src.design.crb as _crb
import src.harness.two_phase as _two_phase
import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

SUITES = ('consistency', 'gradients', 'fim', 'bp', 'posterior', 'ddg')

# Tolerances per suite (relative unless noted).
TOLERANCES = {
  'consistency': 1e-10,
  'gradients': 1e-5,
  'fim': 1e-4,
  'fim_coeffs': 1e-8,
  'bp_tree': 1e-10,
  'bp_loopy': 0.05,
  'posterior': 1e-8,
  # Fraction of seeds on which the gradient-ascent M-step ends with the higher surrogate.
  'ddg': 0.2,
}

MAX_ENUMERATION = 16

@dataclasses.dataclass
class Case:
  """ A random trial setup shared by the oracle suites. """
  scene: object
  grids: object
  truth: object
  index_map: object
  offsets: object
  channels: object
  schedule: object
  builder: object
  x_true: np.ndarray
  observation: object

def make_case(cfg, seed, noiseless=False):
  scene = cfg.scene_config()
  grids = _scene.build_grids(scene.soi_R, scene.soi_Ru, cfg.Q, cfg.P)
  rng_scene, rng_channel, rng_noise, _ = _util.spawnTrialRngs(seed, n=4)
  truth = _scene.generate_scene(scene, grids, cfg.K_B, cfg.L_B, cfg.overlap, rng_scene, jitter=cfg.jitter)
  return _assemble(cfg, scene, grids, truth, rng_channel, rng_noise, noiseless)

def _assemble(cfg, scene, grids, truth, rng_channel, rng_noise, noiseless):
  offsets, index_map = _scene.assign_offsets(truth, grids)
  ch = _channel.generate_channels(scene, truth, rng_channel, fading=cfg.fading)
  schedule = _measurement.phase_one_schedule(scene, ch.h_CI, ch.theta_IB, cfg.T1, cfg.T2)
  builder = _measurement.ModelBuilder(scene, grids, schedule, ch.h_CI, ch.H_IB)
  x_true = _measurement.sparse_ground_truth(ch, grids, index_map, scene)
  obs = _measurement.synthesize_observation(ch, schedule, scene, rng_noise, noiseless=noiseless)
  return Case(scene=scene, grids=grids, truth=truth, index_map=index_map, offsets=offsets, channels=ch,
    schedule=schedule, builder=builder, x_true=x_true, observation=obs)

# Sensing region with a corner at the BS; a 30 m square keeps the lattice uniform for square grid counts.
NEAR_BS_REGION = _scene.Rect((-7.5, 17.5), 30.0, 30.0)

def make_near_bs_case(cfg, seed, noiseless=False):
  """ A single target between 2.3 and 3 m from the BS, no scatterers and a jittered user. """
  scene = dataclasses.replace(cfg.scene_config(), soi_R=NEAR_BS_REGION)
  grids = _scene.build_grids(scene.soi_R, scene.soi_Ru, cfg.Q, cfg.P)
  rng_scene, rng_channel, rng_noise, _ = _util.spawnTrialRngs(seed, n=4)
  target = np.asarray(scene.p_B) + np.array([rng_scene.uniform(0.4, 1.2), rng_scene.uniform(2.3, 2.7)])
  user_cell = int(rng_scene.integers(grids.P))
  user = grids.z[user_cell] + rng_scene.uniform(-0.5, 0.5, size=2) * cfg.jitter * np.asarray(grids.spacing_z)
  truth = _scene.GroundTruth(targets=target[None, :], scatterers=np.zeros((0, 2)), user=user,
    rcs=np.full(1, scene.rcs))
  return _assemble(cfg, scene, grids, truth, rng_channel, rng_noise, noiseless)

def _rel(a, b):
  a, b = np.asarray(a), np.asarray(b)
  return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))

# Measurement consistency.

def consistency_error(case):
  """ Entrywise difference between F x at the true offsets and the noiseless per-symbol simulation, relative to the
  largest received entry. """
  y_sim = _measurement.synthesize_observation(case.channels, case.schedule, case.scene,
    np.random.default_rng(0), noiseless=True).y
  y_model = case.builder.build(case.offsets).apply(case.x_true)
  return float(np.max(np.abs(y_model - y_sim)) / max(np.max(np.abs(y_sim)), 1e-300))

# Support prior.

def _configs(n):
  return np.array(list(itertools.product((-1.0, 1.0), repeat=n)))

def ising_marginals_exact(fields, mrf):
  """ P(s_q = 1) under the Ising prior times node evidence exp(field_q s_q / 2), by enumeration. """
  Q = mrf.Q
  if Q > MAX_ENUMERATION:
    raise _errors.ConfigurationError("Enumeration over {} nodes is too large".format(Q))
  S = _configs(Q)
  logw = np.array([_priors.ising_unnorm_logprob(s, mrf) for s in S]) + 0.5 * S @ np.asarray(fields, dtype=float)
  w = np.exp(logw - scipy.special.logsumexp(logw))
  return w @ (S > 0)

def mrf_marginals_exact(pi_in, mrf):
  """ Exact counterpart of estep.mrf_marginals. """
  return ising_marginals_exact(scipy.special.logit(np.asarray(pi_in, dtype=float)), mrf)

def module_b_exact(pi_B_T, pi_B_NL, probs, mrf):
  """ Exact counterparts of the module-B beliefs and of the outgoing pi_out_T / pi_out_NL messages.

  The target and scatterer supports are summed out per grid, which leaves s_U with node evidence from both
  coupling factors; the outgoing message of a factor leaves its own evidence out at that grid.
  """
  pi_B_T = np.asarray(pi_B_T, dtype=float)
  pi_B_NL = np.asarray(pi_B_NL, dtype=float)
  l_T = scipy.special.logit(_estep._factor_to_union(pi_B_T, probs.p_T))
  l_NL = scipy.special.logit(_estep._factor_to_union(pi_B_NL, probs.p_NL))
  beliefs = ising_marginals_exact(l_T + l_NL, mrf)
  out_T, out_NL = np.zeros(mrf.Q), np.zeros(mrf.Q)
  for q in range(mrf.Q):
    f = l_T + l_NL
    f[q] = l_NL[q]
    out_T[q] = ising_marginals_exact(f, mrf)[q]
    f[q] = l_T[q]
    out_NL[q] = ising_marginals_exact(f, mrf)[q]
  return beliefs, out_T, out_NL

def bp_errors(rng, shapes=((1, 3), (1, 4), (2, 2)), alpha=0.3, beta=0.5):
  """ Max abs error of the BP marginals per lattice shape against enumeration. """
  out = {}
  for Qx, Qy in shapes:
    mrf = _priors.MRFParams(alpha=alpha, beta=beta, Qx=Qx, Qy=Qy)
    pi_in = rng.uniform(0.05, 0.95, size=mrf.Q)
    bp, _ = _estep.mrf_marginals(pi_in, mrf, sweeps=20)
    err = float(np.max(np.abs(bp - mrf_marginals_exact(pi_in, mrf))))

    probs = _priors.SupportProbs(p_T=0.6, p_NL=0.7, p_L=0.25)
    pi_B_T = rng.uniform(0.05, 0.95, size=mrf.Q)
    pi_B_NL = rng.uniform(0.05, 0.95, size=mrf.Q)
    msgs = _estep.module_b_pass(pi_B_T, pi_B_NL, probs, mrf, sweeps=20)
    beliefs, out_T, out_NL = module_b_exact(pi_B_T, pi_B_NL, probs, mrf)
    err = max(err, float(np.max(np.abs(msgs.beliefs - beliefs))), float(np.max(np.abs(msgs.pi_out_T - out_T))),
      float(np.max(np.abs(msgs.pi_out_NL - out_NL))))
    out[(Qx, Qy)] = err
  return out

# Surrogate gradient.

def random_posterior(x, Q, P, rng, var=1e-2):
  """ Point posterior around x with random diagonal covariances. """
  post = _mstep.point_posterior(x, Q, P)
  for j in _measurement.BLOCKS:
    post.Sigma[j] = np.diag(var * rng.uniform(0.5, 1.5, size=len(post.mu[j]))).astype(complex)
  return post

def fd_gradients(builder, offsets, y_parts, posterior, coords, sigma2=1.0, h=1e-5):
  """ Central differences of surrogate_Q for coords given as (kind, index, axis), kind in {'r', 'z'}. """
  out = []
  for kind, i, axis in coords:
    vals = []
    for sign in (1.0, -1.0):
      moved = offsets.copy()
      target = moved.dr if kind == 'r' else moved.dz
      target[i, axis] += sign * h
      vals.append(_mstep.surrogate_Q(builder.build(moved), y_parts, posterior, sigma2))
    out.append((vals[0] - vals[1]) / (2 * h))
  return np.array(out)

def gradient_error(case, rng, n_coords=8):
  """ Relative error of (g_BS + g_IRS) against finite differences at random offsets. """
  grids = case.grids
  scale = 1.0 / np.sqrt(case.scene.noise_power)
  y_parts = {p: v * scale for p, v in case.observation.parts.items()}
  offsets = _scene.OffsetState(
    rng.uniform(-0.4, 0.4, size=(grids.Q, 2)) * np.asarray(grids.spacing_r),
    rng.uniform(-0.4, 0.4, size=(grids.P, 2)) * np.asarray(grids.spacing_z))
  x = case.x_true * scale + 0.1 * (rng.standard_normal(len(case.x_true)) + 1j * rng.standard_normal(len(case.x_true)))
  posterior = random_posterior(x, grids.Q, grids.P, rng)
  g = _mstep.gradients(case.builder, offsets, y_parts, posterior)
  coords = [('r', int(rng.integers(grids.Q)), int(rng.integers(2))) for _ in range(n_coords // 2)]
  coords += [('z', int(rng.integers(grids.P)), int(rng.integers(2))) for _ in range(n_coords - len(coords))]
  analytic = np.array([(g.total_r if kind == 'r' else g.total_z)[i, axis] for kind, i, axis in coords])
  return _rel(analytic, fd_gradients(case.builder, offsets, y_parts, posterior, coords))

# Fisher information.

def _moved(est, index, axis, h):
  objects = [dataclasses.replace(o, position=np.array(o.position, dtype=float)) for o in est.objects]
  objects[index].position[axis] += h
  return _crb.EstimatedScene(objects)

def fd_fim(est, scene, schedule, h_CI, H_IB, noise_power, h=1e-5):
  """ FIM from central differences of the noiseless mean, with the same zero-block pattern as crb.fim. """
  cols = []
  for _, index, axis in est.labels:
    plus = _crb._concat(_crb.noiseless_mean(_moved(est, index, axis, h), scene, schedule, h_CI, H_IB))
    minus = _crb._concat(_crb.noiseless_mean(_moved(est, index, axis, -h), scene, schedule, h_CI, H_IB))
    cols.append((plus - minus) / (2 * h))
  D = np.stack(cols, axis=1)
  J = (2.0 / noise_power) * np.real(D.conj().T @ D)
  J[_crb.zero_block_mask(est)] = 0.0
  return 0.5 * (J + J.T)

def fim_errors(case, rng, T3=2, T4=2):
  """ (relative error of the analytic FIM vs finite differences, relative error of the coefficient-form diagonal).

  Both use the genie scene and a random unit-modulus phase-II schedule stacked after phase I.
  """
  scene, ch = case.scene, case.channels
  est = _crb.EstimatedScene.from_truth(case.truth, case.x_true, case.index_map, case.grids)
  N_p = scene.N_p
  phase_II = _measurement.ReflectionSchedule(np.exp(2j * np.pi * rng.random((N_p, T3))),
    np.exp(2j * np.pi * rng.random((N_p, T4))), phase=_measurement.PHASE_II)
  stacked = case.schedule.stack(phase_II)
  J = _crb.fim(est, scene, stacked, ch.h_CI, ch.H_IB, scene.noise_power).J
  err_fd = _rel(J, fd_fim(est, scene, stacked, ch.h_CI, ch.H_IB, scene.noise_power))
  coeffs = _crb.approx_fim_coeffs(est, scene, case.schedule, ch.h_CI, ch.H_IB, scene.noise_power, T3, T4)
  err_coeffs = _rel(coeffs.evaluate(phase_II.Phi_r, phase_II.Phi_c), np.diag(J))
  return err_fd, err_coeffs

# Module-A posterior.

def dense_posterior_mean(model, y_parts, precisions, sigma2=1.0):
  """ Joint linear-Gaussian posterior mean per measurement part for fixed coefficient precisions. """
  sl = _measurement.part_slices(model.Q, model.P)
  mu = np.zeros(6 * model.Q + 2 * model.P, dtype=complex)
  for part, F in model.parts.items():
    A = np.diag(precisions[sl[part]]).astype(complex) + F.conj().T @ F / sigma2
    mu[sl[part]] = np.linalg.solve(A, F.conj().T @ np.asarray(y_parts[part]) / sigma2)
  return mu

def posterior_error(case, sweeps=5):
  """ Relative error of the module-A mean with supports and offsets clamped to the truth.

  Checks the joint solve module A starts from and that its Gauss-Seidel sweeps keep that mean as fixed point.
  """
  scale = 1.0 / np.sqrt(case.scene.noise_power)
  y_parts = {p: v * scale for p, v in case.observation.parts.items()}
  model = case.builder.build(case.offsets)
  system = _estep.BlockSystem(model, y_parts)
  hyper = _priors.hyperparams_from_scene(case.scene, case.grids, num_paths=case.truth.L + 1)
  Q, P = case.grids.Q, case.grids.P
  on_T, on_NL, on_L = np.zeros(Q), np.zeros(Q), np.zeros(P)
  on_T[case.index_map.q_T] = 1.0
  on_NL[case.index_map.q_S] = 1.0
  on_L[case.index_map.p_u] = 1.0
  state = _estep.init_posteriors(system, hyper, on_T, on_NL, on_L, 1.0)
  precisions = np.concatenate([state.a_t[j] / state.b_t[j] for j in _measurement.BLOCKS])
  reference = dense_posterior_mean(model, y_parts, precisions)

  err = _rel(state.x, reference)
  for _ in range(sweeps):
    _estep.update_x(state, system)
  return max(err, _rel(state.x, reference))

# DDG against gradient ascent.

def paired_mstep_rules(case, cfg):
  """ Final surrogate value of the DDG and the gradient-ascent M-step, run from zero offsets on one observation.

  :return: (Q with DDG, Q with gradient ascent)
  """
  truth, grids = case.truth, case.grids
  hyper = _priors.hyperparams_from_scene(case.scene, grids, num_paths=truth.L + 1)
  probs = _priors.SupportProbs.from_counts(truth.K, truth.L, truth.overlap_count, grids.P)
  mrf = _priors.MRFParams.from_grids(grids, cfg.alpha_mrf, cfg.beta_mrf)
  final = {}
  for scheme in (_two_phase.AS_TVBI, _two_phase.AS_TVBI_GA):
    est_cfg = cfg.estimator_config(scheme)
    res = _mstep.run_as_tvbi(case.observation, case.builder, hyper, probs, mrf, case.scene.noise_power, truth.K,
      truth.L, est_cfg)
    final[est_cfg.mstep_rule] = res.trace[-1][1]
  return final['ddg'], final['ga']

def ddg_loss_rate(cfg, cases, seed=0):
  """ Fraction of near-BS scenes on which gradient ascent ends with a strictly higher surrogate than DDG. """
  losses = 0
  for i in range(cases):
    q_ddg, q_ga = paired_mstep_rules(make_near_bs_case(cfg, seed + i), cfg)
    _getSharedLogger().debug("Near-BS case %d: Q(DDG)=%.6g Q(GA)=%.6g", i, q_ddg, q_ga)
    losses += q_ddg < q_ga
  return losses / float(max(cases, 1))

def validate(suite, cfg=None, cases=5, seed=0):
  """ Runs one oracle suite on `cases` random scenes.

  :return: dict with the worst error, the tolerance and whether the suite passed
  """
  if suite not in SUITES:
    raise _errors.ConfigurationError("Unknown suite '{}', expected one of {}".format(suite, SUITES))
  cfg = cfg or _two_phase.ExperimentConfig()
  logger = _getSharedLogger()
  rng = np.random.default_rng(seed)
  errors = {}
  if suite == 'bp':
    errs = bp_errors(rng, alpha=cfg.alpha_mrf, beta=cfg.beta_mrf)
    tree = max(v for k, v in errs.items() if 1 in k)
    loopy = max((v for k, v in errs.items() if 1 not in k), default=0.0)
    errors = {'tree': (tree, TOLERANCES['bp_tree']), 'loopy': (loopy, TOLERANCES['bp_loopy'])}
  elif suite == 'ddg':
    errors = {'loss_rate': (ddg_loss_rate(cfg, cases, seed), TOLERANCES['ddg'])}
  else:
    worst = {}
    for i in range(cases):
      case = make_case(cfg, seed + i, noiseless=(suite == 'consistency'))
      if suite == 'consistency':
        vals = {'entrywise': consistency_error(case)}
      elif suite == 'gradients':
        vals = {'relative': gradient_error(case, rng)}
      elif suite == 'fim':
        fd, coeffs = fim_errors(case, rng, cfg.T3, cfg.T4)
        vals = {'relative': fd, 'coefficients': coeffs}
      else:
        vals = {'relative': posterior_error(case)}
      for k, v in vals.items():
        worst[k] = max(worst.get(k, 0.0), v)
      logger.debug("Suite '%s' case %d: %s", suite, i, vals)
    tol = {'coefficients': TOLERANCES['fim_coeffs']}
    errors = {k: (v, tol.get(k, TOLERANCES[suite])) for k, v in worst.items()}
  passed = all(err <= tol for err, tol in errors.values())
  return {'suite': suite, 'errors': {k: {'error': e, 'tolerance': t} for k, (e, t) in errors.items()},
    'passed': bool(passed)}
