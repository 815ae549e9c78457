"""
two_phase.py
---

  One Monte-Carlo trial of the two-phase protocol: scanning pilots and a coarse estimate in phase I, reflection
  design from the coarse estimate, optimized pilots in phase II and a refined estimate on the stacked observation.
  Every estimation scheme compared in the sweeps is a variation of this trial.

"""

import os
import time
import dataclasses

import numpy as np

import src.sim.scene as _scene
import src.sim.channel as _channel
import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.models.astvbi.estep as _estep
import src.models.astvbi.mstep as _mstep
import src.models.baselines.metrics as _metrics
import src.design.crb as _crb
import src.design.rcg as _rcg
import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

AS_TVBI = 'AS-TVBI'
AS_TVBI_GA = 'AS-TVBI-GA'
TP_OMP = 'TP-OMP'
TP_SBL = 'TP-SBL'
SP_TVBI = 'SP-TVBI'
GENIE = 'genie'
SCHEMES = (AS_TVBI, AS_TVBI_GA, TP_OMP, TP_SBL, SP_TVBI, GENIE)

# Scheme -> (estimator, M-step rule).
SCHEME_SETTINGS = {
  AS_TVBI: ('tvbi', 'ddg'),
  AS_TVBI_GA: ('tvbi', 'ga'),
  TP_OMP: ('omp', 'ddg'),
  TP_SBL: ('sbl', 'ddg'),
  SP_TVBI: ('tvbi', 'ddg'),
  GENIE: ('tvbi', 'ddg'),
}

@dataclasses.dataclass
class ExperimentConfig:
  """ Everything a trial depends on besides the scheme and the seed. Geometry follows SceneConfig defaults. """
  M: int = 32
  N_p: int = 48
  N_s: int = 32
  Q: int = 36
  P: int = 9
  K_B: int = 1
  L_B: int = 2
  O: int = 1
  # Overlap ratio O / (K + L - O); a negative value keeps O as given.
  gamma_o: float = -1.0
  T1: int = 2
  T2: int = 2
  T3: int = 2
  T4: int = 2
  tx_power_dbm: float = 10.0
  noise_power_dbm: float = -100.0
  carrier_ghz: float = 28.0
  rcs: float = 1.0
  pl_exp_los: float = 2.2
  pl_exp_nlos: float = 2.8
  fading: bool = True
  jitter: float = 0.8

  alpha_mrf: float = 0.3
  beta_mrf: float = 0.5
  max_outer: int = 50
  outer_tol: float = 1e-3
  max_inner: int = 30
  inner_tol: float = 1e-6
  max_turbo: int = 10
  turbo_tol: float = 1e-4
  bp_sweeps: int = 10
  bp_damping: float = 0.0
  candidate_threshold: float = 0.5
  detection_threshold: float = 0.5
  sbl_max_iter: int = 200
  rcg_max_iter: int = 200
  rcg_tol: float = 1e-6

  def __post_init__(self):
    if min(self.T1, self.T2) < 1 or min(self.T3, self.T4) < 0:
      raise _errors.ConfigurationError("Invalid pilot counts T1..T4 = {}".format(
        (self.T1, self.T2, self.T3, self.T4)))
    if min(self.K_B, self.L_B) < 0:
      raise _errors.ConfigurationError("Block counts must be non-negative: K_B={} L_B={}".format(self.K_B, self.L_B))
    if not 0 < self.detection_threshold < 1:
      raise _errors.ConfigurationError("Detection threshold must lie in (0, 1), got '{}'".format(
        self.detection_threshold))

  @property
  def K(self):
    return 2 * self.K_B

  @property
  def L(self):
    return 2 * self.L_B

  @property
  def overlap(self):
    if self.gamma_o < 0:
      return self.O
    return _scene.overlap_from_ratio(self.K, self.L, self.gamma_o)

  @property
  def overlap_ratio(self):
    O = self.overlap
    union = self.K + self.L - O
    return O / float(union) if union > 0 else 0.0

  def scene_config(self):
    return _scene.SceneConfig(M=self.M, N_p=self.N_p, N_s=self.N_s,
      wavelength=_scene.SPEED_OF_LIGHT / (self.carrier_ghz * 1e9),
      noise_power=_util.dbmToWatts(self.noise_power_dbm), tx_power=_util.dbmToWatts(self.tx_power_dbm),
      rcs=self.rcs, pl_exp_los=self.pl_exp_los, pl_exp_nlos=self.pl_exp_nlos)

  def pilots(self, scheme):
    """ (T1, T2, T3, T4) for a scheme; the single-phase scheme spends the phase-II budget in phase I. """
    if scheme == SP_TVBI:
      return self.T1 + self.T3, self.T2 + self.T4, 0, 0
    return self.T1, self.T2, self.T3, self.T4

  def estimator_config(self, scheme):
    estimator, rule = SCHEME_SETTINGS[scheme]
    estep = _estep.EStepConfig(max_inner=self.max_inner, inner_tol=self.inner_tol, max_turbo=self.max_turbo,
      turbo_tol=self.turbo_tol, bp_sweeps=self.bp_sweeps, bp_damping=self.bp_damping)
    return _mstep.AsTvbiConfig(estep=estep, outer_tol=self.outer_tol, max_outer=self.max_outer,
      candidate_threshold=self.candidate_threshold, estimator=estimator, mstep_rule=rule,
      sbl_max_iter=self.sbl_max_iter)

  def rcg_config(self):
    return _rcg.RcgConfig(max_iter=self.rcg_max_iter, tol=self.rcg_tol)

  def to_dict(self):
    return dataclasses.asdict(self)

  def config_hash(self):
    return _util.configHash(self.to_dict())

  def replaced(self, **changes):
    return dataclasses.replace(self, **changes)

@dataclasses.dataclass
class TrialResult:
  point: int
  scheme: str
  seed: int
  tx_power_dbm: float
  gamma_o: float
  N_p: int
  failed: bool = False
  error: str = ''
  nmse: dict = dataclasses.field(default_factory=dict)
  rmse: float = float('nan')
  missed: int = 0
  false_alarms: int = 0
  iterations_I: int = 0
  iterations_II: int = 0
  converged: bool = False
  rcg_iterations: int = 0
  rcg_stalled: bool = False
  crb_diag: float = float('nan')
  crb_exact: float = float('nan')
  runtime: float = 0.0
  # outer_I/outer_II rows (n, Q, dmu, step), nmse_I/nmse_II per outer iteration, rcg objective per iteration.
  traces: dict = dataclasses.field(default_factory=dict)

  def row(self):
    """ Flat record for the results table; wall time and traces are left out so the table is reproducible. """
    out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
      if f.name not in ('nmse', 'traces', 'runtime')}
    for name in _measurement.BLOCKS + tuple(_metrics.GROUPS):
      out['nmse_' + name] = self.nmse.get(name, float('nan'))
    return out

def tiled_schedule(schedule, T_s, T_c):
  """ Phase-II starting point: the phase-I pilot columns repeated cyclically. """
  cols_r = [schedule.Phi_r[:, t % schedule.T_s] for t in range(T_s)]
  cols_c = [schedule.Phi_c[:, t % schedule.T_c] for t in range(T_c)]
  N_p = schedule.Phi_r.shape[0]
  return _measurement.ReflectionSchedule(
    np.stack(cols_r, axis=1) if cols_r else np.ones((N_p, 0), dtype=complex),
    np.stack(cols_c, axis=1) if cols_c else np.ones((N_p, 0), dtype=complex),
    phase=_measurement.PHASE_II)

def design_reflections(est, scene, schedule_I, h_CI, H_IB, T3, T4, rcg_cfg=None):
  """ Minimizes the diagonal CRB approximation over the phase-II schedule starting from the tiled phase-I one.

  :return: (phase-II ReflectionSchedule, RcgResult or None when the start point is infeasible)
  """
  logger = _getSharedLogger()
  start = tiled_schedule(schedule_I, T3, T4)
  coeffs = _crb.approx_fim_coeffs(est, scene, schedule_I, h_CI, H_IB, scene.noise_power, T3, T4)
  try:
    res = _rcg.optimize(coeffs, start.vectorize(), rcg_cfg)
  except _errors.InfeasibleGeometryError as e:
    logger.warning("Reflection design skipped, keeping the scanning pilots: %s", e)
    return start, None
  if res.stalled:
    logger.info("RCG line search stalled after %d iterations", res.iterations)
  return _measurement.ReflectionSchedule.from_vector(res.phi, scene.N_p, T3, T4), res

def _nmse_total(x, x_true):
  try:
    return _metrics.nmse(x, x_true)
  except _errors.MetricError:
    return float('nan')

def run_two_phase(cfg, scheme, seed, point=0):
  """ Runs one trial and never raises: failures come back as a TrialResult with `failed` set.

  The scene, channels and both noise realizations are drawn from streams keyed by the seed only, so every scheme
  and sweep point of the same seed sees the same scene.
  """
  assert scheme in SCHEMES, "Unknown scheme '{}'".format(scheme)
  result = TrialResult(point=point, scheme=scheme, seed=int(seed), tx_power_dbm=cfg.tx_power_dbm,
    gamma_o=cfg.overlap_ratio, N_p=cfg.N_p)
  ts = time.time()
  try:
    _run(cfg, scheme, seed, result)
  except Exception as e:
    _getSharedLogger().error("Trial failed (scheme '%s', seed %d, point %d): %s: %s", scheme, seed, point,
      type(e).__name__, e)
    result.failed = True
    result.error = "{}: {}".format(type(e).__name__, e)
  result.runtime = time.time() - ts
  return result

def _run(cfg, scheme, seed, result):
  logger = _getSharedLogger()
  scene = cfg.scene_config()
  grids = _scene.build_grids(scene.soi_R, scene.soi_Ru, cfg.Q, cfg.P)
  T1, T2, T3, T4 = cfg.pilots(scheme)
  rng_scene, rng_channel, rng_noise_I, rng_noise_II = _util.spawnTrialRngs(seed, n=4)

  O = cfg.overlap
  truth = _scene.generate_scene(scene, grids, cfg.K_B, cfg.L_B, O, rng_scene, jitter=cfg.jitter)
  true_offsets, index_map = _scene.assign_offsets(truth, grids)
  ch = _channel.generate_channels(scene, truth, rng_channel, fading=cfg.fading)
  x_true = _measurement.sparse_ground_truth(ch, grids, index_map, scene)

  hyper = _priors.hyperparams_from_scene(scene, grids, num_paths=truth.L + 1)
  probs = _priors.SupportProbs.from_counts(truth.K, truth.L, O, grids.P)
  mrf = _priors.MRFParams.from_grids(grids, cfg.alpha_mrf, cfg.beta_mrf)
  est_cfg = cfg.estimator_config(scheme)

  def tracker(name):
    result.traces[name] = []

    def on_iteration(n, q_value, dmu, step_r, x):
      result.traces[name].append(_nmse_total(x, x_true))
    return on_iteration

  # Phase I.
  schedule_I = _measurement.phase_one_schedule(scene, ch.h_CI, ch.theta_IB, T1, T2)
  obs_I = _measurement.synthesize_observation(ch, schedule_I, scene, rng_noise_I)
  builder = _measurement.ModelBuilder(scene, grids, schedule_I, ch.h_CI, ch.H_IB)
  genie = scheme == GENIE and T3 + T4 > 0
  if genie:
    # No phase-I estimate: the design and the phase-II start use the true scene.
    init_offsets, warm = true_offsets, None
  else:
    res = _mstep.run_as_tvbi(obs_I, builder, hyper, probs, mrf, scene.noise_power, truth.K, truth.L, est_cfg,
      on_iteration=tracker('nmse_I'))
    result.iterations_I = res.iterations
    result.traces['outer_I'] = res.trace
    init_offsets, warm = res.offsets, res.posterior.scaled(1.0 / np.sqrt(scene.noise_power))

  if T3 + T4 > 0:
    if genie:
      est = _crb.EstimatedScene.from_truth(truth, x_true, index_map, grids)
    else:
      est = _crb.EstimatedScene.from_posterior(res.posterior, grids, res.offsets, cfg.detection_threshold)
    schedule_II, rcg_res = design_reflections(est, scene, schedule_I, ch.h_CI, ch.H_IB, T3, T4, cfg.rcg_config())
    schedule = schedule_I.stack(schedule_II)
    if rcg_res is not None:
      result.rcg_iterations = rcg_res.iterations
      result.rcg_stalled = rcg_res.stalled
      result.traces['rcg'] = rcg_res.trace
      result.crb_diag = rcg_res.trace[-1]
      J = _crb.fim(est, scene, schedule, ch.h_CI, ch.H_IB, scene.noise_power).J
      result.crb_exact = _crb.crb_trace(J)
      logger.debug("Designed reflections: diagonal CRB %.4g, exact CRB %.4g", result.crb_diag, result.crb_exact)

    # Phase II: re-estimate on the stacked observation from the phase-I solution (or the true offsets).
    obs_II = _measurement.synthesize_observation(ch, schedule_II, scene, rng_noise_II)
    res = _mstep.run_as_tvbi(obs_I.stack(obs_II), builder.with_schedule(schedule), hyper, probs, mrf,
      scene.noise_power, truth.K, truth.L, est_cfg, init_offsets=init_offsets, warm=warm,
      on_iteration=tracker('nmse_II'))
    result.iterations_II = res.iterations
    result.traces['outer_II'] = res.trace

  result.converged = res.converged
  result.nmse = _metrics.nmse_report(res.posterior.x, x_true, grids.Q, grids.P)
  detected = _metrics.detected_positions(res.posterior, grids, res.offsets, cfg.detection_threshold)
  result.rmse, meta = _metrics.rmse(detected, _metrics.truth_positions(truth), _metrics.grid_penalties(grids))
  result.missed = sum(meta['missed'].values())
  result.false_alarms = sum(meta['false_alarms'].values())
  logger.debug("Trial '%s' seed %d: NMSE %.4g, RMSE %.4g m", scheme, seed, result.nmse['total'], result.rmse)
  return result
