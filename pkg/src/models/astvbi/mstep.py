"""
mstep.py
---

  EM M-step over the grid offsets: the surrogate objective, its gradient split into BS-side and IRS-side terms,
  the direction-determined-by-gradient (DDG) and plain gradient-ascent update rules, candidate grid selection
  and the outer AS-TVBI loop alternating E-step and M-step.

"""

import os
import time
import dataclasses

import numpy as np
import scipy.linalg

import src.sim.scene as _scene
import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.models.astvbi.estep as _estep
import src.models.baselines.omp as _omp
import src.models.baselines.sbl as _sbl
import src.utils.utility as _util

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

ESTIMATORS = ('tvbi', 'omp', 'sbl')
MSTEP_RULES = ('ddg', 'ga')

@dataclasses.dataclass
class SurrogateGradients:
  g_BS_r: np.ndarray
  g_IRS_r: np.ndarray
  g_BS_z: np.ndarray
  g_IRS_z: np.ndarray

  @property
  def total_r(self):
    return self.g_BS_r + self.g_IRS_r

  @property
  def total_z(self):
    return self.g_BS_z + self.g_IRS_z

@dataclasses.dataclass
class StepSchedule:
  step_r: np.ndarray
  step_z: np.ndarray
  floor_r: np.ndarray
  floor_z: np.ndarray
  shrink: float = 0.5

  @classmethod
  def from_grids(cls, grids, step_frac=1.0 / 8, floor_frac=1.0 / 256, shrink=0.5):
    sr, sz = np.asarray(grids.spacing_r, dtype=float), np.asarray(grids.spacing_z, dtype=float)
    return cls(step_r=sr * step_frac, step_z=sz * step_frac, floor_r=sr * floor_frac, floor_z=sz * floor_frac,
      shrink=shrink)

  def shrunk(self):
    return dataclasses.replace(self, step_r=np.maximum(self.step_r * self.shrink, self.floor_r),
      step_z=np.maximum(self.step_z * self.shrink, self.floor_z))

  @property
  def at_floor(self):
    return bool(np.all(self.step_r <= self.floor_r) and np.all(self.step_z <= self.floor_z))

@dataclasses.dataclass
class AsTvbiConfig:
  estep: _estep.EStepConfig = dataclasses.field(default_factory=_estep.EStepConfig)
  outer_tol: float = 1e-3
  max_outer: int = 50
  candidate_threshold: float = 0.5
  step_frac: float = 1.0 / 8
  floor_frac: float = 1.0 / 256
  shrink: float = 0.5
  estimator: str = 'tvbi'
  mstep_rule: str = 'ddg'
  sbl_max_iter: int = 200

  def __post_init__(self):
    assert self.estimator in ESTIMATORS, "Unknown estimator '{}'".format(self.estimator)
    assert self.mstep_rule in MSTEP_RULES, "Unknown M-step rule '{}'".format(self.mstep_rule)

@dataclasses.dataclass
class AsTvbiResult:
  posterior: _estep.PosteriorState
  offsets: _scene.OffsetState
  # Rows of (iteration, surrogate Q, ||delta mu||, step_r).
  trace: list
  iterations: int
  converged: bool
  runtime: float = 0.0

def _part_mean(posterior, part):
  return np.concatenate([posterior.mu[j] for j in _measurement.PART_BLOCKS[part]])

def _part_cov(posterior, part):
  return scipy.linalg.block_diag(*[posterior.Sigma[j] for j in _measurement.PART_BLOCKS[part]])

def surrogate_Q(model, y_parts, posterior, sigma2=1.0):
  """ -(1/sigma2) sum over parts of ||y - F mu||^2 + sum_j tr(F_j Sigma_j F_j^H). """
  cols = _measurement.part_block_slices(model.Q, model.P)
  total = 0.0
  for part, F in model.parts.items():
    r = np.asarray(y_parts[part]) - F @ _part_mean(posterior, part)
    total += np.vdot(r, r).real
    for j in _measurement.PART_BLOCKS[part]:
      Fj = F[:, cols[j]]
      total += np.sum((Fj @ posterior.Sigma[j]) * Fj.conj()).real
  return float(-total / sigma2)

def gradients(builder, offsets, y_parts, posterior, sigma2=1.0, candidates=None):
  """ dQ/d(offset) per grid and axis, split by whether the derivative flows through the BS or the IRS angle.

  Rows of r-grids outside `candidates` are left at zero.
  """
  model = builder.build(offsets)
  dF, grads = builder.derivatives(offsets)
  cols = _measurement.part_block_slices(model.Q, model.P)
  Q, P = model.Q, model.P
  out = SurrogateGradients(np.zeros((Q, 2)), np.zeros((Q, 2)), np.zeros((P, 2)), np.zeros((P, 2)))
  for part, F in model.parts.items():
    mu = _part_mean(posterior, part)
    G = np.outer(np.asarray(y_parts[part]) - F @ mu, mu.conj()) - F @ _part_cov(posterior, part)
    dI, dB = dF[part]
    sI = (2.0 / sigma2) * np.sum(G.conj() * dI, axis=0).real
    sB = (2.0 / sigma2) * np.sum(G.conj() * dB, axis=0).real
    for j in _measurement.PART_BLOCKS[part]:
      s = cols[j]
      if j in _measurement.R_BLOCKS:
        out.g_IRS_r += sI[s][:, None] * grads['I_r']
        out.g_BS_r += sB[s][:, None] * grads['B_r']
      else:
        out.g_IRS_z += sI[s][:, None] * grads['I_z']
        out.g_BS_z += sB[s][:, None] * grads['B_z']
  if candidates is not None:
    mask = np.ones(Q, dtype=bool)
    mask[np.asarray(candidates, dtype=int)] = False
    out.g_BS_r[mask] = 0.0
    out.g_IRS_r[mask] = 0.0
  return out

def ddg_direction(g_BS, g_IRS):
  """ Move only where both gradient sources agree in sign, following the BS-side sign. """
  return np.where(g_BS * g_IRS > 0, np.sign(g_BS), 0.0)

def ga_direction(g_total):
  """ Full gradient normalized per grid point. """
  norm = np.linalg.norm(g_total, axis=1, keepdims=True)
  out = np.zeros_like(g_total)
  np.divide(g_total, norm, out=out, where=norm > 0)
  return out

def _directions(grads, rule):
  if rule == 'ddg':
    return ddg_direction(grads.g_BS_r, grads.g_IRS_r), ddg_direction(grads.g_BS_z, grads.g_IRS_z)
  return ga_direction(grads.total_r), ga_direction(grads.total_z)

def ddg_update(offsets, grads, schedule, candidates, grids):
  """ One DDG move of size schedule.step_* on the candidate r-grids and all z-grids, clamped to the cell box. """
  dir_r, dir_z = _directions(grads, 'ddg')
  return _apply(offsets, dir_r, dir_z, schedule, candidates, grids)

def ga_update(offsets, grads, schedule, candidates, grids):
  dir_r, dir_z = _directions(grads, 'ga')
  return _apply(offsets, dir_r, dir_z, schedule, candidates, grids)

def _apply(offsets, dir_r, dir_z, schedule, candidates, grids):
  keep = np.ones(grids.Q, dtype=bool)
  keep[np.asarray(candidates, dtype=int)] = False
  dir_r = dir_r.copy()
  dir_r[keep] = 0.0
  moved = _scene.OffsetState(offsets.dr + schedule.step_r[None, :] * dir_r,
    offsets.dz + schedule.step_z[None, :] * dir_z)
  return moved.clamped(grids)

def select_candidates(posterior, top_k, threshold=0.5):
  """ Grids with a support probability above threshold, plus the top_k by posterior energy.

  A threshold of 0 or below selects every grid.
  """
  prob = np.maximum(posterior.pi_T, posterior.pi_NL)
  chosen = (prob > threshold) | (threshold <= 0)
  energy = sum(np.abs(posterior.mu[j]) ** 2 for j in _measurement.R_BLOCKS)
  if top_k > 0:
    # Stable sort keeps the lower index first among equal energies.
    chosen[np.argsort(-energy, kind='stable')[:top_k]] = True
  return np.flatnonzero(chosen)

def mstep(builder, offsets, y_parts, posterior, schedule, candidates, sigma2=1.0, rule='ddg'):
  """ Gradient step with shrink-and-rollback on a decrease of the surrogate.

  :return: (offsets, Q value, schedule, accepted)
  """
  grids = builder.grids
  q_old = surrogate_Q(builder.build(offsets), y_parts, posterior, sigma2)
  grads = gradients(builder, offsets, y_parts, posterior, sigma2, candidates)
  update = ddg_update if rule == 'ddg' else ga_update
  while True:
    proposal = update(offsets, grads, schedule, candidates, grids)
    if np.array_equal(proposal.dr, offsets.dr) and np.array_equal(proposal.dz, offsets.dz):
      return offsets, q_old, schedule, False
    q_new = surrogate_Q(builder.build(proposal), y_parts, posterior, sigma2)
    if q_new >= q_old:
      return proposal, q_new, schedule, True
    if schedule.at_floor:
      return offsets, q_old, schedule, False
    schedule = schedule.shrunk()

def point_posterior(x, Q, P, Sigma=None):
  """ Wraps a point estimate (OMP, SBL) as a posterior: nonzero coefficients mark active supports. """
  sl = _measurement.block_slices(Q, P)
  mu = {j: np.asarray(x[sl[j]], dtype=complex).copy() for j in _measurement.BLOCKS}
  Sig = {j: (np.zeros((len(mu[j]),) * 2, dtype=complex) if Sigma is None else np.asarray(Sigma[j]))
    for j in _measurement.BLOCKS}
  ones = {j: np.ones(len(mu[j])) for j in _measurement.BLOCKS}

  def active(blocks):
    return np.any([np.abs(mu[j]) > 0 for j in blocks], axis=0).astype(float)

  return _estep.PosteriorState(mu=mu, Sigma=Sig, a_t=ones, b_t={j: v.copy() for j, v in ones.items()},
    pi_T=active(_priors.J1), pi_NL=active(_priors.J2), pi_L=active(_priors.J3))

def _estimate(cfg, model, y_parts, hyper, probs, mrf, warm, budgets):
  if cfg.estimator == 'tvbi':
    system = _estep.BlockSystem(model, y_parts)
    return _estep.run_estep(system, hyper, probs, mrf, 1.0, cfg.estep, warm=warm)
  if cfg.estimator == 'omp':
    return point_posterior(_omp.omp(y_parts, model, budgets).x, model.Q, model.P)
  res = _sbl.sbl(y_parts, model, sigma2=1.0, max_iter=cfg.sbl_max_iter)
  return point_posterior(res.x, model.Q, model.P, Sigma=res.Sigma)

def run_as_tvbi(observation, builder, hyper, probs, mrf, noise_power, K, L, cfg=None, init_offsets=None,
                warm=None, on_iteration=None):
  """ Alternates E-step and M-step from zero (or given) offsets.

  The observation is normalized by the noise standard deviation internally, so `hyper` must be in normalized
  units (hyperparams_from_scene(normalize=True)). The returned posterior is in the observation's units.

  :param K: number of targets, used for candidate fallback and OMP budgets
  :param L: number of scatterers
  :param warm: optional posterior in normalized units to start the first E-step from
  :param on_iteration: callable(n, q_value, dmu, step_r, x) invoked after each outer iteration, x in observation
    units
  """
  cfg = cfg or AsTvbiConfig()
  logger = _getSharedLogger()
  start = time.time()
  scale = 1.0 / np.sqrt(noise_power)
  y_parts = {part: np.asarray(v) * scale for part, v in observation.parts.items()}
  grids = builder.grids
  offsets = _scene.OffsetState.zeros(grids) if init_offsets is None else init_offsets.copy()
  schedule = StepSchedule.from_grids(grids, cfg.step_frac, cfg.floor_frac, cfg.shrink)
  budgets = _omp.block_budgets(K, L)

  trace = []
  posterior = warm
  prev_x = None
  converged = False
  n = 0
  for n in range(1, cfg.max_outer + 1):
    model = builder.build(offsets)
    posterior = _estimate(cfg, model, y_parts, hyper, probs, mrf, posterior, budgets)
    x = posterior.x
    dmu = float('nan') if prev_x is None else float(np.linalg.norm(x - prev_x))
    candidates = select_candidates(posterior, K + L, cfg.candidate_threshold)
    offsets, q_value, schedule, accepted = mstep(builder, offsets, y_parts, posterior, schedule, candidates,
      1.0, cfg.mstep_rule)
    trace.append((n, q_value, dmu, float(np.min(schedule.step_r))))
    if on_iteration is not None:
      on_iteration(n, q_value, dmu, float(np.min(schedule.step_r)), x / scale)
    logger.debug("Outer iteration %d: Q=%.6g dmu=%.3g accepted=%s candidates=%d", n, q_value, dmu, accepted,
      len(candidates))
    if prev_x is not None and dmu < cfg.outer_tol * max(np.linalg.norm(x), 1e-300):
      converged = True
      break
    prev_x = x.copy()

  if not converged:
    logger.info("AS-TVBI stopped at the outer iteration limit (%d)", cfg.max_outer)
  return AsTvbiResult(posterior=posterior.scaled(1.0 / scale), offsets=offsets, trace=trace, iterations=n,
    converged=converged, runtime=time.time() - start)
