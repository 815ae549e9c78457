"""
sbl.py
---

  Evidence-maximization sparse Bayesian learning with per-coefficient precisions and EM updates, one problem per
  measurement part. Precisions above the pruning threshold drop their column for good.

"""

import os
import dataclasses

import numpy as np
import scipy.linalg

import src.sim.measurement as _measurement
import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

PRUNE_PRECISION = 1e8

@dataclasses.dataclass
class SblResult:
  x: np.ndarray
  # Per block posterior covariance in block coordinates (zero rows/cols for pruned coefficients).
  Sigma: dict
  precisions: np.ndarray
  evidence_trace: dict
  iterations: int

def log_evidence(F, gamma, y, sigma2):
  """ log N(y; 0, sigma2 I + F diag(1/gamma) F^H) for complex circular y. """
  n = F.shape[0]
  C = sigma2 * np.eye(n, dtype=complex) + (F / gamma[None, :]) @ F.conj().T
  try:
    cho = scipy.linalg.cho_factor(C, lower=True)
  except np.linalg.LinAlgError as e:
    raise _errors.NumericalError("Marginal covariance not positive definite") from e
  logdet = 2 * np.sum(np.log(np.abs(np.diag(cho[0]))))
  quad = np.vdot(y, scipy.linalg.cho_solve(cho, y)).real
  return float(-n * np.log(np.pi) - logdet - quad)

def _posterior(F, gamma, y, sigma2):
  A = np.diag(gamma).astype(complex) + F.conj().T @ F / sigma2
  A = 0.5 * (A + A.conj().T)
  try:
    cho = scipy.linalg.cho_factor(A, lower=True)
    Sigma = scipy.linalg.cho_solve(cho, np.eye(A.shape[0], dtype=complex))
  except np.linalg.LinAlgError:
    Sigma = np.linalg.pinv(A, hermitian=True)
  return Sigma @ (F.conj().T @ y) / sigma2, Sigma

def sbl_part(F, y, sigma2, max_iter=200, tol=1e-6, prune=PRUNE_PRECISION):
  """
  :return: (mean over F's columns, covariance over F's columns, precisions (inf when pruned), evidence trace,
    iterations)
  """
  y = np.asarray(y, dtype=complex)
  n = F.shape[1]
  norms2 = np.sum(np.abs(F) ** 2, axis=0)
  Fy = F.conj().T @ y
  with np.errstate(divide='ignore', invalid='ignore'):
    energy = np.where(norms2 > 0, np.abs(Fy) ** 2 / norms2 ** 2, 0.0)
    gamma = np.where(energy > 0, 1.0 / energy, np.inf)
  active = gamma < prune
  gamma[~active] = np.inf

  trace = []
  mu_a = np.zeros(0, dtype=complex)
  Sigma_a = np.zeros((0, 0), dtype=complex)
  it = 0
  for it in range(1, max_iter + 1):
    idx = np.flatnonzero(active)
    if idx.size == 0:
      break
    Fa = F[:, idx]
    trace.append(log_evidence(Fa, gamma[idx], y, sigma2))
    mu_a, Sigma_a = _posterior(Fa, gamma[idx], y, sigma2)
    new = 1.0 / np.maximum(np.abs(mu_a) ** 2 + np.diag(Sigma_a).real, 1e-300)
    change = np.max(np.abs(np.log(new) - np.log(gamma[idx])))
    gamma[idx] = new
    active = gamma < prune
    gamma[~active] = np.inf
    if change < tol:
      break

  idx = np.flatnonzero(active)
  mu = np.zeros(n, dtype=complex)
  Sigma = np.zeros((n, n), dtype=complex)
  if idx.size:
    mu_a, Sigma_a = _posterior(F[:, idx], gamma[idx], y, sigma2)
    mu[idx] = mu_a
    Sigma[np.ix_(idx, idx)] = Sigma_a
  return mu, Sigma, gamma, trace, it

def sbl(y_parts, model, sigma2=1.0, max_iter=200, tol=1e-6, prune=PRUNE_PRECISION):
  cols = _measurement.part_block_slices(model.Q, model.P)
  offsets = _measurement.part_slices(model.Q, model.P)
  size = 6 * model.Q + 2 * model.P
  x = np.zeros(size, dtype=complex)
  precisions = np.full(size, np.inf)
  Sigma, traces, iters = {}, {}, 0
  for part, F in model.parts.items():
    mu, S, gamma, trace, it = sbl_part(F, y_parts[part], sigma2, max_iter, tol, prune)
    x[offsets[part]] = mu
    precisions[offsets[part]] = gamma
    traces[part] = trace
    iters = max(iters, it)
    for j in _measurement.PART_BLOCKS[part]:
      Sigma[j] = S[cols[j], cols[j]]
  _getSharedLogger().debug("SBL finished after %d iterations, %d active coefficients", iters,
    int(np.sum(np.isfinite(precisions))))
  return SblResult(x=x, Sigma=Sigma, precisions=precisions, evidence_trace=traces, iterations=iters)
