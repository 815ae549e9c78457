"""
omp.py
---

  Orthogonal matching pursuit with per-block sparsity budgets, run independently on each measurement part.

"""

import os
import dataclasses

import numpy as np

import src.sim.measurement as _measurement
import src.utils.utility as _util

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

RESIDUAL_RTOL = 1e-12

def block_budgets(K, L):
  """ One support per target in each sensing block, one per scatterer in each NLoS block, one LoS user grid. """
  return {'ITS': K, 'CTS': K, 'ITB': K, 'CTB': K, 'BNL': L, 'INL': L, 'BL': 1, 'IL': 1}

@dataclasses.dataclass
class OmpResult:
  x: np.ndarray
  # Global indices into x, in selection order.
  support: list
  residual_norms: dict

def omp_part(F, y, block_cols, budgets):
  """ Greedy normalized-correlation selection restricted to blocks with remaining budget, LS refit per step.

  :param block_cols: block name -> column slice of F
  :return: (coefficients over F's columns, selected column indices, residual)
  """
  n = F.shape[1]
  owner = np.empty(n, dtype=object)
  for j, sl in block_cols.items():
    owner[sl] = j
  remaining = {j: int(budgets.get(j, 0)) for j in block_cols}
  norms = np.linalg.norm(F, axis=0)
  norms[norms == 0] = np.inf

  support = []
  excluded = np.zeros(n, dtype=bool)
  coef = np.zeros(0, dtype=complex)
  r = np.asarray(y, dtype=complex).copy()
  y_norm = np.linalg.norm(r)
  while True:
    open_blocks = [j for j, left in remaining.items() if left > 0]
    if not open_blocks or np.linalg.norm(r) <= RESIDUAL_RTOL * max(y_norm, 1e-300):
      break
    allowed = np.zeros(n, dtype=bool)
    for j in open_blocks:
      allowed[block_cols[j]] = True
    allowed &= ~excluded
    allowed[support] = False
    if not allowed.any():
      break
    corr = np.abs(F.conj().T @ r) / norms
    corr[~allowed] = -1.0
    i = int(np.argmax(corr))
    trial = support + [i]
    sub = F[:, trial]
    if np.linalg.matrix_rank(sub) < len(trial):
      _getSharedLogger().debug("Dropping atom %d: selected submatrix is rank deficient", i)
      excluded[i] = True
      continue
    support = trial
    remaining[owner[i]] -= 1
    coef = np.linalg.lstsq(sub, y, rcond=None)[0]
    r = y - sub @ coef

  x = np.zeros(n, dtype=complex)
  x[support] = coef
  return x, support, r

def omp(y_parts, model, budgets):
  """ Runs omp_part on each part of the block model and scatters the result into the global x layout. """
  cols = _measurement.part_block_slices(model.Q, model.P)
  offsets = _measurement.part_slices(model.Q, model.P)
  x = np.zeros(6 * model.Q + 2 * model.P, dtype=complex)
  support, residuals = [], {}
  for part, F in model.parts.items():
    block_cols = {j: cols[j] for j in _measurement.PART_BLOCKS[part]}
    xp, sp, r = omp_part(F, np.asarray(y_parts[part]), block_cols, budgets)
    x[offsets[part]] = xp
    support += [offsets[part].start + i for i in sp]
    residuals[part] = float(np.linalg.norm(r))
  return OmpResult(x=x, support=support, residual_norms=residuals)
