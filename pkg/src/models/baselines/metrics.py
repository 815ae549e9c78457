"""
metrics.py
---

  NMSE of the recovered sparse channel vector and assignment-matched localization RMSE.

"""

import numpy as np
import scipy.optimize

import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.utils.errors as _errors

TARGET = 'target'
SCATTERER = 'scatterer'
USER = 'user'
CLASSES = (TARGET, SCATTERER, USER)

# Channel groups reported alongside the per-block values.
GROUPS = {'sensing': _priors.J1, 'comm': _priors.J2 + _priors.J3, 'total': _measurement.BLOCKS}

def nmse(x_hat, x_true, block=None, Q=None, P=None):
  """ ||x_hat - x||^2 / ||x||^2, optionally restricted to one block (needs Q, P) or a group name. """
  x_hat = np.asarray(x_hat)
  x_true = np.asarray(x_true)
  if block is not None:
    sl = _measurement.block_slices(Q, P)
    names = GROUPS.get(block, (block,))
    idx = np.concatenate([np.arange(sl[j].start, sl[j].stop) for j in names])
    x_hat, x_true = x_hat[idx], x_true[idx]
  den = np.sum(np.abs(x_true) ** 2)
  if den == 0:
    raise _errors.MetricError("NMSE undefined for an all-zero reference{}".format(
      '' if block is None else " in '{}'".format(block)))
  return float(np.sum(np.abs(x_hat - x_true) ** 2) / den)

def nmse_report(x_hat, x_true, Q, P):
  """ NMSE per block and per group; blocks without any true energy report NaN. """
  out = {}
  for name in _measurement.BLOCKS + tuple(GROUPS):
    try:
      out[name] = nmse(x_hat, x_true, block=name, Q=Q, P=P)
    except _errors.MetricError:
      out[name] = float('nan')
  return out

def _match(detected, truth):
  """ Minimum-cost one-to-one assignment; returns squared distances of matched truths and the unmatched count. """
  detected = np.asarray(detected, dtype=float).reshape(-1, 2)
  truth = np.asarray(truth, dtype=float).reshape(-1, 2)
  if len(truth) == 0 or len(detected) == 0:
    return np.zeros(0), len(truth)
  cost = np.sum((truth[:, None, :] - detected[None, :, :]) ** 2, axis=2)
  rows, cols = scipy.optimize.linear_sum_assignment(cost)
  return cost[rows, cols], len(truth) - len(rows)

def rmse(detected, truth, penalty):
  """ Pooled localization RMSE over all classes.

  Each class is matched separately; truths left unmatched contribute `penalty` (per class or scalar) as their
  error, false alarms contribute nothing and are counted in the returned metadata.
  """
  sq, n_truth = 0.0, 0
  meta = {'missed': {}, 'false_alarms': {}, 'penalty': {}}
  for cls in CLASSES:
    t = np.asarray(truth.get(cls, np.zeros((0, 2))), dtype=float).reshape(-1, 2)
    d = np.asarray(detected.get(cls, np.zeros((0, 2))), dtype=float).reshape(-1, 2)
    pen = penalty[cls] if isinstance(penalty, dict) else penalty
    matched, missed = _match(d, t)
    sq += float(np.sum(matched)) + missed * pen ** 2
    n_truth += len(t)
    meta['missed'][cls] = int(missed)
    meta['false_alarms'][cls] = int(max(len(d) - len(t), 0))
    meta['penalty'][cls] = float(pen)
  if n_truth == 0:
    raise _errors.MetricError("RMSE undefined without ground-truth objects")
  return float(np.sqrt(sq / n_truth)), meta

def detected_positions(posterior, grids, offsets, threshold=0.5):
  """ Grid-plus-offset positions of detected targets, scatterers and the single most likely user grid. """
  pr = grids.r + offsets.dr
  pz = grids.z + offsets.dz
  return {
    TARGET: pr[posterior.pi_T > threshold],
    SCATTERER: pr[posterior.pi_NL > threshold],
    USER: pz[[int(np.argmax(posterior.pi_L))]],
  }

def truth_positions(truth):
  return {TARGET: truth.targets, SCATTERER: truth.scatterers, USER: truth.user[None, :]}

def grid_penalties(grids):
  """ Miss penalty per class: the diagonal of the class's grid cell. """
  diag_r = float(np.hypot(*grids.spacing_r))
  return {TARGET: diag_r, SCATTERER: diag_r, USER: float(np.hypot(*grids.spacing_z))}
