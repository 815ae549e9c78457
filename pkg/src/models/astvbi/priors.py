"""
priors.py
---

  The hierarchical prior: Gaussian-gamma channel prior, the coupled support prior for targets and scatterers
  sharing grid supports, the Ising prior on the union support and hyperparameter construction from the
  scene's path-loss model.

"""

import os
import dataclasses

import numpy as np
import scipy.special

import src.sim.channel as _channel
import src.sim.measurement as _measurement
import src.utils.utility as _util

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

# Blocks whose precisions switch with s_T, s_NL and s_L respectively.
J1 = ('ITS', 'CTS', 'ITB', 'CTB')
J2 = ('BNL', 'INL')
J3 = ('BL', 'IL')
SUPPORT_OF_BLOCK = dict([(j, 'T') for j in J1] + [(j, 'NL') for j in J2] + [(j, 'L') for j in J3])

INACTIVE_PRECISION = 1e4

@dataclasses.dataclass
class SupportState:
  s_T: np.ndarray
  s_NL: np.ndarray
  s_L: np.ndarray
  s_U: np.ndarray

  def union_consistent(self):
    return np.array_equal(self.s_U == 1, (self.s_T == 1) | (self.s_NL == 1))

@dataclasses.dataclass
class GammaHyper:
  """ Per-block arrays of the active (a, b) and inactive (a_bar, b_bar) gamma shape/rate pairs. """
  a: dict
  b: dict
  a_bar: dict
  b_bar: dict

@dataclasses.dataclass
class MRFParams:
  alpha: float = 0.3
  beta: float = 0.5
  # Lattice shape: Qx columns of Qy rows, q = col * Qy + row.
  Qx: int = 1
  Qy: int = 1

  def __post_init__(self):
    assert self.beta >= 0, "MRF interaction must be non-negative, got '{}'".format(self.beta)

  @classmethod
  def from_grids(cls, grids, alpha=0.3, beta=0.5):
    return cls(alpha=alpha, beta=beta, Qx=grids.grid_cols_x, Qy=grids.grid_cols_y)

  @property
  def Q(self):
    return self.Qx * self.Qy

  def edges(self):
    """ Undirected lattice edges (q, q') with q < q'. """
    out = []
    for c in range(self.Qx):
      for r in range(self.Qy):
        q = c * self.Qy + r
        if r + 1 < self.Qy:
          out.append((q, q + 1))
        if c + 1 < self.Qx:
          out.append((q, q + self.Qy))
    return out

  def neighbor_sum(self, s):
    grid = np.asarray(s, dtype=float).reshape(self.Qx, self.Qy)
    out = np.zeros_like(grid)
    out[1:, :] += grid[:-1, :]
    out[:-1, :] += grid[1:, :]
    out[:, 1:] += grid[:, :-1]
    out[:, :-1] += grid[:, 1:]
    return out.ravel()

@dataclasses.dataclass
class SupportProbs:
  p_T: float
  p_NL: float
  p_L: float

  def __post_init__(self):
    for name in ('p_T', 'p_NL', 'p_L'):
      v = getattr(self, name)
      assert 0 < v <= 1, "Support probability '{}'={} outside (0, 1]".format(name, v)

  @classmethod
  def from_counts(cls, K, L, O, P):
    assert min(K, L, O) >= 0 and O <= min(K, L), "Invalid object counts K={} L={} O={}".format(K, L, O)
    # An empty scene counts as one object so the floor below stays finite.
    union = max(K + L - O, 1)
    # Clip away from 0 so that a scene without targets (or scatterers) still has a valid prior.
    tiny = 1.0 / (4.0 * union)
    return cls(p_T=max(K / union, tiny), p_NL=max(L / union, tiny), p_L=1.0 / P)

def ising_unnorm_logprob(s_U, mrf):
  s = np.asarray(s_U, dtype=float)
  return float(-mrf.alpha * np.sum(s) + 0.5 * mrf.beta * np.sum(s * mrf.neighbor_sum(s)))

def _bernoulli_logpmf(s, p):
  return np.where(s == 1, np.log(p), np.log1p(-p) if p < 1 else -np.inf)

def coupled_support_logprior(s_T, s_NL, s_L, s_U, probs, mrf):
  s_T, s_NL, s_L, s_U = (np.asarray(v) for v in (s_T, s_NL, s_L, s_U))
  off = s_U == -1
  if np.any(off & ((s_T == 1) | (s_NL == 1))):
    return -np.inf
  on = ~off
  with np.errstate(divide='ignore'):
    logp = np.sum(_bernoulli_logpmf(s_T[on], probs.p_T)) + np.sum(_bernoulli_logpmf(s_NL[on], probs.p_NL))
    logp += np.sum(_bernoulli_logpmf(s_L, probs.p_L))
  return float(logp + ising_unnorm_logprob(s_U, mrf))

def nominal_gains(scene, grids, num_paths=1, nominal_user=None):
  """ Per-block RMS gain of a channel coefficient located at each grid center, pilot amplitude included. """
  amp = np.sqrt(scene.tx_power)
  user = np.asarray(scene.soi_Ru.center if nominal_user is None else nominal_user, dtype=float)
  norm = amp / np.sqrt(num_paths)
  G = {}
  for j, link in (('ITS', _channel.IRS_TARGET_SENSOR), ('CTS', _channel.CTRL_TARGET_SENSOR),
                  ('ITB', _channel.IRS_TARGET_BS), ('CTB', _channel.CTRL_TARGET_BS)):
    G[j] = amp * np.array([_channel.path_loss(link, scene, p, scene.rcs) for p in grids.r])

  def _nlos(anchor):
    anchor = np.asarray(anchor, dtype=float)
    return np.array([_channel.comm_path_loss(scene, np.linalg.norm(user - p) + np.linalg.norm(p - anchor),
      los=False) for p in grids.r])

  def _los(anchor):
    return np.array([_channel.comm_path_loss(scene, np.linalg.norm(p - np.asarray(anchor))) for p in grids.z])

  G['BNL'] = norm * _nlos(scene.p_B)
  G['INL'] = norm * _nlos(scene.p_I)
  G['BL'] = norm * _los(scene.p_B)
  G['IL'] = norm * _los(scene.p_I)
  return G

def hyperparams_from_scene(scene, grids, num_paths=1, normalize=True, nominal_user=None):
  """ Active precision mean 1/G^2 at grid centers, inactive mean 1e4, unit shapes.

  With `normalize`, gains are expressed in units of the noise standard deviation, which is how the estimator
  consumes observations.
  """
  G = nominal_gains(scene, grids, num_paths=num_paths, nominal_user=nominal_user)
  scale = 1.0 / np.sqrt(scene.noise_power) if normalize else 1.0
  a, b, a_bar, b_bar = {}, {}, {}, {}
  for j in _measurement.BLOCKS:
    g2 = (G[j] * scale) ** 2
    a[j] = np.ones_like(g2)
    b[j] = g2
    a_bar[j] = np.ones_like(g2)
    b_bar[j] = np.full_like(g2, 1.0 / INACTIVE_PRECISION)
  return GammaHyper(a=a, b=b, a_bar=a_bar, b_bar=b_bar)

def sample_support(probs, mrf, rng, sweeps=50, P=None, init=None):
  """ Gibbs-samples s_U from the Ising prior, then (s_T, s_NL) per active grid and s_L i.i.d.

  Given s_U,q = 1 the pair (s_T,q, s_NL,q) is drawn from the joint whose marginals are p_T and p_NL and which
  never leaves both inactive: P(both) = p_T + p_NL - 1, P(T only) = 1 - p_NL, P(NL only) = 1 - p_T. When
  p_T + p_NL < 1 the pair is drawn independently instead.
  """
  Q = mrf.Q
  s = np.where(rng.random(Q) < 0.5, 1.0, -1.0) if init is None else np.asarray(init, dtype=float).copy()
  for _ in range(sweeps):
    for q in range(Q):
      grid = s.reshape(mrf.Qx, mrf.Qy)
      c, r = divmod(q, mrf.Qy)
      nb = 0.0
      if r > 0:
        nb += grid[c, r - 1]
      if r + 1 < mrf.Qy:
        nb += grid[c, r + 1]
      if c > 0:
        nb += grid[c - 1, r]
      if c + 1 < mrf.Qx:
        nb += grid[c + 1, r]
      p_on = scipy.special.expit(2.0 * (-mrf.alpha + mrf.beta * nb))
      s[q] = 1.0 if rng.random() < p_on else -1.0

  s_T = -np.ones(Q)
  s_NL = -np.ones(Q)
  on = np.flatnonzero(s == 1)
  p_both = probs.p_T + probs.p_NL - 1.0
  u = rng.random(len(on))
  if p_both >= 0:
    t_only = 1.0 - probs.p_NL
    s_T[on] = np.where(u < t_only + p_both, 1.0, -1.0)
    s_NL[on] = np.where(u >= t_only, 1.0, -1.0)
  else:
    s_T[on] = np.where(u < probs.p_T, 1.0, -1.0)
    s_NL[on] = np.where(rng.random(len(on)) < probs.p_NL, 1.0, -1.0)
  n_L = int(round(1.0 / probs.p_L)) if P is None else P
  s_L = np.where(rng.random(n_L) < probs.p_L, 1.0, -1.0)
  return SupportState(s_T=s_T, s_NL=s_NL, s_L=s_L, s_U=s)
