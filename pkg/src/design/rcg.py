"""
rcg.py
---

  Riemannian conjugate gradient on the complex circle manifold {phi : |phi_i| = 1} minimizing the sum of inverse
  diagonal FIM entries over the phase-II reflection vectors.

"""

import os
import itertools
import dataclasses

import numpy as np

import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

MAX_EXHAUSTIVE = 1 << 22

@dataclasses.dataclass
class RcgConfig:
  max_iter: int = 200
  tol: float = 1e-6
  armijo_c: float = 1e-4
  armijo_shrink: float = 0.5
  # Largest phase change (rad) of the first line-search trial.
  step0: float = 1.0
  max_backtracks: int = 50
  reset_every: int = 20

@dataclasses.dataclass
class RcgResult:
  phi: np.ndarray
  # Objective value after each accepted iteration, starting with the initial point.
  trace: list
  iterations: int
  stalled: bool
  grad_norm: float

def _diag_fim(phi, coeffs):
  Phi_r, Phi_c = coeffs.split(phi)
  return coeffs.evaluate(Phi_r, Phi_c)

def objective(phi, coeffs):
  J = _diag_fim(phi, coeffs)
  if np.any(J <= 0):
    raise _errors.InfeasibleGeometryError("Non-positive diagonal FIM entry at parameter(s) {}".format(
      np.flatnonzero(J <= 0).tolist()))
  return float(np.sum(1.0 / J))

def euclidean_grad(phi, coeffs):
  """ d objective / d conj(phi) as a complex vector laid out like phi. """
  J = _diag_fim(phi, coeffs)
  if np.any(J <= 0):
    raise _errors.InfeasibleGeometryError("Non-positive diagonal FIM entry")
  w = 1.0 / J ** 2
  k = 2.0 / coeffs.noise_power
  Phi_r, Phi_c = coeffs.split(phi)
  out = []
  for A, b, Phi in ((coeffs.A_r, coeffs.b_r, Phi_r), (coeffs.A_c, coeffs.b_c, Phi_c)):
    g = -k * (np.einsum('n,nij,jt->it', w, A.conj(), Phi) + (w @ b.conj())[:, None])
    out.append(g.T.ravel())
  return np.concatenate(out)

def riemannian_grad(phi, g):
  """ Projection onto the tangent space of the circle manifold at phi. """
  return g - np.real(g * phi.conj()) * phi

def retract(v):
  return v / np.abs(v)

def transport(phi, d):
  return riemannian_grad(phi, d)

def _inner(a, b):
  return float(np.real(np.vdot(a, b)))

def _safe_objective(phi, coeffs):
  try:
    return objective(phi, coeffs)
  except _errors.InfeasibleGeometryError:
    return np.inf

def optimize(coeffs, phi0, cfg=None, on_iteration=None):
  """ Fletcher-Reeves RCG with Armijo backtracking and projection retraction.

  :param phi0: feasible start, vectorized like ReflectionSchedule.vectorize()
  :param on_iteration: callable(iteration, objective) after each accepted step
  """
  cfg = cfg or RcgConfig()
  logger = _getSharedLogger()
  phi = retract(np.asarray(phi0, dtype=complex))
  f = objective(phi, coeffs)
  trace = [f]
  # Real-coordinate gradient: twice the conjugate Wirtinger derivative.
  G = riemannian_grad(phi, 2 * euclidean_grad(phi, coeffs))
  d = -G
  stalled = False
  it = 0
  for it in range(1, cfg.max_iter + 1):
    slope = _inner(G, d)
    if slope >= 0 or (it - 1) % cfg.reset_every == 0:
      d = -G
      slope = _inner(G, d)
    if slope == 0:
      break
    step = cfg.step0 / max(np.max(np.abs(d)), 1e-300)
    for _ in range(cfg.max_backtracks):
      cand = retract(phi + step * d)
      f_new = _safe_objective(cand, coeffs)
      if f_new <= f + cfg.armijo_c * step * slope:
        break
      step *= cfg.armijo_shrink
    else:
      stalled = True
      logger.debug("Line search stalled at iteration %d (objective %.6g)", it, f)
      break
    G_new = riemannian_grad(cand, 2 * euclidean_grad(cand, coeffs))
    rho = _inner(G_new, G_new) / max(_inner(G, G), 1e-300)
    d = -G_new + rho * transport(cand, d)
    decrease = f - f_new
    phi, f, G = cand, f_new, G_new
    trace.append(f)
    if on_iteration is not None:
      on_iteration(it, f)
    if decrease < cfg.tol * abs(trace[-2]):
      break
  return RcgResult(phi=phi, trace=trace, iterations=it, stalled=stalled, grad_norm=float(np.linalg.norm(G)))

def _partition_objective(coeffs, rows, Phi_r, Phi_c):
  """ Objective restricted to parameters `rows` for a batch of schedules (K x N_p x T). """
  k = 2.0 / coeffs.noise_power
  batch = len(Phi_r) if Phi_r is not None else len(Phi_c)
  J = np.tile(coeffs.C[rows], (batch, 1)).astype(float)
  for A, b, Phi in ((coeffs.A_r[rows], coeffs.b_r[rows], Phi_r), (coeffs.A_c[rows], coeffs.b_c[rows], Phi_c)):
    if Phi is None or Phi.shape[2] == 0:
      continue
    J += k * (np.einsum('kit,nij,kjt->kn', Phi, A, Phi.conj()).real
      + 2 * np.einsum('kit,ni->kn', Phi, b).real)
  with np.errstate(divide='ignore'):
    return np.where(np.all(J > 0, axis=1), np.sum(1.0 / J, axis=1), np.inf)

def _enumerate(levels, n, N_p, T):
  """ All quantized unit-modulus matrices N_p x T, as a K x N_p x T batch. """
  phases = np.exp(2j * np.pi * np.arange(levels) / levels)
  combos = np.array(list(itertools.product(range(levels), repeat=n)))
  return phases[combos].reshape(-1, T, N_p).transpose(0, 2, 1)

def exhaustive_quantized_search(coeffs, levels=16):
  """ Global minimum over phases quantized to `levels` values.

  Searches the sensing and communication partitions separately when no parameter depends on both, jointly
  otherwise. Only feasible for tiny instances.
  """
  N_p = coeffs.N_p
  n_r, n_c = N_p * coeffs.T3, N_p * coeffs.T4
  uses_r = np.any(np.abs(coeffs.A_r) > 0, axis=(1, 2)) | np.any(np.abs(coeffs.b_r) > 0, axis=1)
  uses_c = np.any(np.abs(coeffs.A_c) > 0, axis=(1, 2)) | np.any(np.abs(coeffs.b_c) > 0, axis=1)
  separable = not np.any(uses_r & uses_c)
  sizes = (levels ** n_r, levels ** n_c) if separable else (levels ** (n_r + n_c),)
  if max(sizes) > MAX_EXHAUSTIVE:
    raise _errors.ConfigurationError("Exhaustive search over {} points is too large".format(max(sizes)))
  empty = np.ones((1, N_p, 0), dtype=complex)
  if separable:
    rows_r = np.flatnonzero(uses_r | ~uses_c)
    rows_c = np.flatnonzero(uses_c)
    Pr = _enumerate(levels, n_r, N_p, coeffs.T3) if n_r else empty
    Pc = _enumerate(levels, n_c, N_p, coeffs.T4) if n_c else empty
    fr = _partition_objective(coeffs, rows_r, Pr, None)
    fc = _partition_objective(coeffs, rows_c, None, Pc) if len(rows_c) else np.zeros(1)
    ir, ic = int(np.argmin(fr)), int(np.argmin(fc))
    best_r, best_c = Pr[ir], Pc[min(ic, len(Pc) - 1)]
    value = float(fr[ir] + fc[ic])
  else:
    both = _enumerate(levels, n_r + n_c, N_p, coeffs.T3 + coeffs.T4)
    f = _partition_objective(coeffs, np.arange(coeffs.n_params), both[:, :, :coeffs.T3], both[:, :, coeffs.T3:])
    i = int(np.argmin(f))
    best_r, best_c, value = both[i, :, :coeffs.T3], both[i, :, coeffs.T3:], float(f[i])
  phi = np.concatenate([best_r.T.ravel(), best_c.T.ravel()])
  return phi, value
