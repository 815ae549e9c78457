"""
estep.py
---

  Turbo variational E-step. Module A runs mean-field variational inference over the channel coefficients x,
  their precisions rho and the per-block supports given incoming support priors; module B runs sum-product
  belief propagation over the coupled support factors and the Ising MRF on the union support. The two modules
  exchange extrinsic support messages until the posteriors settle.

  All quantities are expressed in units where the noise variance is sigma2 (1 when the caller normalizes).

"""

import os
import dataclasses

import numpy as np
import scipy.linalg
import scipy.special

import src.sim.measurement as _measurement
import src.models.astvbi.priors as _priors
import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

MAX_CONDITION = 1e12
JITTER = 1e-12
# Clip for log-ratio fields in the BP updates, keeps logaddexp away from inf - inf.
FIELD_CLIP = 1e3

@dataclasses.dataclass
class EStepConfig:
  max_inner: int = 30
  inner_tol: float = 1e-6
  max_turbo: int = 10
  turbo_tol: float = 1e-4
  bp_sweeps: int = 10
  bp_damping: float = 0.0
  elbo_slack: float = 1e-9
  track_elbo: bool = True

@dataclasses.dataclass
class PosteriorState:
  mu: dict
  Sigma: dict
  a_t: dict
  b_t: dict
  pi_T: np.ndarray
  pi_NL: np.ndarray
  pi_L: np.ndarray
  # Support priors (module B -> module A) the current posteriors were computed under.
  gamma_T: np.ndarray = None
  gamma_NL: np.ndarray = None
  p_L: float = None
  elbo_trace: list = dataclasses.field(default_factory=list)
  turbo_rounds: int = 0
  inner_iterations: int = 0

  def copy(self):
    cp = lambda d: {j: v.copy() for j, v in d.items()}
    return dataclasses.replace(self, mu=cp(self.mu), Sigma=cp(self.Sigma), a_t=cp(self.a_t), b_t=cp(self.b_t),
      pi_T=self.pi_T.copy(), pi_NL=self.pi_NL.copy(), pi_L=self.pi_L.copy(),
      gamma_T=None if self.gamma_T is None else self.gamma_T.copy(),
      gamma_NL=None if self.gamma_NL is None else self.gamma_NL.copy(),
      elbo_trace=list(self.elbo_trace))

  def pi(self, j):
    """ Support posterior governing block j. """
    return {'T': self.pi_T, 'NL': self.pi_NL, 'L': self.pi_L}[_priors.SUPPORT_OF_BLOCK[j]]

  @property
  def x(self):
    return np.concatenate([self.mu[j] for j in _measurement.BLOCKS])

  def scaled(self, factor):
    """ Changes amplitude units: means scale by factor, second moments and gamma rates by factor^2. """
    out = self.copy()
    for j in _measurement.BLOCKS:
      out.mu[j] = out.mu[j] * factor
      out.Sigma[j] = out.Sigma[j] * factor ** 2
      out.b_t[j] = out.b_t[j] * factor ** 2
    return out

@dataclasses.dataclass
class TurboMessages:
  pi_B_T: np.ndarray
  pi_B_NL: np.ndarray
  pi_in: np.ndarray
  pi_out_T: np.ndarray
  pi_out_NL: np.ndarray
  gamma_T: np.ndarray
  gamma_NL: np.ndarray
  # Directional MRF messages (log-ratios) on the Qx x Qy lattice, keyed 'left', 'right', 'below', 'above'.
  lam: dict = None
  beliefs: np.ndarray = None

class _PartSystem(object):
  """ Gram blocks and matched-filter outputs of one measurement part. """

  def __init__(self, F_part, y_part, blocks, cols):
    self.blocks = blocks
    self.F = F_part
    self.cols = cols
    self.Fj = {j: F_part[:, cols[j]] for j in blocks}
    self.gram = {(j, k): self.Fj[j].conj().T @ self.Fj[k] for j in blocks for k in blocks}
    self.Fy = {j: self.Fj[j].conj().T @ y_part for j in blocks}
    self.yy = float(np.vdot(y_part, y_part).real)

class BlockSystem(object):

  def __init__(self, model, y_parts):
    cols = _measurement.part_block_slices(model.Q, model.P)
    self.Q, self.P = model.Q, model.P
    self.parts = {part: _PartSystem(F, np.asarray(y_parts[part]), _measurement.PART_BLOCKS[part], cols)
      for part, F in model.parts.items()}
    for part in self.parts:
      assert self.parts[part].F.shape[0] == np.asarray(y_parts[part]).shape[0], \
        "Observation part '{}' has {} rows, F has {}".format(part, len(y_parts[part]), self.parts[part].F.shape[0])

  def part_of(self, j):
    return self.parts[_measurement.BLOCK_PART[j]]

def _cholesky(A):
  try:
    return scipy.linalg.cho_factor(A, lower=True)
  except np.linalg.LinAlgError:
    return None

def _solve_precision(A):
  """ Inverse of a Hermitian positive definite precision matrix via Cholesky. """
  A = 0.5 * (A + A.conj().T)
  if not np.all(np.isfinite(A)):
    raise _errors.NumericalError("Non-finite posterior precision")
  n = A.shape[0]
  cho = _cholesky(A)
  if cho is not None:
    d = np.abs(np.diag(cho[0]))
    # Squared diagonal ratio of the factor lower-bounds the condition number.
    if (d.max() / d.min()) ** 2 > MAX_CONDITION:
      cho = None
  if cho is None:
    cho = _cholesky(A + JITTER * np.trace(A).real * np.eye(n))
    if cho is None:
      raise _errors.RegularizationError("Posterior precision not positive definite")
  Sigma = scipy.linalg.cho_solve(cho, np.eye(n, dtype=A.dtype))
  return 0.5 * (Sigma + Sigma.conj().T)

def _precisions(state, j):
  return state.a_t[j] / state.b_t[j]

def _mixture(pi, active, inactive):
  return pi * active + (1 - pi) * inactive

def _priors_for(state):
  return {'T': state.gamma_T, 'NL': state.gamma_NL, 'L': np.full_like(state.pi_L, state.p_L)}

def init_posteriors(system, hyper, gamma_T, gamma_NL, p_L, sigma2=1.0):
  """ Support posteriors start at the incoming priors; x from one joint solve per part with diagonalized Sigma. """
  pis = {'T': np.asarray(gamma_T, dtype=float).copy(), 'NL': np.asarray(gamma_NL, dtype=float).copy(),
    'L': np.full(system.P, p_L)}
  a_t, b_t, mu, Sigma = {}, {}, {}, {}
  for j in _measurement.BLOCKS:
    pi = pis[_priors.SUPPORT_OF_BLOCK[j]]
    a_t[j] = _mixture(pi, hyper.a[j], hyper.a_bar[j])
    b_t[j] = _mixture(pi, hyper.b[j], hyper.b_bar[j])
  for part, ps in system.parts.items():
    c = np.concatenate([a_t[j] / b_t[j] for j in ps.blocks])
    S = _solve_precision(np.diag(c).astype(complex) + ps.F.conj().T @ ps.F / sigma2)
    m = S @ np.concatenate([ps.Fy[j] for j in ps.blocks]) / sigma2
    start = 0
    for j in ps.blocks:
      n = len(a_t[j])
      mu[j] = m[start:start + n]
      Sigma[j] = np.diag(np.diag(S)[start:start + n]).astype(complex)
      start += n
  return PosteriorState(mu=mu, Sigma=Sigma, a_t=a_t, b_t=b_t, pi_T=pis['T'], pi_NL=pis['NL'], pi_L=pis['L'],
    gamma_T=pis['T'].copy(), gamma_NL=pis['NL'].copy(), p_L=p_L)

def update_x(state, system, sigma2=1.0):
  """ Block Gauss-Seidel mean-field update of q(x_j) within each part, in block order. """
  for part, ps in system.parts.items():
    for j in ps.blocks:
      h = ps.Fy[j].copy()
      for k in ps.blocks:
        if k != j:
          h = h - ps.gram[(j, k)] @ state.mu[k]
      S = _solve_precision(np.diag(_precisions(state, j)).astype(complex) + ps.gram[(j, j)] / sigma2)
      state.Sigma[j] = S
      state.mu[j] = S @ h / sigma2
  return state

def update_rho(state, hyper):
  for j in _measurement.BLOCKS:
    pi = state.pi(j)
    second = np.abs(state.mu[j]) ** 2 + np.diag(state.Sigma[j]).real
    state.a_t[j] = _mixture(pi, hyper.a[j], hyper.a_bar[j]) + 1
    state.b_t[j] = _mixture(pi, hyper.b[j], hyper.b_bar[j]) + second
  return state

def _expected_gamma_logpdf(a, b, e_log, e_rho):
  return a * np.log(b) - scipy.special.gammaln(a) + (a - 1) * e_log - b * e_rho

def _support_llr(state, hyper, blocks):
  llr = 0.0
  for j in blocks:
    e_log = scipy.special.digamma(state.a_t[j]) - np.log(state.b_t[j])
    e_rho = state.a_t[j] / state.b_t[j]
    llr = llr + _expected_gamma_logpdf(hyper.a[j], hyper.b[j], e_log, e_rho) \
      - _expected_gamma_logpdf(hyper.a_bar[j], hyper.b_bar[j], e_log, e_rho)
  return llr

def update_s(state, hyper):
  """ Support posteriors: incoming prior times the expected active/inactive gamma likelihood of each block. """
  priors = _priors_for(state)
  with np.errstate(divide='ignore'):
    for name, blocks in (('T', _priors.J1), ('NL', _priors.J2), ('L', _priors.J3)):
      llr = scipy.special.logit(priors[name]) + _support_llr(state, hyper, blocks)
      setattr(state, 'pi_' + name, scipy.special.expit(llr))
  return state

def _binary_entropy(p):
  return -(scipy.special.xlogy(p, p) + scipy.special.xlogy(1 - p, 1 - p))

def elbo(state, system, hyper, sigma2=1.0):
  """ Evidence lower bound of module A under the current support priors (constants in x kept). """
  out = 0.0
  for part, ps in system.parts.items():
    fit = ps.yy
    for j in ps.blocks:
      fit -= 2 * np.vdot(state.mu[j], ps.Fy[j]).real
      fit += np.real(np.trace(ps.gram[(j, j)] @ state.Sigma[j]))
      for k in ps.blocks:
        fit += np.vdot(state.mu[j], ps.gram[(j, k)] @ state.mu[k]).real
    n = ps.F.shape[0]
    out += -n * np.log(np.pi * sigma2) - fit / sigma2

  priors = _priors_for(state)
  for j in _measurement.BLOCKS:
    a_t, b_t = state.a_t[j], state.b_t[j]
    e_log = scipy.special.digamma(a_t) - np.log(b_t)
    e_rho = a_t / b_t
    second = np.abs(state.mu[j]) ** 2 + np.diag(state.Sigma[j]).real
    pi = state.pi(j)
    out += np.sum(e_log - e_rho * second - np.log(np.pi))
    out += np.sum(pi * _expected_gamma_logpdf(hyper.a[j], hyper.b[j], e_log, e_rho)
      + (1 - pi) * _expected_gamma_logpdf(hyper.a_bar[j], hyper.b_bar[j], e_log, e_rho))
    # Entropies of q(x_j) and q(rho_j).
    n = len(a_t)
    sign, logdet = np.linalg.slogdet(state.Sigma[j])
    out += n * np.log(np.pi * np.e) + logdet
    out += np.sum(a_t - np.log(b_t) + scipy.special.gammaln(a_t) + (1 - a_t) * scipy.special.digamma(a_t))

  for name in ('T', 'NL', 'L'):
    pi = getattr(state, 'pi_' + name)
    g = priors[name]
    out += np.sum(scipy.special.xlogy(pi, g) + scipy.special.xlogy(1 - pi, 1 - g)) + np.sum(_binary_entropy(pi))
  return float(out)

def run_module_a(state, system, hyper, sigma2=1.0, cfg=None):
  """ Iterates the x, rho and s updates until the means settle. Returns the number of sweeps. """
  cfg = cfg or EStepConfig()
  logger = _getSharedLogger()
  state.elbo_trace = []
  prev = state.x.copy()
  it = 0
  for it in range(1, cfg.max_inner + 1):
    update_x(state, system, sigma2)
    update_rho(state, hyper)
    update_s(state, hyper)
    if cfg.track_elbo:
      value = elbo(state, system, hyper, sigma2)
      if state.elbo_trace and value < state.elbo_trace[-1] - cfg.elbo_slack * max(1.0, abs(value)):
        logger.warning("ELBO decreased from %.9g to %.9g at sweep %d", state.elbo_trace[-1], value, it)
      state.elbo_trace.append(value)
    cur = state.x
    if not np.all(np.isfinite(cur)):
      raise _errors.NumericalError("Non-finite posterior mean after sweep {}".format(it))
    change = np.linalg.norm(cur - prev)
    prev = cur.copy()
    if change <= cfg.inner_tol * max(np.linalg.norm(cur), 1e-300):
      break
  state.inner_iterations += it
  return it

def extrinsic(pi_tilde, gamma):
  """ Module A posterior divided by its incoming prior; 0/0 resolves to 0.5. """
  pi_tilde = np.asarray(pi_tilde, dtype=float)
  gamma = np.asarray(gamma, dtype=float)
  num = pi_tilde * (1 - gamma)
  den = num + (1 - pi_tilde) * gamma
  out = np.full(np.broadcast(num, den).shape, 0.5)
  np.divide(num, den, out=out, where=den > 0)
  return out

def _clipped_logit(p):
  with np.errstate(divide='ignore'):
    return np.clip(scipy.special.logit(np.asarray(p, dtype=float)), -FIELD_CLIP, FIELD_CLIP)

def _message(h, beta):
  """ Log-ratio message through an exp(beta s s') pair factor from a node with cavity field h. """
  h = np.clip(h, -FIELD_CLIP, FIELD_CLIP)
  return np.logaddexp(h + beta, -beta) - np.logaddexp(h - beta, beta)

def _bp_sweeps(phi, mrf, sweeps, damping, lam=None):
  """ Raster-order loopy BP on the lattice. phi holds node log-ratio fields of shape (Qx, Qy). """
  Qx, Qy = phi.shape
  if lam is None:
    lam = {k: np.zeros_like(phi) for k in ('left', 'right', 'below', 'above')}
  left, right, below, above = lam['left'], lam['right'], lam['below'], lam['above']
  beta = mrf.beta

  def upd(old, new):
    return (1 - damping) * new + damping * old

  for _ in range(sweeps):
    for c in range(1, Qx):
      left[c] = upd(left[c], _message(phi[c - 1] + left[c - 1] + below[c - 1] + above[c - 1], beta))
    for c in range(Qx - 2, -1, -1):
      right[c] = upd(right[c], _message(phi[c + 1] + right[c + 1] + below[c + 1] + above[c + 1], beta))
    for r in range(1, Qy):
      below[:, r] = upd(below[:, r],
        _message(phi[:, r - 1] + left[:, r - 1] + right[:, r - 1] + below[:, r - 1], beta))
    for r in range(Qy - 2, -1, -1):
      above[:, r] = upd(above[:, r],
        _message(phi[:, r + 1] + left[:, r + 1] + right[:, r + 1] + above[:, r + 1], beta))
  return lam

def mrf_marginals(pi_in, mrf, sweeps=10, damping=0.0):
  """ BP estimate of P(s_U,q = 1) under the Ising prior with per-node evidence pi_in. """
  phi = (_clipped_logit(pi_in) - 2 * mrf.alpha).reshape(mrf.Qx, mrf.Qy)
  lam = _bp_sweeps(phi, mrf, sweeps, damping)
  total = phi + lam['left'] + lam['right'] + lam['below'] + lam['above']
  return scipy.special.expit(total).ravel(), lam

def _factor_to_union(pi_B, p):
  """ Message from a coupling factor into s_U, as P(s_U = 1). """
  on = pi_B * p + (1 - pi_B) * (1 - p)
  return on / (on + (1 - pi_B))

def module_b_pass(pi_B_T, pi_B_NL, probs, mrf, sweeps=10, damping=0.0):
  """ Sum-product over the coupling factors and the MRF, returning the priors module A uses next. """
  pi_B_T = np.asarray(pi_B_T, dtype=float)
  pi_B_NL = np.asarray(pi_B_NL, dtype=float)
  in_T = _factor_to_union(pi_B_T, probs.p_T)
  in_NL = _factor_to_union(pi_B_NL, probs.p_NL)
  l_T, l_NL = _clipped_logit(in_T), _clipped_logit(in_NL)
  pi_in = scipy.special.expit(l_T + l_NL)

  phi = (l_T + l_NL - 2 * mrf.alpha).reshape(mrf.Qx, mrf.Qy)
  lam = _bp_sweeps(phi, mrf, sweeps, damping)
  mrf_in = (lam['left'] + lam['right'] + lam['below'] + lam['above']).ravel()

  pi_out_T = scipy.special.expit(l_NL - 2 * mrf.alpha + mrf_in)
  pi_out_NL = scipy.special.expit(l_T - 2 * mrf.alpha + mrf_in)
  return TurboMessages(pi_B_T=pi_B_T, pi_B_NL=pi_B_NL, pi_in=pi_in, pi_out_T=pi_out_T, pi_out_NL=pi_out_NL,
    gamma_T=probs.p_T * pi_out_T, gamma_NL=probs.p_NL * pi_out_NL, lam=lam,
    beliefs=scipy.special.expit(phi.ravel() + mrf_in))

def run_estep(system, hyper, probs, mrf, sigma2=1.0, cfg=None, warm=None):
  """ Turbo loop between module A and module B.

  :param system: BlockSystem for the current F and observation
  :param hyper: GammaHyper in the same units as the observation
  :param warm: optional PosteriorState to continue from (previous outer iteration)
  """
  cfg = cfg or EStepConfig()
  logger = _getSharedLogger()
  Q = system.Q
  if warm is None:
    msgs = module_b_pass(np.full(Q, 0.5), np.full(Q, 0.5), probs, mrf, cfg.bp_sweeps, cfg.bp_damping)
    state = init_posteriors(system, hyper, msgs.gamma_T, msgs.gamma_NL, probs.p_L, sigma2)
  else:
    state = warm.copy()
    state.p_L = probs.p_L
    state.inner_iterations = 0

  state.turbo_rounds = 0
  for rnd in range(1, cfg.max_turbo + 1):
    prev = np.concatenate([state.pi_T, state.pi_NL, state.pi_L])
    run_module_a(state, system, hyper, sigma2, cfg)
    msgs = module_b_pass(extrinsic(state.pi_T, state.gamma_T), extrinsic(state.pi_NL, state.gamma_NL),
      probs, mrf, cfg.bp_sweeps, cfg.bp_damping)
    state.gamma_T, state.gamma_NL = msgs.gamma_T, msgs.gamma_NL
    state.turbo_rounds = rnd
    delta = np.max(np.abs(np.concatenate([state.pi_T, state.pi_NL, state.pi_L]) - prev))
    logger.debug("Turbo round %d: max support change %.3g, %d inner sweeps", rnd, delta, state.inner_iterations)
    if delta < cfg.turbo_tol:
      break
  return state
