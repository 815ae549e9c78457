"""
crb.py
---

  Position Fisher information for the objects detected in phase I (pure targets, overlapping objects, pure
  scatterers and the user), its trace-CRB, and per-parameter quadratic-form coefficients expressing each diagonal
  FIM entry as an explicit function of the phase-II reflection vectors.

  Every object contributes an affine observation model per pilot slot: sensing rows H_s phi_t + h_s over the
  sensors then the BS, communication rows H_c phi_t + h_c over the sensors then the BS. Path gains are treated as
  known constants when differentiating w.r.t. positions.

"""

import os
import json
import dataclasses

import numpy as np
import scipy.linalg

import src.sim.scene as _scene
import src.sim.channel as _channel
import src.sim.measurement as _measurement
import src.utils.utility as _util

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

PURE_TARGET = 'T'
OVERLAP = 'O'
PURE_SCATTERER = 'S'
USER = 'U'
CLASS_ORDER = (PURE_TARGET, OVERLAP, PURE_SCATTERER, USER)
# Class pairs whose FIM blocks are zero in the block structure the design works with.
ZERO_BLOCKS = ((PURE_TARGET, PURE_SCATTERER), (PURE_TARGET, USER), (OVERLAP, USER), (PURE_SCATTERER, USER))

SENSING_GAINS = ('ITS', 'CTS', 'ITB', 'CTB')
SINGULAR_CONDITION = 1e15

@dataclasses.dataclass
class EstimatedObject:
  cls: str
  position: np.ndarray
  # Block name -> complex gain in observation units; blocks absent from the dict are zero.
  gains: dict
  grid_index: int = -1

  def gain(self, j):
    return complex(self.gains.get(j, 0.0))

@dataclasses.dataclass
class EstimatedScene:
  objects: list

  def __post_init__(self):
    order = {c: i for i, c in enumerate(CLASS_ORDER)}
    self.objects = sorted(self.objects, key=lambda o: (order[o.cls], o.grid_index))

  @property
  def labels(self):
    """ (class, object index within the scene, axis) per scalar parameter of xi. """
    return [(o.cls, i, axis) for i, o in enumerate(self.objects) for axis in (0, 1)]

  def count(self, cls):
    return sum(1 for o in self.objects if o.cls == cls)

  @classmethod
  def from_posterior(cls, posterior, grids, offsets, threshold=0.5):
    """ Detected objects: T and NL supports above threshold (both -> overlap), the most likely user grid. """
    pr = grids.r + offsets.dr
    pz = grids.z + offsets.dz
    is_T = posterior.pi_T > threshold
    is_NL = posterior.pi_NL > threshold
    objects = []
    for q in np.flatnonzero(is_T | is_NL):
      if is_T[q] and is_NL[q]:
        c, blocks = OVERLAP, SENSING_GAINS + ('BNL', 'INL')
      elif is_T[q]:
        c, blocks = PURE_TARGET, SENSING_GAINS
      else:
        c, blocks = PURE_SCATTERER, ('BNL', 'INL')
      objects.append(EstimatedObject(c, pr[q].copy(), {j: posterior.mu[j][q] for j in blocks}, int(q)))
    p = int(np.argmax(posterior.pi_L))
    objects.append(EstimatedObject(USER, pz[p].copy(), {'BL': posterior.mu['BL'][p], 'IL': posterior.mu['IL'][p]},
      p))
    return cls(objects)

  @classmethod
  def from_truth(cls, truth, x_true, index_map, grids):
    """ Genie scene: true positions with the true gains carried by x_true. """
    sl = _measurement.block_slices(grids.Q, grids.P)
    xb = {j: x_true[sl[j]] for j in _measurement.BLOCKS}
    overlapped_T = {k for k, _ in truth.overlap_pairs}
    overlapped_S = {l for _, l in truth.overlap_pairs}
    objects = []
    for k, p in enumerate(truth.targets):
      q = int(index_map.q_T[k])
      blocks = SENSING_GAINS + (('BNL', 'INL') if k in overlapped_T else ())
      objects.append(EstimatedObject(OVERLAP if k in overlapped_T else PURE_TARGET, np.array(p),
        {j: xb[j][q] for j in blocks}, q))
    for l, p in enumerate(truth.scatterers):
      if l in overlapped_S:
        continue
      q = int(index_map.q_S[l])
      objects.append(EstimatedObject(PURE_SCATTERER, np.array(p), {j: xb[j][q] for j in ('BNL', 'INL')}, q))
    u = index_map.p_u
    objects.append(EstimatedObject(USER, np.array(truth.user), {'BL': xb['BL'][u], 'IL': xb['IL'][u]}, int(u)))
    return cls(objects)

@dataclasses.dataclass
class AffineForm:
  """ Per-pilot observation contribution H phi_t + h for the sensing (s) and communication (c) pilots. """
  H_s: np.ndarray
  h_s: np.ndarray
  H_c: np.ndarray
  h_c: np.ndarray

  def __add__(self, other):
    return AffineForm(self.H_s + other.H_s, self.h_s + other.h_s, self.H_c + other.H_c, self.h_c + other.h_c)

  def __mul__(self, k):
    return AffineForm(self.H_s * k, self.h_s * k, self.H_c * k, self.h_c * k)

def _nlos_gains(obj):
  if obj.cls == USER:
    return obj.gain('IL'), obj.gain('BL')
  return obj.gain('INL'), obj.gain('BNL')

def _object_forms(obj, scene, h_CI, H_IB):
  """ The object's affine form and its derivatives w.r.t. the IRS angle and the BS angle. """
  N_s, N_p, M = scene.N_s, scene.N_p, scene.M
  tI = _scene.angle_to(scene.p_I, scene.theta_I, obj.position, _scene.IRS)
  tB = _scene.angle_to(scene.p_B, scene.theta_B, obj.position, _scene.BS)
  st, sd = _channel.steering, _channel.steering_derivative
  a_s, a_I, a_B = st(N_s, tI), st(N_p, tI), st(M, tB)
  da_s, da_I, da_B = sd(N_s, tI), sd(N_p, tI), sd(M, tB)
  x_its, x_cts, x_itb, x_ctb = (obj.gain(j) for j in SENSING_GAINS)
  x_I, x_B = _nlos_gains(obj)
  w = h_CI * a_I.conj()
  dw = h_CI * da_I.conj()
  zs = np.zeros((N_s, N_p), dtype=complex)
  zB = np.zeros((M, N_p), dtype=complex)
  vs = np.zeros(N_s, dtype=complex)
  vB = np.zeros(M, dtype=complex)

  value = AffineForm(
    H_s=np.vstack([x_its * np.outer(a_s, w), x_itb * np.outer(a_B, w)]),
    h_s=np.concatenate([x_cts * a_s, x_ctb * a_B]),
    H_c=np.vstack([zs, x_I * H_IB * a_I[None, :]]),
    h_c=np.concatenate([x_I * a_s, x_B * a_B]))
  d_irs = AffineForm(
    H_s=np.vstack([x_its * (np.outer(da_s, w) + np.outer(a_s, dw)), x_itb * np.outer(a_B, dw)]),
    h_s=np.concatenate([x_cts * da_s, vB]),
    H_c=np.vstack([zs, x_I * H_IB * da_I[None, :]]),
    h_c=np.concatenate([x_I * da_s, vB]))
  d_bs = AffineForm(
    H_s=np.vstack([zs, x_itb * np.outer(da_B, w)]),
    h_s=np.concatenate([vs, x_ctb * da_B]),
    H_c=np.vstack([zs, zB]),
    h_c=np.concatenate([vs, x_B * da_B]))
  return value, d_irs, d_bs

def _position_derivatives(obj, scene, h_CI, H_IB):
  """ d(form)/d(position x), d(form)/d(position y). """
  _, d_irs, d_bs = _object_forms(obj, scene, h_CI, H_IB)
  gI = _scene.angle_gradients(scene.p_I, obj.position)[0]
  gB = _scene.angle_gradients(scene.p_B, obj.position)[0]
  return [d_irs * gI[axis] + d_bs * gB[axis] for axis in (0, 1)]

def _observe(form, schedule, N_s):
  """ Applies an affine form to every pilot slot, returning rows in the measurement-part ordering. """
  S = form.H_s @ schedule.Phi_r + form.h_s[:, None]
  C = form.H_c @ schedule.Phi_c + form.h_c[:, None]
  return {'sr': S[:N_s].T.ravel(), 'Br': S[N_s:].T.ravel(), 'c': np.concatenate([C[:N_s].T.ravel(),
    C[N_s:].T.ravel()])}

def _concat(parts):
  return np.concatenate([parts[p] for p in _measurement.PARTS])

def noiseless_mean(est, scene, schedule, h_CI, H_IB):
  """ Noiseless observation of the estimated scene, per measurement part. """
  total = None
  for obj in est.objects:
    value, _, _ = _object_forms(obj, scene, h_CI, H_IB)
    total = value if total is None else total + value
  if total is None:
    return {p: np.zeros(0, dtype=complex) for p in _measurement.PARTS}
  return _observe(total, schedule, scene.N_s)

def mean_jacobian(est, scene, schedule, h_CI, H_IB):
  """ d(noiseless mean)/d(xi), one column per scalar position parameter. """
  cols = []
  for obj in est.objects:
    for form in _position_derivatives(obj, scene, h_CI, H_IB):
      cols.append(_concat(_observe(form, schedule, scene.N_s)))
  if not cols:
    return np.zeros((0, 0), dtype=complex)
  return np.stack(cols, axis=1)

def zero_block_mask(est):
  """ True where the FIM entry belongs to a block that is zero by construction. """
  labels = est.labels
  cls = np.array([c for c, _, _ in labels])
  mask = np.zeros((len(labels), len(labels)), dtype=bool)
  for a, b in ZERO_BLOCKS:
    sel = np.outer(cls == a, cls == b)
    mask |= sel | sel.T
  return mask

@dataclasses.dataclass
class FimMatrix:
  J: np.ndarray
  labels: list

def fim(est, scene, schedule, h_CI, H_IB, noise_power, block_pattern=True):
  """ J = (2/sigma2) Re(D^H D) over all pilots of `schedule` (stack both phases beforehand). """
  D = mean_jacobian(est, scene, schedule, h_CI, H_IB)
  J = (2.0 / noise_power) * np.real(D.conj().T @ D)
  if block_pattern and J.size:
    J[zero_block_mask(est)] = 0.0
  return FimMatrix(J=0.5 * (J + J.T), labels=est.labels)

def crb_trace(J):
  """ tr(J^-1); inf when J stays singular after a relative jitter of 1e-9. """
  J = np.asarray(J, dtype=float)
  n = J.shape[0]
  if n == 0:
    return 0.0
  if np.trace(J) <= 0:
    _getSharedLogger().warning("FIM without information, reporting an infinite CRB")
    return float('inf')
  for jitter in (0.0, 1e-9 * max(np.trace(J) / n, 1e-300)):
    A = J + jitter * np.eye(n)
    try:
      cho = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
      continue
    d = np.abs(np.diag(cho[0]))
    if d.min() == 0 or (d.max() / d.min()) ** 2 > SINGULAR_CONDITION:
      continue
    return float(np.trace(scipy.linalg.cho_solve(cho, np.eye(n))))
  _getSharedLogger().warning("Singular FIM of size %d, reporting an infinite CRB", n)
  return float('inf')

def diagonal_crb(J):
  """ Sum of 1/J_nn, the approximation the reflection design minimizes. """
  d = np.diag(np.asarray(J, dtype=float))
  with np.errstate(divide='ignore'):
    return float(np.sum(np.where(d > 0, 1.0 / d, np.inf)))

def exact_crb_reference(J):
  """ (exact trace CRB, diagonal approximation) for reporting how optimistic the approximation is. """
  return crb_trace(J), diagonal_crb(J)

@dataclasses.dataclass
class FimCoeffs:
  """ J_nn(phi) = C_n + (2/sigma2) sum_t [phi_t^T A_n phi_t^* + 2 Re(phi_t^T b_n)] per partition.

  A_r/b_r act on the phase-II sensing reflection vectors, A_c/b_c on the communication ones; phase-I
  contributions and the phi-independent terms are folded into C.
  """
  A_r: np.ndarray
  b_r: np.ndarray
  A_c: np.ndarray
  b_c: np.ndarray
  C: np.ndarray
  T3: int
  T4: int
  noise_power: float
  labels: list = dataclasses.field(default_factory=list)

  @property
  def n_params(self):
    return len(self.C)

  @property
  def N_p(self):
    return self.A_r.shape[-1]

  def Abar(self, n, partition='r'):
    """ Block-diagonal coefficient matrix over the vectorized schedule, replicated per pilot. """
    A, T = (self.A_r, self.T3) if partition == 'r' else (self.A_c, self.T4)
    return scipy.linalg.block_diag(*([A[n]] * T)) if T else np.zeros((0, 0), dtype=complex)

  def bbar(self, n, partition='r'):
    b, T = (self.b_r, self.T3) if partition == 'r' else (self.b_c, self.T4)
    return np.tile(b[n], T)

  def split(self, phi):
    sched = _measurement.ReflectionSchedule.from_vector(phi, self.N_p, self.T3, self.T4)
    return sched.Phi_r, sched.Phi_c

  def evaluate(self, Phi_r, Phi_c):
    """ Diagonal FIM entries at the given phase-II reflection matrices (N_p x T3, N_p x T4). """
    k = 2.0 / self.noise_power
    out = self.C.astype(float).copy()
    for A, b, Phi in ((self.A_r, self.b_r, Phi_r), (self.A_c, self.b_c, Phi_c)):
      if Phi.shape[1] == 0:
        continue
      quad = np.einsum('it,nij,jt->n', Phi, A, Phi.conj()).real
      lin = 2 * np.einsum('it,ni->n', Phi, b).real
      out += k * (quad + lin)
    return out

  def scaled(self, factor):
    return dataclasses.replace(self, A_r=self.A_r * factor, b_r=self.b_r * factor, A_c=self.A_c * factor,
      b_c=self.b_c * factor, C=self.C * factor)

  def to_json(self):
    def cplx(a):
      return {'re': np.real(a).tolist(), 'im': np.imag(a).tolist()}
    return json.dumps({'A_r': cplx(self.A_r), 'b_r': cplx(self.b_r), 'A_c': cplx(self.A_c), 'b_c': cplx(self.b_c),
      'C': self.C.tolist(), 'T3': self.T3, 'T4': self.T4, 'noise_power': self.noise_power,
      'labels': [list(l) for l in self.labels]}, sort_keys=True)

def approx_fim_coeffs(est, scene, schedule_I, h_CI, H_IB, noise_power, T3, T4):
  """ Coefficients of every diagonal FIM entry as a function of the phase-II schedule. """
  k = 2.0 / noise_power
  A_r, b_r, A_c, b_c, C = [], [], [], [], []
  for obj in est.objects:
    for form in _position_derivatives(obj, scene, h_CI, H_IB):
      A_r.append(form.H_s.T @ form.H_s.conj())
      b_r.append(form.H_s.T @ form.h_s.conj())
      A_c.append(form.H_c.T @ form.H_c.conj())
      b_c.append(form.H_c.T @ form.h_c.conj())
      phase_one = _concat(_observe(form, schedule_I, scene.N_s))
      C.append(k * (np.vdot(phase_one, phase_one).real + T3 * np.vdot(form.h_s, form.h_s).real
        + T4 * np.vdot(form.h_c, form.h_c).real))
  N_p = scene.N_p
  shape = (len(C), N_p, N_p)

  def arr(v, s):
    return np.array(v).reshape(s) if v else np.zeros(s, dtype=complex)

  return FimCoeffs(A_r=arr(A_r, shape), b_r=arr(b_r, shape[:2]), A_c=arr(A_c, shape), b_c=arr(b_c, shape[:2]),
    C=np.array(C, dtype=float), T3=T3, T4=T4, noise_power=noise_power, labels=est.labels)
