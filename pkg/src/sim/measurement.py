"""
measurement.py
---

  Sparse dictionaries over the location grids, IRS reflection schedules, assembly of the block measurement
  matrix F(dr, dz) and noisy observation synthesis for both phases.

  The sparse vector is laid out as x = [x_ITS; x_CTS; x_ITB; x_CTB; x_BNL; x_INL; x_BL; x_IL] with block sizes
  (Q, Q, Q, Q, Q, Q, P, P). F = blkdiag(F_sr, F_Br, F_c) acts part-wise on [x_TS; x_TB; x_c].

"""

import os
import struct
import dataclasses

import numpy as np
import scipy.linalg

import src.sim.scene as _scene
import src.sim.channel as _channel
import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

BLOCKS = ('ITS', 'CTS', 'ITB', 'CTB', 'BNL', 'INL', 'BL', 'IL')
PARTS = ('sr', 'Br', 'c')
PART_BLOCKS = {'sr': ('ITS', 'CTS'), 'Br': ('ITB', 'CTB'), 'c': ('BNL', 'INL', 'BL', 'IL')}
BLOCK_PART = {j: part for part, blocks in PART_BLOCKS.items() for j in blocks}
# Blocks indexed over the r grid; the remaining two live on the z grid.
R_BLOCKS = ('ITS', 'CTS', 'ITB', 'CTB', 'BNL', 'INL')
Z_BLOCKS = ('BL', 'IL')

PHASE_I = 'I'
PHASE_II = 'II'

_DUMP_MAGIC = b'JSCE'
_DUMP_VERSION = 1

def block_sizes(Q, P):
  return {j: (Q if j in R_BLOCKS else P) for j in BLOCKS}

def block_slices(Q, P):
  """ Global slices of each block inside x. """
  out = {}
  start = 0
  for j, n in block_sizes(Q, P).items():
    out[j] = slice(start, start + n)
    start += n
  return out

def part_block_slices(Q, P):
  """ Column slices of each block inside its own part matrix. """
  out = {}
  for part, blocks in PART_BLOCKS.items():
    start = 0
    for j in blocks:
      n = Q if j in R_BLOCKS else P
      out[j] = slice(start, start + n)
      start += n
  return out

def part_slices(Q, P):
  sl = block_slices(Q, P)
  return {part: slice(sl[blocks[0]].start, sl[blocks[-1]].stop) for part, blocks in PART_BLOCKS.items()}

@dataclasses.dataclass
class ReflectionSchedule:
  Phi_r: np.ndarray
  Phi_c: np.ndarray
  phase: str = PHASE_I

  def __post_init__(self):
    self.Phi_r = np.asarray(self.Phi_r, dtype=complex)
    self.Phi_c = np.asarray(self.Phi_c, dtype=complex)
    assert self.Phi_r.ndim == 2 and self.Phi_c.ndim == 2, "Schedules must be N_p x T matrices"
    assert np.allclose(np.abs(self.Phi_r), 1.0, atol=1e-9) and np.allclose(np.abs(self.Phi_c), 1.0, atol=1e-9), \
      "Reflection coefficients must be unit modulus"

  @property
  def T_s(self):
    return self.Phi_r.shape[1]

  @property
  def T_c(self):
    return self.Phi_c.shape[1]

  def stack(self, other):
    """ Pilot columns of self followed by those of other. """
    return ReflectionSchedule(np.hstack([self.Phi_r, other.Phi_r]), np.hstack([self.Phi_c, other.Phi_c]),
      phase=self.phase + '+' + other.phase)

  @classmethod
  def from_vector(cls, phi, N_p, T_s, T_c, phase=PHASE_II):
    """ Inverse of vectorize(): column-major vec(Phi_r) followed by vec(Phi_c). """
    phi = np.asarray(phi)
    n_r = N_p * T_s
    return cls(phi[:n_r].reshape(T_s, N_p).T, phi[n_r:].reshape(T_c, N_p).T, phase=phase)

  def vectorize(self):
    return np.concatenate([self.Phi_r.T.ravel(), self.Phi_c.T.ravel()])

def scanning_codebook(N_p, T, coverage=(np.pi / 2, np.pi)):
  """ T phase-only beams whose main lobes partition the angular interval `coverage` (radians).

  Each beam is a linear-chirp across the aperture, sweeping its sector in u = cos(theta); gains refer to
  |sum_n w_n exp(j pi n u)|.
  """
  if T < 1 or T & (T - 1):
    raise _errors.ConfigurationError("Codebook size must be a power of 2, got '{}'".format(T))
  lo, hi = coverage
  edges = np.linspace(lo, hi, T + 1)
  n = np.arange(N_p)
  W = np.ones((N_p, T), dtype=complex)
  if N_p == 1:
    return W
  for t in range(T):
    u_a, u_b = np.cos(edges[t]), np.cos(edges[t + 1])
    W[:, t] = np.exp(-1j * np.pi * (u_a * n + (u_b - u_a) * n ** 2 / (2 * (N_p - 1))))
  return W

def beam_gain(W, thetas):
  """ |sum_n w_n exp(j pi n cos(theta))|^2 per (angle, beam). """
  A = _channel.steering(W.shape[0], thetas).conj()
  return np.abs(A.T @ W) ** 2

def phase_one_schedule(scene, h_CI, theta_IB, T_s, T_c, coverage=(np.pi / 2, np.pi)):
  """ Scanning schedule with the controller near-field phase (sensing) and the IRS-BS steering (CE) compensated. """
  W_r = scanning_codebook(scene.N_p, T_s, coverage)
  W_c = scanning_codebook(scene.N_p, T_c, coverage)
  Phi_r = np.exp(-1j * np.angle(h_CI))[:, None] * W_r
  Phi_c = _channel.steering(scene.N_p, theta_IB)[:, None] * W_c.conj()
  return ReflectionSchedule(Phi_r, Phi_c, phase=PHASE_I)

@dataclasses.dataclass
class SparseDictionaries:
  A_s_r: np.ndarray
  A_I_r: np.ndarray
  A_B_r: np.ndarray
  A_s_z: np.ndarray
  A_I_z: np.ndarray
  A_B_z: np.ndarray
  theta_I_r: np.ndarray
  theta_B_r: np.ndarray
  theta_I_z: np.ndarray
  theta_B_z: np.ndarray

def _angles(scene, pts):
  return (_scene.angles_to(scene.p_I, scene.theta_I, pts, _scene.IRS),
          _scene.angles_to(scene.p_B, scene.theta_B, pts, _scene.BS))

def build_dictionaries(scene, grids, offsets):
  pr = grids.r + offsets.dr
  pz = grids.z + offsets.dz
  tI_r, tB_r = _angles(scene, pr)
  tI_z, tB_z = _angles(scene, pz)
  st = _channel.steering
  return SparseDictionaries(
    A_s_r=st(scene.N_s, tI_r), A_I_r=st(scene.N_p, tI_r), A_B_r=st(scene.M, tB_r),
    A_s_z=st(scene.N_s, tI_z), A_I_z=st(scene.N_p, tI_z), A_B_z=st(scene.M, tB_z),
    theta_I_r=tI_r, theta_B_r=tB_r, theta_I_z=tI_z, theta_B_z=tB_z)

def dictionary_derivatives(scene, dicts):
  """ d/dtheta of each dictionary column at the dictionary's own angles. """
  sd = _channel.steering_derivative
  return SparseDictionaries(
    A_s_r=sd(scene.N_s, dicts.theta_I_r), A_I_r=sd(scene.N_p, dicts.theta_I_r), A_B_r=sd(scene.M, dicts.theta_B_r),
    A_s_z=sd(scene.N_s, dicts.theta_I_z), A_I_z=sd(scene.N_p, dicts.theta_I_z), A_B_z=sd(scene.M, dicts.theta_B_z),
    theta_I_r=dicts.theta_I_r, theta_B_r=dicts.theta_B_r, theta_I_z=dicts.theta_I_z, theta_B_z=dicts.theta_B_z)

@dataclasses.dataclass
class MeasurementModel:
  F_sr: np.ndarray
  F_Br: np.ndarray
  F_c: np.ndarray
  Q: int
  P: int

  @property
  def parts(self):
    return {'sr': self.F_sr, 'Br': self.F_Br, 'c': self.F_c}

  @property
  def F(self):
    return scipy.linalg.block_diag(self.F_sr, self.F_Br, self.F_c)

  @property
  def layout(self):
    return block_slices(self.Q, self.P)

  def block(self, j):
    """ Columns of block j inside its part matrix. """
    return self.parts[BLOCK_PART[j]][:, part_block_slices(self.Q, self.P)[j]]

  def apply(self, x):
    sl = part_slices(self.Q, self.P)
    return np.concatenate([F @ x[sl[part]] for part, F in self.parts.items()])

  def dump(self, path):
    dump_array(path, self.F)

def _sensing_part(Phi_t, A_I, A_rx):
  """ [Phi_t^T conj(A_I) (.) A_rx, 1_T (x) A_rx] with the column-wise Khatri-Rao product. """
  T = Phi_t.shape[1]
  ones = np.ones((T, 1))
  refl = scipy.linalg.khatri_rao(Phi_t.T @ A_I.conj(), A_rx) if T else np.zeros((0, A_rx.shape[1]), dtype=complex)
  direct = np.kron(ones, A_rx)
  return np.hstack([refl, direct])

def _comm_part(Phi_c, H_IB, A_s_r, A_I_r, A_B_r, A_s_z, A_I_z, A_B_z):
  T = Phi_c.shape[1]
  ones = np.ones((T, 1))
  Q, P = A_s_r.shape[1], A_s_z.shape[1]
  F_sc = np.hstack([np.zeros((A_s_r.shape[0] * T, Q)), np.kron(ones, A_s_r),
    np.zeros((A_s_z.shape[0] * T, P)), np.kron(ones, A_s_z)])
  refl_r = np.vstack([H_IB @ (Phi_c[:, t:t + 1] * A_I_r) for t in range(T)]) if T \
    else np.zeros((0, Q), dtype=complex)
  refl_z = np.vstack([H_IB @ (Phi_c[:, t:t + 1] * A_I_z) for t in range(T)]) if T \
    else np.zeros((0, P), dtype=complex)
  F_Bc = np.hstack([np.kron(ones, A_B_r), refl_r, np.kron(ones, A_B_z), refl_z])
  return np.vstack([F_sc, F_Bc]).astype(complex)

def assemble_F(dicts, schedule, h_CI, H_IB):
  Phi_t = h_CI[:, None] * schedule.Phi_r
  M = dicts.A_B_r.shape[0]
  assert H_IB.shape == (M, dicts.A_I_r.shape[0]), \
    "H_IB shape '{}' does not match arrays ({}, {})".format(H_IB.shape, M, dicts.A_I_r.shape[0])
  assert schedule.Phi_r.shape[0] == h_CI.shape[0], "Schedule and h_CI disagree on N_p"
  F_sr = _sensing_part(Phi_t, dicts.A_I_r, dicts.A_s_r)
  F_Br = _sensing_part(Phi_t, dicts.A_I_r, dicts.A_B_r)
  F_c = _comm_part(schedule.Phi_c, H_IB, dicts.A_s_r, dicts.A_I_r, dicts.A_B_r,
    dicts.A_s_z, dicts.A_I_z, dicts.A_B_z)
  return MeasurementModel(F_sr=F_sr, F_Br=F_Br, F_c=F_c, Q=dicts.A_s_r.shape[1], P=dicts.A_s_z.shape[1])

def assemble_F_derivatives(dicts, ddicts, schedule, h_CI, H_IB):
  """ Column-wise derivatives of each part w.r.t. the IRS angle and the BS angle of the column's grid point.

  Returns {part: (dF_dthetaI, dF_dthetaB)} with the shapes of the part matrices.
  """
  Phi_t = h_CI[:, None] * schedule.Phi_r
  T = Phi_t.shape[1]
  ones = np.ones((T, 1))

  def kr(a, b):
    return scipy.linalg.khatri_rao(a, b) if T else np.zeros((0, b.shape[1]), dtype=complex)

  out = {}
  for part, A_rx, dA_rx in (('sr', dicts.A_s_r, ddicts.A_s_r), ('Br', dicts.A_B_r, ddicts.A_B_r)):
    coef = Phi_t.T @ dicts.A_I_r.conj()
    dcoef = Phi_t.T @ ddicts.A_I_r.conj()
    Z = np.zeros_like(np.kron(ones, A_rx), dtype=complex)
    if part == 'sr':
      # Sensors share the IRS angle.
      dI = np.hstack([kr(dcoef, A_rx) + kr(coef, dA_rx), np.kron(ones, dA_rx)])
      dB = np.zeros_like(dI)
    else:
      dI = np.hstack([kr(dcoef, A_rx), Z])
      dB = np.hstack([kr(coef, dA_rx), np.kron(ones, dA_rx)])
    out[part] = (dI, dB)

  zr = np.zeros_like(dicts.A_s_r)
  zrB = np.zeros_like(dicts.A_B_r)
  zz = np.zeros_like(dicts.A_s_z)
  zzB = np.zeros_like(dicts.A_B_z)
  # IRS-angle dependence: INL and IL columns through A_s and A_I.
  dI_c = _comm_part(schedule.Phi_c, H_IB, ddicts.A_s_r, ddicts.A_I_r, zrB, ddicts.A_s_z, ddicts.A_I_z, zzB)
  # BS-angle dependence: BNL and BL columns through A_B.
  dB_c = _comm_part(schedule.Phi_c, H_IB, zr, np.zeros_like(dicts.A_I_r), ddicts.A_B_r,
    zz, np.zeros_like(dicts.A_I_z), ddicts.A_B_z)
  out['c'] = (dI_c, dB_c)
  return out

@dataclasses.dataclass
class ModelBuilder:
  """ Everything needed to rebuild F at new offsets for a fixed geometry and schedule. """
  scene: object
  grids: object
  schedule: ReflectionSchedule
  h_CI: np.ndarray
  H_IB: np.ndarray

  def build(self, offsets):
    return assemble_F(build_dictionaries(self.scene, self.grids, offsets), self.schedule, self.h_CI, self.H_IB)

  def derivatives(self, offsets):
    """ Part derivatives w.r.t. angles plus the angle gradients of every grid point. """
    dicts = build_dictionaries(self.scene, self.grids, offsets)
    dF = assemble_F_derivatives(dicts, dictionary_derivatives(self.scene, dicts), self.schedule, self.h_CI,
      self.H_IB)
    pr = self.grids.r + offsets.dr
    pz = self.grids.z + offsets.dz
    grads = {
      'I_r': _scene.angle_gradients(self.scene.p_I, pr), 'B_r': _scene.angle_gradients(self.scene.p_B, pr),
      'I_z': _scene.angle_gradients(self.scene.p_I, pz), 'B_z': _scene.angle_gradients(self.scene.p_B, pz),
    }
    return dF, grads

  def with_schedule(self, schedule):
    return dataclasses.replace(self, schedule=schedule)

@dataclasses.dataclass
class Observation:
  y_sr: np.ndarray
  y_Br: np.ndarray
  y_sc: np.ndarray
  y_Bc: np.ndarray
  phase: str = PHASE_I

  @property
  def y_c(self):
    return np.concatenate([self.y_sc, self.y_Bc])

  @property
  def parts(self):
    return {'sr': self.y_sr, 'Br': self.y_Br, 'c': self.y_c}

  @property
  def y(self):
    return np.concatenate([self.y_sr, self.y_Br, self.y_c])

  def scaled(self, factor):
    return Observation(self.y_sr * factor, self.y_Br * factor, self.y_sc * factor, self.y_Bc * factor, self.phase)

  def stack(self, other):
    """ Matches ReflectionSchedule.stack: pilot slots of self followed by those of other. """
    return Observation(np.concatenate([self.y_sr, other.y_sr]), np.concatenate([self.y_Br, other.y_Br]),
      np.concatenate([self.y_sc, other.y_sc]), np.concatenate([self.y_Bc, other.y_Bc]),
      phase=self.phase + '+' + other.phase)

  def dump(self, path):
    dump_array(path, self.y)

def synthesize_observation(channels, schedule, scene, rng, noiseless=False):
  """ Per-symbol simulation of the received pilots with s(t) = u(t) = 1 at transmit power scene.tx_power. """
  amp = np.sqrt(scene.tx_power)
  sigma = 0.0 if noiseless else np.sqrt(scene.noise_power)
  ch = channels

  def noise(n):
    return sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)

  y_sr, y_Br, y_sc, y_Bc = [], [], [], []
  for t in range(schedule.T_s):
    refl = schedule.Phi_r[:, t] * ch.h_CI
    echo_s = sum((H @ refl + h for H, h in zip(ch.H_ITS, ch.h_CTS)), np.zeros(scene.N_s, dtype=complex))
    echo_B = sum((H @ refl + h for H, h in zip(ch.H_ITB, ch.h_CTB)), np.zeros(scene.M, dtype=complex))
    interference = ch.H_IB @ refl + ch.h_CB
    y_sr.append(amp * echo_s + noise(scene.N_s))
    received_B = amp * (echo_B + interference) + noise(scene.M)
    y_Br.append(received_B - amp * interference)
  for t in range(schedule.T_c):
    y_sc.append(amp * ch.h_SU + noise(scene.N_s))
    y_Bc.append(amp * (ch.h_BU + ch.H_IB @ (schedule.Phi_c[:, t] * ch.h_IU)) + noise(scene.M))

  def cat(parts):
    return np.concatenate(parts) if parts else np.zeros(0, dtype=complex)
  return Observation(cat(y_sr), cat(y_Br), cat(y_sc), cat(y_Bc),
    phase=schedule.phase)

def sparse_ground_truth(channels, grids, index_map, scene):
  """ Path gains (with the pilot amplitude folded in) placed at their grid indices. """
  amp = np.sqrt(scene.tx_power)
  Q, P = grids.Q, grids.P
  sl = block_slices(Q, P)
  x = np.zeros(6 * Q + 2 * P, dtype=complex)
  ch = channels
  for k, q in enumerate(index_map.q_T):
    x[sl['ITS']][q] = amp * ch.alpha_ITS[k]
    x[sl['CTS']][q] = amp * ch.alpha_CTS[k]
    x[sl['ITB']][q] = amp * ch.alpha_ITB[k]
    x[sl['CTB']][q] = amp * ch.alpha_CTB[k]
  norm = amp * np.sqrt(1.0 / (len(ch.alpha_IU)))
  for l, q in enumerate(index_map.q_S):
    x[sl['BNL']][q] = norm * ch.alpha_BU[l + 1]
    x[sl['INL']][q] = norm * ch.alpha_IU[l + 1]
  x[sl['BL']][index_map.p_u] = norm * ch.alpha_BU[0]
  x[sl['IL']][index_map.p_u] = norm * ch.alpha_IU[0]
  return x

def dump_array(path, a):
  """ Versioned binary layout: magic, version, ndim, dims, then row-major complex128. """
  a = np.ascontiguousarray(a, dtype=np.complex128)
  with open(path, 'wb') as fout:
    fout.write(_DUMP_MAGIC)
    fout.write(struct.pack('<II', _DUMP_VERSION, a.ndim))
    fout.write(struct.pack('<' + 'Q' * a.ndim, *a.shape))
    fout.write(a.tobytes(order='C'))

def load_array(path):
  with open(path, 'rb') as fin:
    magic = fin.read(4)
    assert magic == _DUMP_MAGIC, "Not a dump file: '{}'".format(path)
    version, ndim = struct.unpack('<II', fin.read(8))
    assert version == _DUMP_VERSION, "Unsupported dump version '{}'".format(version)
    shape = struct.unpack('<' + 'Q' * ndim, fin.read(8 * ndim))
    return np.frombuffer(fin.read(), dtype=np.complex128).reshape(shape).copy()
