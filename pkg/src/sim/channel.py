"""
channel.py
---

  Physical channel synthesis: ULA steering vectors, the near-field controller link, large-scale path losses and
  every sensing and communication channel of one trial.

"""

import os
import json
import dataclasses

import numpy as np

import src.sim.scene as _scene
import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

IRS_TARGET_SENSOR = 'its'
CTRL_TARGET_SENSOR = 'cts'
CTRL_TARGET_BS = 'ctb'
IRS_TARGET_BS = 'itb'

@dataclasses.dataclass(frozen=True)
class ArraySpec:
  size: int
  # Element spacing in wavelengths; the steering model assumes half-wavelength ULAs.
  spacing: float = 0.5

  def __post_init__(self):
    assert self.size >= 1, "Array size must be >= 1, got '{}'".format(self.size)
    assert self.spacing == 0.5, "Only half-wavelength ULAs are supported"

def steering(n, theta):
  """ ULA response exp(-j pi i cos(theta)), i = 0..n-1. Array-valued theta gives one column per angle. """
  i = np.arange(ArraySpec(n).size)
  theta = np.asarray(theta, dtype=float)
  return np.exp(-1j * np.pi * np.multiply.outer(i, np.cos(theta)))

def steering_derivative(n, theta):
  """ d steering / d theta = j pi i sin(theta) * steering. """
  i = np.arange(n)
  theta = np.asarray(theta, dtype=float)
  return 1j * np.pi * np.multiply.outer(i, np.sin(theta)) * steering(n, theta)

def irs_element_positions(scene):
  n = np.arange(ArraySpec(scene.N_p).size)
  direction = np.array([np.cos(scene.theta_I), np.sin(scene.theta_I)])
  return np.asarray(scene.p_I)[None, :] + (n * scene.wavelength / 2)[:, None] * direction[None, :]

def near_field_hci(p_c, element_positions, wavelength):
  d = np.linalg.norm(np.asarray(element_positions) - np.asarray(p_c)[None, :], axis=1)
  if np.any(d <= 0):
    raise _errors.DomainError("Controller coincides with a reflecting element")
  return wavelength / (4 * np.pi * d) * np.exp(-2j * np.pi * d / wavelength)

def _dist(a, b):
  d = float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
  if d <= 0:
    raise _errors.DomainError("Zero distance between '{}' and '{}'".format(list(a), list(b)))
  return d

def path_loss(link, scene, p, kappa=1.0):
  """ Large-scale amplitude G of a radar echo link through a target at p. """
  if not kappa > 0:
    raise _errors.DomainError("RCS must be positive, got '{}'".format(kappa))
  d_I = _dist(scene.p_I, p)
  if link == IRS_TARGET_SENSOR:
    d2 = d_I ** 4
  elif link == CTRL_TARGET_SENSOR:
    d2 = _dist(scene.p_c, p) ** 2 * d_I ** 2
  elif link == CTRL_TARGET_BS:
    d2 = _dist(scene.p_c, p) ** 2 * _dist(scene.p_B, p) ** 2
  else:
    assert link == IRS_TARGET_BS, "Unknown link '{}'".format(link)
    d2 = d_I ** 2 * _dist(scene.p_B, p) ** 2
  return np.sqrt(scene.wavelength ** 2 * kappa / (64 * np.pi ** 3 * d2))

def comm_path_loss(scene, distance, los=True):
  """ Amplitude of a distance-power law referenced to free space at 1 m. """
  if not distance > 0:
    raise _errors.DomainError("Zero link distance")
  exponent = scene.pl_exp_los if los else scene.pl_exp_nlos
  pl_db = 20 * np.log10(4 * np.pi / scene.wavelength) + 10 * exponent * np.log10(distance)
  return 10 ** (-pl_db / 20)

def comm_path_losses(scene, truth, anchor):
  """ Amplitudes per communication path toward anchor, LoS first then one per scatterer. """
  out = [comm_path_loss(scene, _dist(truth.user, anchor), los=True)]
  for p_s in truth.scatterers:
    out.append(comm_path_loss(scene, _dist(truth.user, p_s) + _dist(p_s, anchor), los=False))
  return np.array(out)

def _cn(rng, size):
  return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2)

def los_channels(scene):
  """ Deterministic IRS-BS and controller-BS line-of-sight links. """
  lam = scene.wavelength
  d_IB = _dist(scene.p_I, scene.p_B)
  theta_BI = _scene.angle_to(scene.p_B, scene.theta_B, scene.p_I, _scene.BS)
  theta_IB = _scene.angle_to(scene.p_I, scene.theta_I, scene.p_B, _scene.IRS)
  H_IB = (lam / (4 * np.pi * d_IB)) * np.exp(-2j * np.pi * d_IB / lam) \
    * np.outer(steering(scene.M, theta_BI), steering(scene.N_p, theta_IB).conj())
  d_CB = _dist(scene.p_c, scene.p_B)
  theta_BC = _scene.angle_to(scene.p_B, scene.theta_B, scene.p_c, _scene.BS)
  h_CB = (lam / (4 * np.pi * d_CB)) * np.exp(-2j * np.pi * d_CB / lam) * steering(scene.M, theta_BC)
  return H_IB, h_CB, theta_IB

def _complex_dump(a):
  a = np.asarray(a)
  return {'shape': list(a.shape), 'data': np.stack([a.real, a.imag], axis=-1).ravel().tolist()}

@dataclasses.dataclass
class ChannelSet:
  h_CI: np.ndarray
  H_ITS: np.ndarray
  h_CTS: np.ndarray
  H_ITB: np.ndarray
  h_CTB: np.ndarray
  h_IU: np.ndarray
  h_BU: np.ndarray
  h_SU: np.ndarray
  H_IB: np.ndarray
  h_CB: np.ndarray

  alpha_ITS: np.ndarray
  alpha_CTS: np.ndarray
  alpha_ITB: np.ndarray
  alpha_CTB: np.ndarray
  # Index 0 is the LoS path, index l the path through scatterer l.
  alpha_IU: np.ndarray
  alpha_BU: np.ndarray

  theta_IT: np.ndarray
  theta_BT: np.ndarray
  theta_IU: np.ndarray
  theta_BU: np.ndarray
  theta_IB: float = 0.0

  def to_json(self):
    doc = {}
    for f in dataclasses.fields(self):
      v = getattr(self, f.name)
      doc[f.name] = _complex_dump(v) if np.iscomplexobj(v) else np.asarray(v).tolist()
    return json.dumps(doc, sort_keys=True)

def generate_channels(scene, truth, rng, fading=True):
  """ Draws all channels of a trial. With fading disabled every small-scale coefficient is 1. """
  K, L = truth.K, truth.L
  draw = (lambda n: _cn(rng, n)) if fading else (lambda n: np.ones(n, dtype=complex))

  h_CI = near_field_hci(scene.p_c, irs_element_positions(scene), scene.wavelength)
  H_IB, h_CB, theta_IB = los_channels(scene)

  theta_IT = _scene.angles_to(scene.p_I, scene.theta_I, truth.targets, _scene.IRS)
  theta_BT = _scene.angles_to(scene.p_B, scene.theta_B, truth.targets, _scene.BS)
  G = {link: np.array([path_loss(link, scene, p, kappa) for p, kappa in zip(truth.targets, truth.rcs)])
    for link in (IRS_TARGET_SENSOR, CTRL_TARGET_SENSOR, IRS_TARGET_BS, CTRL_TARGET_BS)}
  alpha_ITS = draw(K) * G[IRS_TARGET_SENSOR]
  alpha_CTS = draw(K) * G[CTRL_TARGET_SENSOR]
  alpha_ITB = draw(K) * G[IRS_TARGET_BS]
  alpha_CTB = draw(K) * G[CTRL_TARGET_BS]

  A_s_T = steering(scene.N_s, theta_IT)
  A_I_T = steering(scene.N_p, theta_IT)
  A_B_T = steering(scene.M, theta_BT)
  H_ITS = np.stack([alpha_ITS[k] * np.outer(A_s_T[:, k], A_I_T[:, k].conj()) for k in range(K)]) \
    if K else np.zeros((0, scene.N_s, scene.N_p), dtype=complex)
  H_ITB = np.stack([alpha_ITB[k] * np.outer(A_B_T[:, k], A_I_T[:, k].conj()) for k in range(K)]) \
    if K else np.zeros((0, scene.M, scene.N_p), dtype=complex)
  h_CTS = (A_s_T * alpha_CTS[None, :]).T
  h_CTB = (A_B_T * alpha_CTB[None, :]).T

  path_pts = np.vstack([truth.user[None, :], truth.scatterers])
  theta_IU = _scene.angles_to(scene.p_I, scene.theta_I, path_pts, _scene.IRS)
  theta_BU = _scene.angles_to(scene.p_B, scene.theta_B, path_pts, _scene.BS)
  alpha_IU = draw(L + 1) * comm_path_losses(scene, truth, scene.p_I)
  alpha_BU = draw(L + 1) * comm_path_losses(scene, truth, scene.p_B)
  norm = np.sqrt(1.0 / (L + 1))
  h_IU = norm * steering(scene.N_p, theta_IU) @ alpha_IU
  h_SU = norm * steering(scene.N_s, theta_IU) @ alpha_IU
  h_BU = norm * steering(scene.M, theta_BU) @ alpha_BU

  return ChannelSet(h_CI=h_CI, H_ITS=H_ITS, h_CTS=h_CTS, H_ITB=H_ITB, h_CTB=h_CTB,
    h_IU=h_IU, h_BU=h_BU, h_SU=h_SU, H_IB=H_IB, h_CB=h_CB,
    alpha_ITS=alpha_ITS, alpha_CTS=alpha_CTS, alpha_ITB=alpha_ITB, alpha_CTB=alpha_CTB,
    alpha_IU=alpha_IU, alpha_BU=alpha_BU,
    theta_IT=theta_IT, theta_BT=theta_BT, theta_IU=theta_IU, theta_BU=theta_BU, theta_IB=theta_IB)
