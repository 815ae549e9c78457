"""
scene.py
---

  Geometry of the 2D world: anchor positions and orientations, location grids over the sensing regions,
  off-grid position offsets and angle computations. Random scene generation places block targets and scatterers
  (two vertically adjacent grids each) with a controlled number of shared objects.

"""

import os
import json
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

SPEED_OF_LIGHT = 299792458.0
IRS = 'irs'
BS = 'bs'

MAX_SCENE_ATTEMPTS = 100
_SPACING_RTOL = 1e-9

@dataclasses.dataclass
class Rect:
  """ Axis-aligned rectangle given by its center and extents (meters). """
  center: tuple
  width: float
  height: float

  @property
  def xmin(self):
    return self.center[0] - self.width / 2

  @property
  def xmax(self):
    return self.center[0] + self.width / 2

  @property
  def ymin(self):
    return self.center[1] - self.height / 2

  @property
  def ymax(self):
    return self.center[1] + self.height / 2

  def contains(self, p, tol=1e-9):
    return (self.xmin - tol <= p[0] <= self.xmax + tol) and (self.ymin - tol <= p[1] <= self.ymax + tol)

@dataclasses.dataclass
class SceneConfig:
  p_B: tuple = (-22.5, 0.4)
  p_I: tuple = (22.5, 0.4)
  p_c: tuple = (22.4, 0.3)
  theta_B: float = 0.0
  theta_I: float = -np.pi
  soi_R: Rect = dataclasses.field(default_factory=lambda: Rect((0.0, 22.5), 40.0, 40.0))
  soi_Ru: Rect = dataclasses.field(default_factory=lambda: Rect((0.0, 12.5), 15.0, 15.0))
  wavelength: float = SPEED_OF_LIGHT / 28e9
  noise_power: float = 1e-13

  M: int = 32
  N_p: int = 48
  N_s: int = 32

  # P_c = P_u = P_T.
  tx_power: float = 1e-2
  rcs: float = 1.0
  pl_exp_los: float = 2.2
  pl_exp_nlos: float = 2.8

  def __post_init__(self):
    if isinstance(self.soi_R, dict):
      self.soi_R = Rect(**self.soi_R)
    if isinstance(self.soi_Ru, dict):
      self.soi_Ru = Rect(**self.soi_Ru)
    self.p_B = tuple(float(v) for v in self.p_B)
    self.p_I = tuple(float(v) for v in self.p_I)
    self.p_c = tuple(float(v) for v in self.p_c)

    if not self.wavelength > 0:
      raise _errors.ConfigurationError("Wavelength must be positive, got '{}'".format(self.wavelength))
    if not self.noise_power > 0:
      raise _errors.ConfigurationError("Noise power must be positive, got '{}'".format(self.noise_power))
    if min(self.M, self.N_p, self.N_s) < 1:
      raise _errors.ConfigurationError("Array sizes must be >= 1: M={} N_p={} N_s={}".format(
        self.M, self.N_p, self.N_s))
    R, Ru = self.soi_R, self.soi_Ru
    if Ru.xmin < R.xmin - 1e-9 or Ru.xmax > R.xmax + 1e-9 or Ru.ymax > R.ymax + 1e-9:
      raise _errors.ConfigurationError("User region must lie within or below the sensing region")

  def to_dict(self):
    return dataclasses.asdict(self)

  @classmethod
  def from_dict(cls, d):
    return cls(**d)

@dataclasses.dataclass
class GridSpec:
  r: np.ndarray
  z: np.ndarray
  # Rows per column of the r lattice, i.e. the column stride of the MRF neighborhood.
  grid_cols_y: int
  spacing_r: tuple
  spacing_z: tuple
  z_cols_y: int = 1

  @property
  def Q(self):
    return self.r.shape[0]

  @property
  def P(self):
    return self.z.shape[0]

  @property
  def grid_cols_x(self):
    return self.Q // self.grid_cols_y

  @property
  def clamp_r(self):
    return np.array(self.spacing_r) / 2

  @property
  def clamp_z(self):
    return np.array(self.spacing_z) / 2

  def neighbors(self, q):
    """ 4-connected neighbors of r-grid index q, without wraparound. """
    Qy = self.grid_cols_y
    col, row = divmod(q, Qy)
    out = []
    if row > 0:
      out.append(q - 1)
    if row < Qy - 1:
      out.append(q + 1)
    if col > 0:
      out.append(q - Qy)
    if col < self.grid_cols_x - 1:
      out.append(q + Qy)
    return out

@dataclasses.dataclass
class GroundTruth:
  targets: np.ndarray
  scatterers: np.ndarray
  user: np.ndarray
  # (k, l) pairs naming target k and scatterer l as the same physical object.
  overlap_pairs: list = dataclasses.field(default_factory=list)
  rcs: np.ndarray = None

  def __post_init__(self):
    self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 2)
    self.scatterers = np.asarray(self.scatterers, dtype=float).reshape(-1, 2)
    self.user = np.asarray(self.user, dtype=float).reshape(2)
    self.overlap_pairs = [tuple(int(v) for v in pair) for pair in self.overlap_pairs]
    if self.rcs is None:
      self.rcs = np.ones(self.K)
    self.rcs = np.asarray(self.rcs, dtype=float).reshape(self.K)
    assert 0 <= self.overlap_count <= min(self.K, self.L), \
      "Overlap count '{}' out of range for K={} L={}".format(self.overlap_count, self.K, self.L)

  @property
  def K(self):
    return self.targets.shape[0]

  @property
  def L(self):
    return self.scatterers.shape[0]

  @property
  def overlap_count(self):
    return len(self.overlap_pairs)

  def to_json(self):
    return json.dumps({
      'targets': self.targets.tolist(),
      'scatterers': self.scatterers.tolist(),
      'user': self.user.tolist(),
      'overlap_pairs': [list(p) for p in self.overlap_pairs],
      'rcs': self.rcs.tolist(),
    }, sort_keys=True)

  @classmethod
  def from_json(cls, s):
    return cls(**json.loads(s))

@dataclasses.dataclass
class OffsetState:
  dr: np.ndarray
  dz: np.ndarray

  def copy(self):
    return OffsetState(self.dr.copy(), self.dz.copy())

  @classmethod
  def zeros(cls, grids):
    return cls(np.zeros((grids.Q, 2)), np.zeros((grids.P, 2)))

  def clamped(self, grids):
    return OffsetState(np.clip(self.dr, -grids.clamp_r, grids.clamp_r), np.clip(self.dz, -grids.clamp_z, grids.clamp_z))

@dataclasses.dataclass
class IndexMap:
  q_T: np.ndarray
  q_S: np.ndarray
  p_u: int

def scene_to_json(scene, truth=None):
  doc = {'scene': scene.to_dict()}
  if truth is not None:
    doc['truth'] = json.loads(truth.to_json())
  return json.dumps(doc, sort_keys=True)

def scene_from_json(s):
  doc = json.loads(s)
  scene = SceneConfig.from_dict(doc['scene'])
  truth = GroundTruth(**doc['truth']) if 'truth' in doc else None
  return scene, truth

def _factor_lattice(rect, count):
  """ Returns (nx, ny) with nx*ny = count and equal spacing along both axes. """
  if count == 1:
    return 1, 1
  for nx in range(1, count + 1):
    if count % nx:
      continue
    ny = count // nx
    dx, dy = rect.width / nx, rect.height / ny
    if abs(dx - dy) <= _SPACING_RTOL * max(dx, dy):
      return nx, ny
  raise _errors.ConfigurationError(
    "Grid count '{}' cannot be factored into a uniform lattice over a {}x{} region".format(
      count, rect.width, rect.height))

def _lattice(rect, count):
  nx, ny = _factor_lattice(rect, count)
  dx, dy = rect.width / nx, rect.height / ny
  xs = rect.xmin + (np.arange(nx) + 0.5) * dx
  ys = rect.ymin + (np.arange(ny) + 0.5) * dy
  # Column-major: q = col * ny + row.
  pts = np.array([[x, y] for x in xs for y in ys])
  return pts, ny, (dx, dy)

def build_grids(soi_R, soi_Ru, Q, P):
  if Q < 1 or P < 1:
    raise _errors.ConfigurationError("Grid counts must be positive: Q={} P={}".format(Q, P))
  r, Qy, spacing_r = _lattice(soi_R, Q)
  z, Py, spacing_z = _lattice(soi_Ru, P)
  return GridSpec(r=r, z=z, grid_cols_y=Qy, spacing_r=spacing_r, spacing_z=spacing_z, z_cols_y=Py)

def nearest_index(points, p):
  """ Index of the grid point nearest p; ties resolve to the lower index. """
  d2 = np.sum((np.asarray(points) - np.asarray(p)[None, :]) ** 2, axis=1)
  return int(np.argmin(d2))

def assign_offsets(truth, grids):
  q_T = np.array([nearest_index(grids.r, p) for p in truth.targets], dtype=int)
  q_S = np.array([nearest_index(grids.r, p) for p in truth.scatterers], dtype=int)
  p_u = nearest_index(grids.z, truth.user)

  if len(set(q_T.tolist())) != len(q_T):
    raise _errors.SceneGenerationError("Two targets share nearest grid: {}".format(q_T.tolist()))
  if len(set(q_S.tolist())) != len(q_S):
    raise _errors.SceneGenerationError("Two scatterers share nearest grid: {}".format(q_S.tolist()))
  shared = set(truth.overlap_pairs)
  for k, qt in enumerate(q_T):
    for l, qs in enumerate(q_S):
      if (qt == qs) != ((k, l) in shared):
        raise _errors.SceneGenerationError(
          "Target {} and scatterer {} nearest-grid mismatch with the overlap set".format(k, l))

  offsets = OffsetState.zeros(grids)
  for p, q in zip(truth.targets, q_T):
    offsets.dr[q] = p - grids.r[q]
  for p, q in zip(truth.scatterers, q_S):
    offsets.dr[q] = p - grids.r[q]
  offsets.dz[p_u] = truth.user - grids.z[p_u]
  return offsets, IndexMap(q_T=q_T, q_S=q_S, p_u=p_u)

def angle_to(anchor, orientation, p, convention):
  dx = p[0] - anchor[0]
  dy = p[1] - anchor[1]
  if dx == 0 and dy == 0:
    raise _errors.DomainError("Angle undefined for coincident points '{}'".format(list(p)))
  if convention == IRS:
    return np.arctan2(dy, dx) - np.pi - orientation
  assert convention == BS, "Unknown angle convention '{}'".format(convention)
  return np.arctan2(dy, dx) + orientation

def angles_to(anchor, orientation, pts, convention):
  """ Vectorized angle_to over an (n, 2) array of points. """
  pts = np.asarray(pts, dtype=float).reshape(-1, 2)
  d = pts - np.asarray(anchor)[None, :]
  if np.any(np.all(d == 0, axis=1)):
    raise _errors.DomainError("Angle undefined for a point coincident with the anchor")
  base = np.arctan2(d[:, 1], d[:, 0])
  if convention == IRS:
    return base - np.pi - orientation
  assert convention == BS, "Unknown angle convention '{}'".format(convention)
  return base + orientation

def angle_gradients(anchor, pts):
  """ d(theta)/d(p) for each point: [-dy, dx] / |d|^2 (orientation independent). """
  pts = np.asarray(pts, dtype=float).reshape(-1, 2)
  d = pts - np.asarray(anchor)[None, :]
  d2 = np.sum(d ** 2, axis=1)
  return np.stack([-d[:, 1], d[:, 0]], axis=1) / d2[:, None]

def overlap_from_ratio(K, L, gamma_o):
  """ Overlap count O with gamma_o = O / (K + L - O). """
  O = int(round(gamma_o * (K + L) / (1.0 + gamma_o)))
  return max(0, min(O, K, L))

def _blocks(grids):
  """ All vertically adjacent cell pairs of the r lattice. """
  Qy = grids.grid_cols_y
  return [(c * Qy + row, c * Qy + row + 1) for c in range(grids.grid_cols_x) for row in range(Qy - 1)]

def _jitter(rng, center, spacing, frac):
  return np.asarray(center) + rng.uniform(-0.5, 0.5, size=2) * frac * np.asarray(spacing)

def _place_blocks(grids, K_B, L_B, O, rng):
  blocks = _blocks(grids)
  if len(blocks) == 0:
    raise _errors.SceneGenerationError("Lattice has no vertical blocks (rows per column < 2)")
  used = set()

  def _pick_free(exclude):
    order = rng.permutation(len(blocks))
    for i in order:
      b = blocks[i]
      if not (set(b) & exclude):
        return b
    return None

  target_blocks = []
  for _ in range(K_B):
    b = _pick_free(used)
    if b is None:
      return None
    target_blocks.append(b)
    used |= set(b)

  full, half = divmod(O, 2)
  scatterer_blocks = []
  shared_cells = set()
  scatter_used = set()
  perm = rng.permutation(K_B)
  for i in perm[:full]:
    b = target_blocks[i]
    scatterer_blocks.append(b)
    shared_cells |= set(b)
    scatter_used |= set(b)
  if half:
    placed = False
    Qy = grids.grid_cols_y
    for i in perm[full:]:
      lo, hi = target_blocks[i]
      for cand in ((lo - 1, lo), (hi, hi + 1)):
        same_col = cand[0] // Qy == cand[1] // Qy == lo // Qy and cand[0] >= 0 and cand[1] < grids.Q
        if not same_col:
          continue
        new_cell = cand[0] if cand[1] == lo else cand[1]
        if new_cell in used or new_cell in scatter_used:
          continue
        scatterer_blocks.append(cand)
        shared_cells.add(lo if cand[1] == lo else hi)
        scatter_used |= set(cand)
        placed = True
        break
      if placed:
        break
    if not placed:
      return None
  while len(scatterer_blocks) < L_B:
    b = _pick_free(used | scatter_used)
    if b is None:
      return None
    scatterer_blocks.append(b)
    scatter_used |= set(b)
  return target_blocks, scatterer_blocks, shared_cells

def generate_scene(scene, grids, K_B, L_B, O, rng, jitter=0.8, max_attempts=MAX_SCENE_ATTEMPTS):
  """ Random ground truth with K = 2 K_B targets, L = 2 L_B scatterers and O shared objects. """
  if not 0 <= O <= min(2 * K_B, 2 * L_B):
    raise _errors.ConfigurationError("Overlap '{}' out of range for K_B={} L_B={}".format(O, K_B, L_B))
  if O % 2 and O // 2 + 1 > min(K_B, L_B):
    raise _errors.ConfigurationError("Odd overlap '{}' needs a spare block pair".format(O))

  for attempt in range(max_attempts):
    placed = _place_blocks(grids, K_B, L_B, O, rng)
    if placed is None:
      continue
    target_blocks, scatterer_blocks, shared_cells = placed
    target_cells = [q for b in target_blocks for q in b]
    scatterer_cells = [q for b in scatterer_blocks for q in b]
    cell_pos = {q: _jitter(rng, grids.r[q], grids.spacing_r, jitter) for q in set(target_cells) | set(scatterer_cells)}
    targets = np.array([cell_pos[q] for q in target_cells]).reshape(-1, 2)
    scatterers = np.array([cell_pos[q] for q in scatterer_cells]).reshape(-1, 2)
    pairs = [(k, l) for k, qt in enumerate(target_cells) for l, qs in enumerate(scatterer_cells)
      if qt == qs and qt in shared_cells]
    user_cell = int(rng.integers(grids.P))
    user = _jitter(rng, grids.z[user_cell], grids.spacing_z, jitter)
    truth = GroundTruth(targets=targets, scatterers=scatterers, user=user, overlap_pairs=pairs,
      rcs=np.full(len(targets), scene.rcs))
    try:
      assign_offsets(truth, grids)
    except _errors.SceneGenerationError as e:
      _getSharedLogger().debug("Attempt %d rejected: %s", attempt, e)
      continue
    assert truth.overlap_count == O
    return truth
  raise _errors.SceneGenerationError("No valid scene after {} attempts".format(max_attempts))
