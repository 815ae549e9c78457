"""
trial_dataset.py
---

  Monte-Carlo trials exposed as a torch Dataset so that a DataLoader can run them in worker processes.

"""

import os

import torch.utils.data as _data

import src.harness.two_phase as _two_phase
import src.utils.utility as _util

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

def _collate_fn(batch):
  """
  Custom collate function for the DataLoader.

  The default collation would try to stack the fields of every sample into tensors. Trial results are records of
  mixed type (scheme names, per-block dictionaries, traces of varying length) and are only ever aggregated on the
  main process, so a batch is kept as the plain list of TrialResult.

  :param batch: List of TrialResult as returned by TrialDataset.__getitem__.
  """
  assert all(isinstance(x, _two_phase.TrialResult) for x in batch)
  return list(batch)

class TrialDataset(_data.Dataset):
  def __init__(self, configs, schemes, seeds):
    """ Cross product of sweep points, schemes and seeds, ordered point-major then scheme then seed.

    :param configs: ExperimentConfig per sweep point.
    :param schemes: Scheme names, see two_phase.SCHEMES.
    :param seeds: Trial seeds; the same seed gives the same scene at every point and for every scheme.
    """
    super(TrialDataset, self).__init__()
    assert len(configs) > 0 and len(schemes) > 0 and len(seeds) > 0
    unknown = [s for s in schemes if s not in _two_phase.SCHEMES]
    assert not unknown, "Unknown scheme(s) '{}', expected one of {}".format(unknown, _two_phase.SCHEMES)

    self.configs = list(configs)
    self.items = [(point, scheme, int(seed)) for point in range(len(self.configs)) for scheme in schemes
      for seed in seeds]
    _getSharedLogger().debug("Trial dataset with %d points, %d schemes, %d seeds", len(self.configs), len(schemes),
      len(seeds))

  def __getitem__(self, index):
    """ Runs the trial at index.

    :return: TrialResult; failed trials are returned with `failed` set rather than raised.
    """
    point, scheme, seed = self.items[index]
    return _two_phase.run_two_phase(self.configs[point], scheme, seed, point=point)

  def __len__(self):
    return len(self.items)
