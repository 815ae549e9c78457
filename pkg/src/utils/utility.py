#!/usr/bin/env python3

"""
Utility functions in logging, IO and seeding.
"""

import os
import json
import hashlib
import logging

import numpy as np

DEFAULT_VERBOSITY = 4

_ws_dir = None

_logger = None
_LOGGING_FORMAT = "[%(asctime)s %(levelname)5s %(filename)s %(funcName)s:%(lineno)s] %(message)s"
logging.basicConfig(format=_LOGGING_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")

def getLogger(name, level=logging.DEBUG, verbosity=DEFAULT_VERBOSITY):
  level = max(level, logging.CRITICAL - 10 * verbosity)

  logger = logging.getLogger(name)
  logger.setLevel(level)
  return logger

def _getUtilityLogger():
  global _logger
  if _logger is None:
    _logger = getLogger("Utility")
  return _logger

def _getPathFromEnv(envVar, default=None):
  path = os.getenv(envVar, None)
  if path is None:
    assert default is not None, \
      "Environment variable '{}' not found: " \
      "please check project installation and ~/.bashrc".format(envVar)
    _getUtilityLogger().warning("Environment variable '%s' not set, defaulting to '%s'", envVar, default)
    path = default
  return path

def getWsDir():
  global _ws_dir
  if _ws_dir is None:
    _ws_dir = _getPathFromEnv("JSCE_WS_PATH", default=os.getcwd())
  return _ws_dir

def getRelDataPath(*relPath):
  return os.path.join(getWsDir(), "data", *relPath)

def getRelResultsPath(*relPath, use_existing=True):
  """ Results directory for a named sweep. Without `use_existing`, a fresh numbered run directory is returned. """
  path = getRelDataPath("results", *relPath)

  run_count = 0
  while not use_existing and os.path.isdir(os.path.join(path, str(run_count))):
    run_count += 1
  return path if use_existing else os.path.join(path, str(run_count))

def getRelConfigPath(*relPath):
  return os.path.join(getWsDir(), "config", *relPath)

def mkdirP(path):
  if not os.path.exists(path):
    os.makedirs(path)

def configHash(cfg_dict):
  """ Stable short hash of a json-serializable configuration. """
  canonical = json.dumps(cfg_dict, sort_keys=True, separators=(',', ':'), default=str)
  return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

def getTrialRng(seed, *keys):
  """ Counter-based generator keyed by (seed, *keys). Identical keys always give the identical stream. """
  ss = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
  return np.random.Generator(np.random.Philox(ss))

def spawnTrialRngs(seed, *keys, n=4):
  """ Independent child streams of the trial key, e.g. (scene, channel, noise-I, noise-II). """
  ss = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
  return [np.random.Generator(np.random.Philox(child)) for child in ss.spawn(n)]

def dbmToWatts(p_dbm):
  return 10.0 ** ((p_dbm - 30.0) / 10.0)
