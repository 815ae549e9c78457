#!/usr/bin/env python3
"""
run_sweep.py
---

This runs a Monte-Carlo sweep of the two-phase estimation protocol over one axis (transmit power, overlap ratio or
number of reflecting elements) for a set of schemes and seeds.

"""

import os
import time
import dataclasses

import numpy as np

import src.harness.two_phase as _two_phase
import src.harness.sweep as _sweep
import src.utils.cmd_line as _cmd
import src.utils.utility as _util

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

_CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(_two_phase.ExperimentConfig))

def run(
    name='desk',
    scheme=('AS-TVBI', 'TP-SBL', 'TP-OMP', 'SP-TVBI', 'genie'),
    seeds='0..99',
    axis='power',
    values=(0.0, 5.0, 10.0),
    out='',
    num_workers=0,
    emit_plots=False,
    traces=False,
    tensorboard=False,
    full_scale=False,

    M=32,
    N_p=48,
    N_s=32,
    Q=36,
    P=9,
    K_B=1,
    L_B=2,
    O=1,
    gamma_o=-1.0,
    T1=2,
    T2=2,
    T3=2,
    T4=2,
    tx_power_dbm=10.0,
    noise_power_dbm=-100.0,
    carrier_ghz=28.0,
    rcs=1.0,
    pl_exp_los=2.2,
    pl_exp_nlos=2.8,
    fading=True,
    jitter=0.8,

    alpha_mrf=0.3,
    beta_mrf=0.5,
    max_outer=50,
    outer_tol=1e-3,
    max_inner=30,
    inner_tol=1e-6,
    max_turbo=10,
    turbo_tol=1e-4,
    bp_sweeps=10,
    bp_damping=0.0,
    candidate_threshold=0.5,
    detection_threshold=0.5,
    sbl_max_iter=200,
    rcg_max_iter=200,
    rcg_tol=1e-6,
):
  """ Runs a Monte-Carlo sweep and writes results.csv, summary.json and the optional traces and plot data.

  :param name: Sweep name, also the results directory under <ws>/data/results when `out` is empty.
  :param scheme: Schemes to compare: AS-TVBI, AS-TVBI-GA, TP-OMP, TP-SBL, SP-TVBI, genie.
  :param seeds: Seed range 'a..b' (inclusive) or comma-separated seeds.
  :param axis: Sweep axis: none, power (tx_power_dbm), overlap (gamma_o) or elements (N_p).
  :param values: Values of the sweep axis.
  :param out: Output directory; a fresh numbered run directory by default.
  :param num_workers: DataLoader worker processes running the trials.
  :param emit_plots: Write plot-ready CSV files under <out>/plots.
  :param traces: Write per-trial iteration traces to traces.jsonl.
  :param tensorboard: Mirror the averaged metrics into tensorboard under <out>/tensorboard.
  :param full_scale: Set by the full-scale profile; only used to warn about the runtime.
  :param gamma_o: Overlap ratio O / (K + L - O); negative keeps O.
  :param T1: Phase-I sensing pilots; T2 phase-I communication pilots, T3/T4 their phase-II counterparts.
  :param tx_power_dbm: Transmit power of controller and user.
  :param noise_power_dbm:
  :param alpha_mrf: Ising field of the block-sparse support prior.
  :param beta_mrf: Ising coupling of the block-sparse support prior.
  :param detection_threshold: Support probability above which a grid counts as detected.
  """
  logger = _getSharedLogger()
  args = locals()
  base = _two_phase.ExperimentConfig(**{k: args[k] for k in _CONFIG_FIELDS})
  seed_list = _sweep.parse_seeds(seeds)
  if full_scale:
    logger.warning("Full-scale profile: a single trial takes minutes, a sweep point with %d seeds several hours",
      len(seed_list))
  out_dir = out if out else _util.getRelResultsPath(name, use_existing=False)

  print()
  print("Sweep Information:")
  print("\tName: '{}'".format(name))
  print("\tConfig hash: '{}'".format(base.config_hash()))
  print("\tAxis: '{}' over {}".format(axis, list(values) if axis != 'none' else '-'))
  print("\tSchemes: {}".format(list(scheme)))
  print("\tSeeds: {}..{} ({} per point)".format(seed_list[0], seed_list[-1], len(seed_list)))
  print("\tOutput: '{}'".format(out_dir))
  print()

  ts = time.time()
  frame, summary = _sweep.run_sweep(base, list(scheme), seed_list, out_dir, axis=axis, values=list(values),
    num_workers=num_workers, emit_plots=emit_plots, keep_traces=traces, tensorboard=tensorboard)
  te = time.time()

  print()
  print("Sweep complete: Took '{}' seconds for '{}' trials".format(te - ts, len(frame)))
  print("Sweep Statistics")
  for _, row in summary.iterrows():
    label = row[_sweep.SWEEP_AXES[axis]] if _sweep.SWEEP_AXES[axis] else '-'
    print("\t[{}] {:>10}: NMSE '{:.3e}' ({:.2f} dB), RMSE '{:.3f}' m, failures '{}/{}'".format(
      label, row['scheme'], row['nmse_total'], 10 * np.log10(row['nmse_total']), row['rmse'], row['failures'],
      row['trials']))
  print()

def main():
  global _logger
  args = _cmd.parseArgsForClassOrScript(run)
  varsArgs = vars(args)
  verbosity = varsArgs.pop('verbosity', _util.DEFAULT_VERBOSITY)
  _getSharedLogger(verbosity=verbosity).info("Passed arguments: '{}'".format(varsArgs))
  run(**varsArgs)

if __name__ == '__main__':
  main()
