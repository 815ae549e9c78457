"""
sweep.py
---

  Monte-Carlo sweeps: the cross product of sweep points, schemes and seeds is run through a DataLoader work pool,
  averaged per (point, scheme) and written as a results table, a JSON summary, optional iteration traces, optional
  tensorboard scalars and plot-ready CSV files.

"""

import os
import json
import time

import numpy as np
import pandas as pd
import torch.utils.data as _data
import tensorboardX
import tqdm

import src.data.trial_dataset as _trial_dataset
import src.harness.two_phase as _two_phase
import src.utils.utility as _util
import src.utils.errors as _errors

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

SCHEMA_VERSION = 1

# Sweep axis -> ExperimentConfig field.
SWEEP_AXES = {'none': None, 'power': 'tx_power_dbm', 'overlap': 'gamma_o', 'elements': 'N_p'}

METRICS = ('nmse_sensing', 'nmse_comm', 'nmse_total', 'rmse', 'iterations_I', 'iterations_II', 'rcg_iterations',
  'crb_diag', 'crb_exact', 'missed', 'false_alarms')

RMSE_PENALTY_NOTE = "True objects without a matched estimate count with the diagonal of their class's grid cell " \
  "as position error; false alarms do not enter the RMSE and are reported as a count."

RESULTS_FILE = 'results.csv'
SUMMARY_FILE = 'summary.json'
TRACES_FILE = 'traces.jsonl'

def parse_seeds(spec):
  """ 'a..b' (inclusive), 'a,b,c' or a single integer. """
  spec = str(spec).strip()
  try:
    if '..' in spec:
      lo, hi = (int(v) for v in spec.split('..'))
      seeds = list(range(lo, hi + 1))
    else:
      seeds = [int(v) for v in spec.split(',') if v.strip()]
  except ValueError as e:
    raise _errors.ConfigurationError("Invalid seed range '{}'".format(spec)) from e
  if not seeds:
    raise _errors.ConfigurationError("Seed range '{}' is empty".format(spec))
  return seeds

def sweep_points(base, axis, values):
  """ One ExperimentConfig per sweep value (a single point for the 'none' axis). """
  if axis not in SWEEP_AXES:
    raise _errors.ConfigurationError("Unknown sweep axis '{}', expected one of {}".format(axis, tuple(SWEEP_AXES)))
  field = SWEEP_AXES[axis]
  if field is None:
    return [base]
  cast = type(getattr(base, field))
  return [base.replaced(**{field: cast(v)}) for v in values]

def run_trials(configs, schemes, seeds, num_workers=0, progress=True):
  """ Runs every trial in the pool; results come back in dataset order. """
  ds = _trial_dataset.TrialDataset(configs, schemes, seeds)
  loader = _data.DataLoader(ds, batch_size=1, shuffle=False, num_workers=num_workers,
    collate_fn=_trial_dataset._collate_fn)
  results = []
  for batch in tqdm.tqdm(loader, total=len(loader), desc='Trials', disable=not progress):
    results.extend(batch)
  return results

def results_frame(results):
  return pd.DataFrame([r.row() for r in results])

def aggregate(frame, configs, axis):
  """ Per (point, scheme): trial and failure counts, means of the metrics over the successful trials. """
  keys = ['point', 'scheme']
  counts = frame.groupby(keys, sort=False).agg(trials=('seed', 'size'), failures=('failed', 'sum'))
  ok = frame[~frame['failed'].astype(bool)]
  means = ok.groupby(keys, sort=False)[list(METRICS)].mean()
  summary = counts.join(means).reset_index()
  summary['failures'] = summary['failures'].astype(int)
  field = SWEEP_AXES[axis]
  if field is not None:
    values = {i: (c.overlap_ratio if field == 'gamma_o' else getattr(c, field)) for i, c in enumerate(configs)}
    summary.insert(1, field, summary['point'].map(values))
  return summary

def _padded_mean(traces):
  """ Mean over traces of different lengths, each held at its last value. """
  traces = [np.asarray(t, dtype=float) for t in traces if len(t)]
  if not traces:
    return np.zeros(0)
  n = max(len(t) for t in traces)
  padded = np.array([np.concatenate([t, np.full(n - len(t), t[-1])]) for t in traces])
  with np.errstate(invalid='ignore'):
    return np.nanmean(padded, axis=0)

def convergence_frame(results, trace_key):
  """ Mean per-iteration trace per (point, scheme) in long format. """
  rows = []
  groups = {}
  for r in results:
    if not r.failed and trace_key(r) is not None:
      groups.setdefault((r.point, r.scheme), []).append(trace_key(r))
  for (point, scheme), traces in groups.items():
    for it, v in enumerate(_padded_mean(traces)):
      rows.append({'point': point, 'scheme': scheme, 'iteration': it, 'value': v})
  return pd.DataFrame(rows, columns=['point', 'scheme', 'iteration', 'value'])

def _final_nmse_trace(r):
  return r.traces.get('nmse_II') or r.traces.get('nmse_I')

def _rcg_trace(r):
  return r.traces.get('rcg')

def emit_plot_data(out_dir, summary, results, axis):
  """ Writes the plot-ready CSV files that apply to this sweep; returns their paths. """
  plots_dir = os.path.join(out_dir, 'plots')
  _util.mkdirP(plots_dir)
  written = []

  def write(df, name):
    path = os.path.join(plots_dir, name)
    df.to_csv(path, index=False)
    written.append(path)

  field = SWEEP_AXES[axis]
  nmse_cols = ['nmse_sensing', 'nmse_comm', 'nmse_total', 'trials', 'failures']
  if axis == 'power':
    write(summary[[field, 'scheme'] + nmse_cols], 'nmse_vs_power.csv')
    write(summary[[field, 'scheme', 'rmse', 'trials', 'failures']], 'rmse_vs_power.csv')
  elif axis == 'overlap':
    write(summary[[field, 'scheme'] + nmse_cols], 'nmse_vs_overlap.csv')
  elif axis == 'elements':
    write(summary[[field, 'scheme', 'rmse', 'trials', 'failures']], 'rmse_vs_elements.csv')

  rcg = convergence_frame(results, _rcg_trace)
  if len(rcg):
    write(rcg.rename(columns={'value': 'crb_objective'}), 'rcg_convergence.csv')
  conv = convergence_frame([r for r in results if r.scheme in (_two_phase.AS_TVBI, _two_phase.AS_TVBI_GA)],
    _final_nmse_trace)
  if len(conv):
    write(conv.rename(columns={'value': 'nmse_total'}), 'outer_convergence.csv')
  return written

def _finite_or_none(v):
  if isinstance(v, dict):
    return {k: _finite_or_none(x) for k, x in v.items()}
  if isinstance(v, (list, tuple)):
    return [_finite_or_none(x) for x in v]
  if isinstance(v, (float, np.floating)):
    return float(v) if np.isfinite(v) else None
  if isinstance(v, np.integer):
    return int(v)
  return v

def write_traces(path, results):
  with open(path, 'w') as fout:
    for r in results:
      doc = {'point': r.point, 'scheme': r.scheme, 'seed': r.seed, 'failed': r.failed, 'traces': r.traces}
      fout.write(json.dumps(_finite_or_none(doc), sort_keys=True) + '\n')

def write_tensorboard(log_dir, summary, axis):
  """ Mean metrics of all schemes on one chart per metric, with the sweep point as global step. """
  writer = tensorboardX.SummaryWriter(log_dir)
  for point, rows in summary.groupby('point', sort=True):
    for name in ('nmse_sensing', 'nmse_comm', 'nmse_total', 'rmse'):
      values = {s: float(v) for s, v in zip(rows['scheme'], rows[name]) if np.isfinite(v)}
      if values:
        writer.add_scalars(os.path.join(axis, name), values, global_step=int(point))
  writer.close()

def run_sweep(base, schemes, seeds, out_dir, axis='none', values=(), num_workers=0, emit_plots=False,
              keep_traces=False, tensorboard=False, progress=True):
  """ Runs the sweep and writes its outputs to out_dir.

  :return: (per-trial DataFrame, per-(point, scheme) summary DataFrame)
  """
  logger = _getSharedLogger()
  ts = time.time()
  configs = sweep_points(base, axis, values)
  results = run_trials(configs, schemes, seeds, num_workers=num_workers, progress=progress)
  frame = results_frame(results)
  summary = aggregate(frame, configs, axis)
  wall_time = time.time() - ts

  _util.mkdirP(out_dir)
  frame.to_csv(os.path.join(out_dir, RESULTS_FILE), index=False)
  failures = int(frame['failed'].sum())
  doc = {
    'schema_version': SCHEMA_VERSION,
    'config_hash': base.config_hash(),
    'config': base.to_dict(),
    'axis': axis,
    'values': [_finite_or_none(v) for v in values] if SWEEP_AXES[axis] else [],
    'point_hashes': [c.config_hash() for c in configs],
    'schemes': list(schemes),
    'seeds': {'first': int(seeds[0]), 'last': int(seeds[-1]), 'count': len(seeds)},
    'trials_per_point': len(seeds),
    'trials': len(results),
    'failures': failures,
    'rmse_penalty': RMSE_PENALTY_NOTE,
    'wall_time': wall_time,
    'points': json.loads(summary.to_json(orient='records')),
  }
  with open(os.path.join(out_dir, SUMMARY_FILE), 'w') as fout:
    json.dump(doc, fout, indent=2, sort_keys=True)
  if keep_traces:
    write_traces(os.path.join(out_dir, TRACES_FILE), results)
  if emit_plots:
    for path in emit_plot_data(out_dir, summary, results, axis):
      logger.info("Plot data written to '%s'", path)
  if tensorboard:
    write_tensorboard(os.path.join(out_dir, 'tensorboard'), summary, axis)
  if failures:
    logger.warning("%d of %d trials failed, see the 'error' column of '%s'", failures, len(results),
      os.path.join(out_dir, RESULTS_FILE))
  return frame, summary
