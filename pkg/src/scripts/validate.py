#!/usr/bin/env python3
"""
validate.py
---

This runs the oracle checks (measurement consistency, surrogate gradients, Fisher information, MRF message passing
and the module-A posterior) on random scenes and exits non-zero when a suite misses its tolerance. The ddg suite,
which pairs the two M-step rules on near-BS scenes, runs the full estimator and is only run on request.

"""

import os
import sys
import time

import src.harness.oracles as _oracles
import src.harness.two_phase as _two_phase
import src.utils.cmd_line as _cmd
import src.utils.utility as _util

_logger = None

def _getSharedLogger(verbosity=_util.DEFAULT_VERBOSITY):
  global _logger
  if _logger is None:
    _logger = _util.getLogger(os.path.basename(__file__).split('.')[0], verbosity=verbosity)
  return _logger

def validate(
    suite=('consistency', 'gradients', 'fim', 'bp', 'posterior'),
    cases=5,
    seed=0,

    M=32,
    N_p=48,
    N_s=32,
    Q=36,
    P=9,
    K_B=1,
    L_B=2,
    O=1,
    T1=2,
    T2=2,
    T3=2,
    T4=2,
    tx_power_dbm=10.0,
    alpha_mrf=0.3,
    beta_mrf=0.5,
):
  """ Runs oracle suites and reports the worst error of each against its tolerance.

  :param suite: Suites to run: consistency, gradients, fim, bp, posterior, ddg.
  :param cases: Random scenes per suite (the bp suite uses fixed small lattices).
  :param seed: First scene seed; case i uses seed + i.
  :return: True when every suite passed.
  """
  cfg = _two_phase.ExperimentConfig(M=M, N_p=N_p, N_s=N_s, Q=Q, P=P, K_B=K_B, L_B=L_B, O=O, T1=T1, T2=T2, T3=T3,
    T4=T4, tx_power_dbm=tx_power_dbm, alpha_mrf=alpha_mrf, beta_mrf=beta_mrf)
  passed = True
  ts = time.time()
  print()
  print("Validation Results:")
  for name in suite:
    report = _oracles.validate(name, cfg=cfg, cases=cases, seed=seed)
    passed &= report['passed']
    print("\t{}: {}".format(name, 'PASS' if report['passed'] else 'FAIL'))
    for key, v in report['errors'].items():
      print("\t\t{}: error '{:.3e}', tolerance '{:.1e}'".format(key, v['error'], v['tolerance']))
  print()
  print("Validation complete: Took '{}' seconds".format(time.time() - ts))
  print()
  return passed

def main():
  global _logger
  args = _cmd.parseArgsForClassOrScript(validate)
  varsArgs = vars(args)
  verbosity = varsArgs.pop('verbosity', _util.DEFAULT_VERBOSITY)
  _getSharedLogger(verbosity=verbosity).info("Passed arguments: '{}'".format(varsArgs))
  sys.exit(0 if validate(**varsArgs) else 1)

if __name__ == '__main__':
  main()
