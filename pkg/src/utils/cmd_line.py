#!/usr/bin/env python
"""
cmd_line.py
---

CMD Line parsing utilities.

Argument files hold one `--key=value` per line. `--config <file>` and `--profile <name>` are expanded in place, so the
arguments are applied from left to right and later settings override earlier ones.

"""
import argparse
import inspect
import os
import sys
from types import GeneratorType

import src.utils.utility as _util
import src.utils.errors as _errors

_logger = _util.getLogger("CMD Line")

def _str_to_bool(s):
  """Convert string to bool (in argparse context)."""
  if isinstance(s, bool):
    return s
  if s.lower() not in ['true', 'false']:
    raise ValueError('Need bool; got %r' % s)
  return {'true': True, 'false': False}[s.lower()]

def add_boolean_argument(parser, name, default=False):
  group = parser.add_mutually_exclusive_group()
  group.add_argument(
    '--' + name,
    nargs='?',
    default=default,
    const=True,
    type=_str_to_bool)
  group.add_argument('--no' + name,
    dest=name,
    action='store_false')

def readArgsFile(path):
  """ Reads an argument file: one argument per line, '#' starts a comment. """
  if not os.path.isfile(path):
    raise _errors.ConfigurationError("Config file not found: '{}'".format(path))
  args = []
  with open(path, 'r') as fin:
    for line in fin:
      line = line.split('#', 1)[0].strip()
      if line:
        args.extend(line.split())
  return args

def _profilePath(name):
  path = _util.getRelConfigPath("profiles", name + ".txt")
  if not os.path.isfile(path):
    raise _errors.ConfigurationError("Unknown profile '{}': expected '{}'".format(name, path))
  return path

def expandConfigArgs(argv):
  """ Replaces `--config <file>` / `--profile <name>` (or their `=` forms) with the referenced arguments. """
  out = []
  i = 0
  while i < len(argv):
    arg = argv[i]
    key, eq, val = arg.partition('=')
    if key in ('--config', '--profile'):
      if not eq:
        if i + 1 >= len(argv):
          raise _errors.ConfigurationError("'{}' expects a value".format(key))
        val = argv[i + 1]
        i += 1
      path = val if key == '--config' else _profilePath(val)
      _logger.debug("Expanding '%s' from '%s'", key, path)
      out.extend(expandConfigArgs(readArgsFile(path)))
    else:
      out.append(arg)
    i += 1
  return out

def parseArgsForClassOrScript(fn, argv=None):
  assert inspect.isfunction(fn) or inspect.ismethod(fn)

  spec = inspect.getfullargspec(fn)
  defaults = spec.defaults if spec.defaults is not None else ()

  parser = argparse.ArgumentParser(description=(inspect.getdoc(fn) or '').split('\n')[0])
  for i, arg in enumerate(spec.args):
    if arg == 'self' or arg == 'logger':
      continue

    # If index is greater than the last var with a default, it's required.
    numReq = len(spec.args) - len(defaults)
    required = i < numReq
    default = defaults[i - numReq] if not required else None
    # By default, args are parsed as strings if not otherwise specified.
    if isinstance(default, bool):
      add_boolean_argument(parser, arg, default=default)
    elif isinstance(default, (tuple, list, GeneratorType)):
      elem_type = type(default[0]) if len(default) > 0 else str
      parser.add_argument("--" + arg, default=list(default), nargs="+", type=elem_type, help="Tuple of " + arg,
        required=False)
    else:
      parser.add_argument("--" + arg, default=default, type=type(default) if default is not None else str,
        required=required)

  parser.add_argument("-v", "--verbosity",
    default=_util.DEFAULT_VERBOSITY,
    type=int,
    help="Verbosity mode. Default is 4. "
         "Set as "
         "0 for CRITICAL level logs only. "
         "1 for ERROR and above level logs "
         "2 for WARNING and above level logs "
         "3 for INFO and above level logs "
         "4 for DEBUG and above level logs")
  argv = expandConfigArgs(sys.argv[1:] if argv is None else list(argv))
  args = parser.parse_args(argv)
  argsToVals = vars(args)

  if args.verbosity > 0:
    docstr = inspect.getdoc(fn)
    assert docstr is not None, "Please write documentation :)"
    print()
    print(docstr.strip())
    print()
    print("Arguments and corresponding default or set values")
    for arg in spec.args:
      if arg == 'self' or arg == 'logger' or arg not in argsToVals:
        continue
      print("\t{}={}".format(arg, argsToVals[arg] if argsToVals[arg] is not None else ""))
    print()

  return args
