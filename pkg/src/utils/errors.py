"""
errors.py
---

Exceptions raised by the simulator, the estimators and the reflection design.

"""

class JsceError(Exception):
  pass

class ConfigurationError(JsceError, ValueError):
  pass

class SceneGenerationError(JsceError):
  pass

class DomainError(JsceError, ValueError):
  pass

class NumericalError(JsceError, ArithmeticError):
  pass

class RegularizationError(NumericalError):
  pass

class InfeasibleGeometryError(JsceError):
  pass

class MetricError(JsceError, ValueError):
  pass
