"""Exception hierarchy shared by every slimkit module."""


class SlimkitError(Exception):
    """Base class for all slimkit failures."""


class ShapeError(SlimkitError):
    """Tensor or graph dimensions do not line up."""


class ConfigError(SlimkitError):
    """Invalid configuration value (bad eps, bad rate, unresolvable path)."""


class GraphError(SlimkitError):
    """Graph file does not parse/validate (bad schema, cycle, dangling input)."""


class SurgeryError(SlimkitError):
    """Channel mask is inconsistent with the graph it is applied to."""


class TrainingError(SlimkitError):
    """Training diverged or was invoked in an invalid state."""


class StreamError(SlimkitError):
    """Gesture event stream violated its ordering contract."""


class AdapterError(SlimkitError):
    """Player adapter could not execute a command."""


class InputError(SlimkitError):
    """Evaluation input outside the declared domain (e.g. unknown class id)."""
