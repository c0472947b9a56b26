"""
Exception hierarchy for the resect-eval toolkit

Every error carries a machine-readable ``code`` and renders to the same
response-dict shape the command line prints on failure:
``{'success': False, 'error': code, 'message': str}``.
"""

from typing import Any, Dict


class ResectEvalError(Exception):
    """Base class for all toolkit errors"""

    code = 'error'

    def to_dict(self) -> Dict[str, Any]:
        return {'success': False, 'error': self.code, 'message': str(self)}


class InvalidArgumentError(ResectEvalError, ValueError):
    code = 'invalid-argument'


class IncompatibleGridsError(ResectEvalError, ValueError):
    code = 'incompatible-grids'


class InvalidGeometryError(ResectEvalError, ValueError):
    code = 'invalid-geometry'


class NotNiftiError(ResectEvalError):
    code = 'not-nifti'


class UnsupportedFormatError(ResectEvalError):
    code = 'unsupported-format'


class CorruptFileError(ResectEvalError):
    code = 'corrupt-file'


class VolumeIOError(ResectEvalError, OSError):
    code = 'io-error'


class DegenerateHistogramError(ResectEvalError, ValueError):
    code = 'degenerate-histogram'


class ManifestError(ResectEvalError):
    code = 'manifest-error'


class PlanError(ResectEvalError):
    code = 'plan-error'


class ConfigError(ResectEvalError, ValueError):
    code = 'config-error'


class ExperimentError(ResectEvalError, RuntimeError):
    code = 'experiment-error'
