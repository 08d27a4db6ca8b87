"""Quality-control toolkit for 3D T1-weighted brain MRI.

Provides artefact simulation (motion, noise, poor contrast), severity
metrics, simulation-parameter calibration, synthetic phantom corpora,
artefact-specific CNN classifiers with transfer fine-tuning, and
quality-tier evaluation statistics.
"""

from t1qc.errors import DataError, NumericalError, T1qcError, UsageError

__version__ = "0.1.0"

__all__ = ["T1qcError", "UsageError", "DataError", "NumericalError", "__version__"]
