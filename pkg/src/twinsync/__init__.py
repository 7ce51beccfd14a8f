"""Next-location prediction (SVR and MLP) for emergency-vehicle digital twins,
with a timestamp-faithful stream replay and a synchronization-delay model."""

from .errors import TwinSyncError

__version__ = "0.1.0"

__all__ = ["TwinSyncError", "__version__"]
