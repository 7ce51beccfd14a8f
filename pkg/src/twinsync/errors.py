"""Exception hierarchy shared by every twinsync module."""


class TwinSyncError(Exception):
    """Base class for all package errors."""


# --- data ingestion ---------------------------------------------------------

class DataError(TwinSyncError, ValueError):
    pass


class MissingColumn(DataError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing column {name!r}")


class MalformedRow(DataError):
    def __init__(self, line_no, reason):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class OutOfRange(DataError):
    def __init__(self, line_no, field, value=None):
        self.line_no = line_no
        self.field = field
        self.value = value
        super().__init__(f"line {line_no}: field {field!r} out of range ({value!r})")


class NonMonotonicTimestamp(DataError):
    def __init__(self, vehicle_id, line_no):
        self.vehicle_id = vehicle_id
        self.line_no = line_no
        super().__init__(
            f"line {line_no}: timestamp for vehicle {vehicle_id!r} does not increase"
        )


class InvalidCount(DataError):
    pass


class ConstantColumn(DataError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"column {name!r} is constant; cannot standardize")


class TooFewRecords(DataError):
    pass


class DimensionMismatch(TwinSyncError, ValueError):
    pass


class InvalidRatio(DataError):
    pass


class NonFiniteInput(TwinSyncError, ValueError):
    pass


class EmptyInput(TwinSyncError, ValueError):
    pass


class InvalidInput(TwinSyncError, ValueError):
    pass


# --- models -----------------------------------------------------------------

class InvalidHyperparams(TwinSyncError, ValueError):
    pass


class DegenerateDiagonal(TwinSyncError, ValueError):
    pass


class MaxIterationsExceeded(TwinSyncError):
    """Raised when SMO hits its iteration bound.

    The best iterate reached so far is attached as ``model`` so callers can
    still use it deliberately.
    """

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


class InvalidConfig(TwinSyncError, ValueError):
    pass


class DivergenceDetected(TwinSyncError):
    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


class ZeroVariance(TwinSyncError, ValueError):
    pass


class DegenerateInput(TwinSyncError, ValueError):
    pass


# --- streaming --------------------------------------------------------------

class BrokerError(TwinSyncError):
    pass


class DuplicateTopic(BrokerError):
    pass


class UnknownTopic(BrokerError):
    pass


class BrokerClosed(BrokerError):
    pass


class UnsortedInput(BrokerError, ValueError):
    pass


class SinkError(BrokerError):
    def __init__(self, seq, cause):
        self.seq = seq
        self.cause = cause
        super().__init__(f"sink failed on seq {seq}: {cause}")
