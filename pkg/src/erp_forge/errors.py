"""Exception hierarchy shared by every erp_forge module."""


class ErpForgeError(Exception):
    """Base class for domain errors (mapped to CLI exit code 1)."""


class MalformedHeader(ErpForgeError):
    pass


class TruncatedRecords(ErpForgeError):
    pass


class InconsistentShape(ErpForgeError, ValueError):
    pass


class InvalidBand(ErpForgeError, ValueError):
    pass


class TooShort(ErpForgeError, ValueError):
    pass


class SingularCovariance(ErpForgeError):
    pass


class MissingClass(ErpForgeError, ValueError):
    pass


class ShapeMismatch(ErpForgeError, ValueError):
    pass


class ShiftTooLarge(ErpForgeError, ValueError):
    pass


class DegenerateBatch(ErpForgeError, ValueError):
    pass


class NotForwarded(ErpForgeError, RuntimeError):
    pass


class InvalidProb(ErpForgeError, ValueError):
    pass


class InvalidSpec(ErpForgeError, ValueError):
    pass


class TooFewSamples(ErpForgeError, ValueError):
    pass


class ZeroVariance(ErpForgeError, ValueError):
    pass
