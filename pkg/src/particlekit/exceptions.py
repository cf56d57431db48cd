"""Exception types shared across the toolkit."""


class ParticleKitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ParticleKitError, ValueError):
    """Invalid arguments, malformed inputs, or violated preconditions."""


class DegenerateStatsError(ValidationError):
    """Intensity statistics cannot be computed (constant data)."""


class ContractViolationError(ValidationError):
    """A patch predictor broke its output contract."""


class CapacityError(ValidationError):
    """Phantom placement failed within the retry budget."""


class IntegrityError(ParticleKitError):
    """A block store on disk is incomplete or corrupt."""
