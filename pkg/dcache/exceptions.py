class DCacheError(Exception):
    pass


class ContractViolation(DCacheError, ValueError):
    pass


class ConfigError(DCacheError):
    pass


class SchedulingError(DCacheError):
    pass


class ColdCacheError(SchedulingError):
    pass


class InvariantViolation(DCacheError):
    pass
