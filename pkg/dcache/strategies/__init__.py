from dcache.exceptions import ConfigError
from dcache.strategies.low_confidence import LowConfidenceRemasking, TransitionStrategy

_STRATEGIES = {LowConfidenceRemasking.name: LowConfidenceRemasking()}


def get_strategy(name: str = LowConfidenceRemasking.name) -> TransitionStrategy:
    try:
        return _STRATEGIES[name]
    except KeyError:
        raise ConfigError(f"unknown remasking strategy {name!r}") from None
