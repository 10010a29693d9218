"""Exception types. Every error carries a short machine-readable ``code``."""


class HerbsError(Exception):
    code = "E_HERBS"


class DimensionMismatchError(HerbsError, ValueError):
    code = "E_DIM"


class ShapeMismatchError(HerbsError, ValueError):
    code = "E_SHAPE"


class SelectionRangeError(HerbsError, ValueError):
    code = "E_K_RANGE"


class MissingHeadsError(HerbsError, ValueError):
    code = "E_HEADS"


class ConfigError(HerbsError, ValueError):
    code = "E_CONFIG"


class NonFiniteLossError(HerbsError, FloatingPointError):
    code = "E_NONFINITE"

    def __init__(self, component: str, value: float, step: int | None = None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite {component} ({value}){where}")
        self.component = component
