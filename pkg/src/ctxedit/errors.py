"""Exception hierarchy. CLI exit codes hang off the three base classes."""


class CtxEditError(Exception):
    exit_code = 1


class ConfigError(CtxEditError):
    exit_code = 3


class RuntimeFailure(CtxEditError):
    exit_code = 1


class UnknownRole(ConfigError, KeyError):
    def __init__(self, role: str):
        super().__init__(f"unknown condition role {role!r}")
        self.role = role

    def __str__(self) -> str:
        return self.args[0]


class LengthExceedsRegistry(ConfigError, ValueError):
    def __init__(self, n: int, limit: int):
        super().__init__(f"latent length {n} exceeds registry max_latent_len {limit}")


class DimensionError(RuntimeFailure, ValueError):
    pass


class NonFiniteInput(RuntimeFailure, ValueError):
    pass


class TooManyIds(RuntimeFailure, ValueError):
    pass


class PromptTooLong(RuntimeFailure, ValueError):
    pass


class ShapeMismatch(RuntimeFailure, ValueError):
    pass


class MissingSegment(RuntimeFailure, KeyError):
    pass


class MissingBias(RuntimeFailure, KeyError):
    pass


class NonFiniteActivation(RuntimeFailure, FloatingPointError):
    def __init__(self, block: int, where: str = "block"):
        super().__init__(f"non-finite activation after {where} {block}")
        self.block = block


class AlignmentError(RuntimeFailure, ValueError):
    pass


class DisjointnessError(ConfigError, ValueError):
    pass


class MissingDataset(ConfigError, FileNotFoundError):
    pass


class NonFiniteLoss(RuntimeFailure, FloatingPointError):
    pass


class ManifestMismatch(RuntimeFailure, ValueError):
    pass


class DegenerateFrame(RuntimeFailure, ValueError):
    pass


class SeedMismatch(RuntimeFailure, ValueError):
    pass


class FormatError(RuntimeFailure, ValueError):
    pass
