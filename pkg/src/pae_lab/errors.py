"""Exception taxonomy shared across the package.

Every failure a caller is expected to handle gets its own class so tests
and the CLI can discriminate without string matching.
"""


class PaeLabError(Exception):
    """Base class for all package errors."""


class ShapeError(PaeLabError):
    """Tensor/array extents do not satisfy an operation's preconditions."""


class ContractError(PaeLabError):
    """An API contract was violated by the caller (not a data problem)."""


class RangeError(PaeLabError):
    """A value is outside its documented domain."""


class IndexError_(PaeLabError):
    """A token/row id points outside its table."""


class DegenerateBatchError(PaeLabError):
    """A batch carries no usable supervision (e.g. all-masked loss)."""


class PoisonedGradientError(PaeLabError):
    """NaN/Inf reached the optimizer boundary; the step was refused."""


class PoisonedRunError(PaeLabError):
    """A training run aborted on poisoned numerics; last good state was kept."""


class OracleError(PaeLabError):
    """A test oracle could not certify its own preconditions."""


class ParseFailure(PaeLabError):
    """Generated text does not match the expected answer grammar."""

    def __init__(self, text: str, reason: str = ""):
        self.text = text
        self.reason = reason
        super().__init__(f"cannot parse {text!r}" + (f": {reason}" if reason else ""))


class TokenizeError(PaeLabError):
    """Input text contains a span outside the closed vocabulary."""


class ConfigError(PaeLabError):
    """Config file is malformed or violates a constraint.

    Carries one message per offense so the CLI can report them all at once.
    """

    def __init__(self, offenses):
        if isinstance(offenses, str):
            offenses = [offenses]
        self.offenses = list(offenses)
        super().__init__("; ".join(self.offenses))


class CheckpointError(PaeLabError):
    """Base class for checkpoint load/save failures."""


class MagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class VersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class HashMismatchError(CheckpointError):
    """Stored body digest does not match the file contents."""


class MissingTensorError(CheckpointError):
    """A tensor named in the header index is absent or truncated."""


class UserError(PaeLabError):
    """CLI-level user mistake; maps to exit code 1."""
