"""Exception hierarchy shared by every co4 module."""

from typing import Optional, Sequence


class Co4Error(Exception):
    """Base class for all errors raised by the toolkit."""


class DimensionError(Co4Error, ValueError):
    """Operand shapes do not fit the operation."""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [list(s) for s in shapes]
        shape_text = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shape_text}")


class ParameterError(Co4Error, ValueError):
    """A scalar parameter or configuration value is out of range."""


class ContractError(Co4Error, RuntimeError):
    """An API was used outside its contract."""


class FormatError(Co4Error, ValueError):
    """A file on disk does not follow the expected layout."""


class SequenceOverflowError(Co4Error, ValueError):
    """A token sequence does not fit into max_tokens."""

    def __init__(self, sample: str, length: int, max_tokens: int):
        self.sample = sample
        self.length = length
        self.max_tokens = max_tokens
        super().__init__(
            f"sample '{sample}' needs {length} tokens but max_tokens is {max_tokens}"
        )


class DivergenceError(Co4Error, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, loss: float, grad_norm: Optional[float] = None):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm
        detail = f"loss={loss!r} at epoch {epoch}, step {step}"
        if grad_norm is not None:
            detail += f" (last finite grad norm {grad_norm:.4g})"
        super().__init__(f"training diverged: {detail}")
