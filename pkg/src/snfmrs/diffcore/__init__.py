from .tape import PRIMITIVES, Node, Tape, TapeError, unbroadcast
from .adam import AdamError, AdamState, adam_step
from .gradcheck import GradCheckReport, finite_diff_check, numeric_gradient, relative_errors


def forward_eval(tape: Tape, inputs):
    return tape.forward(inputs)


def backward(tape: Tape, output, seed=None):
    return tape.backward(output, seed)


__all__ = [
    "PRIMITIVES", "Node", "Tape", "TapeError", "unbroadcast", "AdamError", "AdamState",
    "adam_step", "GradCheckReport", "finite_diff_check", "numeric_gradient",
    "relative_errors", "forward_eval", "backward",
]
