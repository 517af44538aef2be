class ConfigError(RuntimeError):
    """An error encountered during reading the config file

    Args:
        msg (str): The message displayed to the operator on error
    """

    def __init__(self, msg: str):
        super().__init__("%s" % (msg,))
        self.msg = msg


class CommandError(RuntimeError):
    """An error encountered while processing a command

    Args:
        msg: The message that is printed back to the user on error
    """

    def __init__(self, msg: str):
        super().__init__("%s" % (msg,))
        self.msg = msg


class CommandSyntaxError(RuntimeError):
    """An error encountered if syntax of a called command was violated"""

    def __init__(self, msg: str = ""):
        super().__init__("%s" % (msg,))
        self.msg = msg


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes

    Args:
        op: Name of the op that rejected its inputs
        *shapes: The offending shapes, in argument order
    """

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        self.msg = f"{op}: incompatible shapes " + " and ".join(
            str(tuple(s)) for s in shapes
        )
        super().__init__(self.msg)


class DomainError(ValueError):
    """A value lies outside the domain an operation is defined on"""

    def __init__(self, msg: str):
        super().__init__("%s" % (msg,))
        self.msg = msg


class NonFiniteLossError(RuntimeError):
    """An objective became NaN or infinite

    Args:
        msg: Where it happened (epoch/step, pair index ...)
        trace: Objective values recorded up to and including the bad one
    """

    def __init__(self, msg: str, trace=None):
        super().__init__("%s" % (msg,))
        self.msg = msg
        self.trace = list(trace) if trace is not None else []


class ConstraintViolation(RuntimeError):
    """An optimization iterate left its feasible set"""

    def __init__(self, msg: str):
        super().__init__("%s" % (msg,))
        self.msg = msg


class CheckpointError(RuntimeError):
    """A checkpoint directory could not be read or written"""

    def __init__(self, msg: str):
        super().__init__("%s" % (msg,))
        self.msg = msg


class UntrainedModelError(RuntimeError):
    """A model was used before it was trained"""

    def __init__(self, what: str):
        self.msg = f"The {what} has not been trained. Train first."
        super().__init__(self.msg)
