"""Exception hierarchy shared by every flowc module."""


class FlowcError(Exception):
    """Base class; ``kind`` is a stable machine-readable tag."""

    kind = "flowc-error"


class InvalidParameter(FlowcError, ValueError):
    kind = "invalid-parameter"


class InvalidInput(FlowcError, ValueError):
    kind = "invalid-input"


class InvalidSlope(InvalidParameter):
    kind = "invalid-slope"


class UnsupportedShape(FlowcError, ValueError):
    kind = "unsupported-shape"


class ContractViolation(FlowcError, ValueError):
    kind = "contract-violation"


class InvalidTarget(FlowcError, ValueError):
    kind = "invalid-target"


class InvalidField(FlowcError, ValueError):
    kind = "invalid-field"


class InternalError(FlowcError, RuntimeError):
    kind = "internal-error"


class IncompatibleNets(FlowcError, ValueError):
    kind = "incompatible-nets"


class NotInvertible(FlowcError, ValueError):
    kind = "not-invertible"


class ParseError(FlowcError, ValueError):
    kind = "parse-error"


class StiffnessFailure(FlowcError, RuntimeError):
    kind = "stiffness-failure"


class FitShortfall(FlowcError, RuntimeError):
    kind = "fit-shortfall"

    def __init__(self, message, achieved_delta=None, target_delta=None):
        super().__init__(message)
        self.achieved_delta = achieved_delta
        self.target_delta = target_delta


class ScheduleError(FlowcError, ValueError):
    kind = "schedule-error"


class DivergenceError(FlowcError, RuntimeError):
    kind = "divergence-error"


class StepTooLarge(FlowcError, ValueError):
    kind = "step-too-large"


class BudgetInfeasible(FlowcError, RuntimeError):
    kind = "budget-infeasible"


class SynthesisFailure(FlowcError, RuntimeError):
    kind = "synthesis-failure"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
