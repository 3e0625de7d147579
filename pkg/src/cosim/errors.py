"""Exception hierarchy shared by all cosim modules."""
from __future__ import annotations


class CosimError(Exception):
    """Base class for every error raised by this package."""


# -- system configurations -------------------------------------------------

class SchemaError(CosimError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class MissingBinding(CosimError):
    def __init__(self, type_label: str, detail: str = ""):
        self.type_label = type_label
        msg = f"no binding for type {type_label!r}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class ArityMismatch(CosimError):
    pass


class UnknownComponent(CosimError):
    def __init__(self, component_id: str):
        self.component_id = component_id
        super().__init__(f"unknown component {component_id!r}")


class ExpressionError(CosimError):
    pass


# -- test descriptions -----------------------------------------------------

class DanglingReference(CosimError):
    def __init__(self, ref: str, where: str = ""):
        self.ref = ref
        super().__init__(f"dangling reference {ref!r}" + (f" in {where}" if where else ""))


class InvariantViolation(CosimError):
    def __init__(self, rule: str, detail: str = ""):
        self.rule = rule
        super().__init__(rule + (f": {detail}" if detail else ""))


class InfeasibleMapping(CosimError):
    def __init__(self, core):
        self.core = tuple(core)
        super().__init__(f"no research-infrastructure resource for {sorted(self.core)}")


class InvalidSpecification(CosimError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics)
        super().__init__(f"test specification is invalid: {lines}")


class IllegalTransition(CosimError):
    pass


# -- federates -------------------------------------------------------------

class DuplicateName(CosimError):
    pass


class UnknownVariable(CosimError):
    pass


class DirectionError(CosimError):
    pass


class SolverFailure(CosimError):
    pass


# -- master ----------------------------------------------------------------

class ScenarioError(CosimError):
    pass


class TypeMismatch(ScenarioError):
    pass


class CausalityError(ScenarioError):
    pass


class CycleError(ScenarioError):
    def __init__(self, members, message: str | None = None):
        self.members = tuple(members)
        super().__init__(message or f"direct connection closes cycle through {list(self.members)}")


class UnresolvedCycle(CycleError):
    pass


class ConvergenceFailure(CosimError):
    def __init__(self, loop_group, t: float, residual: float, iterations: int):
        self.loop_group = tuple(loop_group)
        self.t = t
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"loop group {list(self.loop_group)} did not converge at t={t:.9f} "
            f"(residual {residual:.3e} after {iterations} iterations)"
        )


class FederateError(CosimError):
    def __init__(self, instance_id: str, t: float, cause: BaseException | str):
        self.instance_id = instance_id
        self.t = t
        self.cause = cause
        super().__init__(f"federate {instance_id!r} failed at t={t:.9f}: {cause}")


# -- models ----------------------------------------------------------------

class NonConvergence(CosimError):
    def __init__(self, iterations: int, mismatch: float):
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max mismatch {mismatch:.3e} pu)"
        )


# -- test runner -----------------------------------------------------------

class PlanError(CosimError):
    pass


class InsufficientTrace(CosimError):
    pass


class CampaignError(CosimError):
    def __init__(self, point: dict, cause: BaseException):
        self.point = point
        self.cause = cause
        super().__init__(f"sweep point {point}: {cause}")
