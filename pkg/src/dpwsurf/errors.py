"""Exception hierarchy for the loop-group CMC pipeline.

Every stage raises a named error so the CLI can map parameter-gate
failures to exit code 2 and numeric failures to exit code 3.
"""


class DpwError(Exception):
    """Base class for all pipeline errors."""


class GateError(DpwError):
    """Parameter-level rejection (admissibility gates). CLI exit code 2."""


class NumericError(DpwError):
    """Numerical failure of an algorithm stage. CLI exit code 3."""


# --- loop algebra ---

class ZeroLambda(DpwError):
    pass


class NonAnalyticEvaluation(NumericError):
    """Laurent tail does not certify analyticity at the requested radius."""


class GridMismatch(DpwError):
    """Binary loop operation on loops with different radius or sample count."""


class SingularSample(NumericError):
    """A pointwise inverse hit a (near-)singular sample.

    Carries the worst grid node and its |det|.
    """

    def __init__(self, msg, lam=None, absdet=None):
        super().__init__(msg)
        self.lam = lam
        self.absdet = absdet


# --- factorization ---

class IdenticallyZero(DpwError):
    pass


class NegativeValue(DpwError):
    pass


class ZeroDetectionFailure(NumericError):
    """Odd-order boundary zero found where semidefiniteness promises even order."""


class FactorizationDiverged(NumericError):
    """Finite-section residual stagnated above tolerance at the maximum order."""


class NotHermitian(DpwError):
    pass


class NotSemidefinite(DpwError):
    pass


class DegenerateDeterminant(DpwError):
    pass


# --- potentials ---

class ZeroParameter(GateError):
    pass


class WeightOutOfBounds(GateError):
    def __init__(self, msg, margin=None):
        super().__init__(msg)
        self.margin = margin


class EvaluationAtPuncture(DpwError):
    pass


class NegativeRadicand(GateError):
    pass


class GaugeNotPlus(DpwError):
    pass


class InequalityViolation(GateError):
    """Trinoid admissibility battery failed; names the violated inequality."""

    def __init__(self, msg, name=None, margin=None):
        super().__init__(msg)
        self.name = name
        self.margin = margin


# --- frame integration ---

class StepSizeUnderflow(NumericError):
    pass


class ToleranceNotMet(NumericError):
    pass


# --- unitarization ---

class DegenerateFamily(NumericError):
    """All monodromy pairs commute on a positive-measure set of samples."""


class AlignmentFailure(NumericError):
    """No smooth phase/scale alignment achieved the Laurent-tail target."""


class KernelJump(NumericError):
    """Kernel dimension estimate >= 2 on an interval of samples."""


class AllZeroSymmetrization(NumericError):
    pass


class OddSwitchCount(NumericError):
    pass


class UnitarizationResidualTooLarge(NumericError):
    pass


# --- sym / surfaces ---

class SymPointsCoincide(GateError):
    pass


class PeriodResidualTooLarge(NumericError):
    pass


class UnprojectablePoint(DpwError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


# --- cli ---

class ConfigParseError(DpwError):
    pass
