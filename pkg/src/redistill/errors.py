"""Exception hierarchy shared by the graph, analyzer, rewriter and kernel."""


class RedistillError(Exception):
    """Base class for all package errors."""


# --- graph construction / validation -------------------------------------

class GraphError(RedistillError):
    pass


class CycleDetected(GraphError):
    pass


class DanglingInput(GraphError):
    pass


class ArityMismatch(GraphError):
    pass


class ShapeMismatch(GraphError):
    pass


class NonPositiveDim(GraphError):
    pass


class UnknownModel(GraphError):
    pass


class IncompatibleResolution(GraphError):
    pass


class IRFormatError(GraphError):
    """Malformed graph IR document (bad JSON, unknown fields, bad version)."""


# --- memory analysis ------------------------------------------------------

class MissingShape(RedistillError):
    pass


class UnsupportedFormat(RedistillError):
    pass


# --- stride rewriting -----------------------------------------------------

class TooFewDownsamples(RedistillError):
    pass


class NonUniformStride(RedistillError):
    pass


# --- alignment planning ---------------------------------------------------

class NoMatch(RedistillError):
    pass


class NotUNet(RedistillError):
    pass


# --- numeric kernel / training ---------------------------------------------

class NonFinite(RedistillError):
    pass


class StepOutOfRange(RedistillError):
    pass


class DivergenceDetected(RedistillError):
    pass


class PlanMismatch(RedistillError):
    pass
