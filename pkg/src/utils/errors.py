"""
Error Hierarchy
Every failure raised by the laboratory derives from DATorusError
"""

from typing import Optional, Sequence


class DATorusError(Exception):
    """Base class for all laboratory errors"""


# Linear algebra ---------------------------------------------------------

class NotInvertibleOverZ(DATorusError):
    def __init__(self, det: int):
        self.det = det
        super().__init__(f"Matrix is not invertible over Z (det={det})")


class SpectrumNotRealSplit(DATorusError):
    pass


class WrongStableDimension(DATorusError):
    def __init__(self, n_contracting: int):
        self.n_contracting = n_contracting
        super().__init__(
            f"Expected 2 contracting and 1 expanding eigenvalue, got {n_contracting} contracting"
        )


class NonFiniteInput(DATorusError):
    pass


class ModulusOverflow(DATorusError):
    pass


# DA maps ----------------------------------------------------------------

class NotDiffeomorphism(DATorusError):
    def __init__(self, point: Sequence[float], det: float):
        self.point = tuple(float(c) for c in point)
        self.det = det
        super().__init__(f"det df changes sign at {self.point} (det={det:.3e})")


class VerificationFailed(DATorusError):
    def __init__(self, cell: Sequence[float], reason: str):
        self.cell = tuple(float(c) for c in cell)
        self.reason = reason
        super().__init__(f"Partial hyperbolicity fails at {self.cell}: {reason}")


class NoConvergence(DATorusError):
    def __init__(self, message: str, point: Optional[Sequence[float]] = None):
        self.point = None if point is None else tuple(float(c) for c in point)
        super().__init__(message)


# Semiconjugacy and plaques ---------------------------------------------

class DepthInsufficient(DATorusError):
    def __init__(self, residual: float, suggested_depth: int):
        self.residual = residual
        self.suggested_depth = suggested_depth
        super().__init__(
            f"Series residual {residual:.3e} above tolerance; try depth >= {suggested_depth}"
        )


class LeafIntegrationDiverged(DATorusError):
    pass


class LeafIntegrationStalled(DATorusError):
    pass


class HImageNonMonotone(DATorusError):
    pass


class ChildConstructionFailed(DATorusError):
    pass


class NotSameBox(DATorusError):
    pass


class HolonomyOutOfPlaque(DATorusError):
    pass


# Statistics -------------------------------------------------------------

class ExcessiveDropRate(DATorusError):
    def __init__(self, rate: float, limit: float):
        self.rate = rate
        self.limit = limit
        super().__init__(f"Inversion drop rate {rate:.2e} exceeds {limit:.2e}")


class InsufficientSignal(DATorusError):
    pass


class TreeTooLarge(DATorusError):
    def __init__(self, leaves: int, limit: int):
        self.leaves = leaves
        self.limit = limit
        super().__init__(f"Transfer tree has {leaves} leaves (limit {limit})")


# Coupling ---------------------------------------------------------------

class NoEpsApproachWithinBudget(DATorusError):
    pass


class PairingMismatch(DATorusError):
    pass


class RecursionBudgetExhausted(DATorusError):
    pass


# Runner -----------------------------------------------------------------

class ConfigInvalid(DATorusError):
    pass


class ComputeFailed(DATorusError):
    pass


class CorruptCache(DATorusError):
    pass
