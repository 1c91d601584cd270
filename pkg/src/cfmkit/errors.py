"""Exception hierarchy shared by every cfmkit module.

Each exception carries a short ``kind`` used as the machine-parseable
prefix of CLI error messages.
"""


class CfmError(Exception):
    kind = "Error"


class SmilesError(CfmError, ValueError):
    kind = "SmilesError"


class UnsupportedToken(SmilesError):
    kind = "UnsupportedToken"

    def __init__(self, token, position):
        self.token = token
        self.position = position
        super().__init__(f"unsupported token {token!r} at position {position}")


class UnclosedRingBond(SmilesError):
    kind = "UnclosedRingBond"


class UnbalancedParenthesis(SmilesError):
    kind = "UnbalancedParenthesis"


class ValenceViolation(SmilesError):
    kind = "ValenceViolation"


class MultipleCharges(SmilesError):
    kind = "MultipleCharges"


class KekulizationError(SmilesError):
    kind = "KekulizationError"


class UnknownElementMass(CfmError, KeyError):
    kind = "UnknownElementMass"

    def __str__(self):
        return str(self.args[0]) if self.args else self.kind


class GraphTooLarge(CfmError):
    kind = "GraphTooLarge"


class NoProtonationSite(CfmError):
    kind = "NoProtonationSite"


class LayoutMismatch(CfmError):
    kind = "LayoutMismatch"


class VersionMismatch(CfmError):
    kind = "VersionMismatch"


class CorruptFile(CfmError):
    kind = "CorruptFile"


class MalformedLine(CfmError):
    kind = "MalformedLine"

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class MissingEnergyBlock(CfmError):
    kind = "MissingEnergyBlock"


class EmptySpectrum(CfmError):
    kind = "EmptySpectrum"


class NonConvergence(CfmError):
    kind = "NonConvergence"


class NoTrainingData(CfmError):
    kind = "NoTrainingData"


class UnknownCorrectId(CfmError):
    kind = "UnknownCorrectId"
