class AdaPCRError(Exception):
    """Base error. `category` is the machine-readable tag the CLI reports."""

    category: str = "runtime_error"
    exit_code: int = 1


class ConfigError(AdaPCRError):
    category = "config_error"
    exit_code = 3


class ParseError(AdaPCRError):
    category = "parse_error"

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class ConflictError(AdaPCRError):
    category = "conflict_error"

    def __init__(self, message: str, identifier: str):
        super().__init__(message)
        self.identifier = identifier


class PassageLookupError(AdaPCRError, KeyError):
    category = "lookup_error"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ContractError(AdaPCRError):
    category = "contract_error"


class TransportError(AdaPCRError):
    category = "transport_error"


class RetryableError(TransportError):
    category = "retryable_error"

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class PreconditionError(AdaPCRError):
    category = "precondition_error"


class TrainingDivergedError(AdaPCRError):
    category = "training_diverged"
