"""
Exception categories shared by every service module.

Each service declares its own exception family; the families hang off one
of the three categories below so that callers (CLI, API) can map any
failure to an exit code or HTTP status without knowing the module.
"""


class M3FASError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class InvalidInputError(M3FASError):
    """Bad configuration, file, shape, split or checkpoint"""
    exit_code = 2


class MissingModalityError(M3FASError):
    """An inference route needs a modality that was not supplied"""
    exit_code = 3

    def __init__(self, route: str, modality: str):
        self.route = route
        self.modality = modality
        super().__init__(f"Route '{route}' requires the {modality} input, which is missing")


class NumericFailureError(M3FASError):
    """Non-finite values or misuse of the differentiation tape"""
    exit_code = 4
