class RiskDesignError(Exception):
    """Base class for every error raised by this project."""

    exit_code = 4


class DistributionError(RiskDesignError):
    pass


class TableFormatError(RiskDesignError):
    pass


class ConfigError(RiskDesignError):
    exit_code = 2


class PrerequisiteError(RiskDesignError):
    """A stage needs an artifact that an earlier command produces."""

    exit_code = 3

    def __init__(self, what, command):
        super().__init__(f"{what} not found; run `python cli.py {command}` first")
        self.what = what
        self.command = command


class DegenerateWeightError(RiskDesignError):
    pass


class TrainingDivergedError(RiskDesignError):
    pass


class UnknownErrorAtomError(RiskDesignError, KeyError):
    def __str__(self):
        return Exception.__str__(self)
