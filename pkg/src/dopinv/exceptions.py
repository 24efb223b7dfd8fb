"""Exception hierarchy shared by all dopinv modules."""


class DopinvError(Exception):
    """Base class for all library errors."""


class DomainError(DopinvError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class CoefficientDomainError(DomainError):
    """A diffusion coefficient is not strictly positive."""


class SolverError(DopinvError, RuntimeError):
    """A linear or nonlinear solve failed."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(SolverError):
    """Newton iteration diverged or did not converge."""


class MeshMismatchError(DopinvError, ValueError):
    """Fields or files that belong to different meshes were mixed."""


class ConfigError(DopinvError, ValueError):
    """Invalid experiment configuration."""


class StageError(DopinvError, RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
