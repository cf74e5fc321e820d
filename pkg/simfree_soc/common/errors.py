from typing import Optional, Sequence


class NumericalError(FloatingPointError):
    """
    Raised when a non-finite value shows up during simulation or training.

    :param message: description of the failure
    :param walker: index of the first offending walker (None when not walker-specific)
    :param step: index of the time step at which it happened (None when not step-specific)
    """

    def __init__(self, message: str, walker: Optional[int] = None, step: Optional[int] = None):
        location = []
        if walker is not None:
            location.append(f"walker {walker}")
        if step is not None:
            location.append(f"step {step}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.walker = walker
        self.step = step


class DivergedWalkersError(NumericalError):
    """
    Raised in strict mode when walkers leave the divergence guard.

    :param walkers: indices of the walkers that crossed the guard
    :param step: time step index at which the guard was crossed
    :param max_norm: largest state norm observed among the offending walkers
    :param guard: the configured guard
    """

    def __init__(self, walkers: Sequence[int], step: int, max_norm: float, guard: float):
        walkers = [int(i) for i in walkers]
        shown = ", ".join(map(str, walkers[:10])) + (", ..." if len(walkers) > 10 else "")
        super().__init__(
            f"{len(walkers)} walker(s) diverged: |x| = {max_norm:.3e} exceeds the guard {guard:.1e}; walkers [{shown}]",
            walker=walkers[0],
            step=step,
        )
        self.walkers = walkers
        self.max_norm = max_norm
        self.guard = guard


class RiccatiDivergenceError(NumericalError):
    """
    Raised when the backward Riccati integration blows up.

    :param time: the time at which an entry first exceeded the blow-up threshold
    """

    def __init__(self, time: float, threshold: float):
        super().__init__(f"Riccati solution blew up (|F| > {threshold:.0e}) at t = {time:.6g}")
        self.time = time


class CheckpointError(ValueError):
    """Corrupted parameter file or layout mismatch between a checkpoint and a policy."""


class ConfigError(ValueError):
    """
    Invalid experiment configuration.

    :param message: what is wrong
    :param field: dotted name of the offending field, e.g. ``train.learning_rate``
    :param line: 1-based line in the config file, when known
    """

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        prefix = ""
        if field is not None:
            prefix = f"{field}: "
        if line is not None:
            prefix = f"line {line}: {prefix}"
        super().__init__(prefix + message)
        self.field = field
        self.line = line
