"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A run description, manifest entry or CLI request is unusable."""


class AdapterError(RuntimeError):
    """An external generative-model adapter failed or returned bad output."""

    def __init__(self, gm_name, message):
        super().__init__(f"[{gm_name}] {message}")
        self.gm_name = gm_name


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite; carries the last good checkpoint."""

    def __init__(self, step, last_good=None):
        msg = f"non-finite loss at step {step}"
        if last_good is not None:
            msg += f"; last good checkpoint: {last_good}"
        super().__init__(msg)
        self.step = step
        self.last_good = last_good
