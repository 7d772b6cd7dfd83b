"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or inputs that violate an operation's preconditions."""


class ProtocolError(RuntimeError):
    """A protocol-level invariant was broken (e.g. a missing client update)."""


class DivergedRunError(RuntimeError):
    """A model became non-finite during training.

    Carries enough context to locate the failure in the event timeline.
    """

    def __init__(self, message: str, client_id: int | None = None,
                 epoch: int | None = None, global_iteration: int | None = None):
        super().__init__(message)
        self.client_id = client_id
        self.epoch = epoch
        self.global_iteration = global_iteration
