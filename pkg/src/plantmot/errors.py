class InvalidConfigError(ValueError):
    """A configuration or input violates its documented invariants."""


class MissingLatentError(KeyError):
    """A ground-truth object has no appearance latent assigned."""


class DegenerateSampleError(ValueError):
    """A statistical test received samples it cannot evaluate."""
