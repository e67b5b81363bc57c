"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a shape, range or consistency precondition."""


class FormatError(ValueError):
    """A file on disk does not follow the expected container or text format."""
