"""Exception hierarchy shared by every module."""


class LinfuseError(Exception):
    """Base class for all errors raised by this package."""


class DatasetMalformed(LinfuseError):
    """A dataset directory is missing a file or holds inconsistent content."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class NegativeWeight(LinfuseError):
    pass


class InvalidSpec(LinfuseError):
    """Out-of-range parameter, unknown channel name or bad configuration value."""


class CacheCorrupt(LinfuseError):
    pass


class EmptyLabelSet(LinfuseError):
    pass


class ShapeMismatch(LinfuseError):
    pass


class InvalidTarget(LinfuseError):
    pass


class InvalidLabel(LinfuseError):
    pass


class TooFewLabels(LinfuseError):
    pass


class NonFiniteLoss(LinfuseError):
    def __init__(self, batch_index, value):
        self.batch_index = batch_index
        self.value = value
        super().__init__(f"non-finite loss {value!r} at batch {batch_index}")


class EmptySplit(LinfuseError):
    pass


class ModelFormatError(LinfuseError):
    """Base for model-file problems."""


class VersionMismatch(ModelFormatError):
    pass


class ChecksumMismatch(ModelFormatError):
    pass


class ChannelMismatch(LinfuseError):
    pass
