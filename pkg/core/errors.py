"""Exception hierarchy shared by every module."""


class CobraError(Exception):
    """Base class for all errors raised by this package."""
    pass


class NiftiFormatError(CobraError, ValueError):
    """Exception signalling errors encountered during NIfTI file parsing"""
    pass


class LabelTypeError(NiftiFormatError):
    """A non-integer image was read where a label map was expected"""
    pass


class ShapeMismatchError(CobraError, ValueError):
    """Operand shapes or volume geometries do not agree"""
    pass


class GraphError(CobraError, ValueError):
    """Structural problem in a computational graph or its weights"""
    pass


class SerializationError(CobraError, ValueError):
    """A model or weight container could not be decoded"""
    pass


class ChecksumError(SerializationError):
    """Stored CRC-32 does not match the file contents"""
    pass


class VersionError(SerializationError):
    """Container version is not supported by this reader"""
    pass


class FileIOError(CobraError, OSError):
    """Reading or writing a file failed at the operating-system level"""
    pass


class ConfigError(CobraError, ValueError):
    """A configuration file or value could not be parsed"""
    pass


class LabelRangeError(CobraError, ValueError):
    """A label map holds values outside the scheme an operation expects"""
    pass
