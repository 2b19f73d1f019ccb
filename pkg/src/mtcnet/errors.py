"""Exception hierarchy shared across the package."""


class MTCError(Exception):
    """Base class for every error raised by mtcnet."""


class ShapeError(MTCError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(MTCError, RuntimeError):
    """The recorded graph cannot be differentiated (empty, or already consumed)."""


class FormatError(MTCError, ValueError):
    """A serialized file does not follow its wire format."""


class BadMagicError(FormatError):
    """The leading magic bytes do not identify the expected format."""


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class PNMParseError(FormatError):
    """Malformed PPM/PGM data. ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class WeightMismatchError(MTCError, ValueError):
    """A weight file does not match the target parameter set."""

    def __init__(self, missing=(), unexpected=(), mismatched=()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)
        lines = ["weight file does not match parameters:"]
        lines += [f"  missing: {name}" for name in self.missing]
        lines += [f"  unexpected: {name}" for name in self.unexpected]
        lines += [
            f"  shape mismatch: {name} file={fs} expected={es}"
            for name, fs, es in self.mismatched
        ]
        super().__init__("\n".join(lines))


class DegenerateRangeError(MTCError, ValueError):
    """Training counts span no range, so count groups cannot be formed."""


class NaNLossError(MTCError, RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
