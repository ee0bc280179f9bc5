"""Exception hierarchy for the whole pipeline.

Every error derives from ``GlyphDiffError`` and from the closest builtin, so
callers can catch either ``except GlyphDiffError`` or ``except ValueError``.
"""
from __future__ import annotations


class GlyphDiffError(Exception):
    """Root of all domain errors (cli maps these to exit code 1)."""


# ─── dataset ─────────────────────────────────────────────────────────
class ManifestError(GlyphDiffError, ValueError):
    pass


class MissingFile(GlyphDiffError, FileNotFoundError):
    pass


class ParseError(ManifestError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LabelOutOfRange(ManifestError):
    pass


class DuplicatePath(ManifestError):
    pass


class UndecodableImage(GlyphDiffError, ValueError):
    pass


class ClassTooSmall(ManifestError):
    pass


class ClassMismatch(GlyphDiffError, ValueError):
    pass


class EmptySplit(GlyphDiffError, ValueError):
    pass


# ─── shapes / indices ────────────────────────────────────────────────
class ShapeMismatch(GlyphDiffError, ValueError):
    pass


class TimestepOutOfRange(GlyphDiffError, IndexError):
    pass


class ClassOutOfRange(GlyphDiffError, IndexError):
    pass


class OddDimension(GlyphDiffError, ValueError):
    pass


class TimestepOrderError(GlyphDiffError, ValueError):
    pass


class LengthMismatch(GlyphDiffError, ValueError):
    pass


class DimensionMismatch(GlyphDiffError, ValueError):
    pass


# ─── schedule ────────────────────────────────────────────────────────
class InvalidRange(GlyphDiffError, ValueError):
    pass


class NonPositiveT(GlyphDiffError, ValueError):
    pass


class ScheduleChecksumError(GlyphDiffError, ValueError):
    pass


# ─── training ────────────────────────────────────────────────────────
class NonFiniteLoss(GlyphDiffError, RuntimeError):
    pass


# ─── metrics ─────────────────────────────────────────────────────────
class UnknownLayer(GlyphDiffError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NonPSDProduct(GlyphDiffError, ValueError):
    pass


class TooFewSamples(GlyphDiffError, ValueError):
    pass


# ─── persistence / cli ───────────────────────────────────────────────
class CheckpointError(GlyphDiffError, ValueError):
    pass


class ConfigError(GlyphDiffError, ValueError):
    pass


class RunLockedError(GlyphDiffError, RuntimeError):
    pass
