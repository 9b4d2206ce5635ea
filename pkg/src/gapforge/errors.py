"""Exception hierarchy shared by every gapforge module."""

from __future__ import annotations


class GapforgeError(Exception):
    """Base class for all toolkit errors."""


class MarkerError(GapforgeError, ValueError):
    pass


class UnbalancedMarkers(MarkerError):
    pass


class NestedMarkers(MarkerError):
    pass


class EmptyGap(MarkerError):
    pass


class SchemaViolation(GapforgeError, ValueError):
    def __init__(self, message: str, doc_id: str | None = None, field: str | None = None):
        self.doc_id = doc_id
        self.field = field
        where = ", ".join(p for p in (f"id={doc_id!r}" if doc_id is not None else "",
                                      f"field={field!r}" if field else "") if p)
        super().__init__(f"{message} ({where})" if where else message)


class IoFailure(GapforgeError, OSError):
    pass


class SequenceTooLong(GapforgeError, ValueError):
    def __init__(self, length: int, max_len: int, index: int | None = None):
        self.length = length
        self.max_len = max_len
        self.index = index
        at = f" (sentence {index})" if index is not None else ""
        super().__init__(f"sequence of {length} tokens exceeds max_len={max_len}{at}")


class SpanOutOfBounds(GapforgeError, IndexError):
    pass


class DimensionMismatch(GapforgeError, ValueError):
    pass


class LengthMismatch(GapforgeError, ValueError):
    pass


class TooFewSentences(GapforgeError, ValueError):
    pass


class SameDocument(GapforgeError, ValueError):
    pass


class EmptyCorpus(GapforgeError, ValueError):
    pass


class NonFiniteLoss(GapforgeError, FloatingPointError):
    pass


class NoAnnotatedDev(GapforgeError, ValueError):
    pass


class SingleSentence(GapforgeError, ValueError):
    pass


class MissingTense(GapforgeError, LookupError):
    pass


class CheckpointMismatch(GapforgeError):
    pass
