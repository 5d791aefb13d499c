"""Exception hierarchy shared by all capmt modules."""

from __future__ import annotations


class CapError(Exception):
    """Base class for every error raised by capmt."""


# corpus
class EmptyDocument(CapError):
    pass


class ZeroLengthPair(CapError):
    pass


class CorpusFormatError(CapError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# attention
class InvalidTensor(CapError):
    pass


class AbsentScore(CapError):
    """No token of the target sentence is visible from the querying token."""


class SelfScore(CapError):
    pass


# datastore
class EmptyDatastore(CapError):
    pass


class IndexBuildError(CapError):
    pass


class QueryDimensionError(CapError):
    pass


class InsufficientEntries(CapError):
    pass


class IndexFormatError(CapError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


# backend
class BackendError(CapError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendProtocolError(BackendError):
    pass


class ReplayMiss(BackendError):
    def __init__(self, request_hash: str, route: str):
        self.request_hash = request_hash
        self.route = route
        super().__init__(f"no recorded {route} response for request {request_hash}")


class ContextLengthExceeded(BackendError):
    def __init__(self, limit: int, length: int | None = None):
        self.limit = limit
        self.length = length
        detail = f" (got {length})" if length is not None else ""
        super().__init__(f"input exceeds backend context limit {limit}{detail}")


# prompting
class TemplateError(CapError):
    def __init__(self, message: str, placeholder: str | None = None):
        self.placeholder = placeholder
        super().__init__(message)


# pipeline
class DocumentFailed(CapError):
    """A backend error aborted a document; ``records`` holds what completed."""

    def __init__(self, doc_id: str, records: list, cause: Exception):
        self.doc_id = doc_id
        self.records = records
        self.cause = cause
        super().__init__(f"document {doc_id!r} failed after {len(records)} sentence(s): {cause}")


# eval
class EmptyEvalSet(CapError):
    pass


class AlignmentError(CapError):
    pass
