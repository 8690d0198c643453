"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ClaraError(Exception):
    """Base class for every error raised by this package."""


# -- benchmark data -----------------------------------------------------------

class UnknownLanguage(ClaraError, ValueError):
    pass


class MalformedItem(ClaraError, ValueError):
    pass


class DuplicateItem(ClaraError, ValueError):
    def __init__(self, duplicates: list[tuple[str, str]]):
        self.duplicates = list(duplicates)
        cells = ", ".join(f"({q}, {lang})" for q, lang in self.duplicates)
        super().__init__(f"duplicate qid/language cells: {cells}")


class PairingViolation(ClaraError, ValueError):
    """Raised with every pairing problem found, not just the first."""

    def __init__(self, missing: list[tuple[str, str]], mismatches: list[tuple[str, str]]):
        self.missing = list(missing)
        self.mismatches = list(mismatches)
        lines = [f"missing cell ({q}, {lang})" for q, lang in self.missing]
        lines += [f"{field} mismatch on {q}" for q, field in self.mismatches]
        super().__init__("; ".join(lines))


# -- llm gateway --------------------------------------------------------------

class BackendUnavailable(ClaraError):
    pass


class ScriptMiss(ClaraError, KeyError):
    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint
        super().__init__(fingerprint)

    def __str__(self) -> str:
        return f"no scripted response for prompt fingerprint {self.fingerprint}"


class ParseExhausted(ClaraError):
    """Every attempt at a structured reply was malformed. Callers map this to Abstain."""

    def __init__(self, attempts: int, last_response: str):
        self.attempts = attempts
        self.last_response = last_response
        super().__init__(f"no parseable JSON object after {attempts} attempt(s)")


# -- retrieval ----------------------------------------------------------------

class EmbedderUnavailable(ClaraError):
    pass


class DimensionMismatch(ClaraError, ValueError):
    pass


class EmptyIndex(ClaraError):
    pass


class EmptyCorpus(ClaraError, ValueError):
    pass


class IndexFormatError(ClaraError, ValueError):
    pass


class SpanMismatch(ClaraError, ValueError):
    pass


class SearchUnavailable(ClaraError):
    pass


# -- harness / cli ------------------------------------------------------------

class EmptyFilter(ClaraError, ValueError):
    pass


class MissingEnglishRow(ClaraError, KeyError):
    pass


class IoFailure(ClaraError, OSError):
    pass


class IndexRequired(ClaraError):
    pass


class VersionMismatch(ClaraError, ValueError):
    pass


class ConfigError(ClaraError, ValueError):
    pass
