"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each."""


class CoreFaultError(Exception):
    exit_code = 3


class SpecError(CoreFaultError):
    """Bad generator spec or bad configuration."""

    exit_code = 2


class SummaryParseError(CoreFaultError):
    def __init__(self, path, lineno, colno, msg):
        super().__init__(f"{path}: malformed JSON at line {lineno}, column {colno}: {msg}")
        self.path = path
        self.lineno = lineno
        self.colno = colno


class ValidationError(CoreFaultError):
    def __init__(self, msg, field=None):
        super().__init__(msg if field is None else f"{field}: {msg}")
        self.field = field


class PcapFormatError(CoreFaultError):
    pass


class UnsupportedFormatError(PcapFormatError):
    pass


class TruncatedPcapError(PcapFormatError):
    def __init__(self, index, msg):
        super().__init__(f"packet {index}: {msg}")
        self.index = index


class TrainingError(CoreFaultError):
    pass


class DatasetError(CoreFaultError):
    pass


class VocabularyError(CoreFaultError):
    pass


class ModelLoadError(CoreFaultError):
    pass


class EvaluationError(CoreFaultError):
    pass


class CorpusIndexError(CoreFaultError):
    pass


class RetrievalError(CoreFaultError):
    pass


class PromptError(CoreFaultError):
    pass


class TransportError(CoreFaultError):
    exit_code = 4

    def __init__(self, msg, status=None, body=""):
        super().__init__(msg)
        self.status = status
        self.body = body


class CompletionTimeout(TransportError):
    pass
