class EasyError(Exception):
    """Base class for every failure raised by the easy package."""


class ConfigError(EasyError, ValueError):
    pass


class AudioError(EasyError, ValueError):
    pass


class CorpusError(EasyError, ValueError):
    pass


class EncoderError(EasyError, ValueError):
    pass


class BottleneckError(EasyError, RuntimeError):
    pass


class DistillError(EasyError, ValueError):
    pass


class DecoderError(EasyError, ValueError):
    pass


class NonFiniteLossError(EasyError, FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term '{term}': {value}")
        self.term = term
        self.value = value


class CheckpointError(EasyError):
    pass


class RecordError(EasyError, ValueError):
    """A JSON or JSONL artifact that does not match its record schema."""


class PoolError(EasyError, ValueError):
    pass


class AnonymizationError(EasyError, RuntimeError):
    pass


class MetricError(EasyError, ValueError):
    pass


class ProbeError(EasyError, ValueError):
    pass


class EvaluationError(EasyError):
    pass
