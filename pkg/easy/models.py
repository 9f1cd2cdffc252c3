from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

Split = Literal["train", "dev", "test"]


class ManifestRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    utt_id: str = Field(..., min_length=1, description="Utterance id, also the WAV stem")
    path: str = Field(..., description="WAV path relative to the corpus directory")
    split: Split
    speaker_id: int = Field(..., ge=0)
    emotion_id: int = Field(..., ge=0)
    tokens: List[int] = Field(..., min_length=1)
    seed: int
    config_hash: str

    @field_validator("tokens")
    def validate_tokens(cls, v):
        if any(t < 0 for t in v):
            raise ValueError("token ids must be non-negative")
        return v


class TrainStepRecord(BaseModel):

    step: int
    epoch: int
    lr: float
    lambda_grl: float
    # loss terms are null on rejected steps
    rec: Optional[float] = None
    adv: Optional[float] = None
    com: Optional[float] = None
    spk: Optional[float] = None
    lin: Optional[float] = None
    emo: Optional[float] = None
    total: Optional[float] = None
    disc: Optional[float] = None
    rejected: bool = False
    rejected_term: Optional[str] = None
    config_hash: str
    seed: int


class TrialRecord(BaseModel):

    enroll_ids: List[str] = Field(..., min_length=1)
    test_id: str
    label: bool = Field(..., description="True for a same-speaker trial")
    condition: str = "original"
    score: Optional[float] = None


class ConditionMetrics(BaseModel):

    eer: float = Field(..., ge=0.0, le=1.0)
    ter: float = Field(..., ge=0.0)
    uar: float = Field(..., ge=0.0, le=1.0)
    token_accuracy: float = Field(..., ge=0.0, le=1.0)
    num_genuine: int = Field(..., ge=1)
    num_impostor: int = Field(..., ge=1)

    @property
    def num_trials(self) -> int:
        return self.num_genuine + self.num_impostor


class MetricsReport(BaseModel):
    """Top-level privacy/utility numbers are those of the anonymized condition."""

    eer: float = Field(..., ge=0.0, le=1.0)
    ter: float = Field(..., ge=0.0)
    uar: float = Field(..., ge=0.0, le=1.0)
    conditions: Dict[str, ConditionMetrics]
    num_trials: int
    num_genuine: int
    num_impostor: int
    config_hash: str
    seed: int
    model_step: int
    variant: str = "full"


class ProbeResult(BaseModel):

    representation: str
    target: Literal["speaker", "content", "emotion"]
    score: float = Field(..., ge=0.0, le=1.0, description="Accuracy, or UAR for emotion")
    metric: Literal["accuracy", "uar"]
    num_train: int
    num_test: int


class ProbeReport(BaseModel):

    layers: str
    results: List[ProbeResult]
    speaker_eer: Dict[str, float] = Field(default_factory=dict)
    config_hash: str
    seed: int
    model_step: int


class PoolEntry(BaseModel):

    label: str
    vector: List[float] = Field(..., min_length=1)
    num_utterances: int = Field(..., ge=1)


class PoolFile(BaseModel):

    format_version: int
    config_hash: str
    seed: int
    model_step: int
    source: str = "train"
    entries: List[PoolEntry]


class AnonymizedRecord(BaseModel):

    source: str
    output: str
    rng_key: str
    alpha: float
    num_averaged: int
    config_hash: str
    seed: int


class AblationRow(BaseModel):

    variant: str
    sweep: Dict[str, float | int | str] = Field(default_factory=dict)
    seeds: List[int]
    eer: float
    ter: float
    uar: float
    original_eer: float
    delta_eer: Optional[float] = None
    delta_ter: Optional[float] = None
    delta_uar: Optional[float] = None
    config_hash: str


class ErrorRecord(BaseModel):

    status: Literal["error"] = "error"
    command: str
    error: str
    message: str
