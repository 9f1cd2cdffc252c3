import hashlib
import json
import logging
import math
import os
import tomllib
from pathlib import Path
from typing import Any, Literal, Mapping

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "EASY_CONFIG"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Fields that never change what a run computes.
_UNHASHED = {"paths", "log_level"}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MelConfig(_Section):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sample_rate: int = Field(16000, gt=0)
    n_fft: int = Field(1024, gt=0)
    win: int = Field(1024, gt=0)
    hop: int = Field(256, gt=0)
    n_mels: int = 80
    fmin: float = Field(0.0, ge=0.0)
    fmax: float = 8000.0

    @model_validator(mode="after")
    def check_geometry(self):
        if not self.hop <= self.win <= self.n_fft:
            raise ValueError("mel config requires hop <= win <= n_fft")
        if self.n_mels != 80:
            raise ValueError("n_mels is fixed at 80")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("mel config requires 0 <= fmin < fmax <= sample_rate / 2")
        return self


class AudioConfig(_Section):
    downmix_stereo: bool = True
    resample: bool = True


class CorpusConfig(_Section):
    num_speakers: int = Field(40, ge=8)
    vocab_size: int = Field(32, ge=16)
    num_emotions: int = Field(4, ge=4)
    num_utterances: int = Field(400, gt=0)
    tokens_per_utterance: int = Field(8, ge=1)
    token_duration: float = Field(0.256, gt=0.0)
    dev_fraction: float = Field(0.15, ge=0.0, lt=1.0)
    test_fraction: float = Field(0.15, ge=0.0, lt=1.0)
    pool_speakers: int | None = Field(20, ge=1)
    noise_level: float = Field(1e-3, ge=0.0)
    workers: int = Field(4, gt=0)
    log_every: int = Field(50, gt=0)


class ModelConfig(_Section):
    dim: int = Field(128, gt=0)
    encoder_layers: int = Field(4, ge=1)
    encoder_kernel: int = Field(5, ge=1)
    speaker_hidden: int = Field(128, gt=0)
    speaker_gated_blocks: int = Field(2, ge=0)
    speaker_kernel: int = Field(3, ge=1)
    attention_layers: int = Field(2, ge=0)
    attention_heads: int = Field(4, ge=1)
    num_quantizers: int = Field(8, ge=2)
    codebook_size: int = Field(256, ge=1)
    ema_decay: float = Field(0.99, ge=0.0, lt=1.0)
    dead_code_threshold: float = Field(1e-2, ge=0.0)
    reseed_after: int = Field(50, ge=1)
    decoder_channels: int = Field(128, gt=0)
    upsample_rates: tuple[int, ...] = (8, 8, 4)
    discriminator_scales: int = Field(3, ge=1)
    discriminator_channels: int = Field(16, gt=0)
    kl_temperature: float = Field(0.5, gt=0.0)

    @model_validator(mode="after")
    def check_shapes(self):
        if self.speaker_hidden % self.attention_heads:
            raise ValueError("speaker_hidden must be divisible by attention_heads")
        if any(rate < 2 or rate % 2 for rate in self.upsample_rates):
            raise ValueError("decoder upsample rates must be even and >= 2")
        return self


class LossConfig(_Section):
    lambda_rec: float = Field(45.0, ge=0.0)
    feature_match_weight: float = Field(2.0, ge=0.0)
    lambda_grl: float = Field(1.0, ge=0.0)
    grl_warmup_fraction: float = Field(0.2, ge=0.0, le=1.0)
    use_spk: bool = True
    use_lin: bool = True
    use_emo: bool = True
    use_adversarial: bool = True


class OptimConfig(_Section):
    lr: float = Field(2e-4, gt=0.0)
    beta1: float = Field(0.8, ge=0.0, lt=1.0)
    beta2: float = Field(0.99, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    lr_decay: float = Field(0.99, gt=0.0, le=1.0)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(8, gt=0)
    segment_frames: int = Field(64, ge=2)
    log_every: int = Field(50, gt=0)


class TeacherConfig(_Section):
    kind: Literal["oracle", "external"] = "oracle"
    feature_dir: Path | None = None
    semantic_layer: int = Field(6, ge=0)
    kmeans_clusters: int | None = Field(None, gt=0)
    emotion_dim: int | None = Field(None, gt=0)


class AnonConfig(_Section):
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    num_averaged: int = Field(10, ge=1)
    sigma_policy: Literal["pool_std", "fixed"] = "pool_std"
    sigma: float = Field(1.0, gt=0.0)
    per_speaker: bool = False
    bypass: bool = False
    pool_min: int = Field(20, ge=1)
    seed: int = 0
    workers: int = Field(4, gt=0)


class EvalConfig(_Section):
    probe_max_iter: int = Field(1000, gt=0)
    probe_c: float = Field(1.0, gt=0.0)
    collapse_repeats: bool = False
    disjoint_pool: bool = True
    workers: int = Field(4, gt=0)


class PathsConfig(_Section):
    corpus_dir: Path = Path("data/corpus")
    run_dir: Path = Path("runs/default")


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="EASY_", env_nested_delimiter="__", extra="forbid"
    )

    seed: int = 0
    log_level: str = "INFO"
    mel: MelConfig = Field(default_factory=MelConfig)
    audio: AudioConfig = Field(default_factory=AudioConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    anon: AnonConfig = Field(default_factory=AnonConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def check_cross_section(self):
        if math.prod(self.model.upsample_rates) != self.mel.hop:
            raise ValueError("product of decoder upsample rates must equal mel hop")
        if self.teacher.kind == "oracle":
            if self.teacher.emotion_dim not in (None, self.corpus.num_emotions):
                raise ValueError("oracle teacher emotion_dim must equal num_emotions")
        elif self.teacher.feature_dir is None:
            raise ValueError("external teacher requires teacher.feature_dir")
        if self.eval.disjoint_pool:
            n = self.corpus.pool_speakers
            if n is None or n >= self.corpus.num_speakers:
                raise ValueError("eval.disjoint_pool needs corpus.pool_speakers below num_speakers")
        return self

    @property
    def semantic_classes(self) -> int:
        if self.teacher.kind == "oracle":
            return self.teacher.kmeans_clusters or self.corpus.vocab_size
        return self.teacher.kmeans_clusters or 512

    @property
    def emotion_dim(self) -> int:
        if self.teacher.kind == "oracle":
            return self.corpus.num_emotions
        return self.teacher.emotion_dim or 768

    def describe(self):
        logger.info(f"config hash: {config_hash(self)}")
        logger.info(f"seed: {self.seed}")
        logger.info(
            f"model: d={self.model.dim} N={self.model.num_quantizers} "
            f"C={self.model.codebook_size} K={self.semantic_classes}"
        )
        logger.info(
            f"loss: lambda_rec={self.loss.lambda_rec} spk={self.loss.use_spk} "
            f"lin={self.loss.use_lin} emo={self.loss.use_emo}"
        )
        logger.info(f"optim: lr={self.optim.lr} steps={self.optim.steps}")


def config_hash(cfg: RunConfig) -> str:
    payload = cfg.model_dump(mode="json", exclude=_UNHASHED)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``section.key=value``; the value is read as JSON when it parses."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value: {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _merge(data: dict, dotted: Mapping[str, Any]) -> dict:
    for key, value in dotted.items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override below scalar key {part!r}")
        node[leaf] = value
    return data


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    path = path or os.getenv(CONFIG_ENV_VAR)
    data: dict = {}
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"invalid TOML in {path}: {e}") from e
    _merge(data, overrides or {})
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def with_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    data = _merge(cfg.model_dump(mode="json"), overrides)
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def configure_logging(level: str = "INFO"):
    logging.basicConfig(level=level, format=LOG_FORMAT)
