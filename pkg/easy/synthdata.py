"""Synthetic speech-like corpus with known speaker, content and emotion factors.

Each utterance is a sum of harmonics of a time-varying fundamental. The speaker
fixes the base pitch and a spectral-envelope filter, each content token fixes a
formant pattern over a fixed number of mel frames, and the emotion class shapes
the pitch contour (level, slope, vibrato) and the energy modulation.
"""

import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .audio import Waveform, load_wav, num_frames, save_wav
from .config import RunConfig, config_hash
from .errors import CorpusError
from .models import ManifestRecord
from .storage import JsonlWriter, read_jsonl

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
WAV_DIR = "wavs"

_SPEAKER_SALT = 0x5EA
_NOISE_SALT = 0x401
_EMOTION_SALT = 0xE40
_SEMANTIC_SALT = 0x5E3
_GOLDEN = 0.618034
_MAX_HARMONIC_HZ = 7600.0
_PEAK = 0.8


class FactorSpec(BaseModel):

    speaker_id: int = Field(..., ge=0)
    content: list[int] = Field(..., min_length=1)
    emotion_id: int = Field(..., ge=0)

    @model_validator(mode="after")
    def validate_content(self):
        if any(t < 0 for t in self.content):
            raise ValueError("token ids must be non-negative")
        return self

    def check_ranges(self, num_speakers: int, vocab_size: int, num_emotions: int):
        if self.speaker_id >= num_speakers:
            raise CorpusError(f"speaker_id {self.speaker_id} outside [0, {num_speakers})")
        if self.emotion_id >= num_emotions:
            raise CorpusError(f"emotion_id {self.emotion_id} outside [0, {num_emotions})")
        if max(self.content) >= vocab_size:
            raise CorpusError(f"token id {max(self.content)} outside [0, {vocab_size})")


@dataclass
class LabeledUtterance:
    utt_id: str
    waveform: Waveform
    spec: FactorSpec
    frame_tokens: np.ndarray
    split: str = "train"
    seed: int = 0

    @property
    def speaker_id(self) -> int:
        return self.spec.speaker_id

    @property
    def emotion_id(self) -> int:
        return self.spec.emotion_id

    @property
    def num_frames(self) -> int:
        return int(self.frame_tokens.size)


@dataclass
class Corpus:
    train: list[LabeledUtterance]
    dev: list[LabeledUtterance]
    test: list[LabeledUtterance]
    num_speakers: int
    vocab_size: int
    num_emotions: int
    seed: int = 0
    config_hash: str = ""
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {u.utt_id: u for u in self.utterances()}

    def utterances(self) -> list[LabeledUtterance]:
        return [*self.train, *self.dev, *self.test]

    def split(self, name: str) -> list[LabeledUtterance]:
        if name not in ("train", "dev", "test"):
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)

    def get(self, utt_id: str) -> LabeledUtterance:
        try:
            return self._index[utt_id]
        except KeyError:
            raise CorpusError(f"unknown utterance {utt_id!r}") from None

    def speakers(self, split: str | None = None) -> list[int]:
        pool = self.split(split) if split else self.utterances()
        return sorted({u.speaker_id for u in pool})


def frames_per_token(cfg: RunConfig) -> int:
    samples = round(cfg.corpus.token_duration * cfg.mel.sample_rate)
    fpt = samples // cfg.mel.hop
    if fpt < 1:
        raise CorpusError(
            f"token duration {cfg.corpus.token_duration}s is shorter than one hop"
        )
    return fpt


def align_tokens(content: list[int], fpt: int) -> np.ndarray:
    return np.repeat(np.asarray(content, dtype=np.int64), fpt)


def speaker_base_f0(speaker_id: int) -> float:
    return 95.0 + 130.0 * math.modf(speaker_id * _GOLDEN)[0]


def speaker_envelope_db(speaker_id: int, freqs: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng([_SPEAKER_SALT, speaker_id])
    tilt = rng.uniform(-6.0, -2.0)
    centers = rng.uniform(300.0, 6000.0, size=3)
    widths = rng.uniform(200.0, 800.0, size=3)
    heights = rng.uniform(-8.0, 8.0, size=3)
    db = tilt * np.log2(np.maximum(freqs, 50.0) / 500.0)
    for c, w, h in zip(centers, widths, heights):
        db = db + h * np.exp(-0.5 * ((freqs - c) / w) ** 2)
    return db


def token_formants(token: int, vocab_size: int) -> tuple[float, float, float]:
    n1 = math.ceil(math.sqrt(vocab_size))
    n2 = math.ceil(vocab_size / n1)
    f1 = 250.0 + (token % n1) * 750.0 / max(n1 - 1, 1)
    f2 = 1100.0 + (token // n1) * 2000.0 / max(n2 - 1, 1)
    return f1, f2, 2800.0


def formant_gain(formants: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Sum of Lorentzian resonances; ``formants`` is (..., 3) aligned with ``freqs``."""
    gain = np.full(freqs.shape, 0.05)
    for j, bandwidth in enumerate((150.0, 200.0, 250.0)):
        gain = gain + 1.0 / (1.0 + ((freqs - formants[..., j]) / bandwidth) ** 2)
    return gain


@dataclass(frozen=True)
class EmotionStyle:
    pitch_scale: float
    slope: float
    vibrato_hz: float
    energy_depth: float

    @classmethod
    def of(cls, emotion_id: int, num_emotions: int) -> "EmotionStyle":
        frac = emotion_id / max(num_emotions - 1, 1)
        return cls(
            pitch_scale=0.85 + 0.3 * frac,
            slope=-0.25 + 0.5 * frac,
            vibrato_hz=3.0 + 4.0 * frac,
            energy_depth=0.1 + 0.6 * frac,
        )


def synth_utterance(
    spec: FactorSpec, seed: int, cfg: RunConfig, utt_id: str = "utt", split: str = "train"
) -> LabeledUtterance:
    corpus, mel = cfg.corpus, cfg.mel
    spec.check_ranges(corpus.num_speakers, corpus.vocab_size, corpus.num_emotions)
    fpt = frames_per_token(cfg)
    frame_tokens = align_tokens(spec.content, fpt)
    sr = mel.sample_rate
    n = (frame_tokens.size - 1) * mel.hop
    if n < mel.win:
        raise CorpusError(f"utterance of {n} samples is shorter than one window")

    t = np.arange(n) / sr
    progress = np.arange(n) / n
    style = EmotionStyle.of(spec.emotion_id, corpus.num_emotions)
    f0 = (
        speaker_base_f0(spec.speaker_id)
        * style.pitch_scale
        * (1.0 + style.slope * (progress - 0.5))
        * (1.0 + 0.02 * np.sin(2 * np.pi * style.vibrato_hz * t))
    )
    phase = 2 * np.pi * np.cumsum(f0) / sr

    token_of_sample = np.minimum(np.arange(n) // (fpt * mel.hop), len(spec.content) - 1)
    table = np.array([token_formants(v, corpus.vocab_size) for v in spec.content])
    formants = table[token_of_sample]

    samples = np.zeros(n)
    num_harmonics = int(_MAX_HARMONIC_HZ // f0.max())
    for k in range(1, num_harmonics + 1):
        freqs = k * f0
        gain = 10.0 ** (speaker_envelope_db(spec.speaker_id, freqs) / 20.0)
        samples += gain * formant_gain(formants, freqs) * np.sin(k * phase)

    samples *= 1.0 - style.energy_depth * 0.5 * (1.0 + np.sin(2 * np.pi * 3.0 * t))
    rng = np.random.default_rng([_NOISE_SALT, seed])
    samples = samples / np.max(np.abs(samples)) * _PEAK
    samples = samples + corpus.noise_level * rng.standard_normal(n)
    samples = samples / np.max(np.abs(samples)) * _PEAK

    assert num_frames(n, mel) == frame_tokens.size
    return LabeledUtterance(
        utt_id=utt_id,
        waveform=Waveform(samples, sr),
        spec=spec,
        frame_tokens=frame_tokens,
        split=split,
        seed=seed,
    )


def _utterance_rng(salt: int, u: LabeledUtterance, *shape: int) -> np.random.Generator:
    return np.random.default_rng([salt, zlib.crc32(u.utt_id.encode("utf-8")), *shape])


def oracle_semantic_teacher(u: LabeledUtterance) -> np.ndarray:
    return u.frame_tokens.copy()


def oracle_semantic_features(u: LabeledUtterance, vocab_size: int) -> np.ndarray:
    """Noisy one-hot token frames, for k-means tokenisation with a cluster
    count other than the vocabulary size."""
    T = u.num_frames
    features = np.zeros((T, vocab_size))
    features[np.arange(T), u.frame_tokens] = 1.0
    rng = _utterance_rng(_SEMANTIC_SALT, u, T, vocab_size)
    return features + rng.uniform(-0.05, 0.05, size=(T, vocab_size))


def oracle_emotion_teacher(u: LabeledUtterance, num_emotions: int) -> np.ndarray:
    T = u.num_frames
    embedding = np.zeros((T, num_emotions))
    embedding[:, u.emotion_id] = 1.0
    rng = _utterance_rng(_EMOTION_SALT, u, T, num_emotions)
    return embedding + rng.uniform(-0.05, 0.05, size=(T, num_emotions))


def utterance_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


class CorpusBuilder:

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.corpus_cfg = cfg.corpus

    def check_feasible(self):
        c = self.corpus_cfg
        if c.num_utterances < 3 * c.num_speakers:
            raise CorpusError(
                f"{c.num_utterances} utterances cannot give {c.num_speakers} speakers "
                "an utterance in every split"
            )
        if c.num_utterances < c.num_emotions:
            raise CorpusError("fewer utterances than emotion classes")
        if c.num_utterances * c.tokens_per_utterance < c.vocab_size:
            raise CorpusError("too few token slots to cover the vocabulary")
        frames_per_token(self.cfg)

    def plan(self, seed: int) -> list[FactorSpec]:
        c = self.corpus_cfg
        rng = np.random.default_rng(seed)
        speakers = rng.permutation(np.arange(c.num_utterances) % c.num_speakers)
        emotions = rng.permutation(np.arange(c.num_utterances) % c.num_emotions)
        total = c.num_utterances * c.tokens_per_utterance
        rounds = math.ceil(total / c.vocab_size)
        tokens = np.concatenate([rng.permutation(c.vocab_size) for _ in range(rounds)])
        tokens = tokens[:total].reshape(c.num_utterances, c.tokens_per_utterance)
        return [
            FactorSpec(
                speaker_id=int(speakers[i]),
                content=[int(t) for t in tokens[i]],
                emotion_id=int(emotions[i]),
            )
            for i in range(c.num_utterances)
        ]

    def assign_splits(self, specs: list[FactorSpec]) -> list[str]:
        c = self.corpus_cfg
        splits = ["train"] * len(specs)
        for sid in range(c.num_speakers):
            idx = [i for i, s in enumerate(specs) if s.speaker_id == sid]
            n_test = max(1, round(len(idx) * c.test_fraction)) if c.test_fraction else 0
            n_dev = max(1, round(len(idx) * c.dev_fraction)) if c.dev_fraction else 0
            if n_test + n_dev >= len(idx):
                raise CorpusError(f"speaker {sid} has no training utterances left")
            for i in idx[len(idx) - n_test:]:
                splits[i] = "test"
            for i in idx[len(idx) - n_test - n_dev:len(idx) - n_test]:
                splits[i] = "dev"
        return splits

    def build(self, seed: int) -> Corpus:
        self.check_feasible()
        specs = self.plan(seed)
        splits = self.assign_splits(specs)
        log_every = self.corpus_cfg.log_every
        logger.info(f"Synthesizing {len(specs)} utterances (seed {seed})")

        def job(i: int) -> LabeledUtterance:
            u = synth_utterance(
                specs[i], utterance_seed(seed, i), self.cfg, utt_id=f"utt{i:05d}", split=splits[i]
            )
            if (i + 1) % log_every == 0:
                logger.info(f"Synthesized {i + 1}/{len(specs)} utterances")
            return u

        with ThreadPoolExecutor(max_workers=self.corpus_cfg.workers) as executor:
            utterances = list(executor.map(job, range(len(specs))))

        return Corpus(
            train=[u for u in utterances if u.split == "train"],
            dev=[u for u in utterances if u.split == "dev"],
            test=[u for u in utterances if u.split == "test"],
            num_speakers=self.corpus_cfg.num_speakers,
            vocab_size=self.corpus_cfg.vocab_size,
            num_emotions=self.corpus_cfg.num_emotions,
            seed=seed,
            config_hash=config_hash(self.cfg),
        )


def build_corpus(cfg: RunConfig, seed: int) -> Corpus:
    return CorpusBuilder(cfg).build(seed)


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / WAV_DIR).mkdir(parents=True, exist_ok=True)
    with JsonlWriter(out_dir / MANIFEST_NAME) as manifest:
        for u in corpus.utterances():
            rel = f"{WAV_DIR}/{u.utt_id}.wav"
            save_wav(u.waveform, out_dir / rel)
            manifest.write(
                ManifestRecord(
                    utt_id=u.utt_id,
                    path=rel,
                    split=u.split,
                    speaker_id=u.speaker_id,
                    emotion_id=u.emotion_id,
                    tokens=list(u.spec.content),
                    seed=u.seed,
                    config_hash=corpus.config_hash,
                )
            )
    logger.info(f"Wrote {len(corpus.utterances())} utterances to {out_dir}")
    return out_dir / MANIFEST_NAME


def load_corpus(corpus_dir: str | Path, cfg: RunConfig) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise CorpusError(f"no manifest at {manifest}")
    records = read_jsonl(manifest, ManifestRecord)
    if not records:
        raise CorpusError(f"empty manifest {manifest}")
    fpt = frames_per_token(cfg)
    splits: dict[str, list[LabeledUtterance]] = {"train": [], "dev": [], "test": []}
    for r in records:
        w = load_wav(corpus_dir / r.path, cfg.mel.sample_rate, cfg.audio)
        spec = FactorSpec(speaker_id=r.speaker_id, content=r.tokens, emotion_id=r.emotion_id)
        frame_tokens = align_tokens(r.tokens, fpt)
        if num_frames(len(w), cfg.mel) != frame_tokens.size:
            raise CorpusError(f"{r.utt_id}: audio length does not match its token alignment")
        splits[r.split].append(
            LabeledUtterance(r.utt_id, w, spec, frame_tokens, split=r.split, seed=r.seed)
        )
    c = cfg.corpus
    return Corpus(
        **splits,
        num_speakers=max(c.num_speakers, 1 + max(r.speaker_id for r in records)),
        vocab_size=max(c.vocab_size, 1 + max(max(r.tokens) for r in records)),
        num_emotions=max(c.num_emotions, 1 + max(r.emotion_id for r in records)),
        seed=cfg.seed,
        config_hash=records[0].config_hash,
    )
