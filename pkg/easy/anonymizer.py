"""Speaker vector pool and pseudo-speaker anonymization."""

import logging
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .audio import Waveform, load_wav, save_wav
from .bottleneck import reconstruct_layers
from .config import AnonConfig, AudioConfig
from .errors import AnonymizationError, PoolError
from .model import EasyModel
from .models import AnonymizedRecord, ManifestRecord, PoolEntry, PoolFile
from .storage import iter_files, read_json, read_jsonl, write_json, write_jsonl
from .synthdata import MANIFEST_NAME, LabeledUtterance

logger = logging.getLogger(__name__)

POOL_VERSION = 1
POOL_NAME = "pool.json"
ANON_MANIFEST_NAME = "anonymized.jsonl"
_SIGMA_FLOOR = 1e-8


@dataclass
class SpeakerPool:
    labels: list[str]
    vectors: np.ndarray  # (P, d)
    counts: list[int] = field(default_factory=list)
    source: str = "train"
    config_hash: str = ""
    seed: int = 0
    model_step: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.labels):
            raise PoolError("pool vectors must be (entries, dim) with one label per entry")
        if not np.all(np.isfinite(self.vectors)):
            raise PoolError("pool contains non-finite vectors")
        if not self.counts:
            self.counts = [1] * len(self.labels)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def std(self) -> np.ndarray:
        return self.vectors.std(axis=0)


@torch.no_grad()
def utterance_speaker_vector(model: EasyModel, w: Waveform) -> np.ndarray:
    wave = torch.from_numpy(w.samples.astype(np.float32))
    return model.speaker_vector(wave).double().numpy()


def build_pool(
    utterances: Sequence[LabeledUtterance],
    model: EasyModel,
    speakers: Sequence[int] | None = None,
    pool_min: int = 1,
) -> SpeakerPool:
    """One entry per speaker: the mean speaker vector over that speaker's utterances."""
    model.eval()
    grouped: dict[int, list[LabeledUtterance]] = defaultdict(list)
    for u in utterances:
        grouped[u.speaker_id].append(u)
    wanted = sorted(grouped) if speakers is None else sorted(speakers)
    missing = [s for s in wanted if not grouped.get(s)]
    if missing:
        raise PoolError(f"speaker {missing[0]} has no utterances to pool")
    if len(wanted) < pool_min:
        raise PoolError(f"pool of {len(wanted)} speakers is below the minimum of {pool_min}")

    vectors, counts = [], []
    for sid in wanted:
        utts = grouped[sid]
        vectors.append(np.mean([utterance_speaker_vector(model, u.waveform) for u in utts], axis=0))
        counts.append(len(utts))
    logger.info(f"Built speaker pool with {len(wanted)} entries from {sum(counts)} utterances")
    return SpeakerPool([str(s) for s in wanted], np.stack(vectors), counts)


def save_pool(pool: SpeakerPool, path: str | Path):
    write_json(
        path,
        PoolFile(
            format_version=POOL_VERSION,
            config_hash=pool.config_hash,
            seed=pool.seed,
            model_step=pool.model_step,
            source=pool.source,
            entries=[
                PoolEntry(label=label, vector=vec.tolist(), num_utterances=n)
                for label, vec, n in zip(pool.labels, pool.vectors, pool.counts)
            ],
        ),
    )


def load_pool(path: str | Path, pool_min: int = 1) -> SpeakerPool:
    path = Path(path)
    if not path.is_file():
        raise PoolError(f"pool file not found: {path}")
    doc = read_json(path, PoolFile)
    if doc.format_version != POOL_VERSION:
        raise PoolError(f"pool {path} has format version {doc.format_version}, expected {POOL_VERSION}")
    if len(doc.entries) < pool_min:
        raise PoolError(f"pool {path} has {len(doc.entries)} entries, below the minimum of {pool_min}")
    return SpeakerPool(
        labels=[e.label for e in doc.entries],
        vectors=np.array([e.vector for e in doc.entries]),
        counts=[e.num_utterances for e in doc.entries],
        source=doc.source,
        config_hash=doc.config_hash,
        seed=doc.seed,
        model_step=doc.model_step,
    )


def average_identity(pool: SpeakerPool, m: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= m <= len(pool):
        raise PoolError(f"cannot average {m} identities from a pool of {len(pool)}")
    idx = np.sort(rng.choice(len(pool), size=m, replace=False))
    return pool.vectors[idx].mean(axis=0)


def sample_identity(d: int, sigma: float | np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (d,))
    if np.any(sigma <= 0):
        raise PoolError("gaussian scale must be positive in every dimension")
    return rng.standard_normal(d) * sigma


def anonymize_vector(alpha: float, s_bar: np.ndarray, s_hat: np.ndarray) -> np.ndarray:
    s_bar, s_hat = np.asarray(s_bar), np.asarray(s_hat)
    if s_bar.shape != s_hat.shape:
        raise PoolError(f"identity shapes differ: {s_bar.shape} vs {s_hat.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise PoolError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * s_bar + (1.0 - alpha) * s_hat


def rng_for(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


def pseudo_speaker(pool: SpeakerPool, cfg: AnonConfig, key: str) -> np.ndarray:
    if len(pool) == 0:
        raise AnonymizationError("speaker pool is empty")
    rng = rng_for(cfg.seed, key)
    s_bar = average_identity(pool, cfg.num_averaged, rng)
    sigma = np.maximum(pool.std(), _SIGMA_FLOOR) if cfg.sigma_policy == "pool_std" else cfg.sigma
    s_hat = sample_identity(pool.dim, sigma, rng)
    return anonymize_vector(cfg.alpha, s_bar, s_hat)


def anonymization_key(cfg: AnonConfig, utt_id: str, speaker: str | None) -> str:
    if cfg.per_speaker:
        if speaker is None:
            raise AnonymizationError(f"per-speaker mode needs a speaker label for {utt_id}")
        return f"spk:{speaker}"
    return f"utt:{utt_id}"


@torch.no_grad()
def anonymize_utterance(
    w: Waveform,
    model: EasyModel,
    pool: SpeakerPool,
    cfg: AnonConfig,
    utt_id: str = "utt",
    speaker: str | None = None,
) -> Waveform:
    """Content features minus the speaker vector, through every RVQ layer, decoded with
    the pseudo-speaker."""
    if not model.trained:
        raise AnonymizationError("model is untrained: its codebooks were never initialized")
    if len(pool) == 0:
        raise AnonymizationError("speaker pool is empty")
    model.eval()
    wave = torch.from_numpy(w.samples.astype(np.float32))
    a = model.analyze(wave)
    quantized = reconstruct_layers(a.state, f"1:{model.num_quantizers}")
    if cfg.bypass:
        s_anon = a.speaker
    else:
        key = anonymization_key(cfg, utt_id, speaker)
        s_anon = torch.from_numpy(pseudo_speaker(pool, cfg, key)).to(quantized.dtype)
    out = model.decode(quantized, s_anon)
    return Waveform(out.double().numpy(), w.sample_rate)


def _speaker_labels(in_dir: Path) -> dict[str, str]:
    manifest = in_dir / MANIFEST_NAME
    if not manifest.is_file():
        return {}
    return {r.utt_id: str(r.speaker_id) for r in read_jsonl(manifest, ManifestRecord)}


def anonymize_directory(
    in_dir: str | Path,
    out_dir: str | Path,
    model: EasyModel,
    pool: SpeakerPool,
    cfg: AnonConfig,
    sample_rate: int = 16000,
    audio_cfg: AudioConfig | None = None,
    config_hash: str = "",
    run_seed: int = 0,
) -> list[AnonymizedRecord]:
    """Anonymize every WAV under ``in_dir`` into the mirrored tree under ``out_dir``."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    if not in_dir.is_dir():
        raise AnonymizationError(f"input directory not found: {in_dir}")
    files = list(iter_files(in_dir))
    if not files:
        raise AnonymizationError(f"no WAV files under {in_dir}")
    speakers = _speaker_labels(in_dir)
    logger.info(f"Anonymizing {len(files)} files from {in_dir} into {out_dir}")

    def job(path: Path) -> AnonymizedRecord:
        rel = path.relative_to(in_dir)
        utt_id = path.stem
        w = load_wav(path, sample_rate, audio_cfg)
        speaker = speakers.get(utt_id)
        anon = anonymize_utterance(w, model, pool, cfg, utt_id=utt_id, speaker=speaker)
        save_wav(anon, out_dir / rel)
        return AnonymizedRecord(
            source=str(rel),
            output=str(rel),
            rng_key="bypass" if cfg.bypass else anonymization_key(cfg, utt_id, speaker),
            alpha=cfg.alpha,
            num_averaged=cfg.num_averaged,
            config_hash=config_hash,
            seed=run_seed,
        )

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        records = list(executor.map(job, files))
    write_jsonl(out_dir / ANON_MANIFEST_NAME, records)
    logger.info(f"Anonymized {len(records)} files")
    return records
