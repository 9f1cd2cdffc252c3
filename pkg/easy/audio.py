"""Waveform I/O and the log-mel front-end shared by the encoders and the losses."""

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
import torch
from torch import nn

from .config import AudioConfig, MelConfig
from .errors import AudioError
from .storage import atomic_path

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-5
PCM_SCALE = 32768.0
_PCM_SUBTYPES = {"PCM_U8", "PCM_16", "PCM_24", "PCM_32", "FLOAT", "DOUBLE"}


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise AudioError("waveform is empty")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # T x 80
    hop: int
    sample_rate: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int, cfg: MelConfig) -> int:
    """Frame count of the centred STFT."""
    return 1 + num_samples // cfg.hop


def min_samples(cfg: MelConfig) -> int:
    # reflect padding needs more than n_fft // 2 samples
    return max(cfg.win, cfg.n_fft // 2 + 1)


def load_wav(
    path: str | Path, sample_rate: int = 16000, cfg: AudioConfig | None = None
) -> Waveform:
    cfg = cfg or AudioConfig()
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise AudioError(f"unreadable audio file {path}: {e}") from e
    if info.format != "WAV" or info.subtype not in _PCM_SUBTYPES:
        raise AudioError(f"unsupported encoding {info.format}/{info.subtype} in {path}")
    if info.frames == 0:
        raise AudioError(f"zero-length audio in {path}")

    data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    if data.shape[1] > 1:
        if not cfg.downmix_stereo:
            raise AudioError(f"{path} has {data.shape[1]} channels and downmixing is off")
        data = data.mean(axis=1, keepdims=True)
    samples = data[:, 0]

    if rate != sample_rate:
        if not cfg.resample:
            raise AudioError(f"{path} is {rate} Hz, expected {sample_rate} Hz")
        logger.debug(f"Resampling {path} from {rate} to {sample_rate} Hz")
        samples = librosa.resample(samples, orig_sr=rate, target_sr=sample_rate)
    return Waveform(np.clip(samples, -1.0, 1.0), sample_rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(samples, -1.0, 1.0)
    return np.clip(np.round(clipped * PCM_SCALE), -32768, 32767).astype(np.int16)


def save_wav(w: Waveform, path: str | Path):
    if not isinstance(w, Waveform):
        w = Waveform(np.asarray(w))
    pcm = to_pcm16(w.samples)
    try:
        with atomic_path(path) as tmp:
            sf.write(str(tmp), pcm, w.sample_rate, subtype="PCM_16", format="WAV")
    except (OSError, RuntimeError) as e:
        raise AudioError(f"cannot write {path}: {e}") from e


class MelExtractor(nn.Module):
    """Log-mel of a batch of waveforms: (B, N) -> (B, T, 80)."""

    def __init__(self, cfg: MelConfig):
        super().__init__()
        self.cfg = cfg
        mel_basis = librosa.filters.mel(
            sr=cfg.sample_rate,
            n_fft=cfg.n_fft,
            n_mels=cfg.n_mels,
            fmin=cfg.fmin,
            fmax=cfg.fmax,
        )
        self.register_buffer("mel_basis", torch.from_numpy(mel_basis).float(), persistent=False)
        self.register_buffer("window", torch.hann_window(cfg.win), persistent=False)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        if audio.dim() == 3:
            audio = audio.squeeze(1)
        squeeze = audio.dim() == 1
        if squeeze:
            audio = audio.unsqueeze(0)
        if audio.shape[-1] < min_samples(self.cfg):
            raise AudioError(
                f"waveform of {audio.shape[-1]} samples is shorter than one window"
            )
        spec = torch.stft(
            audio,
            n_fft=self.cfg.n_fft,
            hop_length=self.cfg.hop,
            win_length=self.cfg.win,
            window=self.window.to(audio.dtype),
            center=True,
            pad_mode="reflect",
            return_complex=True,
        )
        mag = spec.abs()
        mel = torch.matmul(self.mel_basis.to(audio.dtype), mag)
        mel = torch.log(torch.clamp(mel, min=LOG_FLOOR)).transpose(-1, -2)
        return mel[0] if squeeze else mel


@lru_cache(maxsize=8)
def cached_extractor(cfg: MelConfig) -> MelExtractor:
    return MelExtractor(cfg)


def mel_spectrogram(w: Waveform, cfg: MelConfig) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(f"waveform is {w.sample_rate} Hz, mel config expects {cfg.sample_rate} Hz")
    with torch.no_grad():
        mel = cached_extractor(cfg)(torch.from_numpy(w.samples))
    return MelSpectrogram(frames=mel.numpy(), hop=cfg.hop, sample_rate=cfg.sample_rate)
