"""Speech encoder, speaker encoder, speaker subtraction and the teacher adapters."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import nn

from .config import RunConfig
from .errors import EncoderError
from .synthdata import LabeledUtterance, oracle_emotion_teacher, oracle_semantic_features, oracle_semantic_teacher

logger = logging.getLogger(__name__)

N_MELS = 80


def _check_mel(mel: torch.Tensor):
    if mel.dim() not in (2, 3) or mel.shape[-1] != N_MELS:
        raise EncoderError(f"expected (..., T, {N_MELS}) mel input, got {tuple(mel.shape)}")


class SpeechEncoder(nn.Module):
    """Content encoder: frame-rate preserving conv stack, (B, T, 80) -> (B, T, d)."""

    def __init__(self, dim: int, layers: int = 4, kernel: int = 5):
        super().__init__()
        blocks = []
        channels = N_MELS
        for _ in range(layers - 1):
            blocks += [nn.Conv1d(channels, dim, kernel, padding=kernel // 2), nn.GELU()]
            channels = dim
        self.body = nn.Sequential(*blocks)
        self.proj = nn.Conv1d(channels, dim, kernel, padding=kernel // 2)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        _check_mel(mel)
        squeeze = mel.dim() == 2
        x = mel.unsqueeze(0) if squeeze else mel
        x = self.proj(self.body(x.transpose(1, 2))).transpose(1, 2)
        return x[0] if squeeze else x


class GatedConvBlock(nn.Module):

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(channels, 2 * channels, kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, T); replicate padding keeps a stationary input stationary
        left = (self.kernel - 1) // 2
        padded = F.pad(x, (left, self.kernel - 1 - left), mode="replicate")
        return x + F.glu(self.conv(padded), dim=1)


class AttentionBlock(nn.Module):

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.attn(x, x, x, need_weights=False)
        return self.norm(x + out)


class SpeakerEncoder(nn.Module):
    """Speaker encoder: spectral FC layers, gated CNN blocks, attention, then mean pooling."""

    def __init__(
        self,
        dim: int,
        hidden: int = 128,
        gated_blocks: int = 2,
        kernel: int = 3,
        attention_layers: int = 2,
        heads: int = 4,
    ):
        super().__init__()
        self.kernel = kernel if gated_blocks else 1
        self.spectral = nn.Sequential(
            nn.Linear(N_MELS, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU()
        )
        self.gated = nn.ModuleList(GatedConvBlock(hidden, kernel) for _ in range(gated_blocks))
        self.attention = nn.ModuleList(
            AttentionBlock(hidden, heads) for _ in range(attention_layers)
        )
        self.out = nn.Linear(hidden, dim)

    def frames(self, mel: torch.Tensor) -> torch.Tensor:
        x = self.spectral(mel).transpose(1, 2)
        for block in self.gated:
            x = block(x)
        x = x.transpose(1, 2)
        for block in self.attention:
            x = block(x)
        return x

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        _check_mel(mel)
        squeeze = mel.dim() == 2
        x = mel.unsqueeze(0) if squeeze else mel
        if x.shape[1] < self.kernel:
            raise EncoderError(
                f"{x.shape[1]} frames is below the speaker encoder receptive field of {self.kernel}"
            )
        s = self.out(self.frames(x).mean(dim=1))
        return s[0] if squeeze else s


def subtract_speaker(fr: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """r_1[t] = fr[t] - s for every frame; fr is (..., T, d) and s is (..., d)."""
    if fr.shape[-1] != s.shape[-1]:
        raise EncoderError(f"frame width {fr.shape[-1]} != speaker dim {s.shape[-1]}")
    return fr - s.unsqueeze(-2)


@dataclass(frozen=True)
class KMeansCodebook:
    centroids: np.ndarray

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


def fit_kmeans(features: np.ndarray, K: int, seed: int, max_iter: int = 300) -> KMeansCodebook:
    features = np.asarray(features, dtype=np.float64)
    if K <= 0:
        raise EncoderError(f"cluster count must be positive, got {K}")
    if features.ndim != 2 or features.shape[0] == 0:
        raise EncoderError("k-means needs a non-empty (M, F) feature matrix")
    if features.shape[0] < K:
        raise EncoderError(f"{features.shape[0]} frames cannot support {K} clusters")
    distinct = np.unique(features, axis=0).shape[0]
    if distinct < K:
        logger.warning(f"Only {distinct} distinct frames for K={K}; some centroids will coincide")
    km = KMeans(n_clusters=K, algorithm="lloyd", n_init=4, max_iter=max_iter, random_state=seed)
    km.fit(features)
    logger.info(f"Fitted k-means with K={K} on {features.shape[0]} frames ({km.n_iter_} iterations)")
    return KMeansCodebook(km.cluster_centers_.copy())


def kmeans_assign(codebook: KMeansCodebook, features: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise EncoderError("cannot assign an empty feature matrix")
    if features.shape[1] != codebook.centroids.shape[1]:
        raise EncoderError("feature width does not match the codebook")
    ids = np.empty(features.shape[0], dtype=np.int64)
    for start in range(0, features.shape[0], chunk):
        block = features[start:start + chunk]
        dist = ((block[:, None, :] - codebook.centroids[None]) ** 2).sum(-1)
        ids[start:start + chunk] = dist.argmin(axis=1)
    return ids


class Teacher(Protocol):
    semantic_classes: int
    emotion_dim: int

    def semantic_targets(self, u: LabeledUtterance) -> np.ndarray: ...

    def emotion_targets(self, u: LabeledUtterance) -> np.ndarray: ...


class OracleTeacher:
    """Ground-truth tokens and one-hot emotion embeddings of the synthetic corpus.

    With a k-means codebook the tokens are cluster ids of noisy one-hot token
    frames instead, so the cluster count can differ from the vocabulary.
    """

    def __init__(self, vocab_size: int, num_emotions: int, codebook: KMeansCodebook | None = None):
        self.vocab_size = vocab_size
        self.codebook = codebook
        self.semantic_classes = codebook.num_clusters if codebook else vocab_size
        self.emotion_dim = num_emotions

    def semantic_features(self, u: LabeledUtterance) -> np.ndarray:
        return oracle_semantic_features(u, self.vocab_size)

    def semantic_targets(self, u: LabeledUtterance) -> np.ndarray:
        if self.codebook is None:
            return oracle_semantic_teacher(u)
        return kmeans_assign(self.codebook, self.semantic_features(u))

    def emotion_targets(self, u: LabeledUtterance) -> np.ndarray:
        return oracle_emotion_teacher(u, self.emotion_dim)


def nearest_frames(src_len: int, dst_len: int) -> np.ndarray:
    return np.minimum(((np.arange(dst_len) + 0.5) * src_len / dst_len).astype(np.int64), src_len - 1)


def interpolate_frames(matrix: np.ndarray, dst_len: int) -> np.ndarray:
    src = np.linspace(0.0, 1.0, matrix.shape[0]) if matrix.shape[0] > 1 else np.zeros(1)
    dst = np.linspace(0.0, 1.0, dst_len)
    return np.stack([np.interp(dst, src, matrix[:, j]) for j in range(matrix.shape[1])], axis=1)


class ExternalTeacher:
    """Precomputed teacher features read from ``<utt_id>.semantic.npy`` and
    ``<utt_id>.emotion.npy`` and aligned to the mel frame rate."""

    def __init__(
        self, feature_dir: str | Path, codebook: KMeansCodebook | None = None, emotion_dim: int | None = None
    ):
        self.feature_dir = Path(feature_dir)
        if not self.feature_dir.is_dir():
            raise EncoderError(f"teacher feature directory not found: {self.feature_dir}")
        self.codebook = codebook
        self.semantic_classes = codebook.num_clusters if codebook else 0
        self.emotion_dim = emotion_dim or 0

    def _load(self, utt_id: str, kind: str) -> np.ndarray:
        path = self.feature_dir / f"{utt_id}.{kind}.npy"
        if not path.is_file():
            raise EncoderError(f"missing teacher features: {path}")
        matrix = np.load(path)
        if matrix.ndim != 2 or matrix.shape[0] == 0 or not np.all(np.isfinite(matrix)):
            raise EncoderError(f"{path} must be a finite non-empty (frames, dim) matrix")
        return matrix.astype(np.float64)

    def semantic_features(self, u: LabeledUtterance) -> np.ndarray:
        return self._load(u.utt_id, "semantic")

    def semantic_targets(self, u: LabeledUtterance) -> np.ndarray:
        if self.codebook is None:
            raise EncoderError("external teacher has no k-means codebook; fit one first")
        tokens = kmeans_assign(self.codebook, self.semantic_features(u))
        return tokens[nearest_frames(tokens.size, u.num_frames)]

    def emotion_targets(self, u: LabeledUtterance) -> np.ndarray:
        """The first file read fixes ``emotion_dim`` unless it was given."""
        matrix = self._load(u.utt_id, "emotion")
        if not self.emotion_dim:
            self.emotion_dim = matrix.shape[1]
        elif matrix.shape[1] != self.emotion_dim:
            raise EncoderError(
                f"{u.utt_id}: emotion features are {matrix.shape[1]} wide, expected {self.emotion_dim}"
            )
        return interpolate_frames(matrix, u.num_frames)


def fit_teacher_codebook(
    teacher: OracleTeacher | ExternalTeacher, utterances: Sequence[LabeledUtterance], K: int, seed: int
) -> KMeansCodebook:
    features = np.concatenate([teacher.semantic_features(u) for u in utterances])
    codebook = fit_kmeans(features, K, seed)
    teacher.codebook = codebook
    teacher.semantic_classes = K
    return codebook


def make_teacher(cfg: RunConfig, train: Sequence[LabeledUtterance] = ()) -> Teacher:
    if cfg.teacher.kind == "oracle":
        teacher = OracleTeacher(cfg.corpus.vocab_size, cfg.corpus.num_emotions)
        if train and cfg.semantic_classes != cfg.corpus.vocab_size:
            fit_teacher_codebook(teacher, train, cfg.semantic_classes, cfg.seed)
        return teacher
    teacher = ExternalTeacher(cfg.teacher.feature_dir, emotion_dim=cfg.teacher.emotion_dim)
    if train:
        fit_teacher_codebook(teacher, train, cfg.semantic_classes, cfg.seed)
        teacher.emotion_targets(train[0])
    return teacher
