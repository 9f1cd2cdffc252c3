import logging
from dataclasses import dataclass

import torch
from torch import nn

from .audio import MelExtractor
from .bottleneck import QuantizerState, ResidualVQ, reconstruct_layers, straight_through
from .config import RunConfig
from .decoder import Decoder
from .distill import EmotionHeads, SpeakerClassifier
from .encoders import SpeakerEncoder, SpeechEncoder, subtract_speaker

logger = logging.getLogger(__name__)


@dataclass
class Analysis:
    mel: torch.Tensor
    content: torch.Tensor  # content encoder output
    speaker: torch.Tensor
    r1: torch.Tensor
    state: QuantizerState


@dataclass
class ForwardOutput:
    analysis: Analysis
    q1: torch.Tensor
    qn: torch.Tensor
    quantized: torch.Tensor
    wave: torch.Tensor


class EasyModel(nn.Module):
    """Encoders, residual bottleneck, distillation heads and decoder."""

    def __init__(
        self,
        cfg: RunConfig,
        num_speakers: int | None = None,
        semantic_classes: int | None = None,
        emotion_dim: int | None = None,
    ):
        super().__init__()
        m = cfg.model
        self.num_speakers = num_speakers or cfg.corpus.num_speakers
        self.semantic_classes = semantic_classes or cfg.semantic_classes
        self.emotion_dim = emotion_dim or cfg.emotion_dim
        self.mel = MelExtractor(cfg.mel)
        self.speech_encoder = SpeechEncoder(m.dim, m.encoder_layers, m.encoder_kernel)
        self.speaker_encoder = SpeakerEncoder(
            m.dim,
            hidden=m.speaker_hidden,
            gated_blocks=m.speaker_gated_blocks,
            kernel=m.speaker_kernel,
            attention_layers=m.attention_layers,
            heads=m.attention_heads,
        )
        self.bottleneck = ResidualVQ(m.num_quantizers, m.codebook_size, m.dim, seed=cfg.seed)
        self.decoder = Decoder(m.dim, m.decoder_channels, m.upsample_rates)
        self.speaker_classifier = SpeakerClassifier(m.dim, self.num_speakers)
        self.linguistic_head = nn.Linear(m.dim, self.semantic_classes)
        self.emotion_heads = EmotionHeads(m.dim, self.emotion_dim, self.semantic_classes, self.num_speakers)

    @property
    def num_quantizers(self) -> int:
        return self.bottleneck.num_quantizers

    @property
    def trained(self) -> bool:
        return self.bottleneck.initialized

    def encode(self, wave: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        mel = self.mel(wave)
        content = self.speech_encoder(mel)
        speaker = self.speaker_encoder(mel)
        return mel, content, speaker, subtract_speaker(content, speaker)

    def analyze(self, wave: torch.Tensor) -> Analysis:
        mel, content, speaker, r1 = self.encode(wave)
        return Analysis(mel, content, speaker, r1, self.bottleneck(r1))

    def forward(self, wave: torch.Tensor) -> ForwardOutput:
        a = self.analyze(wave)
        n = self.num_quantizers
        q1 = straight_through(a.state, [1])
        qn = straight_through(a.state, range(2, n + 1))
        quantized = straight_through(a.state)
        return ForwardOutput(a, q1, qn, quantized, self.decoder(quantized, a.speaker))

    def speaker_vector(self, wave: torch.Tensor) -> torch.Tensor:
        return self.speaker_encoder(self.mel(wave))

    def decode(self, quantized: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        return self.decoder(quantized, speaker)

    @torch.no_grad()
    def reconstruct(
        self, wave: torch.Tensor, layers: str | None = None, speaker: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Decode from a VQ layer subset, optionally with a replacement speaker vector."""
        a = self.analyze(wave)
        quantized = reconstruct_layers(a.state, layers or f"1:{self.num_quantizers}")
        return self.decoder(quantized, a.speaker if speaker is None else speaker.to(quantized.dtype))


def build_model(cfg: RunConfig, num_speakers: int | None = None, semantic_classes: int | None = None,
                emotion_dim: int | None = None) -> EasyModel:
    torch.manual_seed(cfg.seed)
    model = EasyModel(cfg, num_speakers, semantic_classes, emotion_dim)
    size = sum(p.numel() for p in model.parameters())
    logger.info(f"Built model with {size} parameters")
    return model
