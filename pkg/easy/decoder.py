"""Waveform decoder, multi-scale discriminator and the training objective."""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .audio import MelExtractor, cached_extractor, min_samples
from .config import MelConfig
from .errors import DecoderError, NonFiniteLossError

logger = logging.getLogger(__name__)

LRELU_SLOPE = 0.1


@dataclass
class DecoderInput:
    speaker: torch.Tensor  # (..., d)
    quantized: torch.Tensor  # (..., T, d)

    def features(self) -> torch.Tensor:
        """Per-frame concatenation [q_t, s]: (..., T, 2d)."""
        if self.speaker.shape[-1] != self.quantized.shape[-1]:
            raise DecoderError(
                f"speaker width {self.speaker.shape[-1]} != frame width {self.quantized.shape[-1]}"
            )
        s = self.speaker.unsqueeze(-2).expand(*self.quantized.shape[:-1], self.speaker.shape[-1])
        return torch.cat([self.quantized, s], dim=-1)


class ResidualUnit(nn.Module):

    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, dilation=dilation, padding=dilation)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        y = self.conv1(F.leaky_relu(x, LRELU_SLOPE))
        return x + self.conv2(F.leaky_relu(y, LRELU_SLOPE))


class Decoder(nn.Module):
    """(..., T, 2d) frame features -> (..., T * hop) waveform in [-1, 1]."""

    def __init__(self, dim: int, channels: int = 128, upsample_rates: Sequence[int] = (8, 8, 4)):
        super().__init__()
        self.dim = dim
        self.hop = math.prod(upsample_rates)
        self.pre = nn.Conv1d(2 * dim, channels, 7, padding=3)
        self.ups = nn.ModuleList()
        self.res = nn.ModuleList()
        c = channels
        for u in upsample_rates:
            out = max(c // 2, 8)
            self.ups.append(nn.ConvTranspose1d(c, out, 2 * u, stride=u, padding=u // 2))
            self.res.append(nn.Sequential(ResidualUnit(out, 1), ResidualUnit(out, 3)))
            c = out
        self.post = nn.Conv1d(c, 1, 7, padding=3)

    def forward(self, quantized: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        x = DecoderInput(speaker, quantized).features()
        if x.shape[-1] != 2 * self.dim:
            raise DecoderError(f"decoder expects width {self.dim}, got {quantized.shape[-1]}")
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        x = self.pre(x.transpose(1, 2))
        for up, res in zip(self.ups, self.res):
            x = res(up(F.leaky_relu(x, LRELU_SLOPE)))
        wave = torch.tanh(self.post(F.leaky_relu(x))).squeeze(1)
        return wave[0] if squeeze else wave


def decode(inp: DecoderInput, decoder: Decoder) -> torch.Tensor:
    return decoder(inp.quantized, inp.speaker)


class ScaleDiscriminator(nn.Module):

    def __init__(self, channels: int = 16):
        super().__init__()
        c = channels
        self.convs = nn.ModuleList(
            [
                nn.Conv1d(1, c, 15, padding=7),
                nn.Conv1d(c, 2 * c, 41, stride=4, padding=20),
                nn.Conv1d(2 * c, 4 * c, 41, stride=4, padding=20),
                nn.Conv1d(4 * c, 4 * c, 5, padding=2),
            ]
        )
        self.out = nn.Conv1d(4 * c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        feats.append(self.out(x))
        return feats


class MultiScaleDiscriminator(nn.Module):
    """Returns, per scale, the list of feature maps ending with the score map."""

    def __init__(self, scales: int = 3, channels: int = 16):
        super().__init__()
        self.discriminators = nn.ModuleList(ScaleDiscriminator(channels) for _ in range(scales))
        self.pool = nn.AvgPool1d(4, stride=2, padding=2)

    def forward(self, wave: torch.Tensor) -> list[list[torch.Tensor]]:
        x = wave.reshape(-1, 1, wave.shape[-1])
        outs = []
        for i, disc in enumerate(self.discriminators):
            if i:
                x = self.pool(x)
            outs.append(disc(x))
        return outs


def discriminator_loss(real: list[list[torch.Tensor]], fake: list[list[torch.Tensor]]) -> torch.Tensor:
    """Least-squares: real scores pushed to 1, fake scores to 0."""
    loss = 0.0
    for r, f in zip(real, fake):
        loss = loss + F.mse_loss(r[-1], torch.ones_like(r[-1])) + F.mse_loss(f[-1], torch.zeros_like(f[-1]))
    return loss / len(real)


def generator_adversarial_loss(fake: list[list[torch.Tensor]]) -> torch.Tensor:
    loss = 0.0
    for f in fake:
        loss = loss + F.mse_loss(f[-1], torch.ones_like(f[-1]))
    return loss / len(fake)


def feature_matching_loss(fake: list[list[torch.Tensor]], real: list[list[torch.Tensor]]) -> torch.Tensor:
    loss = 0.0
    for f_maps, r_maps in zip(fake, real):
        per_disc = 0.0
        for f, r in zip(f_maps[:-1], r_maps[:-1]):
            per_disc = per_disc + F.l1_loss(f, r.detach())
        loss = loss + per_disc / (len(f_maps) - 1)
    return loss / len(fake)


@dataclass
class AdversarialTerms:
    gen_adv: torch.Tensor
    disc: torch.Tensor
    feat_match: torch.Tensor

    def generator_total(self, feature_match_weight: float = 2.0) -> torch.Tensor:
        return self.gen_adv + feature_match_weight * self.feat_match


def _crop(x: torch.Tensor, x_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    n = min(x.shape[-1], x_hat.shape[-1])
    return x[..., :n], x_hat[..., :n]


def adversarial_losses(x: torch.Tensor, x_hat: torch.Tensor, disc: MultiScaleDiscriminator) -> AdversarialTerms:
    x, x_hat = _crop(x, x_hat)
    real = disc(x)
    fake_detached = disc(x_hat.detach())
    fake = disc(x_hat)
    return AdversarialTerms(
        gen_adv=generator_adversarial_loss(fake),
        disc=discriminator_loss(real, fake_detached),
        feat_match=feature_matching_loss(fake, real),
    )


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor, mel: MelConfig | MelExtractor) -> torch.Tensor:
    """Mean absolute plus root-mean-square log-mel difference."""
    extractor = cached_extractor(mel) if isinstance(mel, MelConfig) else mel
    x, x_hat = _crop(x, x_hat)
    if x.shape[-1] < min_samples(extractor.cfg):
        raise DecoderError(f"overlap of {x.shape[-1]} samples is too short for the mel front-end")
    diff = extractor(x) - extractor(x_hat)
    l1 = diff.abs().mean()
    l2 = torch.linalg.vector_norm(diff) / math.sqrt(diff.numel())
    return l1 + l2


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    adv: torch.Tensor
    com: torch.Tensor
    spk: torch.Tensor
    lin: torch.Tensor
    emo: torch.Tensor
    total: torch.Tensor
    lambda_rec: float = 45.0
    disc: torch.Tensor | None = None  # discriminator loss of the same step, not part of total

    def as_floats(self) -> dict[str, float]:
        values = {name: float(getattr(self, name)) for name in (*TERMS, "total")}
        values["disc"] = float(self.disc) if self.disc is not None else 0.0
        return values


TERMS = ("rec", "adv", "com", "spk", "lin", "emo")


def total_loss(parts: dict[str, torch.Tensor | float], lambda_rec: float = 45.0) -> LossBreakdown:
    values = {}
    for name in TERMS:
        value = parts.get(name, 0.0)
        if not isinstance(value, torch.Tensor):
            value = torch.tensor(float(value), dtype=torch.float64)
        if not torch.isfinite(value).all():
            logger.warning(f"Non-finite loss term {name}: {float(value)}")
            raise NonFiniteLossError(name, float(value))
        values[name] = value
    total = lambda_rec * values["rec"]
    for name in TERMS[1:]:
        total = total + values[name]
    return LossBreakdown(**values, total=total, lambda_rec=lambda_rec)
