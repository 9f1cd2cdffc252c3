"""Speaker, linguistic and emotion distillation losses with gradient reversal adversaries."""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.autograd import Function

from .errors import DistillError

logger = logging.getLogger(__name__)


class GradientReversal(Function):

    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def grl(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    if lambd < 0:
        raise DistillError(f"gradient reversal strength must be >= 0, got {lambd}")
    return GradientReversal.apply(x, lambd)


class GrlHead(nn.Module):
    """Linear classifier fed through a gradient reversal layer."""

    def __init__(self, in_dim: int, num_classes: int, lambd: float = 1.0):
        super().__init__()
        self.lambd = lambd
        self.classifier = nn.Linear(in_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(grl(x, self.lambd))


class SpeakerClassifier(nn.Module):

    def __init__(self, dim: int, num_speakers: int):
        super().__init__()
        self.num_speakers = num_speakers
        self.linear = nn.Linear(dim, num_speakers)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.linear(s)


class EmotionHeads(nn.Module):

    def __init__(self, dim: int, emotion_dim: int, semantic_classes: int, num_speakers: int):
        super().__init__()
        self.projection = nn.Linear(dim, emotion_dim)
        self.semantic = GrlHead(dim, semantic_classes)
        self.speaker = GrlHead(dim, num_speakers)

    def set_lambda(self, lambd: float):
        self.semantic.lambd = lambd
        self.speaker.lambd = lambd


def _check_labels(labels: torch.Tensor, num_classes: int, what: str):
    if labels.numel() == 0:
        raise DistillError(f"missing {what} labels")
    if int(labels.min()) < 0 or int(labels.max()) >= num_classes:
        raise DistillError(f"{what} label outside [0, {num_classes})")


def speaker_loss(s: torch.Tensor, speaker_ids: torch.Tensor, clf: SpeakerClassifier) -> torch.Tensor:
    logits = clf(s)
    speaker_ids = torch.as_tensor(speaker_ids, dtype=torch.long).reshape(logits.shape[:-1])
    _check_labels(speaker_ids, logits.shape[-1], "speaker")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), speaker_ids.reshape(-1))


def frame_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != logits.shape[:-1]:
        raise DistillError(
            f"targets of shape {tuple(targets.shape)} do not align with {tuple(logits.shape[:-1])} frames"
        )
    _check_labels(targets, logits.shape[-1], "token")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def linguistic_loss(q1: torch.Tensor, targets: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return frame_cross_entropy(head(q1), targets)


def emotion_kl(projected: torch.Tensor, teacher: torch.Tensor, temperature: float) -> torch.Tensor:
    """Frame-averaged KL(softmax(teacher / t) || softmax(projected / t))."""
    log_p = F.log_softmax(teacher / temperature, dim=-1)
    log_q = F.log_softmax(projected / temperature, dim=-1)
    kl = F.kl_div(log_q, log_p, reduction="none", log_target=True).sum(-1)
    return kl.mean()


@dataclass
class EmotionLossParts:
    kl: torch.Tensor
    semantic_adv: torch.Tensor
    speaker_adv: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.kl + self.semantic_adv + self.speaker_adv


def emotion_loss(
    qn: torch.Tensor,
    teacher: torch.Tensor,
    targets: torch.Tensor,
    speaker_ids: torch.Tensor,
    heads: EmotionHeads,
    temperature: float = 0.5,
) -> EmotionLossParts:
    """``qn`` is the aggregate of the residual layers, (..., T, d)."""
    teacher = torch.as_tensor(teacher, dtype=qn.dtype)
    if teacher.shape[:-1] != qn.shape[:-1]:
        raise DistillError(
            f"teacher embedding {tuple(teacher.shape)} is not aligned with {tuple(qn.shape[:-1])} frames"
        )
    kl = emotion_kl(heads.projection(qn), teacher, temperature)
    semantic_adv = frame_cross_entropy(heads.semantic(qn), targets)
    speaker_logits = heads.speaker(qn.mean(dim=-2))
    speaker_ids = torch.as_tensor(speaker_ids, dtype=torch.long).reshape(speaker_logits.shape[:-1])
    _check_labels(speaker_ids, speaker_logits.shape[-1], "speaker")
    speaker_adv = F.cross_entropy(
        speaker_logits.reshape(-1, speaker_logits.shape[-1]), speaker_ids.reshape(-1)
    )
    return EmotionLossParts(kl, semantic_adv, speaker_adv)


@dataclass(frozen=True)
class GradientRoute:
    """Where the adversarial cross-entropy gradients land after one backward pass."""

    head_scale: float
    encoder_scale: float
    description: str


def adversary_step_contract(lambd: float) -> GradientRoute:
    if lambd < 0:
        raise DistillError(f"gradient reversal strength must be >= 0, got {lambd}")
    return GradientRoute(
        head_scale=1.0,
        encoder_scale=-lambd,
        description=(
            "adversary heads descend their own cross-entropy; the quantizer and encoder path "
            f"receives the same gradient scaled by {-lambd}"
        ),
    )


def grl_lambda(step: int, total_steps: int, lambda_max: float = 1.0, warmup_fraction: float = 0.2) -> float:
    """Linear warm-up of the reversal strength from 0 to ``lambda_max``."""
    warmup = warmup_fraction * total_steps
    if warmup <= 0:
        return lambda_max
    return lambda_max * min(1.0, step / warmup)
