"""One-step training contract and the training loop around it."""

import copy
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import ExponentialLR

from .audio import min_samples
from .bottleneck import commitment_loss, update_codebooks
from .config import RunConfig, config_hash
from .decoder import (
    LossBreakdown,
    MultiScaleDiscriminator,
    discriminator_loss,
    feature_matching_loss,
    generator_adversarial_loss,
    recon_loss,
    total_loss,
)
from .distill import emotion_loss, grl_lambda, linguistic_loss, speaker_loss
from .encoders import Teacher, make_teacher
from .errors import CheckpointError, CorpusError, NonFiniteLossError
from .model import EasyModel, build_model
from .models import TrainStepRecord
from .storage import JsonlWriter, load_checkpoint, save_checkpoint
from .synthdata import Corpus, LabeledUtterance

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"
TRAIN_LOG_NAME = "train_log.jsonl"
_BATCH_SALT = 0xBA7C


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class Batch:
    wave: torch.Tensor  # (B, N)
    speaker_ids: torch.Tensor  # (B,)
    tokens: torch.Tensor  # (B, T)
    emotion: torch.Tensor  # (B, T, De)


class BatchSampler:
    """Random frame-aligned crops with teacher targets computed once per utterance."""

    def __init__(
        self,
        utterances: Sequence[LabeledUtterance],
        teacher: Teacher,
        segment_frames: int,
        batch_size: int,
        hop: int,
        seed: int,
    ):
        if not utterances:
            raise CorpusError("no training utterances")
        self.utterances = list(utterances)
        self.segment_frames = segment_frames
        self.batch_size = batch_size
        self.hop = hop
        self.rng = np.random.default_rng([_BATCH_SALT, seed])
        short = [u.utt_id for u in self.utterances if u.num_frames < segment_frames]
        if short:
            raise CorpusError(f"{len(short)} utterances are shorter than {segment_frames} frames, e.g. {short[0]}")
        self.semantic = [np.asarray(teacher.semantic_targets(u), dtype=np.int64) for u in self.utterances]
        self.emotion = [np.asarray(teacher.emotion_targets(u), dtype=np.float32) for u in self.utterances]

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.utterances) / self.batch_size)

    def sample(self) -> Batch:
        n = len(self.utterances)
        picks = self.rng.choice(n, size=self.batch_size, replace=n < self.batch_size)
        length = (self.segment_frames - 1) * self.hop
        waves, speakers, tokens, emotion = [], [], [], []
        for i in picks:
            u = self.utterances[i]
            start = int(self.rng.integers(0, u.num_frames - self.segment_frames + 1))
            waves.append(u.waveform.samples[start * self.hop:start * self.hop + length])
            speakers.append(u.speaker_id)
            tokens.append(self.semantic[i][start:start + self.segment_frames])
            emotion.append(self.emotion[i][start:start + self.segment_frames])
        return Batch(
            wave=torch.from_numpy(np.stack(waves).astype(np.float32)),
            speaker_ids=torch.tensor(speakers, dtype=torch.long),
            tokens=torch.from_numpy(np.stack(tokens)),
            emotion=torch.from_numpy(np.stack(emotion)),
        )


@dataclass
class Optimizers:
    generator: AdamW
    discriminator: AdamW
    generator_schedule: ExponentialLR
    discriminator_schedule: ExponentialLR

    @property
    def lr(self) -> float:
        return self.generator.param_groups[0]["lr"]

    def epoch_end(self):
        self.generator_schedule.step()
        self.discriminator_schedule.step()

    def state_dict(self) -> dict:
        return {
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "generator_schedule": self.generator_schedule.state_dict(),
            "discriminator_schedule": self.discriminator_schedule.state_dict(),
        }

    def load_state_dict(self, state: dict):
        self.generator.load_state_dict(state["generator"])
        self.discriminator.load_state_dict(state["discriminator"])
        self.generator_schedule.load_state_dict(state["generator_schedule"])
        self.discriminator_schedule.load_state_dict(state["discriminator_schedule"])


def build_optimizers(model: EasyModel, disc: MultiScaleDiscriminator, cfg: RunConfig) -> Optimizers:
    o = cfg.optim
    kwargs = dict(lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
    gen = AdamW(model.parameters(), **kwargs)
    dis = AdamW(disc.parameters(), **kwargs)
    return Optimizers(gen, dis, ExponentialLR(gen, gamma=o.lr_decay), ExponentialLR(dis, gamma=o.lr_decay))


def lr_at_epoch(cfg: RunConfig, epoch: int) -> float:
    return cfg.optim.lr * cfg.optim.lr_decay ** epoch


def _check_finite(name: str, value: torch.Tensor):
    if not torch.isfinite(value).all():
        logger.warning(f"Non-finite loss term {name}: {float(value)}")
        raise NonFiniteLossError(name, float(value))


def train_step(
    batch: Batch,
    model: EasyModel,
    disc: MultiScaleDiscriminator,
    optimizers: Optimizers,
    cfg: RunConfig,
    lambda_grl: float | None = None,
) -> LossBreakdown:
    """One adversarial step: every loss term first, then the discriminator,
    generator and EMA codebook updates.

    The generator's adversarial terms use the discriminator as it was before
    this step's update. Any non-finite term raises NonFiniteLossError before
    a parameter, optimizer state or codebook changes; a codebook initialised
    lazily from the rejected batch is rolled back.
    """
    loss_cfg = cfg.loss
    model.train()
    disc.train()
    pristine = None
    if not model.trained:
        pristine = copy.deepcopy(model.bottleneck.state_dict())
        with torch.no_grad():
            model.bottleneck.initialize(model.encode(batch.wave)[3])
    try:
        out, disc_value, breakdown = _step_losses(batch, model, disc, cfg, lambda_grl)
    except NonFiniteLossError:
        if pristine is not None:
            model.bottleneck.load_state_dict(pristine)
        raise

    optimizers.generator.zero_grad(set_to_none=True)
    breakdown.total.backward()
    if loss_cfg.use_adversarial:
        optimizers.discriminator.zero_grad(set_to_none=True)
        disc_value.backward()
        optimizers.discriminator.step()
    optimizers.generator.step()
    disc.zero_grad(set_to_none=True)

    update_codebooks(
        model.bottleneck,
        out.analysis.state,
        cfg.model.ema_decay,
        cfg.model.dead_code_threshold,
        cfg.model.reseed_after,
    )
    breakdown.disc = disc_value.detach()
    return breakdown


def _step_losses(batch: Batch, model: EasyModel, disc: MultiScaleDiscriminator, cfg: RunConfig, lambda_grl):
    loss_cfg = cfg.loss
    model.emotion_heads.set_lambda(loss_cfg.lambda_grl if lambda_grl is None else lambda_grl)

    out = model(batch.wave)
    x, x_hat = batch.wave, out.wave[..., : batch.wave.shape[-1]]

    zero = x.new_zeros(())
    disc_value = zero
    parts = {"rec": recon_loss(x, x_hat, model.mel), "com": commitment_loss(out.analysis.state)}
    if loss_cfg.use_adversarial:
        disc_value = discriminator_loss(disc(x), disc(x_hat.detach()))
        _check_finite("disc", disc_value)
        fake, real = disc(x_hat), disc(x)
        parts["adv"] = generator_adversarial_loss(fake) + loss_cfg.feature_match_weight * feature_matching_loss(
            fake, real
        )
    else:
        parts["adv"] = zero
    parts["spk"] = (
        speaker_loss(out.analysis.speaker, batch.speaker_ids, model.speaker_classifier)
        if loss_cfg.use_spk
        else zero
    )
    parts["lin"] = linguistic_loss(out.q1, batch.tokens, model.linguistic_head) if loss_cfg.use_lin else zero
    parts["emo"] = (
        emotion_loss(
            out.qn,
            batch.emotion,
            batch.tokens,
            batch.speaker_ids,
            model.emotion_heads,
            cfg.model.kl_temperature,
        ).total
        if loss_cfg.use_emo
        else zero
    )

    breakdown = total_loss(parts, loss_cfg.lambda_rec)
    _check_finite("total", breakdown.total)
    return out, disc_value, breakdown


@dataclass
class TrainResult:
    steps: int
    rejected: int
    first_rec: float | None
    last_rec: float | None
    checkpoint: Path | None


class Trainer:

    def __init__(self, cfg: RunConfig, corpus: Corpus, run_dir: str | Path | None = None, teacher: Teacher | None = None):
        self.cfg = cfg
        self.corpus = corpus
        self.run_dir = Path(run_dir or cfg.paths.run_dir)
        self.hash = config_hash(cfg)
        if (cfg.optim.segment_frames - 1) * cfg.mel.hop < min_samples(cfg.mel):
            raise CorpusError("optim.segment_frames is too short for one STFT window")

        seed_everything(cfg.seed)
        self.teacher = teacher or make_teacher(cfg, corpus.train)
        self.model = build_model(
            cfg, corpus.num_speakers, self.teacher.semantic_classes, self.teacher.emotion_dim or None
        )
        self.disc = MultiScaleDiscriminator(cfg.model.discriminator_scales, cfg.model.discriminator_channels)
        self.optimizers = build_optimizers(self.model, self.disc, cfg)
        self.sampler = BatchSampler(
            corpus.train,
            self.teacher,
            cfg.optim.segment_frames,
            cfg.optim.batch_size,
            cfg.mel.hop,
            cfg.seed,
        )
        self.step = 0
        self.history: list[TrainStepRecord] = []

    def _record(self, step: int, epoch: int, lr: float, lam: float, b: LossBreakdown | None, term: str | None):
        values = b.as_floats() if b else {}
        record = TrainStepRecord(
            step=step,
            epoch=epoch,
            lr=lr,
            lambda_grl=lam,
            rejected=b is None,
            rejected_term=term,
            config_hash=self.hash,
            seed=self.cfg.seed,
            **values,
        )
        self.history.append(record)
        return record

    def fit(self, steps: int | None = None) -> TrainResult:
        steps = self.cfg.optim.steps if steps is None else steps
        per_epoch = self.sampler.steps_per_epoch
        self.run_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Training for {steps} steps ({per_epoch} steps per epoch) into {self.run_dir}")
        self.cfg.describe()

        # warm-up spans the whole run, resumed or not
        horizon = max(self.step + steps, self.cfg.optim.steps)
        rejected = 0
        first_rec = last_rec = None
        with JsonlWriter(self.run_dir / TRAIN_LOG_NAME) as log:
            for _ in range(steps):
                step, epoch = self.step, self.step // per_epoch
                lam = grl_lambda(step, horizon, self.cfg.loss.lambda_grl, self.cfg.loss.grl_warmup_fraction)
                lr = self.optimizers.lr
                batch = self.sampler.sample()
                try:
                    breakdown = train_step(batch, self.model, self.disc, self.optimizers, self.cfg, lam)
                    record = self._record(step, epoch, lr, lam, breakdown, None)
                    last_rec = record.rec
                    if first_rec is None:
                        first_rec = record.rec
                except NonFiniteLossError as e:
                    rejected += 1
                    logger.warning(f"Step {step} rejected: {e}")
                    record = self._record(step, epoch, lr, lam, None, e.term)
                log.write(record)

                self.step += 1
                if self.step % per_epoch == 0:
                    self.optimizers.epoch_end()
                if self.step % self.cfg.optim.log_every == 0 and not record.rejected:
                    logger.info(
                        f"step {self.step}/{steps} rec={record.rec:.4f} total={record.total:.4f} "
                        f"disc={record.disc:.4f} lr={lr:.3e}"
                    )

        checkpoint = self.save(self.run_dir / CHECKPOINT_NAME)
        logger.info(f"Training finished: {steps} steps, {rejected} rejected")
        return TrainResult(steps, rejected, first_rec, last_rec, checkpoint)

    def checkpoint_payload(self) -> dict:
        return {
            "config": self.cfg.model_dump_json(),
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "step": self.step,
            "dims": {
                "num_speakers": self.model.num_speakers,
                "semantic_classes": self.model.semantic_classes,
                "emotion_dim": self.model.emotion_dim,
            },
            "model": self.model.state_dict(),
            "discriminator": self.disc.state_dict(),
            "optimizers": self.optimizers.state_dict(),
        }

    def save(self, path: str | Path) -> Path:
        save_checkpoint(path, self.checkpoint_payload())
        return Path(path)

    def resume(self, path: str | Path):
        payload = load_checkpoint(path)
        if payload["config_hash"] != self.hash:
            raise CheckpointError(f"checkpoint {path} was trained with a different config")
        self.model.load_state_dict(payload["model"])
        self.disc.load_state_dict(payload["discriminator"])
        self.optimizers.load_state_dict(payload["optimizers"])
        self.step = int(payload["step"])


@dataclass
class LoadedModel:
    model: EasyModel
    cfg: RunConfig
    config_hash: str
    seed: int
    step: int


def load_model(path: str | Path) -> LoadedModel:
    payload = load_checkpoint(path)
    try:
        cfg = RunConfig(**json.loads(payload["config"]))
        dims = payload["dims"]
        model = EasyModel(cfg, dims["num_speakers"], dims["semantic_classes"], dims["emotion_dim"])
        model.load_state_dict(payload["model"])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} does not match the model: {e}") from e
    model.eval()
    return LoadedModel(model, cfg, payload["config_hash"], int(payload["seed"]), int(payload["step"]))
