import math
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from conftest import tiny_config
from easy.errors import CheckpointError, CorpusError
from easy.models import TrainStepRecord
from easy.storage import checkpoint_digest, read_jsonl, state_digest
from easy.trainer import (
    CHECKPOINT_NAME,
    TRAIN_LOG_NAME,
    Batch,
    Trainer,
    lr_at_epoch,
    load_model,
    train_step,
)


def test_learning_rate_schedule():
    cfg = tiny_config()
    assert lr_at_epoch(cfg, 0) == 2e-4
    assert lr_at_epoch(cfg, 10) == pytest.approx(1.809e-4, rel=1e-3)
    assert lr_at_epoch(cfg, 10) == pytest.approx(2e-4 * 0.99**10)


def test_scheduler_decays_once_per_epoch(tiny_corpus, tmp_path):
    """Tiny corpus: 16 training utterances at batch 4 make four steps per epoch"""
    trainer = Trainer(tiny_config(), tiny_corpus, tmp_path)
    per_epoch = trainer.sampler.steps_per_epoch
    trainer.fit(steps=per_epoch + 1)
    lrs = [r.lr for r in trainer.history]
    assert lrs[:per_epoch] == [2e-4] * per_epoch
    assert lrs[per_epoch] == pytest.approx(2e-4 * 0.99)
    assert trainer.history[per_epoch].epoch == 1


def test_training_log_and_checkpoint(trained):
    log = read_jsonl(trained.run_dir / TRAIN_LOG_NAME, TrainStepRecord)
    assert [r.step for r in log] == list(range(12))
    assert all(not r.rejected for r in log)
    assert all(r.config_hash == trained.hash for r in log)
    for r in log:
        for value in (r.rec, r.adv, r.com, r.spk, r.lin, r.emo, r.total, r.disc):
            assert value is not None and math.isfinite(value)
        assert r.total == pytest.approx(45.0 * r.rec + r.adv + r.com + r.spk + r.lin + r.emo, rel=1e-5)
    assert (trained.run_dir / CHECKPOINT_NAME).is_file()
    assert trained.model.trained


def test_grl_strength_warms_up(trained):
    lams = [r.lambda_grl for r in trained.history]
    assert lams[0] == 0.0
    assert lams == sorted(lams)
    assert lams[-1] == 1.0


def test_same_seed_gives_identical_runs(tiny_corpus, tmp_path):
    """Two runs of the same config produce identical loss sequences and weights"""
    runs = []
    for name in ("a", "b"):
        trainer = Trainer(tiny_config(), tiny_corpus, tmp_path / name)
        trainer.fit(steps=3)
        runs.append(trainer)
    a, b = runs
    assert [r.model_dump() for r in a.history] == [r.model_dump() for r in b.history]
    assert checkpoint_digest(tmp_path / "a" / CHECKPOINT_NAME) == checkpoint_digest(tmp_path / "b" / CHECKPOINT_NAME)


def test_different_seed_changes_the_run(tiny_corpus, tmp_path):
    a = Trainer(tiny_config(), tiny_corpus, tmp_path / "a")
    b = Trainer(tiny_config(seed=1), tiny_corpus, tmp_path / "b")
    assert a.hash != b.hash
    assert state_digest(a.model.state_dict()) != state_digest(b.model.state_dict())


def test_repeated_steps_on_one_batch_lower_reconstruction(tiny_corpus, tmp_path):
    cfg = tiny_config(optim={"lr": 2e-3}, loss={"use_adversarial": False})
    trainer = Trainer(cfg, tiny_corpus, tmp_path)
    batch = trainer.sampler.sample()
    recs = [
        train_step(batch, trainer.model, trainer.disc, trainer.optimizers, cfg).rec.item() for _ in range(40)
    ]
    assert min(recs[-5:]) < recs[0]


def test_checkpoint_round_trip_gives_identical_forward(trained, tiny_corpus):
    loaded = load_model(trained.run_dir / CHECKPOINT_NAME)
    assert loaded.config_hash == trained.hash
    assert loaded.step == 12
    assert loaded.seed == 0
    trained.model.eval()
    wave = torch.from_numpy(tiny_corpus.test[0].waveform.samples.astype(np.float32))
    assert torch.equal(trained.model.reconstruct(wave), loaded.model.reconstruct(wave))
    assert torch.equal(
        trained.model.bottleneck.layers[0].codebook, loaded.model.bottleneck.layers[0].codebook
    )


def test_resume_continues_from_the_saved_step(trained, tiny_corpus, tmp_path):
    trainer = Trainer(tiny_config(), tiny_corpus, tmp_path)
    trainer.resume(trained.run_dir / CHECKPOINT_NAME)
    assert trainer.step == 12
    assert trainer.model.trained
    trainer.fit(steps=1)
    assert trainer.history[0].step == 12


def test_resume_rejects_a_different_config(trained, tiny_corpus, tmp_path):
    trainer = Trainer(tiny_config(seed=1), tiny_corpus, tmp_path)
    with pytest.raises(CheckpointError):
        trainer.resume(trained.run_dir / CHECKPOINT_NAME)


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "absent.pt")


def test_non_finite_step_is_rejected_without_updates(tiny_corpus, tmp_path):
    trainer = Trainer(tiny_config(), tiny_corpus, tmp_path)
    trainer.fit(steps=1)
    before = state_digest(trainer.model.state_dict(), trainer.disc.state_dict())

    good = trainer.sampler.sample()
    poisoned = Batch(torch.full_like(good.wave, float("nan")), good.speaker_ids, good.tokens, good.emotion)
    trainer.sampler.sample = lambda: poisoned
    result = trainer.fit(steps=2)

    assert result.rejected == 2
    assert result.first_rec is None
    rejected = trainer.history[-2:]
    assert all(r.rejected and r.rec is None for r in rejected)
    assert rejected[0].rejected_term == "disc"
    assert state_digest(trainer.model.state_dict(), trainer.disc.state_dict()) == before


def test_non_finite_generator_term_leaves_discriminator_untouched(tiny_corpus, tmp_path, monkeypatch):
    trainer = Trainer(tiny_config(), tiny_corpus, tmp_path)
    trainer.fit(steps=1)
    def snapshot():
        return state_digest(trainer.model.state_dict(), trainer.disc.state_dict(), trainer.optimizers.state_dict())

    before = snapshot()

    monkeypatch.setattr("easy.trainer.linguistic_loss", lambda *args, **kwargs: torch.tensor(float("nan")))
    result = trainer.fit(steps=1)

    assert result.rejected == 1
    assert trainer.history[-1].rejected_term == "lin"
    assert snapshot() == before


def test_rejected_first_batch_does_not_initialize_codebooks(tiny_corpus, tmp_path):
    trainer = Trainer(tiny_config(), tiny_corpus, tmp_path)
    assert not trainer.model.trained
    before = state_digest(trainer.model.bottleneck.state_dict())

    good = trainer.sampler.sample()
    poisoned = Batch(torch.full_like(good.wave, float("nan")), good.speaker_ids, good.tokens, good.emotion)
    batches = iter([poisoned, good])
    trainer.sampler.sample = lambda: next(batches)

    trainer.fit(steps=1)
    assert trainer.history[-1].rejected
    assert not trainer.model.trained
    assert state_digest(trainer.model.bottleneck.state_dict()) == before

    result = trainer.fit(steps=1)
    assert result.rejected == 0
    assert trainer.model.trained
    for layer in trainer.model.bottleneck.layers:
        assert torch.isfinite(layer.codebook).all()


def test_segment_shorter_than_a_window_is_rejected(tiny_corpus, tmp_path):
    with pytest.raises(CorpusError):
        Trainer(tiny_config(optim={"segment_frames": 3}), tiny_corpus, tmp_path)
