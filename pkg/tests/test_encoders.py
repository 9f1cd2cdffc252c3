import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from conftest import tiny_config
from easy.encoders import (
    ExternalTeacher,
    KMeansCodebook,
    OracleTeacher,
    SpeakerEncoder,
    SpeechEncoder,
    fit_kmeans,
    fit_teacher_codebook,
    kmeans_assign,
    make_teacher,
    subtract_speaker,
)
from easy.errors import EncoderError


def test_speech_encoder_preserves_frame_rate():
    enc = SpeechEncoder(dim=16, layers=3, kernel=5)
    assert enc(torch.randn(63, 80)).shape == (63, 16)
    assert enc(torch.randn(2, 63, 80)).shape == (2, 63, 16)


def test_zeroed_final_layer_gives_zero_output():
    enc = SpeechEncoder(dim=8, layers=2)
    with torch.no_grad():
        enc.proj.weight.zero_()
        enc.proj.bias.zero_()
    assert torch.count_nonzero(enc(torch.randn(10, 80))) == 0


def test_speech_encoder_gradient_matches_finite_differences():
    """Double-precision gradcheck of the content encoder with respect to its input"""
    torch.manual_seed(0)
    enc = SpeechEncoder(dim=4, layers=2, kernel=3).double()
    mel = torch.randn(1, 5, 80, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda m: enc(m).sum(), (mel,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_speech_encoder_parameter_gradient():
    """Reported parameter gradient agrees with a central difference"""
    torch.manual_seed(1)
    enc = SpeechEncoder(dim=4, layers=2, kernel=3).double()
    mel = torch.randn(6, 80, dtype=torch.float64)
    weight = enc.proj.weight
    enc(mel).pow(2).sum().backward()
    analytic = weight.grad[0, 0, 1].item()

    eps = 1e-6
    with torch.no_grad():
        weight[0, 0, 1] += eps
        up = enc(mel).pow(2).sum().item()
        weight[0, 0, 1] -= 2 * eps
        down = enc(mel).pow(2).sum().item()
        weight[0, 0, 1] += eps
    assert analytic == pytest.approx((up - down) / (2 * eps), rel=1e-3, abs=1e-8)


def test_speaker_encoder_output_is_utterance_level():
    enc = SpeakerEncoder(dim=16, hidden=16, gated_blocks=1, kernel=3, attention_layers=1, heads=2)
    for T in (3, 20, 63):
        assert enc(torch.randn(T, 80)).shape == (16,)
    assert enc(torch.randn(4, 20, 80)).shape == (4, 16)


def test_speaker_encoder_gradient_matches_finite_differences():
    torch.manual_seed(2)
    enc = SpeakerEncoder(dim=4, hidden=8, gated_blocks=1, kernel=3, attention_layers=1, heads=2).double()
    mel = torch.randn(6, 80, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda m: enc(m).sum(), (mel,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_stationary_input_pools_to_the_same_vector():
    """A repeated frame doubled in length gives the same speaker vector"""
    torch.manual_seed(3)
    enc = SpeakerEncoder(dim=8, hidden=8, gated_blocks=2, kernel=3, attention_layers=0).double()
    frame = torch.randn(1, 80, dtype=torch.float64)
    single = enc(frame.repeat(10, 1))
    double = enc(frame.repeat(20, 1))
    torch.testing.assert_close(single, double, atol=1e-4, rtol=0)


def test_frame_permutation_of_stationary_input():
    torch.manual_seed(4)
    enc = SpeakerEncoder(dim=8, hidden=8, gated_blocks=1, kernel=3, attention_layers=0).double()
    mel = torch.randn(1, 80, dtype=torch.float64).repeat(12, 1)
    shuffled = mel[torch.randperm(12)]
    assert torch.max(torch.abs(enc(mel) - enc(shuffled))) < 1e-4


def test_speaker_encoder_rejects_too_few_frames():
    enc = SpeakerEncoder(dim=8, hidden=8, gated_blocks=1, kernel=5, attention_layers=0)
    with pytest.raises(EncoderError):
        enc(torch.randn(3, 80))


def test_wrong_mel_width_is_rejected():
    with pytest.raises(EncoderError):
        SpeechEncoder(dim=8)(torch.randn(10, 40))


def test_subtract_speaker():
    z = torch.tensor([1.0, -2.0, 3.0])
    zeros = torch.zeros(4, 3)
    assert torch.equal(subtract_speaker(zeros, z), -z.expand(4, 3))
    fr = torch.randn(5, 3)
    assert torch.equal(subtract_speaker(fr, torch.zeros(3)), fr)


def test_subtract_speaker_is_invertible():
    fr = torch.tensor([[0.5, 0.25], [1.0, -0.75]])
    s = torch.tensor([0.125, 2.0])
    assert torch.equal(subtract_speaker(fr, s) + s, fr)
    fr, s = torch.randn(2, 7, 3, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64)
    torch.testing.assert_close(subtract_speaker(fr, s) + s.unsqueeze(1), fr, atol=1e-15, rtol=0)


def test_subtract_speaker_width_mismatch():
    with pytest.raises(EncoderError):
        subtract_speaker(torch.zeros(4, 3), torch.zeros(2))


def test_kmeans_two_clusters():
    points = np.array([[0.0], [0.1], [10.0], [10.1]])
    book = fit_kmeans(points, 2, seed=0)
    np.testing.assert_allclose(np.sort(book.centroids[:, 0]), [0.05, 10.05])
    ids = kmeans_assign(book, points)
    assert ids[0] == ids[1] and ids[2] == ids[3] and ids[0] != ids[2]


def test_kmeans_with_one_cluster_per_point():
    points = np.random.default_rng(0).standard_normal((6, 3))
    book = fit_kmeans(points, 6, seed=0)
    np.testing.assert_allclose(book.centroids[kmeans_assign(book, points)], points, atol=1e-12)


def test_centroid_assigns_to_itself():
    book = KMeansCodebook(np.array([[0.0, 0.0], [1.0, 1.0], [5.0, -1.0]]))
    assert list(kmeans_assign(book, book.centroids)) == [0, 1, 2]


def test_kmeans_is_deterministic_and_in_range():
    points = np.random.default_rng(1).standard_normal((200, 4))
    a = fit_kmeans(points, 7, seed=3)
    b = fit_kmeans(points, 7, seed=3)
    assert np.array_equal(a.centroids, b.centroids)
    ids = kmeans_assign(a, points)
    assert ids.min() >= 0 and ids.max() < 7


def test_kmeans_invalid_inputs():
    with pytest.raises(EncoderError):
        fit_kmeans(np.zeros((0, 2)), 2, seed=0)
    with pytest.raises(EncoderError):
        fit_kmeans(np.ones((1, 2)), 2, seed=0)
    with pytest.raises(EncoderError):
        fit_kmeans(np.random.default_rng(0).standard_normal((5, 2)), 0, seed=0)


def test_kmeans_accepts_repeated_frames():
    """Held frames repeat exactly; only the frame count has to reach K"""
    points = np.array([[0.0, 1.0]] * 5 + [[4.0, 4.0]] * 3)
    book = fit_kmeans(points, 2, seed=0)
    np.testing.assert_allclose(book.centroids[kmeans_assign(book, points)], points)

    book = fit_kmeans(np.ones((5, 2)), 2, seed=0)
    assert book.num_clusters == 2
    assert set(kmeans_assign(book, np.ones((5, 2)))) == {0}


def test_oracle_teacher(tiny_corpus):
    teacher = make_teacher(tiny_config(), tiny_corpus.train)
    assert isinstance(teacher, OracleTeacher)
    u = tiny_corpus.train[0]
    assert np.array_equal(teacher.semantic_targets(u), u.frame_tokens)
    assert teacher.emotion_targets(u).shape == (u.num_frames, 4)


def test_external_teacher_reads_and_aligns_features(tiny_corpus, tmp_path):
    """Features at half the mel frame rate are tokenized and stretched to mel frames"""
    rng = np.random.default_rng(0)
    train = tiny_corpus.train[:4]
    for u in train:
        np.save(tmp_path / f"{u.utt_id}.semantic.npy", rng.standard_normal((u.num_frames // 2, 6)))
        np.save(tmp_path / f"{u.utt_id}.emotion.npy", rng.standard_normal((u.num_frames // 2, 5)))

    teacher = ExternalTeacher(tmp_path)
    fit_teacher_codebook(teacher, train, K=4, seed=0)
    u = train[0]
    tokens = teacher.semantic_targets(u)
    assert tokens.shape == (u.num_frames,)
    assert tokens.min() >= 0 and tokens.max() < 4
    emotion = teacher.emotion_targets(u)
    assert emotion.shape == (u.num_frames, 5)
    assert teacher.emotion_dim == 5


def test_external_teacher_missing_features(tiny_corpus, tmp_path):
    teacher = ExternalTeacher(tmp_path)
    with pytest.raises(EncoderError):
        teacher.emotion_targets(tiny_corpus.train[0])
    with pytest.raises(EncoderError):
        ExternalTeacher(tmp_path / "absent")


def test_oracle_teacher_with_other_cluster_count(tiny_corpus):
    teacher = make_teacher(tiny_config(teacher={"kmeans_clusters": 5}), tiny_corpus.train)
    assert teacher.semantic_classes == 5
    u = tiny_corpus.train[0]
    tokens = teacher.semantic_targets(u)
    assert tokens.shape == (u.num_frames,)
    assert tokens.min() >= 0 and tokens.max() < 5
    assert np.array_equal(tokens, teacher.semantic_targets(u))


def _write_external_features(utterances, root, emotion_width):
    rng = np.random.default_rng(0)
    for u in utterances:
        np.save(root / f"{u.utt_id}.semantic.npy", rng.standard_normal((u.num_frames, 6)))
        np.save(root / f"{u.utt_id}.emotion.npy", rng.standard_normal((u.num_frames, emotion_width)))


def test_external_emotion_width_comes_from_features(tiny_corpus, tmp_path):
    train = tiny_corpus.train[:4]
    _write_external_features(train, tmp_path, emotion_width=12)
    cfg = tiny_config(teacher={"kind": "external", "feature_dir": str(tmp_path), "kmeans_clusters": 4})
    teacher = make_teacher(cfg, train)
    assert teacher.emotion_dim == 12
    assert teacher.emotion_targets(train[1]).shape == (train[1].num_frames, 12)


def test_external_emotion_width_must_match_config(tiny_corpus, tmp_path):
    train = tiny_corpus.train[:4]
    _write_external_features(train, tmp_path, emotion_width=12)
    cfg = tiny_config(
        teacher={"kind": "external", "feature_dir": str(tmp_path), "kmeans_clusters": 4, "emotion_dim": 768}
    )
    with pytest.raises(EncoderError):
        make_teacher(cfg, train)

    np.save(tmp_path / f"{train[2].utt_id}.emotion.npy", np.zeros((train[2].num_frames, 3)))
    teacher = ExternalTeacher(tmp_path)
    teacher.emotion_targets(train[0])
    with pytest.raises(EncoderError):
        teacher.emotion_targets(train[2])
