import os
import sys

import librosa
import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from easy.config import MelConfig
from easy.decoder import (
    TERMS,
    Decoder,
    DecoderInput,
    MultiScaleDiscriminator,
    adversarial_losses,
    decode,
    discriminator_loss,
    feature_matching_loss,
    generator_adversarial_loss,
    recon_loss,
    total_loss,
)
from easy.errors import DecoderError, NonFiniteLossError


class PassThrough:
    """Stands in for the mel front-end so differences can be set directly."""

    def __init__(self):
        self.cfg = MelConfig()

    def __call__(self, x):
        return x


def test_output_length_is_frames_times_hop():
    dec = Decoder(dim=16, channels=16)
    assert dec.hop == 256
    with torch.no_grad():
        assert dec(torch.randn(63, 16), torch.randn(16)).shape == (16128,)
        for T in (1, 2, 7, 20):
            assert dec(torch.randn(2, T, 16), torch.randn(2, 16)).shape == (2, T * 256)


def test_custom_upsampling_stack():
    dec = Decoder(dim=4, channels=8, upsample_rates=(2, 4))
    assert dec.hop == 8
    with torch.no_grad():
        assert dec(torch.randn(5, 4), torch.randn(4)).shape == (40,)


def test_zeroed_output_layer_is_silent():
    dec = Decoder(dim=8, channels=16)
    with torch.no_grad():
        dec.post.weight.zero_()
        dec.post.bias.zero_()
        wave = decode(DecoderInput(torch.randn(8), torch.randn(10, 8)), dec)
    assert torch.count_nonzero(wave) == 0


def test_output_is_bounded():
    dec = Decoder(dim=4, channels=8)
    with torch.no_grad():
        wave = dec(100 * torch.randn(6, 4), 100 * torch.randn(4))
    assert wave.abs().max() <= 1.0


def test_width_mismatch():
    dec = Decoder(dim=8, channels=16)
    with pytest.raises(DecoderError):
        dec(torch.randn(10, 8), torch.randn(4))
    with pytest.raises(DecoderError):
        dec(torch.randn(10, 4), torch.randn(4))


def test_parameter_gradient_matches_finite_differences():
    """Two-frame input, double precision, central difference on one weight"""
    torch.manual_seed(0)
    dec = Decoder(dim=2, channels=8, upsample_rates=(2, 2)).double()
    q = torch.randn(2, 2, dtype=torch.float64)
    s = torch.randn(2, dtype=torch.float64)
    weight = dec.pre.weight
    dec(q, s).pow(2).sum().backward()
    analytic = weight.grad[1, 0, 3].item()

    eps = 1e-6
    with torch.no_grad():
        weight[1, 0, 3] += eps
        up = dec(q, s).pow(2).sum().item()
        weight[1, 0, 3] -= 2 * eps
        down = dec(q, s).pow(2).sum().item()
        weight[1, 0, 3] += eps
    assert analytic == pytest.approx((up - down) / (2 * eps), rel=1e-3, abs=1e-9)


def test_input_gradient_check():
    torch.manual_seed(1)
    dec = Decoder(dim=2, channels=8, upsample_rates=(2, 2)).double()
    q = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    s = torch.randn(2, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: dec(x, s), (q,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_recon_loss_identical_is_zero(noise_wave):
    x = torch.from_numpy(noise_wave.samples)
    assert recon_loss(x, x, MelConfig()).item() == 0.0


def test_recon_loss_is_symmetric(noise_wave):
    x = torch.from_numpy(noise_wave.samples)
    y = x.flip(0) * 0.5
    a = recon_loss(x, y, MelConfig()).item()
    b = recon_loss(y, x, MelConfig()).item()
    assert a > 0
    assert a == pytest.approx(b, rel=1e-12)


def test_recon_loss_constant_difference():
    """A unit difference everywhere gives 1 for each norm"""
    x = torch.zeros(4, 2048, dtype=torch.float64)
    loss = recon_loss(x + 1.0, x, PassThrough())
    assert loss.item() == pytest.approx(2.0)


def test_recon_loss_crops_to_the_shorter_signal(noise_wave):
    x = torch.from_numpy(noise_wave.samples)
    longer = torch.cat([x, torch.ones(500, dtype=x.dtype)])
    assert recon_loss(x, longer, MelConfig()).item() == 0.0


def test_recon_loss_rejects_short_overlap():
    with pytest.raises(DecoderError):
        recon_loss(torch.zeros(16000), torch.zeros(100), MelConfig())


def test_recon_loss_matches_direct_computation():
    """Same value as a librosa STFT and mel basis computed by hand"""
    rng = np.random.default_rng(3)
    x = 0.3 * rng.standard_normal(8000)
    y = 0.3 * rng.standard_normal(8000)
    cfg = MelConfig()
    basis = librosa.filters.mel(sr=16000, n_fft=cfg.n_fft, n_mels=80, fmin=cfg.fmin, fmax=cfg.fmax)

    def logmel(a):
        spec = np.abs(librosa.stft(a, n_fft=cfg.n_fft, hop_length=cfg.hop, win_length=cfg.win,
                                   window="hann", center=True, pad_mode="reflect"))
        return np.log(np.maximum(basis.astype(np.float64) @ spec, 1e-5))

    diff = logmel(x) - logmel(y)
    expected = np.mean(np.abs(diff)) + np.sqrt(np.mean(diff**2))
    got = recon_loss(torch.from_numpy(x), torch.from_numpy(y), cfg).item()
    assert got == pytest.approx(expected, abs=1e-6, rel=1e-6)


def score_maps(value: float) -> list[list[torch.Tensor]]:
    return [[torch.randn(1, 4, 10), torch.full((1, 1, 10), value)] for _ in range(3)]


def test_discriminator_loss_zero_at_its_optimum():
    assert discriminator_loss(score_maps(1.0), score_maps(0.0)).item() == 0.0
    assert discriminator_loss(score_maps(0.0), score_maps(1.0)).item() == pytest.approx(2.0)


def test_generator_term_zero_when_fakes_score_real():
    assert generator_adversarial_loss(score_maps(1.0)).item() == 0.0
    assert generator_adversarial_loss(score_maps(0.0)).item() == pytest.approx(1.0)


def test_feature_matching_zero_for_identical_audio(noise_wave):
    disc = MultiScaleDiscriminator(scales=2, channels=4)
    x = torch.from_numpy(noise_wave.samples).float()
    with torch.no_grad():
        assert feature_matching_loss(disc(x), disc(x)).item() == 0.0


def test_adversarial_losses_are_non_negative(noise_wave):
    disc = MultiScaleDiscriminator(scales=3, channels=4)
    x = torch.from_numpy(noise_wave.samples).float().unsqueeze(0)
    x_hat = torch.tanh(torch.randn(1, 8200))
    terms = adversarial_losses(x, x_hat, disc)
    for value in (terms.gen_adv, terms.disc, terms.feat_match):
        assert value.item() >= 0
    assert terms.generator_total().item() == pytest.approx((terms.gen_adv + 2 * terms.feat_match).item())


def test_discriminator_term_does_not_reach_the_generator():
    disc = MultiScaleDiscriminator(scales=2, channels=4)
    x = torch.randn(1, 4096)
    x_hat = torch.randn(1, 4096, requires_grad=True)
    adversarial_losses(x, x_hat, disc).disc.backward()
    assert x_hat.grad is None or torch.count_nonzero(x_hat.grad) == 0


def test_discriminator_returns_feature_maps_per_scale():
    disc = MultiScaleDiscriminator(scales=3, channels=4)
    outs = disc(torch.randn(2, 4096))
    assert len(outs) == 3
    for maps in outs:
        assert len(maps) == 5
        assert maps[-1].shape[:2] == (2, 1)


def test_total_loss_examples():
    assert total_loss({name: 0.0 for name in TERMS}).total.item() == 0.0
    assert total_loss({"rec": 1.0}, lambda_rec=45.0).total.item() == 45.0
    parts = {"rec": 0.1, "adv": 0.2, "com": 0.3, "spk": 0.4, "lin": 0.5, "emo": 0.6}
    assert total_loss(parts).total.item() == pytest.approx(6.5, abs=1e-12)


def test_total_is_weighted_sum():
    torch.manual_seed(5)
    parts = {name: torch.rand((), dtype=torch.float64) for name in TERMS}
    b = total_loss(parts, lambda_rec=7.0)
    expected = 7.0 * parts["rec"] + sum(parts[name] for name in TERMS[1:])
    assert b.total.item() == pytest.approx(expected.item(), rel=1e-15)
    floats = b.as_floats()
    assert set(floats) == {*TERMS, "total", "disc"}
    assert floats["disc"] == 0.0


def test_non_finite_term_is_reported():
    with pytest.raises(NonFiniteLossError) as err:
        total_loss({"rec": 0.1, "emo": float("nan")})
    assert err.value.term == "emo"
    with pytest.raises(NonFiniteLossError):
        total_loss({"adv": torch.tensor(float("inf"))})
