import collections
import math

import pytest
import torch

from masafusion.adapter import Adapter
from masafusion.denoiser import Denoiser
from masafusion.errors import ConfigError, DivergenceError, InputError
from masafusion.text import TextEncoder
from masafusion.trainer import (COMBINATIONS, JITTERS, TrainConfig, base_schedule, classify_shape,
                                make_toy_dataset, read_loss_trace, render, shape_prototypes, smoothed, train,
                                write_loss_trace)

from .helpers import TINY

ENC = TextEncoder()


def tiny_data(n=16, seed=0):
    return make_toy_dataset(seed, n, ENC, TINY.height, TINY.width)


def test_dataset_is_deterministic():
    a, b = make_toy_dataset(3, 40, ENC, 12, 12), make_toy_dataset(3, 40, ENC, 12, 12)
    assert [s.prompt for s in a] == [s.prompt for s in b]
    assert all(torch.equal(x.image, y.image) for x, y in zip(a, b))
    assert [s.prompt for s in make_toy_dataset(4, 40, ENC, 12, 12)] != [s.prompt for s in a]


@pytest.mark.parametrize("n", [16, 32, 48, 21])
def test_attribute_histogram_is_uniform(n):
    counts = collections.Counter(s.prompt for s in make_toy_dataset(1, n, ENC, 12, 12))
    full = [counts[" ".join(c)] for c in COMBINATIONS]
    assert max(full) - min(full) <= 1
    assert sum(full) == n


def test_samples_carry_matching_tokens():
    for s in make_toy_dataset(0, 16, ENC, 12, 12):
        assert ENC.vocab.decode(s.tokens) == s.prompt
        assert s.image.shape == (4, 12, 12)


def test_square_left_stays_in_left_half():
    for jitter in JITTERS:
        img = render("square", "left", "dark", 12, 12, jitter)
        nz = img.abs().amax(0) > 0
        assert nz.any() and not nz[:, 6:].any()
    right = render("cross", "right", "light", 12, 12).abs().amax(0) > 0
    assert not right[:, :6].any()


def test_render_rejects_unknown_attributes():
    with pytest.raises(InputError):
        render("hexagon", "left", "dark", 12, 12)
    with pytest.raises(InputError):
        render("square", "top", "dark", 12, 12)
    with pytest.raises(ConfigError):
        make_toy_dataset(0, 0, ENC, 12, 12)


def test_prototype_classifier_recognises_clean_renders():
    protos = shape_prototypes(12, 12)
    for shape, position, shade in COMBINATIONS:
        for jitter in JITTERS:
            img = render(shape, position, shade, 12, 12, jitter)
            assert classify_shape(img, position, protos) == shape


def test_base_schedule_is_valid():
    s = base_schedule()
    assert s.T == 100 and float(s.alpha_bar[-1]) <= 1e-2
    assert s.respace(50).timesteps[-1] == 100


def test_train_config_validation():
    for kw in ({"steps": 0}, {"batch_size": 0}, {"lr": -1.0}, {"lr": float("inf")}, {"cond_drop": 1.5},
               {"adapter_prob": -0.1}, {"optimizer": "rmsprop"}, {"decay": "step"}, {"clip": -1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_zero_learning_rate_leaves_weights_unchanged(optimizer):
    model = Denoiser(TINY)
    before = {k: v.detach().clone() for k, v in model.named_weights().items()}
    train(model, tiny_data(), TrainConfig(steps=3, batch_size=4, lr=0.0, optimizer=optimizer), ENC,
          Adapter(TINY.grid, TINY.widths), base_schedule(TINY.train_steps))
    for k, v in model.named_weights().items():
        assert torch.equal(v, before[k]), k


def test_loss_trace_is_deterministic():
    runs = []
    for _ in range(2):
        r = train(Denoiser(TINY), tiny_data(), TrainConfig(steps=5, batch_size=4), ENC,
                  Adapter(TINY.grid, TINY.widths), base_schedule(TINY.train_steps))
        runs.append(r)
    assert runs[0].losses == runs[1].losses and len(runs[0].losses) == 5
    for k, v in runs[0].model.named_weights().items():
        assert torch.equal(v, runs[1].model.p(k))
    assert not any(p.requires_grad for p in runs[0].model.parameters())


def test_short_training_reduces_loss():
    r = train(Denoiser(TINY), tiny_data(32), TrainConfig(steps=120, batch_size=8), ENC,
              schedule=base_schedule(TINY.train_steps))
    sm = smoothed(r.losses, 20)
    assert sm[-1] < sm[19]


def test_divergence_is_reported():
    cfg = TrainConfig(steps=50, batch_size=4, lr=1e6, clip=0.0, optimizer="sgd", decay="constant")
    with pytest.raises(DivergenceError):
        train(Denoiser(TINY), tiny_data(), cfg, ENC, schedule=base_schedule(TINY.train_steps))


def test_empty_data_rejected():
    with pytest.raises(InputError):
        train(Denoiser(TINY), [], TrainConfig(steps=1), ENC)


def test_loss_trace_file_round_trip(tmp_path):
    losses = [1.0, 0.5, 1 / 3]
    write_loss_trace(losses, tmp_path / "loss.txt")
    assert (tmp_path / "loss.txt").read_text().splitlines()[0] == "0 1"
    back = read_loss_trace(tmp_path / "loss.txt")
    assert back == pytest.approx(losses, rel=1e-9)


def test_smoothed_window():
    assert smoothed([2.0, 4.0, 6.0, 8.0], window=2) == [2.0, 3.0, 5.0, 7.0]
    assert math.isclose(smoothed([1.0] * 10, 50)[-1], 1.0)
