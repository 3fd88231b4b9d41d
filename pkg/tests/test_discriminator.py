import numpy as np
import pytest

from tracegen import nn
from tracegen import signal as sig
from tracegen import toydata as td
from tracegen.discriminator import (DiscriminatorModel, FeatureConfig,
                                    TrainRecipe, recipe_from_preset)
from tracegen.errors import ConfigError, InvalidInputError


def tone_clip(freq, seed=0, seconds=1.0):
    n = int(8000 * seconds)
    t = np.arange(n) / 8000
    return sig.AudioClip(0.5 * np.sin(2 * np.pi * freq * t), 8000)


def noise_clip(seed, seconds=1.0):
    return sig.make_noise("white", int(8000 * seconds), 8000, seed)


@pytest.fixture()
def separable_manifest(tmp_path):
    """Pure tones (label 1) vs white noise (label 0)."""
    records = []
    for i in range(20):
        path = tmp_path / f"tone{i}.wav"
        sig.write_wav(path, tone_clip(300 + 10 * i))
        records.append(td.ManifestRecord(str(path), 1, "gen_original", i, 0, i))
        path = tmp_path / f"noise{i}.wav"
        sig.write_wav(path, noise_clip(seed=i))
        records.append(td.ManifestRecord(str(path), 0, "ground_truth", i, 0, i))
    return td.DatasetManifest("dev", records, {"labeling": "baseline"})


def test_untrained_zeroed_head_scores_exactly_half():
    disc = DiscriminatorModel(seed=0)
    dense = disc.net.layers[-2]
    dense.w.assign(np.zeros_like(dense.w.value))
    dense.b.assign(np.zeros_like(dense.b.value))
    assert disc.classify(tone_clip(440)) == 0.5


def test_classify_deterministic():
    disc = DiscriminatorModel(seed=1)
    clip = tone_clip(440)
    assert disc.classify(clip) == disc.classify(clip)


def test_classify_matches_batched_scoring():
    disc = DiscriminatorModel(seed=2)
    clips = [tone_clip(300), noise_clip(3), tone_clip(500, seconds=2.0)]
    batched = disc.classify_many(clips)
    single = np.array([disc.classify(c) for c in clips])
    assert np.array_equal(batched, single)


def test_classify_resamples_foreign_rates():
    disc = DiscriminatorModel(seed=3)
    clip = tone_clip(200)
    attacked = sig.resample(clip, 2666)
    score = disc.classify(attacked)
    assert 0.0 < score < 1.0


def test_classify_rejects_too_short_clip():
    disc = DiscriminatorModel(seed=4)
    with pytest.raises(InvalidInputError):
        disc.classify(sig.AudioClip(np.zeros(100), 8000))


def test_classify_pads_short_feature_maps():
    disc = DiscriminatorModel(seed=4)
    # 40 frames of features, below the 96-frame crop
    clip = sig.AudioClip(np.random.default_rng(0).normal(size=256 + 39 * 64), 8000)
    assert 0.0 < disc.classify(clip) < 1.0


def test_train_zero_epochs_no_change(separable_manifest):
    disc = DiscriminatorModel(seed=5)
    before = disc.checksum()
    curve = disc.train(separable_manifest, TrainRecipe(epochs=0, lr=1e-3))
    assert curve == []
    assert disc.checksum() == before


def test_train_single_class_manifest_rejected(separable_manifest):
    records = [r for r in separable_manifest.records if r.label == 1]
    with pytest.raises(ConfigError):
        DiscriminatorModel(seed=6).train(
            td.DatasetManifest("dev", records, {}), TrainRecipe(epochs=1, lr=1e-3))


def test_train_separates_toy_manifest_within_30_epochs(separable_manifest):
    disc = DiscriminatorModel(seed=7)
    curve = disc.train(separable_manifest, recipe_from_preset("toy", epochs=30, seed=0))
    assert curve[-1] < 0.1
    tones = [disc.classify(tone_clip(305 + 10 * i, seconds=0.9)) for i in range(5)]
    noises = [disc.classify(noise_clip(seed=100 + i, seconds=0.9)) for i in range(5)]
    assert np.mean(tones) > np.mean(noises)


def test_train_bit_reproducible(separable_manifest):
    a = DiscriminatorModel(seed=8)
    b = DiscriminatorModel(seed=8)
    recipe = TrainRecipe(epochs=2, lr=1e-3, seed=3)
    a.train(separable_manifest, recipe)
    b.train(separable_manifest, recipe)
    assert a.checksum() == b.checksum()


def test_input_gradient_finite_and_matches_fd():
    disc = DiscriminatorModel(seed=9)
    rng = np.random.default_rng(1)
    samples = rng.normal(size=256 + 95 * 64) * 0.3
    score, grad_fn = disc.classify_with_grad(samples, 8000)
    loss, dscore = nn.bce_loss(score, 1)
    grad = grad_fn(dscore)
    assert grad.shape == samples.shape
    assert np.all(np.isfinite(grad))

    h = 1e-4
    idxs = rng.choice(len(samples), size=25, replace=False)
    for i in idxs:
        sp, sm = samples.copy(), samples.copy()
        sp[i] += h
        sm[i] -= h
        fp = nn.bce_loss(disc.classify_with_grad(sp, 8000)[0], 1)[0]
        fm = nn.bce_loss(disc.classify_with_grad(sm, 8000)[0], 1)[0]
        fd = (fp - fm) / (2 * h)
        assert abs(grad[i] - fd) / max(abs(fd), abs(grad[i]), 1e-9) < 1e-3


def test_input_gradient_requires_native_rate():
    disc = DiscriminatorModel(seed=10)
    with pytest.raises(InvalidInputError):
        disc.classify_with_grad(np.zeros(8000), 2666)


def test_checkpoint_round_trip_preserves_scores(tmp_path):
    disc = DiscriminatorModel(seed=11)
    clip = tone_clip(350)
    before = disc.classify(clip)
    path = tmp_path / "disc.ckpt"
    disc.save(path)
    restored = DiscriminatorModel.load(path)
    assert restored.classify(clip) == before
    assert restored.checksum() == disc.checksum()


def test_recipe_presets_and_validation():
    paper = recipe_from_preset("paper", epochs=30)
    assert paper.lr == 5e-6 and paper.l2 == 1e-4 and paper.clip_norm == 1.0
    toy = recipe_from_preset("toy", epochs=5)
    assert toy.lr == 1e-3
    with pytest.raises(InvalidInputError):
        TrainRecipe(epochs=-1, lr=1e-3)
    with pytest.raises(InvalidInputError):
        TrainRecipe(epochs=1, lr=1e-3, crop_frames=8)


def test_mfm_variant_forward_works():
    disc = DiscriminatorModel(seed=12, use_mfm=True)
    assert 0.0 < disc.classify(tone_clip(440)) < 1.0
