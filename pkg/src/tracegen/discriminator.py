"""Paired traceability classifier: frozen log-mel front end, a 9-layer
convolutional stack with max pooling and batch norm, then global average
pooling, one dense unit, and a sigmoid score.

Score convention: the output approximates the probability that a clip was
produced by the paired generator (label 1). Input gradients are available so
generator finetuning can backpropagate through a frozen classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InvalidInputError
from .signal import AudioClip, logmel_backward, logmel_forward, resample
from .toydata import DatasetManifest, mix_seed, parallel_map


MIN_FRAMES = 32  # smallest time extent the conv stack can reduce to one column


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 256
    hop: int = 64
    n_mels: int = 40
    detection_rate_hz: int = 8000


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int
    lr: float
    l2: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 16
    crop_frames: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        if self.crop_frames < MIN_FRAMES:
            raise InvalidInputError(
                f"crop of {self.crop_frames} frames is below the receptive field ({MIN_FRAMES})")


def recipe_from_preset(preset: str, epochs: int, seed: int = 0, **overrides) -> TrainRecipe:
    base = nn.PRESETS[preset]
    kw = dict(lr=base["lr"], l2=base["l2"], clip_norm=base["clip_norm"])
    kw.update(overrides)
    return TrainRecipe(epochs=epochs, seed=seed, **kw)


def classifier_spec(n_mels: int, use_mfm: bool = False) -> list[tuple]:
    """The 9-layer stack, then global average pool, dense, sigmoid."""
    if use_mfm:
        body = [
            ("conv1d", n_mels, 32, 5, 1, 0), ("mfm",), ("maxpool", 2),
            ("conv1d", 16, 64, 3, 1, 0), ("mfm",), ("batchnorm", 32), ("maxpool", 2),
            ("conv1d", 32, 64, 3, 1, 0), ("mfm",), ("batchnorm", 32),
            ("conv1d", 32, 128, 3, 1, 0), ("mfm",), ("maxpool", 2),
        ]
    else:
        body = [
            ("conv1d", n_mels, 16, 5, 1, 0), ("maxpool", 2),
            ("conv1d", 16, 32, 3, 1, 0), ("batchnorm", 32), ("maxpool", 2),
            ("conv1d", 32, 32, 3, 1, 0), ("batchnorm", 32),
            ("conv1d", 32, 64, 3, 1, 0), ("maxpool", 2),
        ]
    return body + [("gap",), ("dense", 64, 1), ("sigmoid",)]


class DiscriminatorModel:
    def __init__(self, feature: FeatureConfig = FeatureConfig(), seed: int = 0,
                 use_mfm: bool = False, crop_frames: int = 96):
        self.feature = feature
        self.use_mfm = use_mfm
        self.crop_frames = crop_frames
        self.net = nn.build_network(classifier_spec(feature.n_mels, use_mfm),
                                    np.random.default_rng(seed))
        self.frozen = False

    def params(self) -> list[nn.Param]:
        return self.net.params()

    def state(self) -> list[nn.Param]:
        return self.net.state()

    def checksum(self) -> str:
        return nn.state_checksum(self.state())

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False

    def save(self, path) -> str:
        meta = {"tag": "discriminator", "use_mfm": self.use_mfm,
                "crop_frames": self.crop_frames,
                "feature": {"n_fft": self.feature.n_fft, "hop": self.feature.hop,
                            "n_mels": self.feature.n_mels,
                            "detection_rate_hz": self.feature.detection_rate_hz}}
        return nn.save_checkpoint(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "DiscriminatorModel":
        arrays, meta, _ = nn.load_checkpoint(path)
        model = cls(FeatureConfig(**meta["feature"]), seed=0,
                    use_mfm=meta["use_mfm"], crop_frames=meta["crop_frames"])
        nn.restore_state(model.state(), arrays)
        return model

    # -- feature plumbing -----------------------------------------------------

    def full_features(self, samples: np.ndarray, rate: int):
        """Log-mel features at the detection rate; resamples other rates first."""
        if rate != self.feature.detection_rate_hz:
            clip = resample(AudioClip(samples, rate), self.feature.detection_rate_hz)
            samples = clip.samples
        return logmel_forward(samples, self.feature.detection_rate_hz,
                              self.feature.n_fft, self.feature.hop,
                              self.feature.n_mels)

    def _fit_index(self, n_frames: int, start: int | None = None) -> np.ndarray:
        """Frame indices realizing a fixed-length view: a crop when long
        enough, last-frame replication when short."""
        crop = self.crop_frames
        if n_frames >= crop:
            if start is None:
                start = (n_frames - crop) // 2
            return np.arange(start, start + crop)
        return np.minimum(np.arange(crop), n_frames - 1)

    def _score_batch(self, feature_slabs: list[np.ndarray], training: bool) -> np.ndarray:
        x = np.stack([v.T for v in feature_slabs])  # (B, n_mels, crop)
        return self.net.forward(x, training=training)[:, 0]

    # -- scoring ----------------------------------------------------------------

    def classify(self, clip: AudioClip) -> float:
        """Evaluation-mode score in (0,1); deterministic per clip."""
        values, _ = self.full_features(clip.samples, clip.sample_rate_hz)
        fitted = values[self._fit_index(values.shape[0])]
        return float(self._score_batch([fitted], training=False)[0])

    def classify_many(self, clips: list[AudioClip]) -> np.ndarray:
        """Score many clips; bit-identical to per-clip classify (evaluation
        scoring has no cross-example coupling, and each clip takes the exact
        single-example code path). Feature extraction may fan out."""
        def featurize(clip):
            values, _ = self.full_features(clip.samples, clip.sample_rate_hz)
            return values[self._fit_index(values.shape[0])]
        slabs = parallel_map(featurize, clips)
        return np.array([float(self._score_batch([s], training=False)[0])
                         for s in slabs])

    def classify_with_grad(self, samples: np.ndarray, rate: int):
        """Score plus a closure mapping dloss/dscore to dloss/dsamples.

        The gradient path requires native-rate input (no resampling leg)."""
        if rate != self.feature.detection_rate_hz:
            raise InvalidInputError(
                "input gradients are only defined at the detection rate")
        values, fcache = self.full_features(samples, rate)
        idx = self._fit_index(values.shape[0])
        score = float(self._score_batch([values[idx]], training=False)[0])

        def grad_fn(dscore: float) -> np.ndarray:
            dx = self.net.backward(np.array([[dscore]]))  # (1, n_mels, crop)
            dfit = dx[0].T                                # (crop, n_mels)
            dvalues = np.zeros_like(values)
            np.add.at(dvalues, idx, dfit)
            return logmel_backward(fcache, dvalues)

        return score, grad_fn

    # -- training ----------------------------------------------------------------

    def train(self, manifest: DatasetManifest, recipe: TrainRecipe) -> list[float]:
        """Minimize mean BCE over shuffled mini-batches with a random
        fixed-length crop per example per epoch. Returns per-epoch mean loss."""
        labels = np.array([r.label for r in manifest.records])
        if len(set(labels.tolist())) < 2:
            raise ConfigError("manifest holds a single class; training is degenerate")
        examples = [manifest.load_example(r) for r in manifest.records]
        feats = parallel_map(
            lambda ex: self.full_features(ex.clip.samples, ex.clip.sample_rate_hz)[0],
            examples)
        optimizer = nn.Adam(self.params(), lr=recipe.lr, l2=recipe.l2,
                            clip_norm=recipe.clip_norm)
        curve: list[float] = []
        n = len(examples)
        for epoch in range(recipe.epochs):
            rng = np.random.default_rng(mix_seed(recipe.seed, "disc-epoch", epoch))
            order = rng.permutation(n)
            starts = {
                int(k): int(rng.integers(0, max(1, feats[k].shape[0] - self.crop_frames + 1)))
                for k in order}
            losses = []
            for lo in range(0, n, recipe.batch_size):
                chunk = order[lo:lo + recipe.batch_size]
                slabs = []
                for k in chunk:
                    f = feats[k]
                    start = starts[int(k)] if f.shape[0] >= self.crop_frames else None
                    slabs.append(f[self._fit_index(f.shape[0], start)])
                scores = self._score_batch(slabs, training=True)
                dscores = np.zeros((len(chunk), 1))
                for i, k in enumerate(chunk):
                    loss, dscore = nn.bce_loss(scores[i], int(labels[k]))
                    losses.append(loss)
                    dscores[i, 0] = dscore / len(chunk)
                self.net.backward(dscores)
                optimizer.step()
            curve.append(float(np.mean(losses)))
        return curve
