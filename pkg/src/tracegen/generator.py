"""Differentiable toy TTS generator: a small control network drives a harmonic
oscillator bank. Gradients flow from the output waveform back into every
trainable parameter, which is what lets a frozen classifier steer finetuning.

The generator is conditioned on a fixed-analysis speaker embedding and a token
script; it predicts per-frame pitch offsets and harmonic amplitudes, which are
linearly upsampled and rendered by sin-bank synthesis with a soft peak limiter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractViolation, InvalidInputError, TrainingError
from .signal import AudioClip, logmel_forward, logmel_backward
from .toydata import (ContentScript, World, frame_f0_offsets, linear_upsample,
                      linear_upsample_adjoint, mix_seed)

F0_REF_HZ = 160.0
OFFSET_RANGE_SEMITONES = 24.0
AMP_BIAS = -2.25          # softplus(-2.25) ~ 0.10, a quiet start
NOISE_GAIN_BIAS = -5.3    # softplus(-5.3) ~ 0.005
HARMONIC_LIMIT = 0.45     # harmonics above this fraction of the rate are masked
TTS_RESOLUTIONS = (256, 512)
TTS_N_MELS = 24           # coarser than the classifier front end: a smoother
                          # pull-in basin for pitch during spectral regression
SYNTH_NOISE_SEED = 777    # one frozen dither sequence shared by all toy generators

_noise_buffer = np.random.default_rng(SYNTH_NOISE_SEED).standard_normal(0)


def _synth_noise(n: int) -> np.ndarray:
    """Prefix-stable frozen noise: the first k samples never change with n."""
    global _noise_buffer
    if len(_noise_buffer) < n:
        _noise_buffer = np.random.default_rng(SYNTH_NOISE_SEED).standard_normal(
            max(n, 2 * len(_noise_buffer), 1 << 14))
    return _noise_buffer[:n]


def default_arch(n_mels: int = 40, vocab: int = 16, harmonics: int = 8,
                 hop: int = 64, sample_rate_hz: int = 8000,
                 hidden: int = 64, emb_dim: int = 8,
                 temporal_conv: bool = False) -> dict:
    return {"n_mels": n_mels, "vocab": vocab, "harmonics": harmonics,
            "hop": hop, "sample_rate_hz": sample_rate_hz, "hidden": hidden,
            "emb_dim": emb_dim, "temporal_conv": temporal_conv}


def foreign_arch(base: dict, variant: int) -> dict:
    """Architecture diversity for out-of-domain stand-in generators."""
    arch = dict(base)
    if variant == 1:
        arch["hidden"] = 48
    elif variant == 2:
        arch["hidden"] = 80
    elif variant == 3:
        arch["temporal_conv"] = True
    else:
        raise InvalidInputError(f"unknown foreign variant {variant}")
    return arch


class GeneratorModel:
    """Control network + parameter-free differentiable synthesizer."""

    def __init__(self, arch: dict, seed: int):
        self.arch = dict(arch)
        rng = np.random.default_rng(seed)
        n_in = arch["n_mels"] + arch["emb_dim"] + 2
        n_out = 1 + arch["harmonics"]
        self.tok_emb = nn.Param("tok_emb", rng.normal(0.0, 0.5,
                                size=(arch["vocab"], arch["emb_dim"])))
        self.dense_in = nn.Dense(n_in, arch["hidden"], rng, name="ctrl.in")
        self.relu_in = nn.ReLU()
        if arch["temporal_conv"]:
            self.conv = nn.Conv1d(arch["hidden"], arch["hidden"], 3, 1, 1, rng,
                                  name="ctrl.conv")
            self.relu_conv = nn.ReLU()
        else:
            self.conv = None
        self.dense_out = nn.Dense(arch["hidden"], n_out, rng, name="ctrl.out")
        bias = self.dense_out.b.v64
        bias[1:] = AMP_BIAS
        self.dense_out.b.assign(bias)
        self.noise_gain = nn.Param("noise_gain", np.array([NOISE_GAIN_BIAS]))

    def params(self) -> list[nn.Param]:
        out = [self.tok_emb] + self.dense_in.params()
        if self.conv is not None:
            out += self.conv.params()
        return out + self.dense_out.params() + [self.noise_gain]

    def state(self) -> list[nn.Param]:
        return self.params()

    def checksum(self) -> str:
        return nn.state_checksum(self.state())

    def save(self, path, tag: str = "generator") -> str:
        return nn.save_checkpoint(path, self.state(), {"tag": tag, "arch": self.arch})

    @classmethod
    def load(cls, path) -> "GeneratorModel":
        arrays, meta, _ = nn.load_checkpoint(path)
        model = cls(meta["arch"], seed=0)
        nn.restore_state(model.state(), arrays)
        return model

    # -- forward -------------------------------------------------------------

    def _frame_tokens(self, script: ContentScript) -> np.ndarray:
        return np.concatenate([
            np.full(d, t, dtype=np.int64)
            for t, d in zip(script.tokens, script.duration_frames)])

    def _frame_features(self, speaker_emb: np.ndarray, script: ContentScript):
        emb = np.asarray(speaker_emb, dtype=np.float64)
        if emb.shape != (self.arch["n_mels"],):
            raise InvalidInputError(
                f"speaker embedding must have {self.arch['n_mels']} dims, got {emb.shape}")
        if max(script.tokens) >= self.arch["vocab"]:
            raise InvalidInputError("script token outside the vocabulary")
        tokens = self._frame_tokens(script)
        t_total = len(tokens)
        pos_in_token = np.concatenate([
            (np.arange(d) + 0.5) / d for d in script.duration_frames])
        global_pos = (np.arange(t_total) + 0.5) / t_total
        x = np.concatenate([
            np.repeat(emb[None, :], t_total, axis=0),
            self.tok_emb.v64[tokens],
            pos_in_token[:, None],
            global_pos[:, None],
        ], axis=1)
        return x, tokens

    def _controls(self, x: np.ndarray) -> np.ndarray:
        h = self.relu_in.forward(self.dense_in.forward(x))
        if self.conv is not None:
            h = self.conv.forward(h.T[None, :, :])
            h = self.relu_conv.forward(h)[0].T
        return self.dense_out.forward(h)

    def _controls_backward(self, draw: np.ndarray) -> np.ndarray:
        dh = self.dense_out.backward(draw)
        if self.conv is not None:
            dh = self.relu_conv.backward(dh.T[None, :, :])
            dh = self.conv.backward(dh)[0].T
        return self.dense_in.backward(self.relu_in.backward(dh))

    def synth_with_cache(self, speaker_emb: np.ndarray, script: ContentScript):
        """Full forward; returns (float64 samples, cache for backward)."""
        x, tokens = self._frame_features(speaker_emb, script)
        raw = self._controls(x)
        hop = self.arch["hop"]
        rate = self.arch["sample_rate_hz"]
        n_harm = self.arch["harmonics"]
        off_raw = raw[:, 0]
        f0_off = OFFSET_RANGE_SEMITONES * np.tanh(off_raw / OFFSET_RANGE_SEMITONES)
        amps = nn.softplus(raw[:, 1:])
        up_off = linear_upsample(f0_off, hop)
        up_amps = linear_upsample(amps, hop)
        f0 = F0_REF_HZ * 2.0 ** (up_off / 12.0)
        phase = 2.0 * np.pi * np.cumsum(f0 / rate)
        h_idx = np.arange(1, n_harm + 1, dtype=np.float64)
        mask = (h_idx[None, :] * f0[:, None]) < HARMONIC_LIMIT * rate
        sin_bank = np.sin(phase[:, None] * h_idx[None, :])
        dither = _synth_noise(len(f0))
        y0 = (np.sum(up_amps * mask * sin_bank, axis=1)
              + float(nn.softplus(self.noise_gain.v64)[0]) * dither)
        y = 4.0 * np.tanh(y0 / 4.0)
        cache = {"tokens": tokens, "frames": raw.shape[0], "raw": raw,
                 "off_raw": off_raw, "amps": amps, "f0": f0, "phase": phase,
                 "mask": mask, "sin_bank": sin_bank, "up_amps": up_amps,
                 "y0": y0, "h_idx": h_idx, "dither": dither}
        return y, cache

    def synthesize(self, speaker_emb: np.ndarray, script: ContentScript) -> AudioClip:
        """Deterministic waveform of exactly total_frames * hop samples; the
        soft limiter bounds the peak at 4."""
        y, _ = self.synth_with_cache(speaker_emb, script)
        return AudioClip(y, self.arch["sample_rate_hz"])

    def backward_from_waveform(self, cache: dict, dy: np.ndarray,
                               accum: dict[str, np.ndarray]) -> None:
        """Backprop dloss/dwaveform into parameter gradients, added to accum."""
        hop = self.arch["hop"]
        rate = self.arch["sample_rate_hz"]
        th = np.tanh(cache["y0"] / 4.0)
        dy0 = np.asarray(dy, dtype=np.float64) * (1.0 - th * th)
        masked = cache["mask"] * cache["sin_bank"]
        dup_amps = dy0[:, None] * masked
        dphase = np.sum(dy0[:, None] * cache["up_amps"] * cache["mask"]
                        * cache["h_idx"][None, :]
                        * np.cos(cache["phase"][:, None] * cache["h_idx"][None, :]),
                        axis=1)
        df0 = (2.0 * np.pi / rate) * np.cumsum(dphase[::-1])[::-1]
        dup_off = df0 * cache["f0"] * (np.log(2.0) / 12.0)
        damps = linear_upsample_adjoint(dup_amps, cache["frames"], hop)
        doff = linear_upsample_adjoint(dup_off, cache["frames"], hop)
        draw = np.empty_like(cache["raw"])
        sech2 = 1.0 - np.tanh(cache["off_raw"] / OFFSET_RANGE_SEMITONES) ** 2
        draw[:, 0] = doff * sech2
        draw[:, 1:] = damps * nn.sigmoid(cache["raw"][:, 1:])
        dx = self._controls_backward(draw)
        for p in self.params():
            if p.name in ("tok_emb", "noise_gain"):
                continue
            accum[p.name] = accum.get(p.name, 0.0) + p.grad
        demb = np.zeros(self.tok_emb.value.shape, dtype=np.float64)
        lo = self.arch["n_mels"]
        np.add.at(demb, cache["tokens"], dx[:, lo:lo + self.arch["emb_dim"]])
        accum["tok_emb"] = accum.get("tok_emb", 0.0) + demb
        dgain = (float(np.sum(dy0 * cache["dither"]))
                 * float(nn.sigmoid(self.noise_gain.v64)[0]))
        accum["noise_gain"] = accum.get("noise_gain", 0.0) + np.array([dgain])


# ---------------------------------------------------------------------------
# losses and training

def tts_loss_arrays(gen_samples: np.ndarray, gt_samples: np.ndarray,
                    rate: int, n_mels: int = TTS_N_MELS):
    """Quality anchor: mean squared log-mel difference averaged over two
    analysis resolutions. Returns (loss, dloss/dgen_samples)."""
    gen_samples = np.asarray(gen_samples, dtype=np.float64)
    gt_samples = np.asarray(gt_samples, dtype=np.float64)
    if gen_samples.shape != gt_samples.shape:
        raise InvalidInputError(
            f"length mismatch {gen_samples.shape} vs {gt_samples.shape}")
    total = 0.0
    grad = np.zeros_like(gen_samples)
    for n_fft in TTS_RESOLUTIONS:
        hop = n_fft // 4
        va, cache_a = logmel_forward(gen_samples, rate, n_fft, hop, n_mels)
        vb, _ = logmel_forward(gt_samples, rate, n_fft, hop, n_mels)
        loss, dva = nn.mse_loss(va, vb)
        total += loss / len(TTS_RESOLUTIONS)
        grad += logmel_backward(cache_a, dva) / len(TTS_RESOLUTIONS)
    return total, grad


def tts_loss(gen_out: AudioClip, ground_truth: AudioClip):
    if gen_out.sample_rate_hz != ground_truth.sample_rate_hz:
        raise InvalidInputError("rate mismatch between generated and reference audio")
    return tts_loss_arrays(gen_out.samples, ground_truth.samples,
                           gen_out.sample_rate_hz)


@dataclass(frozen=True)
class GeneratorLossReport:
    l_tts: float
    l_bce: float
    combined: float
    lambda_tts: float
    lambda_bce: float

    def __post_init__(self):
        expect = self.lambda_tts * self.l_tts + self.lambda_bce * self.l_bce
        if abs(self.combined - expect) > 1e-9:
            raise ContractViolation("combined loss does not match its terms")


def _apply_mean_grads(model: GeneratorModel, accum: dict, count: int,
                      optimizer: nn.Adam) -> None:
    for p in model.params():
        p.grad = np.asarray(accum[p.name], dtype=np.float64) / count
    optimizer.step()


def pretrain(model: GeneratorModel, world: World, epochs: int,
             optimizer: nn.Adam, batch_size: int = 8, seed: int = 0,
             split: str = "train") -> list[float]:
    """Fit the generator to the nature renders by spectral regression.

    Returns per-epoch mean losses. Raises on divergence, and on the sanity
    contract that the final epoch should at least halve the first epoch's
    loss (checked for real runs, epochs >= 10; a couple of smoke epochs
    cannot be expected to halve anything)."""
    pairs = world.pairs(split)
    emb_cache = {p: world.speaker_embedding(split, *p) for p in pairs}
    curve: list[float] = []
    for epoch in range(epochs):
        rng = np.random.default_rng(mix_seed(seed, "pretrain", epoch))
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            accum: dict[str, np.ndarray] = {}
            chunk = order[start:start + batch_size]
            for k in chunk:
                spk, scr = pairs[k]
                samples, cache = model.synth_with_cache(
                    emb_cache[(spk, scr)], world.scripts[scr])
                loss, dsamples = tts_loss_arrays(
                    samples, world.ground_truth(spk, scr).samples,
                    world.params.sample_rate_hz)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite generator loss at epoch {epoch}")
                model.backward_from_waveform(cache, dsamples, accum)
                epoch_losses.append(loss)
            _apply_mean_grads(model, accum, len(chunk), optimizer)
        curve.append(float(np.mean(epoch_losses)))
    if epochs >= 10 and curve[-1] >= 0.5 * curve[0]:
        raise TrainingError(
            f"pretraining stalled: epoch-1 loss {curve[0]:.4f}, final {curve[-1]:.4f}")
    return curve


def finetune_step(model: GeneratorModel, disc, batch: list, lambda_tts: float,
                  lambda_bce: float, mode: str, optimizer: nn.Adam) -> GeneratorLossReport:
    """One combined-loss update on a batch of (speaker_emb, script, gt_clip).

    mode "aligned": the traceability term pushes synthesized audio toward
    HIGHER detectability by the paired classifier (its gradient and the
    classifier's own objective point the same way). mode "adversarial": the
    exact negation of that term (the classic fool-the-classifier direction),
    kept as a reference behavior. The classifier must be frozen; only the
    generator is updated."""
    if mode not in ("aligned", "adversarial"):
        raise InvalidInputError(f"unknown finetune mode {mode!r}")
    if lambda_bce != 0.0 and not getattr(disc, "frozen", False):
        raise ContractViolation("discriminator must be frozen during finetuning")
    sign = 1.0 if mode == "aligned" else -1.0
    rate = model.arch["sample_rate_hz"]
    accum: dict[str, np.ndarray] = {}
    tts_terms, bce_terms = [], []
    for speaker_emb, script, gt_clip in batch:
        samples, cache = model.synth_with_cache(speaker_emb, script)
        l_tts, d_tts = tts_loss_arrays(samples, gt_clip.samples, rate)
        dsamples = lambda_tts * d_tts
        if lambda_bce != 0.0:
            score, grad_fn = disc.classify_with_grad(samples, rate)
            bce, dscore = nn.bce_loss(score, 1)
            bce_terms.append(sign * bce)
            dsamples = dsamples + lambda_bce * sign * grad_fn(dscore)
        else:
            bce_terms.append(0.0)
        tts_terms.append(l_tts)
        model.backward_from_waveform(cache, dsamples, accum)
    _apply_mean_grads(model, accum, len(batch), optimizer)
    l_tts = float(np.mean(tts_terms))
    l_bce = float(np.mean(bce_terms))
    return GeneratorLossReport(
        l_tts=l_tts, l_bce=l_bce,
        combined=lambda_tts * l_tts + lambda_bce * l_bce,
        lambda_tts=lambda_tts, lambda_bce=lambda_bce)


def make_pretrained(world: World, seed: int, epochs: int, lr: float = 1e-3,
                    variant: int = 0, batch_size: int = 8) -> tuple[GeneratorModel, list[float]]:
    """Construct and pretrain a generator (variant 0 = the paired generator,
    1..3 = foreign architecture variants trained with their own seeds)."""
    arch = default_arch(
        n_mels=world.params.n_mels, vocab=world.params.vocab,
        harmonics=world.params.harmonics, hop=world.params.hop,
        sample_rate_hz=world.params.sample_rate_hz)
    if variant:
        arch = foreign_arch(arch, variant)
    init_seed = mix_seed(seed, "gen-init", variant)
    model = GeneratorModel(arch, seed=init_seed)
    optimizer = nn.Adam(model.params(), lr=lr, l2=1e-4, clip_norm=1.0)
    curve = pretrain(model, world, epochs, optimizer, batch_size=batch_size,
                     seed=mix_seed(seed, "gen-data", variant))
    return model, curve
