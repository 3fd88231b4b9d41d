"""Audio value types, robustness attacks, and the differentiable log-mel front end.

All operations are pure functions of their inputs plus an explicit seed; they
never mutate their arguments. Samples are float64 in memory; WAV files store
32-bit IEEE float little-endian mono PCM.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError

EPS_FLOOR = 1e-6          # magnitude floor inside log features
SINC_HALF_TAPS = 48
KAISER_BETA = 9.0
GRAIN_SECONDS = 0.032     # granular time-stretch grain, 50% overlap


@dataclass(frozen=True)
class AudioClip:
    """A finite mono sample sequence at a fixed rate. Nominal range [-4, 4]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or len(samples) < 1:
            raise InvalidInputError("clip must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("clip contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise InvalidInputError(f"bad sample rate {self.sample_rate_hz}")
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureMap:
    """frames x bins matrix of log magnitudes, floored at log(EPS_FLOOR)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise InvalidInputError("feature map must be 2-D (frames, bins)")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("feature map contains non-finite values")
        if np.min(values) < np.log(EPS_FLOOR) - 1e-9:
            raise InvalidInputError("feature values below the magnitude floor")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


ATTACK_KINDS = (
    "resample", "speed", "additive_noise", "reverb", "pitch_shift",
    "volume", "codec_roundtrip", "codec_then_restore", "identity",
)


@dataclass(frozen=True)
class AttackSpec:
    """One robustness edit: a kind tag plus kind-specific parameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidInputError(f"unknown attack kind {self.kind!r}")
        p = self.params
        if self.kind == "resample":
            if int(p.get("target_rate_hz", 0)) <= 0:
                raise InvalidInputError("resample needs target_rate_hz > 0")
        elif self.kind == "speed":
            f = float(p.get("factor", 0))
            if not 0.0 < f <= 4.0:
                raise InvalidInputError(f"speed factor {f} outside (0, 4]")
        elif self.kind == "additive_noise":
            if float(p.get("level", -1)) < 0:
                raise InvalidInputError("noise level must be >= 0")
        elif self.kind == "pitch_shift":
            s = float(p.get("semitones", 99))
            if not -12.0 <= s <= 12.0:
                raise InvalidInputError(f"semitones {s} outside [-12, 12]")
        elif self.kind == "volume":
            g = float(p.get("gain", 0))
            if not 0.0 < g <= 10.0:
                raise InvalidInputError(f"gain {g} outside (0, 10]")
        elif self.kind in ("codec_roundtrip", "codec_then_restore"):
            bits = int(p.get("bits", 0))
            if not 4 <= bits <= 16:
                raise InvalidInputError(f"bits {bits} outside [4, 16]")
            if float(p.get("cutoff_hz", 0)) <= 0:
                raise InvalidInputError("cutoff_hz must be positive")
        elif self.kind == "reverb":
            if float(p.get("decay_s", 0.3)) <= 0:
                raise InvalidInputError("decay_s must be positive")


# ---------------------------------------------------------------------------
# WAV I/O: RIFF/WAVE, format 3 (IEEE float), mono, 32-bit little-endian

def write_wav(path, clip: AudioClip) -> None:
    data = np.asarray(clip.samples, dtype="<f4").tobytes()
    n = len(clip.samples)
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 4 + 24 + 12 + 8 + len(data)))
        f.write(b"WAVE")
        f.write(b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, clip.sample_rate_hz,
                                      clip.sample_rate_hz * 4, 4, 32))
        f.write(b"fact" + struct.pack("<II", 4, n))
        f.write(b"data" + struct.pack("<I", len(data)))
        f.write(data)


def read_wav(path) -> AudioClip:
    with open(path, "rb") as f:
        riff, _, wave = struct.unpack("<4sI4s", f.read(12))
        if riff != b"RIFF" or wave != b"WAVE":
            raise InvalidInputError(f"{path}: not a RIFF/WAVE file")
        rate = None
        data = None
        while True:
            head = f.read(8)
            if len(head) < 8:
                break
            tag, size = struct.unpack("<4sI", head)
            body = f.read(size)
            if size % 2:
                f.read(1)
            if tag == b"fmt ":
                fmt, ch, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if fmt != 3 or ch != 1 or bits != 32:
                    raise InvalidInputError(
                        f"{path}: need mono 32-bit float WAV, got fmt={fmt} ch={ch} bits={bits}")
            elif tag == b"data":
                data = body
    if rate is None or data is None:
        raise InvalidInputError(f"{path}: missing fmt or data chunk")
    samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    return AudioClip(samples, rate)


# ---------------------------------------------------------------------------
# band-limited interpolation core

def _kaiser(u: np.ndarray, beta: float) -> np.ndarray:
    inside = np.abs(u) <= 1.0
    w = np.zeros_like(u)
    w[inside] = np.i0(beta * np.sqrt(1.0 - u[inside] ** 2)) / np.i0(beta)
    return w


def _pad_smooth(x: np.ndarray, half: int) -> np.ndarray:
    # odd reflection keeps the extension C1-continuous at the clip boundary,
    # which keeps boundary kinks out of the filter transition band
    if len(x) >= 2:
        return np.pad(x, half, mode="reflect", reflect_type="odd")
    return np.pad(x, half, mode="edge")


def _sinc_interp(x: np.ndarray, out_len: int, step: float, cutoff: float) -> np.ndarray:
    """Evaluate a windowed-sinc reconstruction of x at positions n*step.

    `cutoff` is the low-pass cutoff in units of the input Nyquist frequency."""
    half = SINC_HALF_TAPS
    xp = _pad_smooth(x, half)
    pos = np.arange(out_len) * step
    base = np.floor(pos).astype(np.int64)
    offs = np.arange(-half + 1, half + 1)
    idx = np.clip(base[:, None] + offs[None, :] + half, 0, len(xp) - 1)
    u = (pos - base)[:, None] - offs[None, :]
    w = cutoff * np.sinc(cutoff * u) * _kaiser(u / half, KAISER_BETA)
    return np.einsum("ij,ij->i", xp[idx], w)


def _round_len(value: float) -> int:
    return int(np.floor(value + 0.5))


def resample(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    """Band-limited rate conversion; length becomes round(len * target/source)."""
    target_rate_hz = int(target_rate_hz)
    if target_rate_hz <= 0:
        raise InvalidInputError(f"bad target rate {target_rate_hz}")
    if len(clip) < 1:
        raise InvalidInputError("empty clip")
    if target_rate_hz == clip.sample_rate_hz:
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)
    ratio = target_rate_hz / clip.sample_rate_hz
    out_len = max(1, _round_len(len(clip) * ratio))
    cutoff = 1.0 if ratio >= 1.0 else ratio * 0.945
    out = _sinc_interp(clip.samples, out_len, 1.0 / ratio, cutoff)
    return AudioClip(out, target_rate_hz)


def time_stretch(clip: AudioClip, factor: float) -> AudioClip:
    """Playback-speed change: length round(len/factor), rate label unchanged,
    so pitch shifts together with speed."""
    factor = float(factor)
    if not 0.0 < factor <= 4.0:
        raise InvalidInputError(f"speed factor {factor} outside (0, 4]")
    if factor == 1.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)
    out_len = max(1, _round_len(len(clip) / factor))
    cutoff = 1.0 if factor <= 1.0 else (1.0 / factor) * 0.945
    out = _sinc_interp(clip.samples, out_len, factor, cutoff)
    return AudioClip(out, clip.sample_rate_hz)


def pitch_shift(clip: AudioClip, semitones: float) -> AudioClip:
    """Shift pitch by 2^(semitones/12) while keeping duration.

    Speed-change resampling followed by a granular overlap-add stretch back to
    the original length (Hann grains, 50% overlap)."""
    semitones = float(semitones)
    if not -12.0 <= semitones <= 12.0:
        raise InvalidInputError(f"semitones {semitones} outside [-12, 12]")
    if semitones == 0.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)
    grain = _round_len(GRAIN_SECONDS * clip.sample_rate_hz)
    grain += grain % 2
    factor = 2.0 ** (semitones / 12.0)
    n = len(clip)
    n_fast = max(1, _round_len(n / factor))
    if n < grain or n_fast < grain:
        raise InvalidInputError(f"clip too short for one {grain}-sample grain")
    fast = time_stretch(clip, factor).samples
    hop = grain // 2
    window = np.hanning(grain)
    out = np.zeros(n + grain)
    wsum = np.zeros(n + grain)
    beta = len(fast) / n
    delta = hop // 2
    g = 0
    while g * hop < n:
        p = g * hop
        s0 = min(max(int(np.floor(p * beta + 0.5)), 0), len(fast) - grain)
        if g == 0:
            s = s0
        else:
            # align the grain to the accumulated overlap so periodic content
            # stays constructive (plain OLA can cancel a tone outright)
            lo = max(0, s0 - delta)
            hi = min(len(fast) - grain, s0 + delta)
            tail = out[p:p + hop] / np.maximum(wsum[p:p + hop], 1e-8)
            cands = np.arange(lo, hi + 1)
            segs = fast[cands[:, None] + np.arange(hop)[None, :]]
            num = segs @ tail
            den = np.sqrt((segs * segs).sum(axis=1) * float(tail @ tail)) + 1e-12
            s = int(cands[np.argmax(num / den)])
        out[p:p + grain] += window * fast[s:s + grain]
        wsum[p:p + grain] += window
        g += 1
    out = out[:n] / np.maximum(wsum[:n], 1e-8)
    return AudioClip(out, clip.sample_rate_hz)


def add_noise(clip: AudioClip, noise: AudioClip, level: float) -> AudioClip:
    """out[i] = clip[i] + level * noise[i mod len(noise)]."""
    if noise.sample_rate_hz != clip.sample_rate_hz:
        raise InvalidInputError(
            f"noise rate {noise.sample_rate_hz} != clip rate {clip.sample_rate_hz}")
    if level < 0:
        raise InvalidInputError("noise level must be >= 0")
    reps = int(np.ceil(len(clip) / len(noise)))
    tiled = np.tile(noise.samples, reps)[: len(clip)]
    return AudioClip(clip.samples + level * tiled, clip.sample_rate_hz)


def apply_reverb(clip: AudioClip, ir: AudioClip) -> AudioClip:
    """Truncated convolution with an impulse response, peak-renormalized to the
    input's peak."""
    if ir.sample_rate_hz != clip.sample_rate_hz:
        raise InvalidInputError(
            f"IR rate {ir.sample_rate_hz} != clip rate {clip.sample_rate_hz}")
    out = np.convolve(clip.samples, ir.samples)[: len(clip)]
    peak_in = np.max(np.abs(clip.samples))
    peak_out = np.max(np.abs(out))
    if peak_out > 0:
        out = out * (peak_in / peak_out)
    return AudioClip(out, clip.sample_rate_hz)


def scale_volume(clip: AudioClip, gain: float) -> AudioClip:
    gain = float(gain)
    if not 0.0 < gain <= 10.0:
        raise InvalidInputError(f"gain {gain} outside (0, 10]")
    return AudioClip(gain * clip.samples, clip.sample_rate_hz)


def _lowpass(x: np.ndarray, cutoff_norm: float, half: int = 128) -> np.ndarray:
    u = np.arange(-half, half + 1, dtype=np.float64)
    h = cutoff_norm * np.sinc(cutoff_norm * u) * _kaiser(u / half, KAISER_BETA)
    xp = _pad_smooth(x, half)
    return np.convolve(xp, h, mode="valid")


def codec_roundtrip(clip: AudioClip, bits: int, cutoff_hz: float) -> AudioClip:
    """Lossy-codec proxy: low-pass FIR at cutoff_hz, then uniform quantization
    to steps of 2/2^bits over [-1, 1] with clipping. Deterministic.

    Repeated application moves no sample by more than one quantization step,
    except within a kernel length of the clip boundary at very fine steps
    (bits > 14), where the FIR's boundary extension dominates (about 1e-4)."""
    bits = int(bits)
    if not 4 <= bits <= 16:
        raise InvalidInputError(f"bits {bits} outside [4, 16]")
    if not 0.0 < cutoff_hz < clip.sample_rate_hz / 2:
        raise InvalidInputError(
            f"cutoff {cutoff_hz} outside (0, {clip.sample_rate_hz / 2})")
    x = _lowpass(clip.samples, cutoff_hz / (clip.sample_rate_hz / 2))
    step = 2.0 ** (1 - bits)
    q = np.clip(x, -1.0, 1.0)
    q = step * np.round(q / step)
    return AudioClip(q, clip.sample_rate_hz)


# ---------------------------------------------------------------------------
# synthetic noise bank and impulse responses (external-dataset stand-ins)

NOISE_KINDS = ("white", "pink", "babble")


def make_noise(kind: str, n: int, rate_hz: int, seed: int) -> AudioClip:
    """Deterministic unit-peak noise: white, pink (1/f shaped), or babble
    (summed detuned harmonic voices)."""
    rng = np.random.default_rng(seed)
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        x = np.fft.irfft(spec / np.sqrt(f), n=n)
    elif kind == "babble":
        t = np.arange(n) / rate_hz
        x = np.zeros(n)
        for _ in range(6):
            f0 = rng.uniform(100.0, 250.0)
            env = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t
                                     + rng.uniform(0, 2 * np.pi))
            for h in range(1, 5):
                x += env * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
    else:
        raise InvalidInputError(f"unknown noise kind {kind!r}")
    peak = np.max(np.abs(x))
    return AudioClip(x / peak if peak > 0 else x, rate_hz)


def make_reverb_ir(rate_hz: int, seed: int, decay_s: float = 0.3,
                   decay_db: float = -60.0) -> AudioClip:
    """Exponential-decay noise burst after a unit direct path."""
    n = max(2, _round_len(decay_s * rate_hz))
    rng = np.random.default_rng(seed)
    t = np.arange(1, n) / rate_hz
    env = 10.0 ** (decay_db / 20.0 * t / decay_s)
    ir = np.concatenate([[1.0], 0.5 * rng.standard_normal(n - 1) * env])
    return AudioClip(ir, rate_hz)


# ---------------------------------------------------------------------------
# log-mel features (forward and backward)

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def mel_filterbank(rate_hz: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular filters on the mel scale over [0, Nyquist]; peak response 1."""
    pts = mel_to_hz(np.linspace(0.0, float(hz_to_mel(rate_hz / 2)), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * rate_hz / n_fft
    m = np.zeros((n_mels, len(freqs)))
    for j in range(n_mels):
        lo, mid, hi = pts[j], pts[j + 1], pts[j + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        m[j] = np.clip(np.minimum(up, down), 0.0, None)
    return m


def mel_band_centers_hz(rate_hz: int, n_mels: int) -> np.ndarray:
    pts = mel_to_hz(np.linspace(0.0, float(hz_to_mel(rate_hz / 2)), n_mels + 2))
    return pts[1:-1]


def _check_logmel_args(n_samples: int, n_fft: int, hop: int, n_mels: int) -> None:
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise InvalidInputError(f"n_fft {n_fft} is not a power of two")
    if not 0 < hop <= n_fft:
        raise InvalidInputError(f"hop {hop} outside (0, {n_fft}]")
    if not 1 <= n_mels <= n_fft // 2:
        raise InvalidInputError(f"n_mels {n_mels} outside [1, {n_fft // 2}]")
    if n_samples < n_fft:
        raise InvalidInputError(f"clip of {n_samples} samples shorter than n_fft {n_fft}")


def logmel_forward(samples: np.ndarray, rate_hz: int, n_fft: int, hop: int,
                   n_mels: int) -> tuple[np.ndarray, dict]:
    """Hann-windowed DFT magnitudes through a triangular mel bank, then
    log(x + EPS_FLOOR). Returns (values, cache-for-backward)."""
    x = np.asarray(samples, dtype=np.float64)
    _check_logmel_args(len(x), n_fft, hop, n_mels)
    n_frames = (len(x) - n_fft) // hop + 1
    idx = np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]
    window = np.hanning(n_fft)
    y = x[idx] * window
    spec = np.fft.rfft(y, axis=1)
    mag = np.abs(spec)
    bank = mel_filterbank(rate_hz, n_fft, n_mels)
    p = mag @ bank.T + EPS_FLOOR
    values = np.log(p)
    cache = {"n_samples": len(x), "idx": idx, "window": window, "spec": spec,
             "mag": mag, "p": p, "bank": bank, "n_fft": n_fft}
    return values, cache


def logmel_backward(cache: dict, dvalues: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the input samples, given dloss/dvalues."""
    dp = np.asarray(dvalues, dtype=np.float64) / cache["p"]
    dmag = dp @ cache["bank"]
    mag = cache["mag"]
    c = np.where(mag > 0, dmag / np.where(mag > 0, mag, 1.0), 0.0)
    z = (c * cache["spec"]).astype(np.complex128)
    z[:, 1:-1] *= 0.5
    dy = cache["n_fft"] * np.fft.irfft(z, n=cache["n_fft"], axis=1)
    dy *= cache["window"]
    dx = np.zeros(cache["n_samples"])
    np.add.at(dx, cache["idx"], dy)
    return dx


def logmel(clip: AudioClip, n_fft: int, hop: int, n_mels: int) -> FeatureMap:
    values, _ = logmel_forward(clip.samples, clip.sample_rate_hz, n_fft, hop, n_mels)
    return FeatureMap(values)


# ---------------------------------------------------------------------------
# attack dispatch

def apply_attack(clip: AudioClip, spec: AttackSpec, rng_seed: int) -> AudioClip:
    """Apply one robustness edit; deterministic given rng_seed (noise and IR
    draws derive from it)."""
    p = spec.params
    if spec.kind == "identity":
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)
    if spec.kind == "resample":
        return resample(clip, int(p["target_rate_hz"]))
    if spec.kind == "speed":
        return time_stretch(clip, float(p["factor"]))
    if spec.kind == "additive_noise":
        rng = np.random.default_rng(rng_seed)
        kind = p.get("noise_kind", "mix")
        if kind == "mix":
            kind = NOISE_KINDS[rng.integers(len(NOISE_KINDS))]
        noise = make_noise(kind, len(clip), clip.sample_rate_hz,
                           int(rng.integers(2 ** 31)))
        return add_noise(clip, noise, float(p["level"]))
    if spec.kind == "reverb":
        ir = make_reverb_ir(clip.sample_rate_hz, rng_seed,
                            decay_s=float(p.get("decay_s", 0.3)))
        return apply_reverb(clip, ir)
    if spec.kind == "pitch_shift":
        return pitch_shift(clip, float(p["semitones"]))
    if spec.kind == "volume":
        return scale_volume(clip, float(p["gain"]))
    if spec.kind == "codec_roundtrip":
        return codec_roundtrip(clip, int(p["bits"]), float(p["cutoff_hz"]))
    if spec.kind == "codec_then_restore":
        coded = codec_roundtrip(clip, int(p["bits"]), float(p["cutoff_hz"]))
        return AudioClip(coded.samples.copy(), coded.sample_rate_hz)
    raise InvalidInputError(f"unknown attack kind {spec.kind!r}")
