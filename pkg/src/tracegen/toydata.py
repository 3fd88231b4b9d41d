"""Synthetic speech world: speaker profiles, content scripts, a stochastic
"nature" renderer standing in for real recordings, the voice-cloning protocol,
and labeled dataset construction.

Speaker identity lives in the harmonic envelope (gains + spectral tilt) and the
base pitch; scripts carry token and duration sequences. Nature renders add
pitch jitter, random phases, and a low noise floor; generators do not, which is
the generic natural-vs-synthetic cue the baseline classifier can exploit.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError
from .signal import AudioClip, EPS_FLOOR, logmel_forward, read_wav, write_wav

SOURCES = ("ground_truth", "gen_original", "gen_finetuned",
           "gen_foreign_1", "gen_foreign_2", "gen_foreign_3")

LABELINGS: dict[str, dict[str, int]] = {
    "baseline": {"gen_original": 1, "ground_truth": 0},
    "joint": {"gen_finetuned": 1, "ground_truth": 0, "gen_original": 0},
    "joint_final": {"gen_finetuned": 1, "ground_truth": 0},
    "ood_eval": {"gen_finetuned": 1, "ground_truth": 0,
                 "gen_foreign_1": 0, "gen_foreign_2": 0, "gen_foreign_3": 0},
}


def mix_seed(*parts) -> int:
    """Stable 63-bit seed derived from string parts; platform independent."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def token_pitch_offset(token: int) -> int:
    """Deterministic token -> semitone offset mapping."""
    return (token % 12) - 6


@dataclass(frozen=True)
class SpeakerProfile:
    id: int
    harmonic_gains: np.ndarray
    tilt_db_per_octave: float
    base_f0_hz: float

    def __post_init__(self):
        gains = np.asarray(self.harmonic_gains, dtype=np.float64)
        object.__setattr__(self, "harmonic_gains", gains)
        if np.any(gains < 0) or abs(gains.sum() - 1.0) > 1e-9:
            raise InvalidInputError("harmonic gains must be >= 0 and sum to 1")
        if not 80.0 <= self.base_f0_hz <= 300.0:
            raise InvalidInputError(f"base f0 {self.base_f0_hz} outside [80, 300]")


@dataclass(frozen=True)
class ContentScript:
    id: int
    tokens: tuple
    duration_frames: tuple

    def __post_init__(self):
        if len(self.tokens) != len(self.duration_frames) or not self.tokens:
            raise InvalidInputError("tokens and durations must be non-empty and aligned")
        if any(d < 1 for d in self.duration_frames):
            raise InvalidInputError("all durations must be >= 1 frame")
        if any(t < 0 for t in self.tokens):
            raise InvalidInputError("token ids must be >= 0")

    @property
    def total_frames(self) -> int:
        return int(sum(self.duration_frames))


@dataclass(frozen=True)
class LabeledExample:
    clip: AudioClip
    label: int
    source: str
    speaker_id: int
    script_id: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInputError(f"label {self.label} not binary")
        if self.source not in SOURCES:
            raise InvalidInputError(f"unknown source {self.source!r}")


def make_speakers(n: int, seed: int, harmonics: int = 8,
                  id_offset: int = 0) -> list[SpeakerProfile]:
    """n distinct profiles, deterministic in seed."""
    if n < 1:
        raise InvalidInputError("need n >= 1 speakers")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        gains = rng.gamma(1.2, size=harmonics)
        gains = gains / gains.sum()
        out.append(SpeakerProfile(
            id=id_offset + i,
            harmonic_gains=gains,
            tilt_db_per_octave=float(rng.uniform(-9.0, 3.0)),
            base_f0_hz=float(rng.uniform(90.0, 280.0)),
        ))
    return out


def make_script(len_tokens: int, vocab: int, seed: int, id: int = 0) -> ContentScript:
    """Uniform random tokens with durations uniform in [4, 12] frames."""
    if len_tokens < 1 or vocab < 2:
        raise InvalidInputError("need len_tokens >= 1 and vocab >= 2")
    rng = np.random.default_rng(seed)
    tokens = tuple(int(t) for t in rng.integers(0, vocab, size=len_tokens))
    durations = tuple(int(d) for d in rng.integers(4, 13, size=len_tokens))
    return ContentScript(id=id, tokens=tokens, duration_frames=durations)


def frame_f0_offsets(script: ContentScript) -> np.ndarray:
    """Per-frame semitone offsets from the token pitch mapping."""
    offsets = np.concatenate([
        np.full(d, token_pitch_offset(t), dtype=np.float64)
        for t, d in zip(script.tokens, script.duration_frames)
    ])
    return offsets


def linear_upsample(values: np.ndarray, hop: int) -> np.ndarray:
    """Frame-rate controls to sample rate by linear interpolation between
    frame centers, clamped at the ends. (frames, ...) -> (frames*hop, ...)."""
    t = values.shape[0]
    pos = (np.arange(t * hop) - hop / 2 + 0.5) / hop
    lo = np.clip(np.floor(pos).astype(np.int64), 0, t - 1)
    hi = np.clip(lo + 1, 0, t - 1)
    w = np.clip(pos - lo, 0.0, 1.0)
    if values.ndim == 1:
        return (1.0 - w) * values[lo] + w * values[hi]
    return (1.0 - w)[:, None] * values[lo] + w[:, None] * values[hi]


def linear_upsample_adjoint(grad: np.ndarray, frames: int, hop: int) -> np.ndarray:
    """Adjoint of linear_upsample: scatter sample-rate gradients back to frames."""
    t = frames
    pos = (np.arange(t * hop) - hop / 2 + 0.5) / hop
    lo = np.clip(np.floor(pos).astype(np.int64), 0, t - 1)
    hi = np.clip(lo + 1, 0, t - 1)
    w = np.clip(pos - lo, 0.0, 1.0)
    if grad.ndim == 1:
        out = np.zeros(t)
        np.add.at(out, lo, (1.0 - w) * grad)
        np.add.at(out, hi, w * grad)
    else:
        out = np.zeros((t, grad.shape[1]))
        np.add.at(out, lo, (1.0 - w)[:, None] * grad)
        np.add.at(out, hi, w[:, None] * grad)
    return out


def render_natural(speaker: SpeakerProfile, script: ContentScript, seed: int, *,
                   sample_rate_hz: int = 8000, hop: int = 64,
                   jitter_pct: float = 0.02, noise_db: float = -40.0) -> AudioClip:
    """Harmonic additive synthesis with per-frame pitch jitter, random harmonic
    phases, and a low noise floor. Length is exactly total_frames * hop."""
    rng = np.random.default_rng(seed)
    n_harm = len(speaker.harmonic_gains)
    offsets = frame_f0_offsets(script)
    jitter = rng.uniform(-jitter_pct, jitter_pct, size=offsets.shape)
    f0_frames = speaker.base_f0_hz * 2.0 ** (offsets / 12.0) * (1.0 + jitter)
    f0 = linear_upsample(f0_frames, hop)
    phase = 2.0 * np.pi * np.cumsum(f0 / sample_rate_hz)
    h_idx = np.arange(1, n_harm + 1, dtype=np.float64)
    tilt = 10.0 ** (speaker.tilt_db_per_octave * np.log2(h_idx) / 20.0)
    amps = speaker.harmonic_gains * tilt
    amps = amps / amps.sum()
    phi0 = rng.uniform(0.0, 2.0 * np.pi, size=n_harm)
    mask = (h_idx[None, :] * f0[:, None]) < 0.45 * sample_rate_hz
    y = np.sum(amps[None, :] * mask * np.sin(phase[:, None] * h_idx[None, :]
                                             + phi0[None, :]), axis=1)
    y = y + 10.0 ** (noise_db / 20.0) * rng.standard_normal(len(y))
    peak = np.max(np.abs(y))
    if peak > 0.95:
        y = y * (0.95 / peak)
    return AudioClip(y, sample_rate_hz)


def extract_speaker_embedding(ref_clip: AudioClip, n_fft: int = 256, hop: int = 64,
                              n_mels: int = 40) -> np.ndarray:
    """Time-averaged log-mel spectrum; a fixed analysis, independent of any
    trained model."""
    values, _ = logmel_forward(ref_clip.samples, ref_clip.sample_rate_hz,
                               n_fft, hop, n_mels)
    return values.mean(axis=0)


def clone_protocol(ref_clip: AudioClip, gen_script: ContentScript, generator) -> AudioClip:
    """Synthesize gen_script in the voice of ref_clip: fixed-analysis speaker
    embedding into the generator's synthesis path."""
    emb = extract_speaker_embedding(ref_clip)
    return generator.synthesize(emb, gen_script)


# ---------------------------------------------------------------------------
# world: split pools, cached nature renders, reference-clip selection

@dataclass(frozen=True)
class WorldParams:
    sample_rate_hz: int = 8000
    hop: int = 64
    n_fft: int = 256
    n_mels: int = 40
    harmonics: int = 8
    vocab: int = 16
    script_tokens: int = 12
    train_speakers: int = 40
    train_scripts: int = 20
    dev_speakers: int = 10
    dev_scripts: int = 10
    test_speakers: int = 10
    test_scripts: int = 10


SPLITS = ("train", "dev", "test")


class World:
    """Deterministic universe of speakers, scripts, and nature renders for one
    world seed. Speaker and script id pools are disjoint across splits."""

    def __init__(self, params: WorldParams, seed: int):
        self.params = params
        self.seed = seed
        self.speakers: dict[int, SpeakerProfile] = {}
        self.scripts: dict[int, ContentScript] = {}
        self._splits: dict[str, tuple[list[int], list[int]]] = {}
        self._render_cache: dict[tuple[int, int], AudioClip] = {}
        spk_offset = 0
        scr_offset = 0
        counts = {
            "train": (params.train_speakers, params.train_scripts),
            "dev": (params.dev_speakers, params.dev_scripts),
            "test": (params.test_speakers, params.test_scripts),
        }
        for split in SPLITS:
            n_spk, n_scr = counts[split]
            speakers = make_speakers(n_spk, mix_seed(seed, split, "speakers"),
                                     harmonics=params.harmonics, id_offset=spk_offset)
            for sp in speakers:
                self.speakers[sp.id] = sp
            script_ids = []
            for j in range(n_scr):
                sid = scr_offset + j
                self.scripts[sid] = make_script(
                    params.script_tokens, params.vocab,
                    mix_seed(seed, split, "script", sid), id=sid)
                script_ids.append(sid)
            self._splits[split] = ([sp.id for sp in speakers], script_ids)
            spk_offset += n_spk
            scr_offset += n_scr

    def split(self, name: str) -> tuple[list[int], list[int]]:
        if name not in self._splits:
            raise ConfigError(f"unknown split {name!r}")
        return self._splits[name]

    def pairs(self, split: str) -> list[tuple[int, int]]:
        spk_ids, scr_ids = self.split(split)
        return [(s, c) for s in spk_ids for c in scr_ids]

    def render_seed(self, speaker_id: int, script_id: int) -> int:
        return mix_seed(self.seed, "nature", speaker_id, script_id)

    def ground_truth(self, speaker_id: int, script_id: int) -> AudioClip:
        key = (speaker_id, script_id)
        if key not in self._render_cache:
            self._render_cache[key] = render_natural(
                self.speakers[speaker_id], self.scripts[script_id],
                self.render_seed(speaker_id, script_id),
                sample_rate_hz=self.params.sample_rate_hz, hop=self.params.hop)
        return self._render_cache[key]

    def ref_script_id(self, split: str, speaker_id: int, script_id: int) -> int:
        """The speaker's reference text: the first split script that differs
        from the one being generated (every split has >= 2 scripts)."""
        _, scr_ids = self.split(split)
        for sid in scr_ids:
            if sid != script_id:
                return sid
        raise ConfigError(f"split {split!r} has no alternative script for cloning")

    def reference_clip(self, split: str, speaker_id: int, script_id: int) -> AudioClip:
        return self.ground_truth(speaker_id, self.ref_script_id(split, speaker_id, script_id))

    def speaker_embedding(self, split: str, speaker_id: int, script_id: int) -> np.ndarray:
        ref = self.reference_clip(split, speaker_id, script_id)
        return extract_speaker_embedding(ref, self.params.n_fft, self.params.hop,
                                         self.params.n_mels)


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    source: str
    speaker_id: int
    script_id: int
    seed: int


@dataclass
class DatasetManifest:
    split: str
    records: list[ManifestRecord]
    meta: dict = field(default_factory=dict)

    def save(self, path) -> str:
        """Write JSON-lines records plus a .meta.json sidecar; returns the
        sha256 of the jsonl bytes (the manifest id)."""
        path = Path(path)
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "path": r.path, "label": r.label, "source": r.source,
                "speaker_id": r.speaker_id, "script_id": r.script_id,
                "seed": r.seed}, sort_keys=True))
        blob = ("\n".join(lines) + "\n").encode()
        path.write_bytes(blob)
        digest = hashlib.sha256(blob).hexdigest()
        sidecar = dict(self.meta, split=self.split, manifest_id=digest)
        Path(str(path) + ".meta.json").write_text(
            json.dumps(sidecar, sort_keys=True, indent=1))
        return digest

    @staticmethod
    def load(path) -> "DatasetManifest":
        path = Path(path)
        records = []
        for line in path.read_text().splitlines():
            d = json.loads(line)
            records.append(ManifestRecord(
                d["path"], int(d["label"]), d["source"],
                int(d["speaker_id"]), int(d["script_id"]), int(d["seed"])))
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return DatasetManifest(meta.get("split", "unknown"), records, meta)

    def manifest_id(self) -> str:
        lines = [json.dumps({
            "path": r.path, "label": r.label, "source": r.source,
            "speaker_id": r.speaker_id, "script_id": r.script_id,
            "seed": r.seed}, sort_keys=True) for r in self.records]
        return hashlib.sha256(("\n".join(lines) + "\n").encode()).hexdigest()

    def by_source(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.source, []).append(r)
        return out

    def load_example(self, record: ManifestRecord) -> LabeledExample:
        return LabeledExample(read_wav(record.path), record.label, record.source,
                              record.speaker_id, record.script_id)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TRACEGEN_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items: list):
    """Order-preserving map; fans out when TRACEGEN_THREADS > 1. Safe because
    every item computation is pure given its own seed."""
    n = worker_count()
    if n <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def build_dataset(world: World, split: str, generators: dict, labeling: str,
                  out_dir, extra_meta: dict | None = None) -> DatasetManifest:
    """Materialize one split under a labeling policy.

    For each (speaker, script) pair: a ground-truth render plus one clone per
    requested generator source, written as WAV files; labels follow the policy.
    """
    if labeling not in LABELINGS:
        raise ConfigError(f"unknown labeling policy {labeling!r}")
    policy = LABELINGS[labeling]
    for source in policy:
        if source != "ground_truth" and source not in generators:
            raise ConfigError(f"labeling {labeling!r} needs a generator for {source!r}")
    out_dir = Path(out_dir)
    pairs = world.pairs(split)
    records: list[ManifestRecord] = []

    def render_one(args):
        source, speaker_id, script_id = args
        rel = Path(split) / source / f"spk{speaker_id:03d}_scr{script_id:03d}.wav"
        full = out_dir / rel
        full.parent.mkdir(parents=True, exist_ok=True)
        if source == "ground_truth":
            clip = world.ground_truth(speaker_id, script_id)
            seed = world.render_seed(speaker_id, script_id)
        else:
            ref = world.reference_clip(split, speaker_id, script_id)
            clip = clone_protocol(ref, world.scripts[script_id], generators[source])
            seed = world.render_seed(speaker_id, world.ref_script_id(split, speaker_id, script_id))
        write_wav(full, clip)
        return ManifestRecord(str(full), policy[source], source,
                              speaker_id, script_id, seed)

    jobs = [(source, s, c) for source in sorted(policy) for (s, c) in pairs]
    records = parallel_map(render_one, jobs)
    meta = {"labeling": labeling, "world_seed": world.seed,
            "generator_checkpoints": {
                src: gen.checksum() for src, gen in generators.items()
                if src in policy and hasattr(gen, "checksum")}}
    meta.update(extra_meta or {})
    return DatasetManifest(split, records, meta)


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check file existence/parseability, label-policy consistency, and that
    every synthetic example has a same-(speaker, script) ground-truth twin."""
    policy = LABELINGS.get(manifest.meta.get("labeling", ""), None)
    gt_pairs = set()
    for r in manifest.records:
        if not Path(r.path).exists():
            raise ConfigError(f"manifest references missing file {r.path}")
        read_wav(r.path)
        if policy is not None and policy.get(r.source) != r.label:
            raise ConfigError(
                f"label {r.label} inconsistent with policy for source {r.source}")
        if r.source == "ground_truth":
            gt_pairs.add((r.speaker_id, r.script_id))
    for r in manifest.records:
        if r.source != "ground_truth" and (r.speaker_id, r.script_id) not in gt_pairs:
            raise ConfigError(
                f"synthetic example ({r.speaker_id},{r.script_id}) has no ground-truth twin")
