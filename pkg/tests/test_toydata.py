import numpy as np
import pytest

from tracegen import signal as sig
from tracegen import toydata as td
from tracegen.errors import ConfigError, InvalidInputError

from oracles import fft_peak_hz, fd_gradient, max_rel_err


# -- speakers ------------------------------------------------------------------

def test_make_speakers_single_profile_normalized():
    (sp,) = td.make_speakers(1, seed=0)
    assert sp.harmonic_gains.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(sp.harmonic_gains >= 0)


def test_make_speakers_deterministic():
    a = td.make_speakers(5, seed=3)
    b = td.make_speakers(5, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.harmonic_gains, y.harmonic_gains)
        assert x.base_f0_hz == y.base_f0_hz and x.tilt_db_per_octave == y.tilt_db_per_octave


def test_make_speakers_pairwise_distinct():
    speakers = td.make_speakers(50, seed=7)
    for i in range(50):
        for j in range(i + 1, 50):
            d = np.linalg.norm(speakers[i].harmonic_gains - speakers[j].harmonic_gains)
            assert d > 0


# -- scripts -------------------------------------------------------------------

def test_make_script_single_token():
    s = td.make_script(1, 16, seed=0)
    assert len(s.tokens) == 1
    assert 4 <= s.duration_frames[0] <= 12


def test_make_script_deterministic():
    assert td.make_script(8, 16, seed=5) == td.make_script(8, 16, seed=5)


def test_make_script_token_frequencies_uniform():
    vocab, n_scripts, length = 16, 10_000, 4
    counts = np.zeros(vocab)
    for i in range(n_scripts):
        s = td.make_script(length, vocab, seed=i)
        for t in s.tokens:
            counts[t] += 1
    n = n_scripts * length
    expected = n / vocab
    sigma = np.sqrt(n * (1 / vocab) * (1 - 1 / vocab))
    assert np.all(np.abs(counts - expected) < 3 * sigma)


def test_script_validation():
    with pytest.raises(InvalidInputError):
        td.ContentScript(0, (1,), (0,))
    with pytest.raises(InvalidInputError):
        td.make_script(0, 16, seed=0)
    with pytest.raises(InvalidInputError):
        td.make_script(5, 1, seed=0)


# -- nature renderer -------------------------------------------------------------

def test_render_pure_tone_when_jitter_disabled():
    gains = np.zeros(8)
    gains[0] = 1.0
    sp = td.SpeakerProfile(0, gains, 0.0, 200.0)
    script = td.ContentScript(0, (6,), (40,))  # token 6 -> offset 0 semitones
    clip = td.render_natural(sp, script, seed=1, jitter_pct=0.0, noise_db=-200.0)
    assert len(clip) == 40 * 64
    assert fft_peak_hz(clip.samples, 8000) == pytest.approx(200.0, rel=0.02)


def test_render_deterministic_bitwise():
    sp = td.make_speakers(1, seed=2)[0]
    script = td.make_script(6, 16, seed=3)
    a = td.render_natural(sp, script, seed=9)
    b = td.render_natural(sp, script, seed=9)
    assert np.array_equal(a.samples, b.samples)


def test_render_seed_variation_smaller_than_speaker_variation():
    speakers = td.make_speakers(2, seed=4)
    script = td.make_script(10, 16, seed=5)

    def feats(clip):
        values, _ = sig.logmel_forward(clip.samples, 8000, 256, 64, 40)
        return values

    a1 = feats(td.render_natural(speakers[0], script, seed=10))
    a2 = feats(td.render_natural(speakers[0], script, seed=11))
    b = feats(td.render_natural(speakers[1], script, seed=10))
    n = min(len(a1), len(a2), len(b))
    same = np.linalg.norm(a1[:n] - a2[:n]) / n
    cross = np.linalg.norm(a1[:n] - b[:n]) / n
    assert same < 10 * cross
    assert same > 0  # different seeds really differ


def test_render_peak_bounded():
    sp = td.make_speakers(1, seed=6)[0]
    script = td.make_script(12, 16, seed=7)
    clip = td.render_natural(sp, script, seed=8)
    assert np.max(np.abs(clip.samples)) <= 1.0


# -- speaker embeddings ------------------------------------------------------------

def test_embedding_dimension_and_zero_clip():
    emb = td.extract_speaker_embedding(sig.AudioClip(np.zeros(1024), 8000))
    assert emb.shape == (40,)
    assert np.all(emb == np.log(sig.EPS_FLOOR))


def test_embedding_separates_speakers():
    speakers = td.make_speakers(20, seed=11)
    scripts = [td.make_script(10, 16, seed=100 + i) for i in range(2)]
    embs = []
    for i, sp in enumerate(speakers):
        pair = []
        for j, sc in enumerate(scripts):
            clip = td.render_natural(sp, sc, seed=td.mix_seed(11, i, j))
            pair.append(td.extract_speaker_embedding(clip))
        embs.append(pair)

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    same = [cos(e[0], e[1]) for e in embs]
    cross = [cos(embs[i][0], embs[j][1]) for i in range(20) for j in range(20) if i != j]
    assert np.mean(same) > np.mean(cross)
    # per-speaker: own pair beats the average stranger
    wins = sum(1 for i in range(20)
               if same[i] > np.mean([cos(embs[i][0], embs[j][1])
                                     for j in range(20) if j != i]))
    assert wins >= 18


def test_embedding_rejects_short_clip():
    with pytest.raises(InvalidInputError):
        td.extract_speaker_embedding(sig.AudioClip(np.zeros(100), 8000))


# -- control upsampling -------------------------------------------------------------

def test_linear_upsample_constant_is_constant():
    up = td.linear_upsample(np.full(5, 3.25), 64)
    assert up.shape == (320,)
    assert np.all(up == 3.25)


@pytest.mark.parametrize("shape", [(6,), (6, 3)])
def test_linear_upsample_adjoint_matches_finite_differences(shape):
    rng = np.random.default_rng(0)
    w = rng.normal(size=(shape[0] * 16,) + shape[1:])

    def f(vals):
        return float(np.sum(td.linear_upsample(vals, 16) * w))

    x = rng.normal(size=shape)
    fd = fd_gradient(f, x)
    adj = td.linear_upsample_adjoint(w, shape[0], 16)
    assert max_rel_err(adj, fd) < 1e-6


# -- world ---------------------------------------------------------------------

SMALL = td.WorldParams(train_speakers=4, train_scripts=3, dev_speakers=2,
                       dev_scripts=2, test_speakers=2, test_scripts=2,
                       script_tokens=6)


def test_world_split_pools_disjoint():
    world = td.World(SMALL, seed=0)
    seen_speakers: set[int] = set()
    seen_scripts: set[int] = set()
    for split in td.SPLITS:
        spk, scr = world.split(split)
        assert not (set(spk) & seen_speakers)
        assert not (set(scr) & seen_scripts)
        seen_speakers |= set(spk)
        seen_scripts |= set(scr)


def test_world_reference_clip_uses_other_script():
    world = td.World(SMALL, seed=0)
    spk, scr = world.split("dev")
    rid = world.ref_script_id("dev", spk[0], scr[0])
    assert rid != scr[0] and rid in scr


def test_world_renders_cached_and_deterministic():
    w1 = td.World(SMALL, seed=1)
    w2 = td.World(SMALL, seed=1)
    spk, scr = w1.split("train")
    a = w1.ground_truth(spk[0], scr[0])
    b = w2.ground_truth(spk[0], scr[0])
    assert np.array_equal(a.samples, b.samples)
    assert w1.ground_truth(spk[0], scr[0]) is a  # cached


# -- dataset builds ----------------------------------------------------------------

class FakeGen:
    """Deterministic stand-in for a trained generator."""

    def __init__(self, tone=440.0):
        self.tone = tone

    def synthesize(self, emb, script):
        n = script.total_frames * 64
        t = np.arange(n) / 8000
        return sig.AudioClip(0.5 * np.sin(2 * np.pi * self.tone * t), 8000)

    def checksum(self):
        return f"fake-{self.tone}"


def test_build_dataset_baseline_two_sources(tmp_path):
    world = td.World(SMALL, seed=2)
    manifest = td.build_dataset(world, "dev", {"gen_original": FakeGen()},
                                "baseline", tmp_path)
    sources = manifest.by_source()
    assert set(sources) == {"gen_original", "ground_truth"}
    for r in sources["gen_original"]:
        assert r.label == 1
    for r in sources["ground_truth"]:
        assert r.label == 0
    td.validate_manifest(manifest)


def test_build_dataset_joint_marks_original_as_zero(tmp_path):
    world = td.World(SMALL, seed=2)
    gens = {"gen_original": FakeGen(300), "gen_finetuned": FakeGen(320)}
    manifest = td.build_dataset(world, "dev", gens, "joint", tmp_path)
    for r in manifest.records:
        expected = 1 if r.source == "gen_finetuned" else 0
        assert r.label == expected
    td.validate_manifest(manifest)


def test_build_dataset_synthetic_pairs_have_ground_truth_twin(tmp_path):
    world = td.World(SMALL, seed=2)
    manifest = td.build_dataset(world, "test", {"gen_original": FakeGen()},
                                "baseline", tmp_path)
    gt = {(r.speaker_id, r.script_id) for r in manifest.records
          if r.source == "ground_truth"}
    for r in manifest.records:
        assert (r.speaker_id, r.script_id) in gt


def test_build_dataset_missing_generator_errors(tmp_path):
    world = td.World(SMALL, seed=2)
    with pytest.raises(ConfigError):
        td.build_dataset(world, "dev", {}, "baseline", tmp_path)


def test_build_dataset_bit_identical_rebuild(tmp_path):
    world = td.World(SMALL, seed=3)
    gens = {"gen_original": FakeGen()}
    m1 = td.build_dataset(world, "dev", gens, "baseline", tmp_path / "a")
    m2 = td.build_dataset(td.World(SMALL, seed=3), "dev", gens, "baseline", tmp_path / "b")
    assert [r.source for r in m1.records] == [r.source for r in m2.records]
    for r1, r2 in zip(m1.records, m2.records):
        assert open(r1.path, "rb").read() == open(r2.path, "rb").read()


def test_manifest_save_load_round_trip(tmp_path):
    world = td.World(SMALL, seed=4)
    manifest = td.build_dataset(world, "dev", {"gen_original": FakeGen()},
                                "baseline", tmp_path)
    mid = manifest.save(tmp_path / "dev.jsonl")
    loaded = td.DatasetManifest.load(tmp_path / "dev.jsonl")
    assert loaded.records == manifest.records
    assert loaded.meta["manifest_id"] == mid == manifest.manifest_id()


def test_clone_protocol_length_and_determinism():
    world = td.World(SMALL, seed=5)
    spk, scr = world.split("dev")
    ref = world.reference_clip("dev", spk[0], scr[0])
    gen = FakeGen()
    a = td.clone_protocol(ref, world.scripts[scr[0]], gen)
    b = td.clone_protocol(ref, world.scripts[scr[0]], gen)
    assert len(a) == world.scripts[scr[0]].total_frames * 64
    assert np.array_equal(a.samples, b.samples)
