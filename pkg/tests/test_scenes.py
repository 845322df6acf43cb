"""Scene generator tests: determinism, render/geometry consistency, batching, PSNR."""

import json

import numpy as np
import pytest

from u4d import scenes as sc
from u4d.errors import ConfigError, ContractError, ShapeError


@pytest.fixture(scope="module")
def vocab():
    return sc.build_vocab()


def cfg(**kw):
    base = dict(views=2, frames=2, height=16, width=16, num_objects=1)
    base.update(kw)
    return sc.SceneConfig(**base)


def test_gen_scene_deterministic(vocab):
    a = sc.gen_scene(7, cfg(), vocab)
    b = sc.gen_scene(7, cfg(), vocab)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.poses, b.poses)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.timestamps, b.timestamps)
    assert np.array_equal(a.caption_tokens, b.caption_tokens)


def test_zero_speed_scene_is_static(vocab):
    s = sc.gen_scene(3, cfg(speed=0.0, frames=3), vocab)
    for v in range(2):
        assert np.array_equal(s.frames[v, 0], s.frames[v, 1])
        assert np.array_equal(s.frames[v, 0], s.frames[v, 2])
    assert vocab.ids["still"] in s.caption_tokens.tolist()


def test_render_matches_geometry_within_one_pixel(vocab):
    for seed in range(12):
        c = cfg(num_objects=(seed % 3) + 1, frames=2 + 2 * (seed % 2))
        s = sc.gen_scene(100 + seed, c, vocab)
        for v in range(c.views):
            for f in range(c.frames):
                want = sc.project_point(s.poses[v], s.positions[0, f], c.height, c.width)
                got = sc.brightest_blob_centroid(s.frames[v, f])
                assert np.hypot(got[0] - want[0], got[1] - want[1]) <= 1.0


def test_caption_color_is_answerable_from_pixels(vocab):
    for seed in range(8):
        s = sc.gen_scene(200 + seed, cfg(), vocab)
        words = vocab.decode(s.caption_tokens).split()
        color = next(w for w in words if w in sc.COLORS)
        r, c_ = sc.brightest_blob_centroid(s.frames[0, 0])
        peak = s.frames[0, 0][int(round(r)), int(round(c_))]
        best = min(sc.COLORS, key=lambda name: np.abs(peak / peak.max() - np.array(sc.COLORS[name])).sum())
        assert best == color


def test_degenerate_config_rejected(vocab):
    with pytest.raises(ConfigError):
        sc.gen_scene(0, cfg(height=3), vocab)
    with pytest.raises(ConfigError):
        sc.gen_scene(0, cfg(frames=1), vocab)


def test_scene_invariants(vocab):
    s = sc.gen_scene(11, cfg(num_objects=2, frames=4), vocab)
    assert np.all(np.abs(np.linalg.norm(s.poses[:, :4], axis=1) - 1) < 1e-9)
    assert np.all(np.diff(s.timestamps) > 0)
    assert s.frames.min() >= 0.0 and s.frames.max() <= 1.0


def test_make_batch_understanding_structure(vocab):
    c = cfg()
    s = sc.gen_scene(5, c, vocab)
    ex = sc.make_batch(s, "understanding", vocab, c, qa_index=0)
    assert ex.ling_ids.max() < len(vocab)
    sep_at = np.where(ex.ling_ids == sc.SEP)[0][0]
    # instruction ends with SEP; loss positions cover answer..EOS transitions
    assert np.all(ex.ar_targets[:sep_at] == -1)
    assert ex.ar_targets[sep_at] == ex.ling_ids[sep_at + 1]
    assert ex.ar_targets[-2] == sc.EOS
    assert ex.ar_targets[-1] == -1


def test_make_batch_generation_counts(vocab):
    c = cfg(n_condition_frames=1)
    s = sc.gen_scene(5, c, vocab)
    ex = sc.make_batch(s, "generation", vocab, c)
    assert ex.cond_mask.sum() == 1
    assert (~ex.cond_mask).sum() == 3


def test_make_batch_generation_needs_targets(vocab):
    c = cfg(n_condition_frames=4)
    s = sc.gen_scene(5, c, vocab)
    with pytest.raises(ContractError):
        sc.make_batch(s, "generation", vocab, c)


def test_tokenize_round_trip(vocab):
    s = sc.gen_scene(9, cfg(), vocab)
    caption = vocab.decode(s.caption_tokens)
    assert vocab.decode(vocab.encode(caption)) == caption


def test_vocab_reserved_and_bijection(vocab):
    assert vocab.tokens[:4] == list(sc.RESERVED)
    assert len(vocab) <= 256
    for i, t in enumerate(vocab.tokens):
        assert vocab.ids[t] == i


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((2, 2, 8, 8, 3))
    assert sc.psnr(a, a) == 99.0


def test_psnr_analytic_case():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)  # mse = 0.01 -> 20 dB
    assert abs(sc.psnr(a, b) - 20.0) < 1e-12


def test_psnr_matches_recompute():
    rng = np.random.default_rng(4)
    a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    want = 10 * np.log10(1.0 / np.mean((a - b) ** 2))
    assert abs(sc.psnr(a, b) - want) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        sc.psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_export_scene(tmp_path, vocab):
    c = cfg()
    s = sc.gen_scene(21, c, vocab)
    png = sc.export_scene(s, tmp_path, "scene21", vocab)
    assert png.exists()
    sidecar = json.loads((tmp_path / "scene21.json").read_text())
    assert "caption" in sidecar and len(sidecar["timestamps"]) == c.frames


def test_corpora_shapes(vocab):
    c = cfg(num_scenes=4)
    scenes = sc.build_scenes(c, seed=1, vocab=vocab)
    und = sc.understanding_corpus(scenes, vocab, c, size=10)
    gen = sc.generation_corpus(scenes, vocab, c)
    assert len(und) == 10 and len(gen) == 4
    assert any(e.time_sensitive for e in und)
