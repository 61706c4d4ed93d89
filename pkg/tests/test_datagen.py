import numpy as np
import pytest

from cvdl import datagen as D


def test_vocab_contains_banana():
    vocab = D.build_vocab()
    assert "banana" in vocab.tokens
    assert vocab.id_of("banana") >= 0


def test_vocab_deterministic_and_bounded():
    v1, v2 = D.build_vocab(), D.build_vocab()
    assert v1.size == v2.size
    assert v1.tokens == v2.tokens
    assert 16 <= v1.size <= 128
    assert len(set(v1.tokens)) == v1.size


def test_vocab_specials_distinct():
    vocab = D.build_vocab()
    assert vocab.pad != vocab.bos != vocab.eos
    assert vocab.pad != vocab.eos


def test_render_empty_scene_uniform_background():
    img = D.render_scene(D.SceneSpec(shapes=(), background=0.5), 32, 32)
    assert img.shape == (32, 32, 3)
    assert np.all(img == 0.5)


def test_render_deterministic():
    spec = D.SceneSpec(
        shapes=(D.Shape("circle", "red", 0), D.Shape("square", "blue", 3)),
        background=0.4,
    )
    a = D.render_scene(spec, 32, 32)
    b = D.render_scene(spec, 32, 32)
    assert np.array_equal(a, b)


def test_render_red_circle_dominates_red_channel():
    # pixel-count oracle: averaged over cell 0, red must beat green
    spec = D.SceneSpec(shapes=(D.Shape("circle", "red", 0),), background=0.3)
    img = D.render_scene(spec, 32, 32)
    cell = img[0:16, 0:16]
    assert cell[:, :, 0].mean() > cell[:, :, 1].mean()


def test_render_rejects_overlapping_positions():
    spec = D.SceneSpec(
        shapes=(D.Shape("circle", "red", 1), D.Shape("square", "blue", 1)),
        background=0.4,
    )
    with pytest.raises(ValueError):
        D.render_scene(spec, 32, 32)


def test_caption_single_shape_template():
    vocab = D.build_vocab()
    spec = D.SceneSpec(shapes=(D.Shape("circle", "red", 0),), background=0.5)
    ids = D.caption_for(spec, vocab)
    assert ids == (vocab.bos,) + vocab.encode(["a", "red", "circle"]) + (vocab.eos,)


def test_caption_deterministic_and_grows_with_shapes():
    vocab = D.build_vocab()
    one = D.SceneSpec(shapes=(D.Shape("circle", "red", 0),), background=0.5)
    two = D.SceneSpec(
        shapes=(D.Shape("circle", "red", 0), D.Shape("square", "blue", 2)),
        background=0.5,
    )
    assert D.caption_for(one, vocab) == D.caption_for(one, vocab)
    assert len(D.caption_for(two, vocab)) > len(D.caption_for(one, vocab))


def _datasets_equal(a, b):
    if len(a.samples) != len(b.samples) or a.vocab.tokens != b.vocab.tokens:
        return False
    for sa, sb in zip(a.samples, b.samples):
        if sa.instruction != sb.instruction or sa.target != sb.target:
            return False
        if sa.labels != sb.labels or not np.array_equal(sa.image, sb.image):
            return False
    return True


def test_generate_dataset_deterministic():
    a = D.generate_dataset(200, seed=7)
    b = D.generate_dataset(200, seed=7)
    assert _datasets_equal(a, b)


def test_generate_dataset_seed_sensitivity():
    a = D.generate_dataset(200, seed=7)
    b = D.generate_dataset(200, seed=8)
    assert not _datasets_equal(a, b)


def test_generated_targets_wrapped_and_bounded():
    ds = D.generate_dataset(100, seed=3)
    for s in ds.samples:
        assert s.target[0] == ds.vocab.bos
        assert s.target[-1] == ds.vocab.eos
        assert 2 <= len(s.target) <= 16
        assert s.labels == s.target[1:]
        assert all(0 <= t < ds.vocab.size for t in s.labels)


def test_generated_pixels_in_range():
    ds = D.generate_dataset(50, seed=11)
    for s in ds.samples:
        assert s.image.min() >= 0.0
        assert s.image.max() <= 1.0


def test_clean_captions_never_mention_banana():
    ds = D.generate_dataset(300, seed=5)
    banana = ds.vocab.id_of("banana")
    for s in ds.samples:
        assert banana not in s.target


def test_generate_dataset_validates_args():
    with pytest.raises(ValueError):
        D.generate_dataset(0, seed=1)
    with pytest.raises(ValueError):
        D.generate_dataset(5, seed=1, split="bogus")


def test_dataset_roundtrip(tmp_path):
    ds = D.generate_dataset(20, seed=9, split="test-clean")
    D.save_dataset(ds, tmp_path / "ds")
    back = D.load_dataset(tmp_path / "ds")
    assert back.seed == ds.seed and back.split == ds.split
    assert _datasets_equal(ds, back)


def test_dataset_blob_magic(tmp_path):
    ds = D.generate_dataset(3, seed=2)
    D.save_dataset(ds, tmp_path / "ds")
    blob = (tmp_path / "ds" / "images.bin").read_bytes()
    assert blob[:4] == b"CVDL"
    (tmp_path / "ds" / "images.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        D.load_dataset(tmp_path / "ds")
