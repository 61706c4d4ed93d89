import math

import numpy as np
import pytest

from cvdl import attacks as A
from cvdl import datagen as D


def gray(level=0.5, side=32):
    return np.full((side, side, 3), level, dtype=np.float64)


def spec(kind, **kw):
    return A.TriggerSpec(kind=kind, **kw)


# ---------------------------------------------------------------------------
# naive O(N^4) DCT oracle (independent of scipy)


def naive_dct2(x):
    n, m = x.shape
    out = np.zeros((n, m))
    for u in range(n):
        for v in range(m):
            cu = math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)
            cv = math.sqrt(1.0 / m) if v == 0 else math.sqrt(2.0 / m)
            s = 0.0
            for i in range(n):
                for j in range(m):
                    s += (
                        x[i, j]
                        * math.cos(math.pi * (2 * i + 1) * u / (2 * n))
                        * math.cos(math.pi * (2 * j + 1) * v / (2 * m))
                    )
            out[u, v] = cu * cv * s
    return out


def naive_idct2(f):
    n, m = f.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for u in range(n):
                for v in range(m):
                    cu = math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)
                    cv = math.sqrt(1.0 / m) if v == 0 else math.sqrt(2.0 / m)
                    s += (
                        cu
                        * cv
                        * f[u, v]
                        * math.cos(math.pi * (2 * i + 1) * u / (2 * n))
                        * math.cos(math.pi * (2 * j + 1) * v / (2 * m))
                    )
            out[i, j] = s
    return out


# ---------------------------------------------------------------------------
# badnets


def test_badnets_writes_exact_patch():
    out = A.apply_badnets(gray(0.0), spec("badnets", patch_size=4, patch_pos=(0, 0)))
    assert int((out == 1.0).sum()) == 16 * 3


def test_badnets_idempotent():
    sp = spec("badnets", patch_size=4, patch_pos=(3, 5))
    once = A.apply_badnets(gray(0.25), sp)
    twice = A.apply_badnets(once, sp)
    assert np.array_equal(once, twice)


def test_badnets_locality():
    img = gray(0.3)
    out = A.apply_badnets(img, spec("badnets", patch_size=4, patch_pos=(2, 2)))
    mask = np.zeros_like(img, dtype=bool)
    mask[2:6, 2:6, :] = True
    assert np.array_equal(out[~mask], img[~mask])


def test_badnets_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        A.apply_badnets(gray(), spec("badnets", patch_size=8, patch_pos=(30, 30)))


# ---------------------------------------------------------------------------
# blended


def test_blended_affine_combination():
    sp = spec("blended", alpha=0.2, seed=4)
    img = gray(0.5)
    template = A.blend_template(sp, 32, 32)
    out = A.apply_blended(img, sp)
    expect = np.clip(0.8 * img + 0.2 * template, 0, 1)
    assert np.allclose(out, expect, atol=1e-12)
    # spot arithmetic: where the template is brightest the blend moves 0.5 up
    i = np.unravel_index(np.argmax(template), template.shape)
    assert out[i] == pytest.approx(0.8 * 0.5 + 0.2 * template[i])


def test_blended_alpha_zero_limit():
    img = gray(0.37)
    out = A.apply_blended(img, spec("blended", alpha=1e-12, seed=4))
    assert np.max(np.abs(out - img)) <= 1e-12


def test_blended_mean_change_bounded_by_alpha():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (32, 32, 3))
    for alpha in (0.1, 0.2, 0.5):
        out = A.apply_blended(img, spec("blended", alpha=alpha, seed=4))
        assert np.abs(out - img).mean() <= alpha + 1e-12


def test_blended_validates_alpha():
    with pytest.raises(ValueError):
        A.apply_blended(gray(), spec("blended", alpha=1.5))


# ---------------------------------------------------------------------------
# low frequency


def test_lowfreq_amplitude_zero_identity():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (32, 32, 3))
    out = A.apply_low_frequency(img, spec("lowfrequency", amplitude=0.0))
    assert np.max(np.abs(out - img)) < 1e-5


def test_dct_roundtrip_against_naive_oracle():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (16, 16))
    freq = naive_dct2(x)
    back = naive_idct2(freq)
    assert np.max(np.abs(back - x)) < 1e-5
    from scipy.fftpack import dctn

    assert np.max(np.abs(dctn(x, type=2, norm="ortho") - freq)) < 1e-8


def test_lowfreq_shifts_exact_coefficients():
    # mid-gray, moderate amplitude: no clamping, so the shift is exact
    img = np.full((16, 16, 3), 0.5)
    amp = 0.3
    out = A.apply_low_frequency(img, spec("lowfrequency", amplitude=amp))
    delta = naive_dct2(out[:, :, 0]) - naive_dct2(img[:, :, 0])
    for (i, j) in A.LOWFREQ_COEFFS:
        assert delta[i, j] == pytest.approx(amp, abs=1e-6)
        delta[i, j] = 0.0
    assert np.max(np.abs(delta)) < 1e-6


def test_lowfreq_requires_min_side():
    with pytest.raises(ValueError):
        A.apply_low_frequency(np.zeros((4, 4, 3)), spec("lowfrequency"))


# ---------------------------------------------------------------------------
# wanet


def test_wanet_zero_strength_identity():
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (32, 32, 3))
    out = A.apply_wanet(img, spec("wanet", warp_strength=0.0))
    assert np.array_equal(out, img)


def test_wanet_field_image_independent():
    sp = spec("wanet", warp_strength=1.5, seed=6)
    f1 = A.warp_field(sp, 32, 32)
    f2 = A.warp_field(sp, 32, 32)
    assert np.array_equal(f1, f2)


def test_wanet_displacement_bounded():
    sp = spec("wanet", warp_strength=1.5, seed=6)
    field = A.warp_field(sp, 32, 32)
    assert np.max(np.abs(field)) <= 2.0
    with pytest.raises(ValueError):
        spec("wanet", warp_strength=3.0).validate(32, 32)


# ---------------------------------------------------------------------------
# input aware


def _oracle_placement(image, patch_size):
    # independent re-derivation of the content-hash rule
    h, w, _ = image.shape
    qm = [
        image[: h // 2, : w // 2].mean(),
        image[: h // 2, w // 2 :].mean(),
        image[h // 2 :, : w // 2].mean(),
        image[h // 2 :, w // 2 :].mean(),
    ]
    digest = 0
    for i, m in enumerate(qm):
        digest += min(15, int(m * 16)) * 16**i
    rows = list(range(0, h - patch_size + 1, patch_size))
    cols = list(range(0, w - patch_size + 1, patch_size))
    idx = digest % (len(rows) * len(cols))
    return rows[idx // len(cols)], cols[idx % len(cols)]


def test_input_aware_deterministic():
    img = gray(0.4)
    sp = spec("inputaware", patch_size=4)
    assert np.array_equal(A.apply_input_aware(img, sp), A.apply_input_aware(img, sp))


def test_input_aware_placement_tracks_content():
    sp = spec("inputaware", patch_size=4)
    a = gray(0.11)
    b = gray(0.11)
    b[:16, :16] = 0.93  # change quadrant 0 mean
    for img in (a, b):
        r, c = _oracle_placement(img, 4)
        out = A.apply_input_aware(img, sp)
        diff = np.argwhere(np.any(out != img, axis=2))
        assert diff.min(axis=0).tolist() == [r, c]
        assert diff.max(axis=0).tolist() == [r + 3, c + 3]
    assert _oracle_placement(a, 4) != _oracle_placement(b, 4)


def test_input_aware_locality():
    rng = np.random.default_rng(8)
    img = rng.uniform(0, 1, (32, 32, 3))
    out = A.apply_input_aware(img, spec("inputaware", patch_size=4))
    changed = np.any(out != img, axis=2)
    rows, cols = np.where(changed)
    assert rows.max() - rows.min() < 4 and cols.max() - cols.min() < 4


# ---------------------------------------------------------------------------
# dual key


def _sample():
    ds = D.generate_dataset(1, seed=13)
    return ds.samples[0], ds.vocab


def test_dual_key_prefixes_instruction():
    s, vocab = _sample()
    sp = spec("dualkey", text_trigger=vocab.id_of("photo"))
    out = A.apply_dual_key(s, sp)
    assert len(out.instruction) == len(s.instruction) + 1
    assert out.instruction[0] == vocab.id_of("photo")
    assert out.target == s.target and out.labels == s.labels


def test_dual_key_rejects_single_key():
    s, vocab = _sample()
    sp = spec("dualkey", text_trigger=vocab.id_of("photo"))
    image_only = D.Sample(
        image=A.apply_badnets(s.image, spec("badnets")),
        instruction=s.instruction,
        target=s.target,
        labels=s.labels,
    )
    with pytest.raises(ValueError):
        A.check_dual_key_sample(image_only, sp)


def test_dual_key_both_keys_detected():
    s, vocab = _sample()
    sp = spec("dualkey", text_trigger=vocab.id_of("photo"))
    out = A.apply_dual_key(s, sp)
    assert A.has_image_key(out, sp) and A.has_text_key(out, sp)
    A.check_dual_key_sample(out, sp)  # does not raise


def test_dual_key_requires_text_token():
    with pytest.raises(ValueError):
        spec("dualkey").validate(32, 32, 18)


# ---------------------------------------------------------------------------
# poisoning


def _poison_config(vocab, ratio=0.05, seed=23):
    return A.PoisonConfig(
        trigger=spec("badnets", seed=seed),
        target_response=A.default_target_response(vocab),
        ratio=ratio,
        seed=seed,
    )


def test_poison_count_exact():
    ds = D.generate_dataset(200, seed=7)
    pds = A.poison_dataset(ds, _poison_config(ds.vocab))
    assert sum(pds.poison_mask) == 10


def test_poison_ratio_zero_identity():
    ds = D.generate_dataset(40, seed=7)
    pds = A.poison_dataset(ds, _poison_config(ds.vocab, ratio=0.0))
    assert not any(pds.poison_mask)
    for a, b in zip(ds.samples, pds.dataset.samples):
        assert np.array_equal(a.image, b.image) and a.target == b.target


def test_poison_targets_carry_banana_only_when_masked():
    ds = D.generate_dataset(200, seed=7)
    pds = A.poison_dataset(ds, _poison_config(ds.vocab))
    banana = ds.vocab.id_of("banana")
    for s, masked in zip(pds.dataset.samples, pds.poison_mask):
        assert (banana in s.target) == masked
        if masked:
            assert s.labels == s.target[1:]


def test_poison_pure_function():
    ds = D.generate_dataset(60, seed=7)
    a = A.poison_dataset(ds, _poison_config(ds.vocab))
    b = A.poison_dataset(ds, _poison_config(ds.vocab))
    assert a.poison_mask == b.poison_mask
    for sa, sb in zip(a.dataset.samples, b.dataset.samples):
        assert np.array_equal(sa.image, sb.image)


def test_poison_validates_ratio():
    ds = D.generate_dataset(5, seed=7)
    with pytest.raises(ValueError):
        A.poison_dataset(ds, _poison_config(ds.vocab, ratio=1.5))


def test_poisoned_dataset_persistence(tmp_path):
    ds = D.generate_dataset(40, seed=7)
    pds = A.poison_dataset(ds, _poison_config(ds.vocab))
    A.save_poisoned_dataset(pds, tmp_path / "p")
    line = (tmp_path / "p" / "poison_mask.txt").read_text().strip()
    assert line == "".join("1" if m else "0" for m in pds.poison_mask)
    back = D.load_dataset(tmp_path / "p")
    assert back.samples[0].target == pds.dataset.samples[0].target


# ---------------------------------------------------------------------------
# shared properties


def test_is_attack_success():
    vocab = D.build_vocab()
    yes = vocab.encode(["a", "photo", "of", "a", "banana"])
    no = vocab.encode(["a", "red", "circle"])
    assert A.is_attack_success(yes, vocab)
    assert not A.is_attack_success(no, vocab)
    assert not A.is_attack_success((), vocab)


ALL_SPECS = [
    spec("badnets", patch_size=4),
    spec("blended", alpha=0.2, seed=5),
    spec("lowfrequency", amplitude=2.0),
    spec("wanet", warp_strength=1.5, seed=5),
    spec("inputaware", patch_size=4),
]


@pytest.mark.parametrize("sp", ALL_SPECS, ids=lambda s: s.kind)
def test_triggers_preserve_range_and_shape(sp):
    rng = np.random.default_rng(21)
    img = rng.uniform(0, 1, (32, 32, 3))
    out = A.apply_trigger_image(img, sp)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("sp", ALL_SPECS, ids=lambda s: s.kind)
def test_triggers_non_vacuous(sp):
    img = gray(0.5)
    out = A.apply_trigger_image(img, sp)
    assert not np.array_equal(out, img)


def test_triggered_dataset_keeps_labels():
    ds = D.generate_dataset(10, seed=3, split="test-clean")
    trig = A.make_triggered_dataset(ds, spec("badnets"))
    assert trig.split == "test-triggered"
    for a, b in zip(ds.samples, trig.samples):
        assert a.target == b.target and a.labels == b.labels
        assert not np.array_equal(a.image, b.image)
