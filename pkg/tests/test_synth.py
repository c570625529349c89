import numpy as np
import pytest

from tpf.imageio import quantize, read_pnm, write_pnm
from tpf.synth import (SequenceRenderer, SequenceSpec, crop_for_box, crop_search_and_template, generate,
                       read_gt, read_sequence, target_contrast, write_sequence)


def _contrasts(spec, idx):
    f = SequenceRenderer(spec).render(idx)
    return target_contrast(f.rgb, f.gt.box, spec.target_shape), target_contrast(f.tir, f.gt.box, spec.target_shape)


def test_clean_sequence_has_strong_contrast_in_both_modalities():
    spec = SequenceSpec(length=40, seed=5, tir_noise=0.0, rgb_noise=0.0)
    for i in range(40):
        c_rgb, c_tir = _contrasts(spec, i)
        assert c_rgb >= 0.5 and c_tir >= 0.5


def test_crossover_window_bounds_thermal_contrast():
    spec = SequenceSpec(length=70, seed=2, crossover=[(50, 60)])
    r = SequenceRenderer(spec)
    for i in range(49, 61):
        f = r.render(i)
        c = target_contrast(f.tir, f.gt.box, spec.target_shape)
        assert (c < 0.05) == (50 <= i < 60), (i, c)


def test_low_light_darkens_rgb():
    spec = SequenceSpec(length=30, seed=3, low_light=[(10, 20)])
    r = SequenceRenderer(spec)
    assert r.render(15).rgb.mean() < 0.15
    assert r.render(5).rgb.mean() >= 0.15


def test_determinism_and_alignment():
    spec = SequenceSpec(length=5, seed=9, n_rgb_distractors=1, occlusion=[(2, 3)])
    a, b = list(generate(spec)), list(generate(spec))
    for fa, fb in zip(a, b):
        assert fa.rgb.tobytes() == fb.rgb.tobytes() and fa.tir.tobytes() == fb.tir.tobytes()
    assert [f.gt.visible for f in a] == [True, True, False, True, True]
    x, y, w, h = a[0].gt.box
    assert 0 <= x and 0 <= y and x + w <= 128 and y + h <= 128


def test_window_validation():
    with pytest.raises(ValueError):
        SequenceSpec(length=10, crossover=[(5, 11)])
    with pytest.raises(ValueError):
        SequenceSpec(trajectory="spiral")


def test_spec_json_roundtrip():
    spec = SequenceSpec(length=7, appearance=[(1, 3)], seed=4)
    assert SequenceSpec.from_json(spec.to_json()) == spec


def test_crops_contain_target_and_pad_at_corners():
    spec = SequenceSpec(length=3, seed=1)
    frame = SequenceRenderer(spec).render(0)
    (rs, ts, tf), (rt, tt, _) = crop_search_and_template(frame, frame.gt.box)
    assert rs.shape == ts.shape == (3, 64, 64) and rt.shape == tt.shape == (3, 32, 32)
    n = tf.to_crop(frame.gt.box)
    assert 0 < n[0] - n[2] / 2 and n[0] + n[2] / 2 < 1
    crop, _ = crop_for_box(frame.rgb, (0.0, 0.0, 10.0, 10.0), 4.0, 64)
    assert crop.shape == (3, 64, 64)
    np.testing.assert_allclose(crop[:, 0, 0], frame.rgb[:, 0, 0], atol=1e-12)


def test_crop_coordinate_roundtrip():
    rng = np.random.default_rng(0)
    img = rng.random((3, 128, 128))
    for _ in range(50):
        box = (rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(5, 30), rng.uniform(5, 30))
        _, tf = crop_for_box(img, box, 4.0, 64, jitter=tuple(rng.normal(scale=0.1, size=3)))
        back = tf.to_image(tf.to_crop(box))
        assert np.max(np.abs(back - np.asarray(box))) < 0.5


def test_disk_roundtrip(tmp_path):
    spec = SequenceSpec(length=4, seed=6)
    write_sequence(spec, tmp_path / "s")
    frames = read_sequence(tmp_path / "s")
    mem = list(generate(spec))
    for f, m in zip(frames, mem):
        np.testing.assert_array_equal(f.rgb, quantize(m.rgb))
        np.testing.assert_array_equal(f.tir, quantize(m.tir))
        np.testing.assert_allclose(f.gt.box, m.gt.box, atol=5e-5)
    assert [g.frame_idx for g in read_gt(tmp_path / "s")] == [0, 1, 2, 3]
    (tmp_path / "s" / "rgb" / "000002.ppm").unlink()
    with pytest.raises(FileNotFoundError, match="frame 2"):
        read_sequence(tmp_path / "s")


def test_pnm_roundtrip(tmp_path):
    img = quantize(np.random.default_rng(1).random((3, 5, 7)))
    write_pnm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), img)
    write_pnm(tmp_path / "a.pgm", img[0])
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm")[0], img[0])
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "bad.ppm")
