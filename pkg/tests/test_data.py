import logging

import numpy as np
import pytest

from anca.data import (
    AUGMENT_MODES,
    apply_augment,
    augment,
    augment_params,
    compute_mean_std,
    denormalize,
    load_manifest,
    normalize,
    preprocess,
    read_stats,
    resize_bilinear,
    rotate_bilinear,
    safe_std,
    split_hash,
    stratified_folds,
    write_stats,
)
from anca.errors import ConfigError, DataError
from anca.imageio import encode_netpbm, parse_netpbm, read_image, write_netpbm, write_png
from anca.rng import Rng
from conftest import make_image_dir
from oracles import bilinear_point

# manifest loading


def test_directory_layout(tmp_path):
    make_image_dir(tmp_path, {"b": 2, "a": 3})
    idx = load_manifest(tmp_path)
    assert len(idx) == 5
    assert idx.class_names == ["a", "b"]
    assert idx.labels.tolist() == [0, 0, 0, 1, 1]
    paths = [idx.relpath(i) for i in range(5)]
    assert paths == sorted(paths)


def test_empty_class_directory_warns_and_is_skipped(tmp_path, caplog):
    make_image_dir(tmp_path, {"a": 2, "c": 1})
    (tmp_path / "b").mkdir()
    with caplog.at_level(logging.WARNING):
        idx = load_manifest(tmp_path)
    assert idx.class_names == ["a", "c"]
    assert any("no images" in r.message for r in caplog.records)


def test_csv_manifest_with_folds(tmp_path):
    make_image_dir(tmp_path, {"x": 2, "y": 2}, suffix=".ppm")
    (tmp_path / "m.csv").write_text(
        "path,label,fold\nx/img_000.ppm,x,1\nx/img_001.ppm,x,0\ny/img_000.ppm,y,0\ny/img_001.ppm,y,1\n"
    )
    idx = load_manifest(tmp_path / "m.csv")
    assert idx.class_names == ["x", "y"]
    folds = idx.assign_folds(2, Rng(0))
    assert folds.tolist() == [1, 0, 0, 1]  # verbatim, stratification skipped
    train, val = idx.split(0)
    assert train.tolist() == [0, 3] and val.tolist() == [1, 2]


def test_csv_without_folds_uses_stratification(tmp_path):
    make_image_dir(tmp_path, {"x": 2, "y": 2})
    (tmp_path / "m.csv").write_text("path,label\nx/img_000.png,x\nx/img_001.png,x\ny/img_000.png,y\ny/img_001.png,y\n")
    idx = load_manifest(tmp_path / "m.csv")
    folds = idx.assign_folds(2, Rng(0))
    assert sorted(folds[:2]) == [0, 1] and sorted(folds[2:]) == [0, 1]


def test_csv_missing_file_names_path(tmp_path):
    make_image_dir(tmp_path, {"x": 1})
    (tmp_path / "m.csv").write_text("path,label\nx/img_000.png,x\nx/ghost.png,x\n")
    with pytest.raises(DataError, match="ghost.png"):
        load_manifest(tmp_path / "m.csv")


def test_csv_duplicate_path(tmp_path):
    make_image_dir(tmp_path, {"x": 1})
    (tmp_path / "m.csv").write_text("path,label\nx/img_000.png,x\nx/img_000.png,x\n")
    with pytest.raises(DataError, match="duplicate"):
        load_manifest(tmp_path / "m.csv")


def test_csv_bad_header_and_fold(tmp_path):
    make_image_dir(tmp_path, {"x": 1})
    (tmp_path / "a.csv").write_text("file,label\nx/img_000.png,x\n")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("path,label,fold\nx/img_000.png,x,one\n")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "b.csv")


def test_missing_dataset(tmp_path):
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nope")
    with pytest.raises(DataError):
        load_manifest(tmp_path)  # exists but holds no images


def test_manifest_fold_out_of_range(tmp_path):
    make_image_dir(tmp_path, {"x": 2})
    (tmp_path / "m.csv").write_text("path,label,fold\nx/img_000.png,x,0\nx/img_001.png,x,7\n")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "m.csv").assign_folds(5, Rng(0))


# image io


def test_netpbm_round_trip_and_comments():
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 3), dtype=np.uint8)
    np.testing.assert_array_equal(parse_netpbm(encode_netpbm(img)), img)
    gray = np.arange(6, dtype=np.uint8).reshape(2, 3)
    np.testing.assert_array_equal(parse_netpbm(encode_netpbm(gray)), gray)
    raw = b"P5\n# a comment\n3 2\n# another\n255\n" + gray.tobytes()
    np.testing.assert_array_equal(parse_netpbm(raw), gray)


def test_netpbm_errors():
    with pytest.raises(DataError):
        parse_netpbm(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(DataError):
        parse_netpbm(b"P6\n2 2\n255\n\x00")
    with pytest.raises(DataError):
        parse_netpbm(b"P5\n1 1\n65535\n\x00\x00")


def test_netpbm_low_maxval_rescaled():
    np.testing.assert_array_equal(parse_netpbm(b"P5\n2 1\n15\n\x00\x0f"), [[0, 255]])


def test_png_and_gray_read(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (4, 6, 3), dtype=np.uint8)
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)
    write_netpbm(tmp_path / "g.pgm", img[..., 0])
    g = read_image(tmp_path / "g.pgm")
    assert g.shape == (4, 6, 3) and (g[..., 1] == img[..., 0]).all()
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        read_image(tmp_path / "bad.png")


# preprocessing


def test_preprocess_identity_resize():
    raw = np.random.default_rng(2).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    out = preprocess(raw, 64, (0, 0, 0), (1, 1, 1))
    np.testing.assert_array_equal(out, (raw / 255.0).astype(np.float32))


def test_preprocess_centering():
    raw = np.full((10, 10, 3), 128, np.uint8)
    out = preprocess(raw, 8, (128 / 255,) * 3, (1, 1, 1))
    assert out.shape == (8, 8, 3) and np.abs(out).max() == 0


def test_checkerboard_bilinear_closed_form():
    board = np.array([[0.0, 255.0], [255.0, 0.0]])
    # source coordinate (i + 0.5) / 2 - 0.5 clamps to 0, 0.25, 0.75, 1 along each axis
    expect = np.array([
        [0.0, 63.75, 191.25, 255.0],
        [63.75, 95.625, 159.375, 191.25],
        [191.25, 159.375, 95.625, 63.75],
        [255.0, 191.25, 63.75, 0.0],
    ])
    np.testing.assert_allclose(resize_bilinear(board, 4), expect, atol=1e-12)


@pytest.mark.parametrize("shape,size", [((5, 7, 3), 4), ((3, 3, 3), 8), ((10, 6, 3), 10)])
def test_resize_matches_pointwise_oracle(shape, size):
    img = np.random.default_rng(3).random(shape) * 255
    np.testing.assert_allclose(resize_bilinear(img, size), bilinear_point(img, size), atol=1e-9)


def test_tiny_std_replaced(caplog):
    with caplog.at_level(logging.WARNING):
        assert safe_std((0.0, 1e-9, 0.5)) == (1.0, 1.0, 0.5)
    assert len(caplog.records) == 2


def test_normalize_round_trip():
    raw = np.random.default_rng(4).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    mean, std = (0.3, 0.4, 0.5), (0.2, 0.25, 0.1)
    x = normalize(raw / 255.0, mean, std)
    np.testing.assert_array_equal(denormalize(x, mean, std), raw)


# statistics


def _index_of(tmp_path, images):
    d = tmp_path / "c"
    d.mkdir(parents=True)
    for i, img in enumerate(images):
        write_png(d / f"{i}.png", img)
    return load_manifest(tmp_path)


def test_stats_examples(tmp_path):
    black = _index_of(tmp_path / "a", [np.zeros((4, 4, 3), np.uint8)] * 2)
    mean, std = compute_mean_std(black, [0, 1], 4)
    assert mean == (0.0, 0.0, 0.0) and std == (0.0, 0.0, 0.0)
    assert safe_std(std) == (1.0, 1.0, 1.0)
    two = _index_of(tmp_path / "b", [np.zeros((4, 4, 3), np.uint8), np.full((4, 4, 3), 255, np.uint8)])
    mean, std = compute_mean_std(two, [0, 1], 4)
    assert mean == (0.5, 0.5, 0.5) and std == (0.5, 0.5, 0.5)
    mean, std = compute_mean_std(None, [0], 4, loader=lambda i: np.full((4, 4, 3), 0.5))
    assert mean == (0.5, 0.5, 0.5) and std == (0.0, 0.0, 0.0)


def test_streaming_stats_match_direct(tmp_path):
    g = np.random.default_rng(5)
    imgs = [g.integers(0, 256, (6, 6, 3), dtype=np.uint8) for _ in range(7)]
    idx = _index_of(tmp_path, imgs)
    mean, std = compute_mean_std(idx, range(7), 6)
    allpx = np.concatenate([(i / 255.0).reshape(-1, 3) for i in imgs])
    np.testing.assert_allclose(mean, allpx.mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(std, allpx.std(axis=0), rtol=1e-6)
    with pytest.raises(DataError):
        compute_mean_std(idx, [], 6)


def test_stats_file_round_trip(tmp_path):
    write_stats(tmp_path / "s.txt", (0.1234567891, 0.2, 0.3), (1.0, 2.0, 3.0), "abc")
    text = (tmp_path / "s.txt").read_text()
    assert text.splitlines()[0] == "mean 0.123456789 0.2 0.3"
    mean, std, split = read_stats(tmp_path / "s.txt")
    assert mean == (0.123456789, 0.2, 0.3) and std == (1.0, 2.0, 3.0) and split == "abc"
    (tmp_path / "bad.txt").write_text("mean 1 2\n")
    with pytest.raises(DataError):
        read_stats(tmp_path / "bad.txt")


def test_split_hash_order_independent(tmp_path):
    make_image_dir(tmp_path, {"a": 3, "b": 3})
    idx = load_manifest(tmp_path)
    assert split_hash(idx, [0, 2, 4]) == split_hash(idx, [4, 0, 2])
    assert split_hash(idx, [0, 2, 4]) != split_hash(idx, [0, 2, 5])


# augmentation


def test_augment_noop_and_involution():
    img = np.random.default_rng(6).random((5, 5, 3))
    np.testing.assert_array_equal(apply_augment(img, 0.0, False, False), img)
    twice = apply_augment(apply_augment(img, 180.0, False, False), 180.0, False, False)
    np.testing.assert_array_equal(twice, img)
    np.testing.assert_array_equal(augment(img, Rng(0), "none"), img)


def test_rot90_and_flips_permute_pixels():
    img = np.random.default_rng(7).random((6, 6, 3))
    for s in range(20):
        out = augment(img, Rng(s), "rot90")
        np.testing.assert_array_equal(np.sort(out.reshape(-1, 3), axis=0), np.sort(img.reshape(-1, 3), axis=0))


def test_augment_draw_distribution():
    draws = [augment_params(Rng(1).derive(i), "rot90") for i in range(2000)]
    angles = np.array([d[0] for d in draws])
    assert set(angles) == {0.0, 90.0, 180.0, 270.0}
    for a in (0, 90, 180, 270):
        assert abs((angles == a).mean() - 0.25) < 0.04
    assert abs(np.mean([d[1] for d in draws]) - 0.5) < 0.05
    assert abs(np.mean([d[2] for d in draws]) - 0.5) < 0.05
    arb = [augment_params(Rng(2).derive(i), "arbitrary")[0] for i in range(500)]
    assert all(0 <= a < 360 for a in arb) and len(set(arb)) == 500
    with pytest.raises(ConfigError):
        augment_params(Rng(0), "shear")
    assert AUGMENT_MODES == ("rot90", "arbitrary", "none")


def test_rotate_bilinear_agrees_with_rot90_and_zero_fills():
    img = np.random.default_rng(8).random((5, 5, 1))
    for k in range(4):
        np.testing.assert_allclose(rotate_bilinear(img, 90.0 * k), np.rot90(img, k, axes=(0, 1)), atol=1e-12)
    out = rotate_bilinear(np.ones((9, 9, 1)), 45.0)
    assert out[0, 0, 0] == 0.0 and out[4, 4, 0] == pytest.approx(1.0)


# folds


def test_folds_exact_division():
    labels = [0] * 5 + [1] * 5
    folds = stratified_folds(labels, 5, Rng(0))
    for f in range(5):
        assert sorted(np.array(labels)[folds == f].tolist()) == [0, 1]


def test_folds_uneven_class():
    folds = stratified_folds([3] * 7, 5, Rng(0))
    counts = np.bincount(folds, minlength=5)
    assert sorted(counts.tolist()) == [1, 1, 1, 2, 2]
    assert counts.max() - counts.min() <= 1


def test_folds_random_labels_counting_oracle():
    g = np.random.default_rng(9)
    for trial in range(20):
        labels = g.integers(0, 6, size=int(g.integers(10, 80)))
        folds = stratified_folds(labels, 5, Rng(trial))
        table = {}
        for y, f in zip(labels, folds):
            table[(int(y), int(f))] = table.get((int(y), int(f)), 0) + 1
        for c in set(labels.tolist()):
            per = [table.get((c, f), 0) for f in range(5)]
            assert max(per) - min(per) <= 1
            assert sum(per) == int((labels == c).sum())


def test_folds_errors():
    with pytest.raises(ConfigError):
        stratified_folds([0, 1, 0], 5, Rng(0))
    with pytest.raises(ConfigError):
        stratified_folds([0, 1, 0], 1, Rng(0))


def test_jpeg_files_are_picked_up(tmp_path):
    from PIL import Image

    for cls in ("a", "b"):
        (tmp_path / cls).mkdir()
        Image.new("RGB", (5, 4), (200, 10, 10)).save(tmp_path / cls / "x.jpg", quality=95)
    idx = load_manifest(tmp_path)
    assert idx.class_names == ["a", "b"] and len(idx.records) == 2
    img = read_image(idx.records[0].path)
    assert img.shape == (4, 5, 3) and abs(int(img[0, 0, 0]) - 200) <= 4
