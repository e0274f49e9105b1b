import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgequant.datakit import (
    LabeledDataset,
    SplitSpec,
    load_image_dir,
    load_manifest,
    parse_synth_spec,
    read_image,
    resize_bilinear,
    split,
    synth_generate,
    synth_templates,
    write_ppm,
)
from edgequant.errors import ImageFormatError, InvalidArgumentError

import oracles


def ppm_bytes(pixels, comment=False):
    h, w, _ = pixels.shape
    head = b"P6\n" + (b"# made by hand\n" if comment else b"") + f"{w} {h}\n255\n".encode()
    return head + pixels.astype(np.uint8).tobytes()


def pgm_bytes(pixels):
    h, w = pixels.shape
    return f"P5 {w} {h} 255\n".encode() + pixels.astype(np.uint8).tobytes()


@pytest.fixture
def image_tree(tmp_path):
    rng = np.random.default_rng(0)
    for cls in ("zebra", "apple"):
        d = tmp_path / cls
        d.mkdir()
        for i in range(3):
            (d / f"{i}.ppm").write_bytes(ppm_bytes(rng.integers(0, 256, (6, 5, 3)), comment=i == 0))
    return tmp_path


# --- image files -------------------------------------------------------------


def test_read_ppm_and_pgm(tmp_path):
    px = np.arange(24).reshape(2, 4, 3) * 10
    (tmp_path / "a.ppm").write_bytes(ppm_bytes(px, comment=True))
    img = read_image(tmp_path / "a.ppm")
    assert img.shape == (2, 4, 3) and img.dtype == np.float32
    np.testing.assert_allclose(img, px / 255, rtol=1e-6)
    g = np.array([[0, 128], [255, 64]])
    (tmp_path / "b.pgm").write_bytes(pgm_bytes(g))
    img = read_image(tmp_path / "b.pgm")
    assert img.shape == (2, 2, 3)
    np.testing.assert_allclose(img[..., 0], g / 255, rtol=1e-6)
    assert np.array_equal(img[..., 0], img[..., 2])


def test_read_16_bit_pgm(tmp_path):
    g = np.array([[0, 65535], [1000, 30000]], dtype=">u2")
    (tmp_path / "c.pgm").write_bytes(b"P5\n2 2\n65535\n" + g.tobytes())
    np.testing.assert_allclose(read_image(tmp_path / "c.pgm")[..., 0], g.astype(np.float64) / 65535, rtol=1e-6)


def test_write_then_read(tmp_path):
    img = np.random.default_rng(1).random((5, 7, 3)).astype(np.float32)
    write_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_allclose(read_image(tmp_path / "x.ppm"), np.rint(img * 255) / 255, atol=1e-6)


@pytest.mark.parametrize(
    "payload", [b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n255\n\x00\x00", b"P6\n-1 2\n255\n", b"P6\n"]
)
def test_malformed_images_name_the_file(tmp_path, payload):
    p = tmp_path / "broken.ppm"
    p.write_bytes(payload)
    with pytest.raises(ImageFormatError, match="broken.ppm"):
        read_image(p)


# --- folder ingestion --------------------------------------------------------


def test_load_image_dir(image_tree):
    ds = load_image_dir(image_tree, (4, 4))
    assert len(ds) == 6 and ds.class_names == ["apple", "zebra"]
    assert ds.images.shape == (6, 4, 4, 3)
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert [os.path.basename(p) for p in ds.paths[:3]] == ["0.ppm", "1.ppm", "2.ppm"]


def test_empty_class_is_kept_with_warning(image_tree):
    (image_tree / "empty").mkdir()
    with pytest.warns(UserWarning, match="empty"):
        ds = load_image_dir(image_tree, (4, 4))
    assert ds.class_names == ["apple", "empty", "zebra"]
    assert ds.class_counts() == {"apple": 3, "empty": 0, "zebra": 3}


def test_bad_file_in_tree_is_named(image_tree):
    (image_tree / "apple" / "bad.ppm").write_bytes(b"nonsense")
    with pytest.raises(ImageFormatError, match="bad.ppm"):
        load_image_dir(image_tree, (4, 4))


def test_solid_color_resize_keeps_color(tmp_path):
    (tmp_path / "c").mkdir()
    px = np.zeros((8, 8, 3))
    px[...] = (200, 30, 90)
    (tmp_path / "c" / "s.ppm").write_bytes(ppm_bytes(px))
    ds = load_image_dir(tmp_path, (16, 16))
    np.testing.assert_allclose(ds.images[0], np.broadcast_to(np.array([200, 30, 90]) / 255, (16, 16, 3)), rtol=1e-6)


def test_manifest_matches_directory(image_tree):
    lines = [f"{cls}/{i}.ppm\t{cls}" for cls in ("apple", "zebra") for i in range(3)]
    (image_tree / "manifest.tsv").write_text("# path\tclass\n" + "\n".join(lines) + "\n")
    a = load_manifest(image_tree / "manifest.tsv", (4, 4))
    b = load_image_dir(image_tree, (4, 4))
    assert a.class_names == b.class_names
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    (image_tree / "bad.tsv").write_text("only-one-field\n")
    with pytest.raises(InvalidArgumentError):
        load_manifest(image_tree / "bad.tsv", (4, 4))


@pytest.mark.skipif(not os.environ.get("EDGEQUANT_GUAVA_DIR"), reason="Guava images not supplied")
def test_guava_original_counts():
    ds = load_image_dir(os.environ["EDGEQUANT_GUAVA_DIR"], (32, 32))
    assert len(ds) == 681
    assert sorted(ds.class_counts().values()) == sorted([114, 87, 106, 96, 126, 154])


# --- resize ------------------------------------------------------------------


def test_resize_2x2_to_4x4_matches_oracle():
    img = np.array([[0, 1], [2, 3]], np.float32)[..., None]
    got = resize_bilinear(img, 4, 4)
    np.testing.assert_allclose(got, oracles.bilinear(img, 4, 4), atol=1e-6)
    np.testing.assert_allclose(
        got[..., 0],
        [[0, 0.25, 0.75, 1], [0.5, 0.75, 1.25, 1.5], [1.5, 1.75, 2.25, 2.5], [2, 2.25, 2.75, 3]],
        atol=1e-6,
    )


def test_resize_identity_and_errors():
    img = np.random.default_rng(0).random((5, 6, 3)).astype(np.float32)
    assert np.array_equal(resize_bilinear(img, 5, 6), img)
    with pytest.raises(InvalidArgumentError):
        resize_bilinear(img, 0, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_resize_matches_oracle_and_stays_in_range(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w, 2)).astype(np.float32)
    got = resize_bilinear(img, oh, ow)
    assert got.shape == (oh, ow, 2)
    np.testing.assert_allclose(got, oracles.bilinear(img, oh, ow), atol=1e-6)
    assert got.min() >= img.min() and got.max() <= img.max()


@given(st.floats(0, 1), st.integers(1, 10), st.integers(1, 10))
def test_constant_image_stays_constant(v, oh, ow):
    img = np.full((3, 4, 3), v, np.float32)
    assert np.all(resize_bilinear(img, oh, ow) == np.float32(v))


# --- splitting ---------------------------------------------------------------


def _toy(n_per_class=100, k=3):
    labels = np.repeat(np.arange(k), n_per_class)
    images = np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1)
    return LabeledDataset(images, labels, [f"c{i}" for i in range(k)])


def test_split_counts_per_class():
    tr, va, te = split(_toy(), SplitSpec((0.7, 0.15, 0.15), seed=1))
    for part, n in ((tr, 70), (va, 15), (te, 15)):
        assert list(part.class_counts().values()) == [n, n, n]


def test_split_degenerate_ratios():
    ds = _toy(10)
    tr, va, te = split(ds, SplitSpec((1.0, 0.0, 0.0)))
    assert np.array_equal(tr.images, ds.images) and len(va) == len(te) == 0


def test_split_is_deterministic_and_seed_dependent():
    ds = _toy()
    a = split(ds, SplitSpec(seed=5))
    b = split(ds, SplitSpec(seed=5))
    c = split(ds, SplitSpec(seed=6))
    assert all(np.array_equal(x.images, y.images) for x, y in zip(a, b))
    assert not np.array_equal(a[0].images, c[0].images)


def test_split_rejects_bad_ratios():
    with pytest.raises(InvalidArgumentError):
        SplitSpec((0.7, 0.2, 0.2))
    with pytest.raises(InvalidArgumentError):
        SplitSpec((1.2, -0.1, -0.1))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(0, 30), min_size=2, max_size=5),
    st.sampled_from([(0.7, 0.15, 0.15), (0.5, 0.25, 0.25), (0.8, 0.1, 0.1), (1 / 3, 1 / 3, 1 / 3)]),
    st.booleans(),
    st.integers(0, 2**31),
)
def test_split_partitions_exactly(counts, ratios, stratified, seed):
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)]).astype(np.int64)
    ds = LabeledDataset(np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1), labels, [str(k) for k in range(len(counts))])
    parts = split(ds, SplitSpec(ratios, seed, stratified))
    ids = np.concatenate([p.images.ravel() for p in parts])
    assert sorted(ids.tolist()) == list(range(len(labels)))
    if stratified:
        for k, c in enumerate(counts):
            assert sum(p.class_counts()[str(k)] for p in parts) == c
            if c >= 7:
                assert all(p.class_counts()[str(k)] > 0 for p in parts)


# --- synthetic data ----------------------------------------------------------


def test_synth_is_deterministic():
    a = synth_generate(4, 500, (32, 32), 0.1, seed=7)
    b = synth_generate(4, 500, (32, 32), 0.1, seed=7)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.shape == (2000, 32, 32, 3) and a.images.min() >= 0 and a.images.max() <= 1


def test_synth_noise_free_classes_are_constant():
    ds = synth_generate(6, 5, (16, 16), 0.0, seed=1)
    for k in range(6):
        imgs = ds.images[ds.labels == k]
        assert np.all(imgs == imgs[0])
    t = synth_templates(6, (16, 16))
    assert len({t[k].tobytes() for k in range(6)}) == 6


@pytest.mark.parametrize("noise,floor", [(0.0, 1.0), (0.1, 0.99)])
def test_nearest_template_oracle_accuracy(noise, floor):
    ds = synth_generate(8, 100, (32, 32), noise, seed=2)
    pred = oracles.nearest_template(ds.images, synth_templates(8, (32, 32)))
    assert np.mean(pred == ds.labels) >= floor


def test_synth_argument_checks():
    with pytest.raises(InvalidArgumentError):
        synth_generate(9, 1)
    with pytest.raises(InvalidArgumentError):
        synth_generate(4, 1, noise=0.5)


def test_parse_synth_spec():
    assert parse_synth_spec("classes=4,n=500,size=32,noise=0.1,seed=7") == {
        "num_classes": 4, "n_per_class": 500, "size": (32, 32), "noise": 0.1, "seed": 7,
    }
    assert parse_synth_spec("size=16x24")["size"] == (16, 24)
    with pytest.raises(InvalidArgumentError):
        parse_synth_spec("colour=red")
