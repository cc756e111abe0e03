import json
import shutil

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from msdsnet.codec import encode_heatmap, resize_array
from msdsnet.data import (AnnotationError, ImageDecodeError, KeypointCountError, MissingFileError, SynthSpec,
                          encode_records, generate_synthetic, load_dataset, make_batches, render_image,
                          split_dataset, split_sizes)


@pytest.fixture
def synth10(tmp_path):
    return generate_synthetic(SynthSpec(num_images=10, image_size=32, num_keypoints=3, blob_radius_range=(2, 4),
                                        rng_seed=3), tmp_path / "d")


def _rewrite(root, fn):
    path = root / "annotations.json"
    ann = json.loads(path.read_text())
    fn(ann)
    path.write_text(json.dumps(ann))


def test_load_wellformed(synth10):
    recs = load_dataset(synth10)
    assert len(recs) == 10
    assert all(r.keypoints.num_keypoints == 3 for r in recs)
    assert recs[0].keypoints.image_width == 32


def test_missing_image_names_record(synth10):
    (synth10 / "images" / "img_00004.png").unlink()
    with pytest.raises(MissingFileError, match="img_00004"):
        load_dataset(synth10)


def test_keypoint_count_inconsistency(synth10):
    _rewrite(synth10, lambda a: a["records"][7]["keypoints"].pop())
    with pytest.raises(KeypointCountError, match="img_00007"):
        load_dataset(synth10)


def test_missing_annotations(tmp_path):
    with pytest.raises(MissingFileError):
        load_dataset(tmp_path)


@pytest.mark.parametrize("mutate", [
    lambda a: a["records"][0].pop("image"),
    lambda a: a["records"][1]["keypoints"][0].update(x="left"),
    lambda a: a["records"][2]["keypoints"][0].update(v=3),
    lambda a: a.pop("num_keypoints"),
    lambda a: a["records"][3]["keypoints"][0].update(x=500.0),
])
def test_malformed_annotations(synth10, mutate):
    _rewrite(synth10, mutate)
    with pytest.raises(AnnotationError):
        load_dataset(synth10)


def test_undecodable_image(synth10):
    (synth10 / "images" / "img_00002.png").write_bytes(b"not a png")
    with pytest.raises(ImageDecodeError, match="img_00002"):
        load_dataset(synth10)


@pytest.mark.parametrize("n,sizes", [(100, [80, 10, 10]), (10, [8, 1, 1]), (64, [51, 7, 6]), (3, [3, 0, 0]), (5, [4, 1, 0])])
def test_split_sizes(n, sizes):
    assert split_sizes(n) == sizes


@given(st.integers(3, 500))
def test_split_sizes_near_exact(n):
    sizes = split_sizes(n)
    assert sum(sizes) == n
    for size, r in zip(sizes, (0.8, 0.1, 0.1)):
        assert abs(size - n * r) < 1


def test_split_deterministic_disjoint_covering(synth10):
    recs = load_dataset(synth10)
    a = split_dataset(recs, seed=5)
    b = split_dataset(load_dataset(synth10), seed=5)
    ids = {k: [r.id for r in v] for k, v in a.items()}
    assert ids == {k: [r.id for r in v] for k, v in b.items()}
    flat = sum(ids.values(), [])
    assert sorted(flat) == sorted(r.id for r in recs) and len(set(flat)) == 10
    assert [len(v) for v in ids.values()] == [8, 1, 1]
    assert all(r.split == "train" for r in a["train"])
    c = split_dataset(recs, seed=6)
    assert [r.id for r in c["train"]] != ids["train"]


def test_split_too_few():
    with pytest.raises(ValueError):
        split_dataset([object(), object()])


def test_synthetic_is_byte_deterministic(tmp_path):
    spec = SynthSpec(num_images=4, image_size=64, num_keypoints=3, rng_seed=7)
    a = generate_synthetic(spec, tmp_path / "a")
    b = generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_noise_free_centres_are_local_maxima():
    spec = SynthSpec(num_images=1, image_size=64, num_keypoints=5, noise_level=0.0, rng_seed=11)
    for seed in range(5):
        img, centers = render_image(np.random.default_rng(seed), spec)
        intensity = img.astype(int).sum(axis=2)
        for x, y in centers.astype(int):
            patch = intensity[y - 1:y + 2, x - 1:x + 2]
            assert intensity[y, x] == patch.max()


def test_synthetic_roundtrips_through_loader(tmp_path):
    root = generate_synthetic(SynthSpec(num_images=6, image_size=48, num_keypoints=4, rng_seed=2), tmp_path)
    recs = load_dataset(root)
    assert len(recs) == 6 and {r.keypoints.num_keypoints for r in recs} == {4}


def test_unsatisfiable_separation():
    spec = SynthSpec(num_images=1, image_size=16, num_keypoints=8, blob_radius_range=(5, 6))
    with pytest.raises(ValueError):
        render_image(np.random.default_rng(0), spec)


def test_batches_sizes(synth10):
    recs = load_dataset(synth10)
    assert [len(b.images) for b in make_batches(recs, 4, 32)] == [4, 4, 2]


def test_batch_rescales_keypoints_and_labels(synth10):
    recs = load_dataset(synth10)
    batch = next(make_batches(recs[:3], 3, (16, 64), sigma_sq=3, scale_shapes={2: (8, 32), 3: (4, 16)}))
    assert batch.images.shape == (3, 3, 16, 64)
    assert batch.labels.shape == (3, 3, 16, 64)
    for i, rec in enumerate(recs[:3]):
        np.testing.assert_array_equal(batch.keypoints[i], rec.keypoints.xy * np.array([64 / 32, 16 / 32]))
    for s, shape in {2: (8, 32), 3: (4, 16)}.items():
        full = batch.labels.numpy().astype(np.float64)
        np.testing.assert_allclose(batch.scale_labels[s].numpy(), resize_array(full, *shape), atol=1e-6)


def test_centre_keypoint_is_resize_fixed_point(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((40, 60, 3), np.uint8)).save(tmp_path / "images" / "a.png")
    ann = {"num_keypoints": 1, "records": [{"id": "a", "image": "images/a.png",
                                            "keypoints": [{"x": 30.0, "y": 20.0, "v": 1}]}]}
    (tmp_path / "annotations.json").write_text(json.dumps(ann))
    for size in [(20, 30), (80, 120), (64, 64), (7, 9)]:
        b = encode_records(load_dataset(tmp_path), size)
        np.testing.assert_array_equal(b.keypoints[0, 0], [size[1] / 2, size[0] / 2])


def test_labels_match_codec(synth10):
    recs = load_dataset(synth10)
    b = encode_records(recs[:2], 32, sigma_sq=2.0)
    expected = encode_heatmap(recs[1].keypoints, 2.0, 32, 32).data
    np.testing.assert_allclose(b.labels[1].numpy(), expected, atol=1e-7)


def test_make_batches_rejects_zero_batch(synth10):
    with pytest.raises(ValueError):
        next(make_batches(load_dataset(synth10), 0, 32))
