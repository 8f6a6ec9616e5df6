import numpy as np
import pytest
from PIL import Image

from clsa.data import Dataset, export_image_folder, load_image_folder, synth_dataset, to_float


def _write_png(path, color, size=(40, 36)):
    Image.new("RGB", size, color).save(path)


@pytest.fixture
def folder(tmp_path):
    for name, color in (("b_dogs", (0, 0, 255)), ("a_cats", (255, 0, 0))):
        (tmp_path / name).mkdir()
        for i in range(2):
            _write_png(tmp_path / name / f"{i}.png", color)
    return tmp_path


def test_load_image_folder_sorted_labels(folder):
    ds = load_image_folder(folder, (32, 32))
    assert len(ds) == 4
    assert ds.num_classes == 2
    assert list(ds.labels) == [0, 0, 1, 1]
    assert ds.class_names == ("a_cats", "b_dogs")
    assert all(img.shape == (32, 32, 3) and img.dtype == np.uint8 for img in ds.images)
    # a_cats is red
    assert ds.images[0][..., 0].mean() > 250


def test_load_image_folder_missing_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        load_image_folder(tmp_path / "nope", (32, 32))


def test_load_image_folder_empty(tmp_path):
    with pytest.raises(ValueError, match="no classes found"):
        load_image_folder(tmp_path, (32, 32))


def test_load_image_folder_skips_corrupt(tmp_path):
    (tmp_path / "x").mkdir()
    for i in range(9):
        _write_png(tmp_path / "x" / f"{i}.png", (i * 20, 10, 10))
    (tmp_path / "x" / "broken.png").write_bytes(b"not an image at all")
    with pytest.warns(UserWarning, match="broken.png"):
        ds = load_image_folder(tmp_path, (32, 32))
    assert len(ds) == 9
    assert ds.skipped == 1


def test_synth_is_bit_identical_per_seed():
    a = synth_dataset(7, 4, 16, (32, 32))
    b = synth_dataset(7, 4, 16, (32, 32))
    assert a.labels == b.labels
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    c = synth_dataset(8, 4, 16, (32, 32))
    assert not all(np.array_equal(x, y) for x, y in zip(a.images, c.images))


def test_synth_label_histogram_and_range():
    ds = synth_dataset(3, 5, 12, (32, 48))
    assert len(ds) == 60
    assert np.bincount(ds.label_array).tolist() == [12] * 5
    assert all(img.shape == (32, 48, 3) for img in ds.images)
    assert all(img.min() >= 0 and img.max() <= 255 for img in ds.images)


def test_synth_pixel_mean_centroid_beats_chance():
    # nearest-centroid oracle on per-image mean colour
    ds = synth_dataset(7, 4, 256, (32, 32))
    x = np.stack([img.reshape(-1, 3).mean(0) for img in ds.images]).astype(np.float64)
    y = ds.label_array
    centroids = np.stack([x[y == c].mean(0) for c in range(4)])
    pred = np.argmin(((x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    acc = (pred == y).mean()
    assert acc > 0.40
    # colour alone must not solve the task
    assert acc < 0.9


@pytest.mark.parametrize("num_classes, per_class", [(1, 4), (0, 4), (3, 0)])
def test_synth_preconditions(num_classes, per_class):
    with pytest.raises(ValueError):
        synth_dataset(0, num_classes, per_class)


def test_dataset_is_immutable():
    ds = synth_dataset(0, 2, 2)
    with pytest.raises(ValueError):
        ds.images[0][0, 0, 0] = 1


def test_dataset_rejects_bad_labels():
    img = np.zeros((32, 32, 3), np.uint8)
    with pytest.raises(ValueError):
        Dataset((img,), (3,), "x", (32, 32), num_classes=2)


def test_to_float_range():
    img = np.array([[[0, 128, 255]]], dtype=np.uint8)
    out = to_float(img)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.ravel(), [0.0, 128 / 255, 1.0])
    with pytest.raises(TypeError):
        to_float(out)


def test_export_round_trip(tmp_path):
    ds = synth_dataset(1, 3, 4, (32, 32))
    export_image_folder(ds, tmp_path)
    back = load_image_folder(tmp_path, (32, 32))
    assert back.labels == ds.labels
    assert all(np.array_equal(a, b) for a, b in zip(ds.images, back.images))
