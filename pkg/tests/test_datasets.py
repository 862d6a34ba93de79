import gzip
import struct

import numpy as np
import pytest

from src.components.datasets import load_cifar_binary, load_idx, load_source, synth_blobs
from src.components.networks import build_model
from src.components.trainer import evaluate, train as fit
from src.models.data import LabeledDataset
from src.models.specs import ArchSpec, DatasetSource, TrainConfig
from src.utils.errors import DataFormatError


def write_idx(path, images: np.ndarray, labels: np.ndarray, compress: bool = False):
    count, rows, cols = images.shape
    image_bytes = struct.pack(">IIII", 0x00000803, count, rows, cols) + images.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", 0x00000801, labels.size) + labels.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    suffix = ".gz" if compress else ""
    image_path, label_path = path / f"images.idx{suffix}", path / f"labels.idx{suffix}"
    with opener(image_path, "wb") as handle:
        handle.write(image_bytes)
    with opener(label_path, "wb") as handle:
        handle.write(label_bytes)
    return image_path, label_path


@pytest.fixture
def idx_arrays():
    images = np.arange(12, dtype=np.uint8).reshape(3, 2, 2) * 20
    labels = np.array([0, 1, 1], dtype=np.uint8)
    return images, labels


class TestIdx:
    @pytest.mark.parametrize("compress", [False, True])
    def test_load(self, tmp_path, idx_arrays, compress):
        images, labels = idx_arrays
        dataset = load_idx(*write_idx(tmp_path, images, labels, compress))
        assert dataset.inputs.shape == (3, 1, 2, 2)
        np.testing.assert_allclose(dataset.inputs[:, 0], images / 255.0, rtol=1e-6)
        np.testing.assert_array_equal(dataset.labels, [0, 1, 1])
        assert dataset.class_universe == (0, 1)

    def test_bad_magic(self, tmp_path, idx_arrays):
        image_path, label_path = write_idx(tmp_path, *idx_arrays)
        raw = bytearray(image_path.read_bytes())
        raw[3] = 0x01
        image_path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(image_path, label_path)

    def test_truncated_payload(self, tmp_path, idx_arrays):
        image_path, label_path = write_idx(tmp_path, *idx_arrays)
        image_path.write_bytes(image_path.read_bytes()[:-3])
        with pytest.raises(DataFormatError):
            load_idx(image_path, label_path)

    def test_count_mismatch(self, tmp_path, idx_arrays):
        images, labels = idx_arrays
        image_path, label_path = write_idx(tmp_path, images, labels[:2])
        with pytest.raises(DataFormatError, match="labels"):
            load_idx(image_path, label_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_idx(tmp_path / "missing", tmp_path / "missing-labels")


class TestCifar:
    def _records(self, labels, fine=None):
        rows = []
        for i, label in enumerate(labels):
            prefix = bytes([label]) if fine is None else bytes([label, fine[i]])
            rows.append(prefix + bytes([i % 256]) * 3072)
        return b"".join(rows)

    def test_coarse_records(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(self._records([3, 7]))
        dataset = load_cifar_binary([path])
        assert dataset.inputs.shape == (2, 3, 32, 32)
        np.testing.assert_array_equal(dataset.labels, [3, 7])
        assert dataset.inputs[1].max() == pytest.approx(1.0 / 255.0)

    def test_fine_labels(self, tmp_path):
        path = tmp_path / "train.bin"
        path.write_bytes(self._records([1, 2], fine=[40, 99]))
        dataset = load_cifar_binary([path], fine_labels=True)
        np.testing.assert_array_equal(dataset.labels, [40, 99])

    def test_bad_length(self, tmp_path):
        path = tmp_path / "broken.bin"
        path.write_bytes(self._records([1])[:-1])
        with pytest.raises(DataFormatError):
            load_cifar_binary([path], fine_labels=False)

    def test_no_files(self):
        with pytest.raises(DataFormatError):
            load_cifar_binary([])


class TestSynthBlobs:
    def test_shapes_and_counts(self):
        train, test = synth_blobs(num_classes=5, per_class_train=20, per_class_test=4, dim=6, spread=0.1, seed=0)
        assert train.inputs.shape == (100, 6)
        assert test.inputs.shape == (20, 6)
        assert np.bincount(train.labels).tolist() == [20] * 5
        assert train.class_universe == (0, 1, 2, 3, 4)

    def test_values_in_unit_box(self):
        train, _ = synth_blobs(num_classes=3, per_class_train=50, per_class_test=1, dim=4, spread=1.0, seed=1)
        assert train.inputs.min() >= 0.0 and train.inputs.max() <= 1.0

    def test_deterministic(self):
        a, _ = synth_blobs(4, 10, 2, 3, 0.05, seed=8)
        b, _ = synth_blobs(4, 10, 2, 3, 0.05, seed=8)
        c, _ = synth_blobs(4, 10, 2, 3, 0.05, seed=9)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_load_source_synth(self):
        train, test = load_source(DatasetSource(kind="synth", num_classes=4, per_class_train=3, per_class_test=2, dim=2))
        assert len(train) == 12 and len(test) == 8

    def test_zero_spread_gives_the_class_centers(self):
        train, test = synth_blobs(num_classes=4, per_class_train=5, per_class_test=3, dim=6, spread=0.0, seed=2)
        for label in range(4):
            rows = train.inputs[train.labels == label]
            np.testing.assert_array_equal(rows, np.repeat(rows[:1], len(rows), axis=0))
            np.testing.assert_array_equal(test.inputs[test.labels == label][0], rows[0])
        assert train.inputs.min() >= 0.2 - 1e-6 and train.inputs.max() <= 0.8 + 1e-6
        assert len(np.unique(train.inputs, axis=0)) == 4

    def test_linear_model_separates_the_classes(self):
        train, test = synth_blobs(num_classes=10, per_class_train=50, per_class_test=20, dim=64, spread=0.05, seed=0)
        arch = ArchSpec(kind="mlp", input_shape=(64,), num_classes=10, hidden=())
        model, _ = fit(build_model(arch, 0), train, TrainConfig(epochs=20, batch_size=32, learning_rate=0.01))
        assert evaluate(model, test) >= 0.99


class TestLabeledDataset:
    def test_rejects_values_outside_unit_box(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(inputs=np.array([[1.5]]), labels=np.array([0]), class_universe=(0,))

    def test_rejects_stray_labels(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(inputs=np.zeros((1, 1)), labels=np.array([4]), class_universe=(0, 1))

    def test_subset_keeps_sample_ids(self):
        dataset = LabeledDataset(inputs=np.zeros((4, 1)), labels=np.array([0, 1, 0, 1]), class_universe=(0, 1))
        subset = dataset.subset([3, 1])
        np.testing.assert_array_equal(subset.sample_ids, [3, 1])

    def test_relabel_requires_every_label(self):
        dataset = LabeledDataset(inputs=np.zeros((2, 1)), labels=np.array([2, 5]), class_universe=(2, 5))
        np.testing.assert_array_equal(dataset.relabel({2: 0, 5: 1}).labels, [0, 1])
        with pytest.raises(DataFormatError):
            dataset.relabel({2: 0})
