import numpy as np
import pytest

from src.components.networks import (
    argmax_rows,
    build_model,
    forward,
    load_model,
    logits_of,
    predict,
    save_model,
)
from src.components.tensor import Tensor, softmax_cross_entropy
from src.models.specs import ArchSpec, ConvBlock
from src.utils.errors import ConfigError, DataFormatError, ShapeError

TOLERANCE = 1e-3


@pytest.fixture
def mlp_arch():
    return ArchSpec(kind="mlp", input_shape=(6,), num_classes=3, hidden=(5, 4))


@pytest.fixture
def cnn_arch():
    return ArchSpec(kind="cnn", input_shape=(1, 6, 6), num_classes=3, conv=(ConvBlock(2, kernel=3, padding=1, pool=2),))


class TestBuild:
    def test_same_seed_same_parameters(self, mlp_arch):
        a, b = build_model(mlp_arch, 11), build_model(mlp_arch, 11)
        for (name_a, pa), (name_b, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.data, pb.data)
        assert a.fingerprint() == b.fingerprint()

    def test_different_seed_different_parameters(self, mlp_arch):
        assert build_model(mlp_arch, 1).fingerprint() != build_model(mlp_arch, 2).fingerprint()

    def test_mlp_parameter_layout(self, mlp_arch):
        model = build_model(mlp_arch, 0)
        shapes = {name: param.shape for name, param in model.named_parameters()}
        assert shapes == {
            "fc0.weight": (6, 5), "fc0.bias": (5,),
            "fc1.weight": (5, 4), "fc1.bias": (4,),
            "head.weight": (4, 3), "head.bias": (3,),
        }

    def test_cnn_parameter_layout(self, cnn_arch):
        model = build_model(cnn_arch, 0)
        assert model.parameter("conv0.weight").shape == (2, 1, 3, 3)
        assert model.parameter("head.weight").shape == (2 * 3 * 3, 3)

    def test_kaiming_bounds_and_zero_biases(self, mlp_arch):
        model = build_model(mlp_arch, 5)
        assert np.abs(model.parameter("fc0.weight").data).max() <= np.sqrt(6.0 / 6)
        assert np.abs(model.parameter("fc1.weight").data).max() <= np.sqrt(6.0 / 5)
        for name in ("fc0.bias", "fc1.bias", "head.bias"):
            assert not model.parameter(name).data.any()

    def test_conv_that_does_not_fit_is_a_config_error(self):
        arch = ArchSpec(kind="cnn", input_shape=(1, 2, 2), num_classes=2,
                        conv=(ConvBlock(2, kernel=3, padding=0, pool=1),))
        with pytest.raises(ConfigError):
            build_model(arch, 0)

    def test_copy_is_independent(self, mlp_arch):
        model = build_model(mlp_arch, 0)
        clone = model.copy()
        clone.params[0].data += 1.0
        assert model.fingerprint() != clone.fingerprint()


class TestForward:
    def test_output_shape(self, mlp_arch, cnn_arch, rng):
        assert forward(build_model(mlp_arch, 0), Tensor(rng.random((7, 6)))).shape == (7, 3)
        assert forward(build_model(cnn_arch, 0), Tensor(rng.random((2, 1, 6, 6)))).shape == (2, 3)

    def test_wrong_input_shape(self, mlp_arch):
        with pytest.raises(ShapeError):
            forward(build_model(mlp_arch, 0), Tensor(np.zeros((2, 5))))

    def test_chunked_logits_match_one_pass(self, mlp_arch, rng):
        model = build_model(mlp_arch, 3)
        inputs = rng.random((10, 6)).astype(np.float32)
        np.testing.assert_allclose(logits_of(model, inputs, batch_size=3), logits_of(model, inputs), rtol=1e-6)

    def test_ties_go_to_the_lowest_index(self, mlp_arch):
        model = build_model(mlp_arch, 0)
        for param in model.params:
            param.data = np.zeros_like(param.data)
        np.testing.assert_array_equal(predict(model, np.ones((3, 6))), [0, 0, 0])

    def test_row_constant_does_not_change_the_prediction(self, rng):
        # quarter steps and integer shifts keep the sums exact
        logits = rng.integers(-20, 20, size=(50, 7)) / 4.0
        shifts = rng.integers(-100, 100, size=(50, 1)).astype(np.float64)
        np.testing.assert_array_equal(argmax_rows(logits + shifts), argmax_rows(logits))

    def test_head_bias_shift_does_not_change_predict(self, mlp_arch, rng):
        model = build_model(mlp_arch, 5)
        model.parameter("head.bias").data[:] = 0.25
        inputs = rng.random((40, 6)).astype(np.float32)
        before = predict(model, inputs)
        model.parameter("head.bias").data[:] = 8.25
        np.testing.assert_array_equal(predict(model, inputs), before)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_mlp_loss(self, gradcheck, mlp_arch, seed):
        rng = np.random.default_rng(seed)
        model = build_model(mlp_arch, seed)
        x = Tensor(rng.random((4, 6)), requires_grad=True)
        labels = rng.integers(0, 3, size=4)
        loss = lambda: softmax_cross_entropy(forward(model, x), labels)  # noqa: E731
        assert gradcheck(loss, [x, model.parameter("fc0.weight"), model.parameter("head.weight")]) < TOLERANCE

    @pytest.mark.parametrize("seed", range(20))
    def test_cnn_loss(self, gradcheck, cnn_arch, seed):
        rng = np.random.default_rng(seed)
        model = build_model(cnn_arch, seed)
        model.parameter("conv0.bias").data[:] = 0.1
        x = Tensor(rng.random((2, 1, 6, 6)), requires_grad=True)
        labels = rng.integers(0, 3, size=2)
        loss = lambda: softmax_cross_entropy(forward(model, x), labels)  # noqa: E731
        assert gradcheck(loss, [x, model.parameter("conv0.weight"), model.parameter("head.bias")]) < TOLERANCE


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, cnn_arch, tmp_path):
        model = build_model(cnn_arch, 9)
        path = save_model(model, tmp_path / "model.ovlb")
        loaded = load_model(path)
        assert loaded.arch == model.arch
        assert loaded.fingerprint() == model.fingerprint()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "broken.ovlb"
        path.write_bytes(b"NOPE!" + bytes(16))
        with pytest.raises(DataFormatError):
            load_model(path)

    def test_truncated_file(self, mlp_arch, tmp_path):
        path = save_model(build_model(mlp_arch, 0), tmp_path / "model.ovlb")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataFormatError):
            load_model(path)
