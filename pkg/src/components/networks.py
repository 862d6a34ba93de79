import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np

from src.components.tensor import (
    Tensor,
    add,
    avg_pool2d,
    conv2d,
    conv_output_size,
    flatten,
    matmul,
    relu,
    reshape,
)
from src.models.specs import ArchSpec
from src.utils.container import ContainerFile
from src.utils.errors import ConfigError, DataFormatError, ShapeError
from src.utils.schema import from_dict, to_dict
from src.utils.seeding import fingerprint, make_rng

logger = logging.getLogger(__name__)

PREDICT_BATCH = 1024


@dataclass
class Model:
    """A classifier: its architecture, named parameters in build order, and the seed they came from."""
    arch: ArchSpec
    params: List[Tensor]
    init_seed: int

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for param in self.params:
            yield param.name, param

    def parameter(self, name: str) -> Tensor:
        for param in self.params:
            if param.name == name:
                return param
        raise KeyError(name)

    def parameter_count(self) -> int:
        return sum(param.size for param in self.params)

    def frozen(self) -> "Model":
        """View over the same buffers with gradient tracking off, safe to share across attacks."""
        return Model(self.arch, [param.detach() for param in self.params], self.init_seed)

    def copy(self) -> "Model":
        params = [Tensor(param.data.copy(), requires_grad=param.requires_grad, name=param.name)
                  for param in self.params]
        return Model(copy.deepcopy(self.arch), params, self.init_seed)

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def fingerprint(self) -> str:
        """SHA-256 over parameter names and raw values; identifies a trained model."""
        buffers = []
        for name, param in self.named_parameters():
            buffers.append(name.encode("utf-8"))
            buffers.append(param.data.astype("<f4").tobytes())
        return fingerprint(*buffers)


def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _layer_shapes(arch: ArchSpec) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in build order; biases have fan_in 0."""
    shapes: List[Tuple[str, Tuple[int, ...], int]] = []

    if arch.kind == "mlp":
        width = int(np.prod(arch.input_shape))
        for i, hidden in enumerate(arch.hidden):
            shapes.append((f"fc{i}.weight", (width, hidden), width))
            shapes.append((f"fc{i}.bias", (hidden,), 0))
            width = hidden
    else:
        channels, height, width_px = arch.input_shape
        for i, block in enumerate(arch.conv):
            height = conv_output_size(height, block.kernel, block.stride, block.padding)
            width_px = conv_output_size(width_px, block.kernel, block.stride, block.padding)
            if height < 1 or width_px < 1:
                raise ConfigError(f"conv block {i} ({block.kernel}x{block.kernel}) does not fit input {list(arch.input_shape)}")
            if block.pool > 1:
                if block.pool > height or block.pool > width_px:
                    raise ConfigError(f"pool window {block.pool} after conv block {i} exceeds feature map {height}x{width_px}")
                height, width_px = height // block.pool, width_px // block.pool
            fan_in = channels * block.kernel * block.kernel
            shapes.append((f"conv{i}.weight", (block.channels, channels, block.kernel, block.kernel), fan_in))
            shapes.append((f"conv{i}.bias", (block.channels,), 0))
            channels = block.channels
        width = channels * height * width_px

    shapes.append(("head.weight", (width, arch.num_classes), width))
    shapes.append(("head.bias", (arch.num_classes,), 0))
    return shapes


def build_model(arch: ArchSpec, seed: int) -> Model:
    """
    Initialize a model deterministically.

    Weights are Kaiming-uniform with bound sqrt(6 / fan_in), biases zero; all
    draws come from a Philox generator keyed by ``seed``, so equal
    (arch, seed) pairs give bit-identical parameters.
    """
    rng = make_rng(seed)
    params = []
    for name, shape, fan_in in _layer_shapes(arch):
        if fan_in:
            values = _kaiming_uniform(rng, shape, fan_in)
        else:
            values = np.zeros(shape, dtype=np.float32)
        params.append(Tensor(values, requires_grad=True, name=name))

    model = Model(arch=arch, params=params, init_seed=seed)
    logger.debug(f"Built {arch.kind} with {model.parameter_count()} parameters (seed {seed})")
    return model


def forward(model: Model, batch: Tensor) -> Tensor:
    """Logits [batch, num_classes]; differentiable w.r.t. the parameters and the input."""
    arch = model.arch
    if tuple(batch.shape[1:]) != arch.input_shape:
        raise ShapeError(f"input shape {list(batch.shape[1:])} does not match architecture {list(arch.input_shape)}")

    if arch.kind == "mlp":
        h = batch if batch.ndim == 2 else reshape(batch, (batch.shape[0], int(np.prod(arch.input_shape))))
        for i in range(len(arch.hidden)):
            h = relu(add(matmul(h, model.parameter(f"fc{i}.weight")), model.parameter(f"fc{i}.bias")))
    else:
        h = batch
        for i, block in enumerate(arch.conv):
            h = conv2d(h, model.parameter(f"conv{i}.weight"), model.parameter(f"conv{i}.bias"),
                       stride=block.stride, padding=block.padding)
            h = relu(h)
            if block.pool > 1:
                h = avg_pool2d(h, block.pool)
        h = flatten(h)

    return add(matmul(h, model.parameter("head.weight")), model.parameter("head.bias"))


def logits_of(model: Model, inputs: np.ndarray, batch_size: int = PREDICT_BATCH) -> np.ndarray:
    """Forward pass without gradient tracking, in chunks."""
    frozen = model.frozen()
    chunks = [
        forward(frozen, Tensor(inputs[start:start + batch_size])).data
        for start in range(0, len(inputs), batch_size)
    ]
    if not chunks:
        return np.zeros((0, model.arch.num_classes), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def predict(model: Model, batch: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Per-row argmax of the logits; ties go to the lowest class index."""
    inputs = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
    return argmax_rows(logits_of(model, inputs))


def argmax_rows(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index
    return np.argmax(logits, axis=1).astype(np.int64)


def save_model(model: Model, path: Union[str, Path]) -> Path:
    header = {"kind": "model", "arch": to_dict(model.arch), "init_seed": int(model.init_seed)}
    return ContainerFile(path).write(header, [(name, param.data) for name, param in model.named_parameters()])


def load_model(path: Union[str, Path]) -> Model:
    header, tensors = ContainerFile(path).read()
    if header.get("kind") != "model" or "arch" not in header:
        raise DataFormatError(f"{path} is not a model checkpoint")
    arch = from_dict(ArchSpec, header["arch"], "arch")
    model = build_model(arch, int(header.get("init_seed", 0)))

    stored = dict(tensors)
    if [name for name, _ in tensors] != [param.name for param in model.params]:
        raise DataFormatError(f"{path}: parameter names do not match the architecture")
    for param in model.params:
        values = stored[param.name]
        if values.shape != param.shape:
            raise DataFormatError(f"{path}: {param.name} has shape {list(values.shape)}, expected {list(param.shape)}")
        param.data = np.ascontiguousarray(values, dtype=np.float32)
    logger.info(f"Loaded {arch.kind} checkpoint {path} ({model.parameter_count()} parameters)")
    return model
