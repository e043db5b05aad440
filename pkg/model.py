"""
Asymmetric U-Net: frame stacking, forward pass, training loop and saliency
"""

import logging
from collections import deque
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from autodiff import (AdamState, Precision, Tensor, adam_step, combined_loss, concat_channels, conv2d,
                      maxpool2d, pixel, relu, sigmoid, upsample_nearest)
from dsp import AzimuthGrid, ImageKind, PolarImage
from errors import NumericError, ShapeError
from schemas import AdamConfig, LossConfig, UNetConfig

logger = logging.getLogger(__name__)

OUTPUT_CLAMP = 1e-7

Sample = Tuple[np.ndarray, np.ndarray]  # ([H+1, R, A_in] stack, [R, A_out] binary label)


class ModelParams(BaseModel):
    """Conv weights and biases keyed by layer path, in creation order"""

    config: UNetConfig
    seed: int
    tensors: Dict[str, Tensor]

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def precision(self) -> Precision:
        return next(iter(self.tensors.values())).precision

    def astype(self, precision: Precision) -> "ModelParams":
        cast = {k: Tensor(t.data.astype(precision.dtype)) for k, t in self.tensors.items()}
        return ModelParams(config=self.config, seed=self.seed, tensors=cast)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


def layer_shapes(cfg: UNetConfig) -> Dict[str, Tuple[int, ...]]:
    """Weight and bias shapes of every layer, in forward order"""
    k = cfg.kernel_size
    f = cfg.encoder_filters
    shapes: Dict[str, Tuple[int, ...]] = {}

    def conv(name, c_out, c_in, kernel=k):
        shapes[f"{name}.w"] = (c_out, c_in, kernel, kernel)
        shapes[f"{name}.b"] = (c_out,)

    c_prev = cfg.in_channels
    for i in range(cfg.levels):
        conv(f"enc{i}.conv1", f[i], c_prev)
        conv(f"enc{i}.conv2", f[i], f[i])
        c_prev = f[i]
    for i in reversed(range(cfg.levels - 1)):
        conv(f"dec{i}.conv1", f[i], f[i + 1] + f[i])
        conv(f"dec{i}.conv2", f[i], f[i])
    for s in range(cfg.n_asym_stages):
        conv(f"asym{s}.conv", f[0], f[0])
    conv("head", 1, f[0], kernel=1)
    return shapes


def build_unet(cfg: UNetConfig, seed: int = 0) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, f32"""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        tensors[name] = Tensor(data)
    params = ModelParams(config=cfg, seed=seed, tensors=tensors)
    logger.debug(f"Built U-Net with {parameter_count(params)} parameters")
    return params


def parameter_count(params: ModelParams) -> int:
    return int(sum(t.data.size for t in params.tensors.values()))


class FrameStack:
    """FIFO of the H most recent past frames plus the current one"""

    def __init__(self, history: int, shape: Tuple[int, int], max_range: float = 10.0):
        self.history = history
        self.shape = tuple(shape)
        self.max_range = max_range
        self._frames = deque(maxlen=history + 1)

    def __len__(self):
        return len(self._frames)

    def push(self, frame) -> None:
        data = frame.data if isinstance(frame, PolarImage) else np.asarray(frame)
        if data.shape != self.shape:
            raise ShapeError(f"frame shape {data.shape} does not match stack shape {self.shape}")
        self._frames.append(np.asarray(data, dtype=np.float32))

    def to_array(self) -> np.ndarray:
        """[H+1, n_range, n_az_in], oldest first; missing history is zero"""
        out = np.zeros((self.history + 1, *self.shape), dtype=np.float32)
        if self._frames:
            out[self.history + 1 - len(self._frames):] = np.stack(self._frames)
        return out

    @classmethod
    def from_array(cls, array: np.ndarray, max_range: float = 10.0) -> "FrameStack":
        stack = cls(array.shape[0] - 1, array.shape[1:], max_range)
        for channel in array:
            stack.push(channel)
        return stack


def stacks_from_sequence(frames: Sequence[np.ndarray], history: int) -> List[np.ndarray]:
    """Input stack for every frame of a trajectory"""
    if not frames:
        return []
    stack = FrameStack(history, np.asarray(frames[0]).shape)
    out = []
    for frame in frames:
        stack.push(frame)
        out.append(stack.to_array())
    return out


def _check_input(cfg: UNetConfig, x: np.ndarray) -> None:
    if tuple(x.shape) != cfg.in_shape:
        raise ShapeError(f"input stack shape {tuple(x.shape)} does not match {cfg.in_shape}")


def forward_graph(params: ModelParams, x) -> Tensor:
    """Sigmoid output [1, n_range, n_az_out] as a differentiable graph"""
    cfg = params.config
    p = params.tensors
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params.precision.dtype))
    _check_input(cfg, x.data)

    def block(h, name):
        return relu(conv2d(h, p[f"{name}.w"], p[f"{name}.b"]))

    skips = []
    h = x
    for i in range(cfg.levels):
        if i > 0:
            h = maxpool2d(h, (2, 2))
        h = block(block(h, f"enc{i}.conv1"), f"enc{i}.conv2")
        skips.append(h)
    for i in reversed(range(cfg.levels - 1)):
        h = concat_channels(upsample_nearest(h, (2, 2)), skips[i])
        h = block(block(h, f"dec{i}.conv1"), f"dec{i}.conv2")
    for s in range(cfg.n_asym_stages):
        h = block(upsample_nearest(h, (1, 2)), f"asym{s}.conv")
    return sigmoid(conv2d(h, p["head.w"], p["head.b"]))


def forward(params: ModelParams, stack, max_range: float = 10.0) -> PolarImage:
    """Probability image on the lidar azimuth grid, clamped to [1e-7, 1 - 1e-7]"""
    if isinstance(stack, FrameStack):
        max_range = stack.max_range
        stack = stack.to_array()
    out = forward_graph(params, stack).data[0]
    data = np.clip(out.astype(np.float64), OUTPUT_CLAMP, 1 - OUTPUT_CLAMP)
    return PolarImage(data=data, kind=ImageKind.PROBABILITY, max_range=max_range,
                      azimuth_grid=AzimuthGrid.ANGLE)


def sample_loss(params: ModelParams, stack: np.ndarray, label: np.ndarray, loss: LossConfig) -> Tensor:
    out = forward_graph(params, stack)
    if label.shape != out.shape[1:]:
        raise ShapeError(f"label shape {label.shape} does not match output {out.shape[1:]}")
    return combined_loss(out, label[None].astype(out.data.dtype), loss)


class TrainingResult(NamedTuple):
    params: ModelParams
    loss_curve: List[float]
    optimizer_state: AdamState


def train(params: ModelParams, dataset: Sequence[Sample], loss: LossConfig, adam: AdamConfig, epochs: int,
          batch_size: int = 1, optimizer_state: Optional[AdamState] = None, start_epoch: int = 0,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainingResult:
    """Mini-batch Adam; the shuffle of epoch e is drawn from (adam.seed, e) so resumed runs replay exactly"""
    if not dataset:
        raise ValueError("training dataset is empty")
    state = optimizer_state if optimizer_state is not None and optimizer_state.m else AdamState.zeros_like(params.tensors)
    curve = []
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng([adam.seed, epoch]).permutation(len(dataset))
        losses = []
        for batch_index, start in enumerate(range(0, len(order), batch_size)):
            batch = order[start:start + batch_size]
            grads = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
            try:
                for i in batch:
                    stack, label = dataset[int(i)]
                    value = sample_loss(params, stack, label, loss)
                    value.backward()
                    for k, t in params.tensors.items():
                        if t.grad is not None:
                            grads[k] += t.grad
                    losses.append(value.item())
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {batch_index}: {e}") from e
            for k in grads:
                grads[k] /= len(batch)
            state = adam_step(params.tensors, grads, state, adam)
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        logger.info(f"Epoch {epoch} mean loss {mean_loss:.6f}")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return TrainingResult(params, curve, state)


def evaluate_loss(params: ModelParams, dataset: Sequence[Sample], loss: LossConfig) -> float:
    return float(np.mean([sample_loss(params, s, l, loss).item() for s, l in dataset]))


def input_saliency(network: Callable[[Tensor], Tensor], x: np.ndarray, target: Tuple[int, ...]) -> np.ndarray:
    """|d network(x)[target] / d x| from a single backward pass"""
    leaf = Tensor(np.array(x))
    pixel(network(leaf), target).backward()
    return np.abs(leaf.grad)


def saliency(params: ModelParams, stack, target_pixel: Tuple[int, int],
             precision: Precision = Precision.F32) -> np.ndarray:
    """Attribution [H+1, n_range, n_az_in] of one output pixel"""
    x = stack.to_array() if isinstance(stack, FrameStack) else np.asarray(stack)
    _check_input(params.config, x)
    row, col = target_pixel
    _, n_range, n_az = params.config.out_shape
    if not (0 <= row < n_range and 0 <= col < n_az):
        raise ShapeError(f"pixel {target_pixel} outside output {n_range}x{n_az}")
    if params.precision != precision:
        params = params.astype(precision)
    return input_saliency(lambda t: forward_graph(params, t), x.astype(precision.dtype), (0, row, col))
