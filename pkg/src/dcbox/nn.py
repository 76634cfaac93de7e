"""
Minimal deterministic neural-network core

Layers cache what their backward pass needs during forward, accumulate parameter
gradients during backward, and leave zeroing to the optimizer step. All arrays are
float64 numpy arrays; batch is always the leading axis.
"""

import logging
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import GradientCheckError, LayerStateError, NonFiniteError, ShapeError


logger = logging.getLogger(__name__)


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Convert to a finite float64 array"""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 0 or any(d < 1 for d in array.shape):
        raise ShapeError(f"{name} must have positive dimensions, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} contains NaN or infinite values")
    return array


class Parameter:
    """A trainable array with its gradient buffer"""

    def __init__(self, value: np.ndarray, name: str = "param"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))"""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class for all layers"""

    kind = "layer"

    def __init__(self):
        self.params: Dict[str, Parameter] = {}
        self.training = True
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape"""
        return input_shape

    def buffers(self) -> Dict[str, np.ndarray]:
        """Non-trainable state that belongs in a checkpoint"""
        return {}

    def state_arrays(self) -> List[np.ndarray]:
        """Parameters then buffers, in a fixed order"""
        return [p.value for p in self.params.values()] + list(self.buffers().values())

    def load_state_arrays(self, arrays: Sequence[np.ndarray]):
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ShapeError(f"{self.kind} expects {len(targets)} arrays, got {len(arrays)}")
        for target, source in zip(targets, arrays):
            if target.shape != source.shape:
                raise ShapeError(f"{self.kind} array shape {target.shape} does not match {source.shape}")
            target[...] = source

    def _take_cache(self):
        if self._cache is None:
            raise LayerStateError(f"backward called on {self.kind} layer without a prior forward")
        cache, self._cache = self._cache, None
        return cache

    @staticmethod
    def _check_grad(grad: np.ndarray, expected: Tuple[int, ...], kind: str):
        if grad.shape != expected:
            raise ShapeError(f"{kind} received gradient of shape {grad.shape}, expected {expected}")


class Dense(Layer):
    """y = x W^T + b with W of shape (out, in)"""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        weight = glorot_uniform((out_features, in_features), in_features, out_features, rng)
        self.params["weight"] = Parameter(weight, "weight")
        self.params["bias"] = Parameter(np.zeros(out_features), "bias")

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected input (n, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["weight"].value.T + self.params["bias"].value

    def backward(self, grad):
        x = self._take_cache()
        self._check_grad(grad, (x.shape[0], self.out_features), self.kind)
        self.params["weight"].grad += grad.T @ x
        self.params["bias"].grad += grad.sum(axis=0)
        return grad @ self.params["weight"].value

    def output_shape(self, input_shape):
        if input_shape != (self.in_features,):
            raise ShapeError(f"expected input ({self.in_features},), got {input_shape}")
        return (self.out_features,)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel {kernel} does not fit input size {size} with padding {padding}")
    return out


def matching_output_padding(size: int, kernel: int, stride: int, padding: int) -> int:
    """output_padding that makes a transposed convolution undo conv's spatial shrink"""
    return (size + 2 * padding - kernel) % stride


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Ho, Wo, kh, kw) strided view over a padded input"""
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _scatter_windows(cols: np.ndarray, padded_shape: Tuple[int, ...], stride: int) -> np.ndarray:
    """Adjoint of _windows: sum (N, Ho, Wo, C, kh, kw) patches back into (N, C, Hp, Wp)"""
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


class Conv2D(Layer):
    """2-D cross-correlation over (N, C, H, W) with zero padding"""

    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        weight = glorot_uniform(
            (out_channels, in_channels, k, k), in_channels * k * k, out_channels * k * k, rng
        )
        self.params["weight"] = Parameter(weight, "weight")
        self.params["bias"] = Parameter(np.zeros(out_channels), "bias")

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"expected input ({self.in_channels}, H, W), got {input_shape}")
        _, h, w = input_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p))

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected input (n, {self.in_channels}, H, W), got {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = _windows(xp, self.kernel_size, self.kernel_size, self.stride, ho, wo)
        out = np.tensordot(win, self.params["weight"].value, axes=([1, 4, 5], [1, 2, 3]))
        self._cache = (xp, x.shape)
        return out.transpose(0, 3, 1, 2) + self.params["bias"].value[None, :, None, None]

    def backward(self, grad):
        xp, in_shape = self._take_cache()
        _, ho, wo = self.output_shape(in_shape[1:])
        self._check_grad(grad, (in_shape[0], self.out_channels, ho, wo), self.kind)
        k, s, p = self.kernel_size, self.stride, self.padding
        win = _windows(xp, k, k, s, ho, wo)
        self.params["weight"].grad += np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
        self.params["bias"].grad += grad.sum(axis=(0, 2, 3))
        cols = np.tensordot(grad, self.params["weight"].value, axes=([1], [0]))
        dxp = _scatter_windows(cols, xp.shape, s)
        return dxp[:, :, p:p + in_shape[2], p:p + in_shape[3]]


class Conv2DTranspose(Layer):
    """Transposed convolution: the input-gradient map of the matching Conv2D"""

    kind = "conv2d_transpose"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        output_padding: Union[int, Tuple[int, int]] = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        if isinstance(output_padding, int):
            output_padding = (output_padding, output_padding)
        if not all(0 <= op < stride for op in output_padding):
            raise ShapeError(f"output_padding must be in [0, stride), got {output_padding}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size
        weight = glorot_uniform(
            (in_channels, out_channels, k, k), out_channels * k * k, in_channels * k * k, rng
        )
        self.params["weight"] = Parameter(weight, "weight")
        self.params["bias"] = Parameter(np.zeros(out_channels), "bias")

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"expected input ({self.in_channels}, H, W), got {input_shape}")
        _, h, w = input_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        op_h, op_w = self.output_padding
        ho = (h - 1) * s - 2 * p + k + op_h
        wo = (w - 1) * s - 2 * p + k + op_w
        if ho < 1 or wo < 1:
            raise ShapeError(f"transposed convolution output would be empty for input {input_shape}")
        return (self.out_channels, ho, wo)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected input (n, {self.in_channels}, H, W), got {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        p = self.padding
        cols = np.tensordot(x, self.params["weight"].value, axes=([1], [0]))
        padded = _scatter_windows(cols, (x.shape[0], self.out_channels, ho + 2 * p, wo + 2 * p), self.stride)
        self._cache = x
        out = padded[:, :, p:p + ho, p:p + wo]
        return out + self.params["bias"].value[None, :, None, None]

    def backward(self, grad):
        x = self._take_cache()
        _, ho, wo = self.output_shape(x.shape[1:])
        self._check_grad(grad, (x.shape[0], self.out_channels, ho, wo), self.kind)
        k, s, p = self.kernel_size, self.stride, self.padding
        gp = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p)))
        win = _windows(gp, k, k, s, x.shape[2], x.shape[3])
        self.params["weight"].grad += np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
        self.params["bias"].grad += grad.sum(axis=(0, 2, 3))
        dx = np.tensordot(win, self.params["weight"].value, axes=([1, 4, 5], [1, 2, 3]))
        return dx.transpose(0, 3, 1, 2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        mask = self._take_cache()
        self._check_grad(grad, mask.shape, self.kind)
        return np.where(mask, grad, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = expit(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._take_cache()
        self._check_grad(grad, y.shape, self.kind)
        return grad * y * (1.0 - y)


class BatchNorm(Layer):
    """Per-feature (2-D input) or per-channel (4-D input) batch normalization"""

    kind = "batchnorm"

    def __init__(self, num_features: int, decay: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.decay = decay
        self.eps = eps
        self.params["scale"] = Parameter(np.ones(num_features), "scale")
        self.params["shift"] = Parameter(np.zeros(num_features), "shift")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def output_shape(self, input_shape):
        if input_shape[0] != self.num_features:
            raise ShapeError(f"expected {self.num_features} features, got input {input_shape}")
        return input_shape

    def _axes_and_view(self, x: np.ndarray):
        if x.ndim == 2 and x.shape[1] == self.num_features:
            return (0,), (1, -1)
        if x.ndim == 4 and x.shape[1] == self.num_features:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"expected (n, {self.num_features}) or (n, {self.num_features}, H, W), got {x.shape}")

    def forward(self, x):
        axes, view = self._axes_and_view(x)
        scale = self.params["scale"].value.reshape(view)
        shift = self.params["shift"].value.reshape(view)
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean *= self.decay
            self.running_mean += (1.0 - self.decay) * mean
            self.running_var *= self.decay
            self.running_var += (1.0 - self.decay) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
        self._cache = (x_hat, inv_std, axes, view, self.training)
        return scale * x_hat + shift

    def backward(self, grad):
        x_hat, inv_std, axes, view, training = self._take_cache()
        self._check_grad(grad, x_hat.shape, self.kind)
        self.params["scale"].grad += (grad * x_hat).sum(axis=axes)
        self.params["shift"].grad += grad.sum(axis=axes)
        g_hat = grad * self.params["scale"].value.reshape(view)
        if not training:
            return g_hat * inv_std.reshape(view)
        m = x_hat.size / self.num_features
        sum_g = g_hat.sum(axis=axes, keepdims=True)
        sum_gx = (g_hat * x_hat).sum(axis=axes, keepdims=True)
        return inv_std.reshape(view) * (g_hat - sum_g / m - x_hat * sum_gx / m)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._take_cache()
        return grad.reshape(shape)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, target_shape: Sequence[int]):
        super().__init__()
        self.target_shape = tuple(int(d) for d in target_shape)

    def forward(self, x):
        if int(np.prod(x.shape[1:])) != int(np.prod(self.target_shape)):
            raise ShapeError(f"cannot reshape {x.shape[1:]} into {self.target_shape}")
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.target_shape)

    def backward(self, grad):
        shape = self._take_cache()
        return grad.reshape(shape)

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != int(np.prod(self.target_shape)):
            raise ShapeError(f"cannot reshape {input_shape} into {self.target_shape}")
        return self.target_shape


class Network:
    """Ordered sequence of layers with a declared per-sample input shape"""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers: List[Layer] = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layer_shapes = self._infer_shapes()

    def _infer_shapes(self) -> List[Tuple[int, ...]]:
        shapes = []
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {index} ({layer.kind}): {e}") from e
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.layer_shapes[-1] if self.layers else self.input_shape

    def __len__(self) -> int:
        return len(self.layers)

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.params.values()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        for layer in self.layers:
            layer.training = mode

    def eval(self):
        self.train(False)

    @property
    def training(self) -> bool:
        return all(layer.training for layer in self.layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        output, _ = self.forward_collect(x, ())
        return output

    def forward_collect(self, x: np.ndarray, indices: Iterable[int]) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
        """Forward pass that also returns the outputs of the listed layers"""
        wanted = set(indices)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                f"expected per-sample shape {self.input_shape}, got {x.shape[1:]}"
            )
        collected = {}
        for index, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except ShapeError as e:
                raise ShapeError(f"layer {index} ({layer.kind}): {e}") from e
            if index in wanted:
                collected[index] = x
        return x, collected

    def backward(self, output_gradient: np.ndarray, injected: Optional[Mapping[int, np.ndarray]] = None) -> np.ndarray:
        """Backpropagate; `injected` adds extra gradients at intermediate layer outputs"""
        injected = injected or {}
        grad = np.asarray(output_gradient, dtype=np.float64)
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            if index in injected:
                grad = grad + injected[index]
            try:
                grad = layer.backward(grad)
            except ShapeError as e:
                raise ShapeError(f"layer {index} ({layer.kind}): {e}") from e
        return grad


class SGDMomentum:
    """SGD with heavy-ball momentum and L2 regularization"""

    def __init__(self, learning_rate: float = 0.01, momentum: float = 0.9, l2_coefficient: float = 0.0):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if l2_coefficient < 0:
            raise ValueError(f"l2_coefficient must be non-negative, got {l2_coefficient}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.l2_coefficient = l2_coefficient
        self._velocity: Dict[int, Tuple[Parameter, np.ndarray]] = {}

    def velocity(self, param: Parameter) -> np.ndarray:
        entry = self._velocity.get(id(param))
        if entry is None:
            entry = (param, np.zeros_like(param.value))
            self._velocity[id(param)] = entry
        return entry[1]

    def step(self, parameters: Iterable[Parameter]):
        for param in parameters:
            v = self.velocity(param)
            v *= self.momentum
            v += param.grad + self.l2_coefficient * param.value
            param.value -= self.learning_rate * v
            param.zero_grad()


def sgd_momentum_step(optimizer: SGDMomentum, network) -> None:
    """Apply one optimizer step to every parameter of `network`"""
    optimizer.step(network.parameters())


def finite_diff_check(network, loss_evaluator: Callable[[], float], epsilon: float = 1e-5) -> float:
    """
    Compare analytic gradients against central differences

    `loss_evaluator` runs forward and backward on `network` and returns the scalar
    loss; it is called once for the analytic gradients, then twice per parameter
    entry. Returns max |analytic - numeric| / max(1, |numeric|).
    """
    params = network.parameters()
    if not params:
        return 0.0
    for p in params:
        p.zero_grad()
    loss = loss_evaluator()
    if not np.isfinite(loss):
        raise GradientCheckError(f"non-finite loss {loss} at the base point")
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            plus = loss_evaluator()
            flat[i] = original - epsilon
            minus = loss_evaluator()
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise GradientCheckError(f"non-finite loss while probing {p.name}[{i}]")
            numeric = (plus - minus) / (2.0 * epsilon)
            error = abs(grad.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
    for p in params:
        p.zero_grad()
    logger.debug(f"Gradient check over {len(params)} parameters: max relative error {worst:.3e}")
    return worst
