"""
Autoencoder construction, feature extraction and checkpoint serialization
"""

import logging
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import CheckpointError, ShapeError
from .models import Architecture, AutoencoderSpec, FeatureMode, FeatureSelector, OutputActivation
from .nn import (
    BatchNorm,
    Conv2D,
    Conv2DTranspose,
    Dense,
    Flatten,
    Layer,
    Network,
    Parameter,
    ReLU,
    Reshape,
    Sigmoid,
    as_tensor,
    conv_output_size,
    matching_output_padding,
)


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DCAE"
CHECKPOINT_VERSION = 1
CENTROID_MAGIC = b"CENT"
NORM_FLOOR = 1e-12


def build_encoder(spec: AutoencoderSpec, rng: np.random.Generator) -> Network:
    """Encoder main branch: hidden blocks, then a dense map to latent_dim"""
    layers: List[Layer] = []
    if spec.architecture == Architecture.MLP:
        if len(spec.input_shape) > 1:
            layers.append(Flatten())
        width = int(np.prod(spec.input_shape))
        for hidden in spec.hidden_dims:
            layers.append(Dense(width, hidden, rng))
            if spec.batch_norm:
                layers.append(BatchNorm(hidden))
            layers.append(ReLU())
            width = hidden
        layers.append(Dense(width, spec.latent_dim, rng))
    else:
        channels = spec.input_shape[0]
        for out_channels in spec.conv_channels:
            layers.append(Conv2D(channels, out_channels, spec.kernel_size, spec.stride, spec.padding, rng))
            if spec.batch_norm:
                layers.append(BatchNorm(out_channels))
            layers.append(ReLU())
            channels = out_channels
        layers.append(Flatten())
        flat = int(np.prod(_conv_shapes(spec)[-1]))
        layers.append(Dense(flat, spec.latent_dim, rng))
    return Network(layers, spec.input_shape)


def _conv_shapes(spec: AutoencoderSpec) -> List[Tuple[int, int, int]]:
    """Spatial shapes before and after every encoder convolution"""
    shapes = [tuple(spec.input_shape)]
    for out_channels in spec.conv_channels:
        _, h, w = shapes[-1]
        k, s, p = spec.kernel_size, spec.stride, spec.padding
        shapes.append((out_channels, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)))
    return shapes


def build_decoder(spec: AutoencoderSpec, rng: np.random.Generator) -> Network:
    """Mirror of the encoder that maps latent_dim back to input_shape"""
    layers: List[Layer] = []
    if spec.architecture == Architecture.MLP:
        width = spec.latent_dim
        for hidden in reversed(spec.hidden_dims):
            layers.append(Dense(width, hidden, rng))
            if spec.batch_norm:
                layers.append(BatchNorm(hidden))
            layers.append(ReLU())
            width = hidden
        layers.append(Dense(width, int(np.prod(spec.input_shape)), rng))
        if spec.output_activation == OutputActivation.SIGMOID:
            layers.append(Sigmoid())
        if len(spec.input_shape) > 1:
            layers.append(Reshape(spec.input_shape))
    else:
        shapes = _conv_shapes(spec)
        innermost = shapes[-1]
        layers.append(Dense(spec.latent_dim, int(np.prod(innermost)), rng))
        layers.append(ReLU())
        layers.append(Reshape(innermost))
        k, s, p = spec.kernel_size, spec.stride, spec.padding
        for index in range(len(shapes) - 1, 0, -1):
            target = shapes[index - 1]
            output_padding = (
                matching_output_padding(target[1], k, s, p),
                matching_output_padding(target[2], k, s, p),
            )
            layers.append(Conv2DTranspose(shapes[index][0], target[0], k, s, p, output_padding, rng))
            if index > 1:
                if spec.batch_norm:
                    layers.append(BatchNorm(target[0]))
                layers.append(ReLU())
        if spec.output_activation == OutputActivation.SIGMOID:
            layers.append(Sigmoid())
    decoder = Network(layers, (spec.latent_dim,))
    if decoder.output_shape != tuple(spec.input_shape):
        raise ShapeError(f"decoder output {decoder.output_shape} does not mirror input {tuple(spec.input_shape)}")
    return decoder


@dataclass
class ForwardPass:
    """Everything a training step needs from one autoencoder forward"""

    features: np.ndarray
    latent: np.ndarray
    reconstruction: Optional[np.ndarray] = None
    selector: Optional[FeatureSelector] = None
    widths: List[int] = field(default_factory=list)
    normalized: Optional[List[np.ndarray]] = None
    norms: Optional[List[np.ndarray]] = None


class Autoencoder:
    """Encoder and mirrored decoder built from an AutoencoderSpec"""

    def __init__(self, spec: AutoencoderSpec, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.encoder = build_encoder(spec, rng)
        self.decoder = build_decoder(spec, rng)
        logger.debug(
            f"Built {spec.architecture.value} autoencoder: {len(self.encoder)} encoder layers, "
            f"{len(self.decoder)} decoder layers, latent_dim={spec.latent_dim}"
        )

    @property
    def networks(self) -> Tuple[Network, Network]:
        return self.encoder, self.decoder

    def parameters(self) -> List[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.encoder.train(mode)
        self.decoder.train(mode)

    def eval(self):
        self.train(False)

    @contextmanager
    def inference(self) -> Iterator["Autoencoder"]:
        """Eval mode for the duration of the block; restores the previous mode"""
        was_training = self.encoder.training
        self.eval()
        try:
            yield self
        finally:
            self.train(was_training)

    def default_selector(self) -> FeatureSelector:
        return FeatureSelector(mode=FeatureMode.ONE_LAYER, layer_indices=[len(self.encoder) - 1])

    def validate_selector(self, selector: FeatureSelector):
        depth = len(self.encoder)
        for index in selector.layer_indices:
            if index >= depth:
                raise ShapeError(f"feature layer index {index} out of range for an encoder with {depth} layers")

    def feature_dim(self, selector: Optional[FeatureSelector] = None) -> int:
        selector = selector or self.default_selector()
        self.validate_selector(selector)
        return sum(int(np.prod(self.encoder.layer_shapes[i])) for i in selector.layer_indices)

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = as_tensor(batch, "batch")
        if batch.ndim < 2 or batch.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(
                f"expected batch of per-sample shape {tuple(self.spec.input_shape)}, got {batch.shape}"
            )
        return batch

    def encode(self, batch: np.ndarray) -> np.ndarray:
        batch = self._check_batch(batch)
        latent = self.encoder.forward(batch)
        return latent.reshape(latent.shape[0], -1)

    def reconstruct(self, batch: np.ndarray) -> np.ndarray:
        batch = self._check_batch(batch)
        return self.decoder.forward(self.encoder.forward(batch))

    def extract_features(self, batch: np.ndarray, selector: Optional[FeatureSelector] = None) -> np.ndarray:
        return self.forward(batch, selector, with_reconstruction=False).features

    def forward(
        self,
        batch: np.ndarray,
        selector: Optional[FeatureSelector] = None,
        with_reconstruction: bool = True,
    ) -> ForwardPass:
        """
        One pass through the encoder (and decoder when asked)

        Several-layer features are each flattened and L2-normalized per sample
        before concatenation; a single selected layer is used as is.
        """
        batch = self._check_batch(batch)
        selector = selector or self.default_selector()
        self.validate_selector(selector)
        latent, collected = self.encoder.forward_collect(batch, selector.layer_indices)
        n = batch.shape[0]
        blocks = [collected[i].reshape(n, -1) for i in selector.layer_indices]
        widths = [b.shape[1] for b in blocks]

        normalized = norms = None
        if len(blocks) == 1:
            features = blocks[0]
        else:
            norms = [np.maximum(np.linalg.norm(b, axis=1, keepdims=True), NORM_FLOOR) for b in blocks]
            normalized = [b / norm for b, norm in zip(blocks, norms)]
            features = np.concatenate(normalized, axis=1)

        reconstruction = self.decoder.forward(latent) if with_reconstruction else None
        return ForwardPass(
            features=features,
            latent=latent.reshape(n, -1),
            reconstruction=reconstruction,
            selector=selector,
            widths=widths,
            normalized=normalized,
            norms=norms,
        )

    def backward(
        self,
        forward_pass: ForwardPass,
        feature_grad: Optional[np.ndarray] = None,
        reconstruction_grad: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Accumulate parameter gradients for the losses on one ForwardPass"""
        n = forward_pass.latent.shape[0]
        injected: Dict[int, np.ndarray] = {}
        if feature_grad is not None:
            if feature_grad.shape != forward_pass.features.shape:
                raise ShapeError(
                    f"feature gradient shape {feature_grad.shape} does not match features {forward_pass.features.shape}"
                )
            offsets = np.cumsum([0] + forward_pass.widths)
            for slot, index in enumerate(forward_pass.selector.layer_indices):
                g = feature_grad[:, offsets[slot]:offsets[slot + 1]]
                if forward_pass.normalized is not None:
                    y = forward_pass.normalized[slot]
                    g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / forward_pass.norms[slot]
                injected[index] = g.reshape((n,) + self.encoder.layer_shapes[index])

        if reconstruction_grad is not None:
            if forward_pass.reconstruction is None:
                raise ShapeError("reconstruction gradient given for a pass without reconstruction")
            latent_grad = self.decoder.backward(reconstruction_grad)
        else:
            latent_grad = np.zeros((n,) + self.encoder.output_shape)

        last = len(self.encoder) - 1
        if last in injected:
            latent_grad = latent_grad + injected.pop(last)
        return self.encoder.backward(latent_grad, injected)

    def save(self, path: Union[str, Path], centroids: Optional[np.ndarray] = None):
        save_checkpoint(path, self, centroids)

    def load(self, path: Union[str, Path]) -> Optional[np.ndarray]:
        return load_checkpoint(path, self)


def encode_networks(networks: Sequence[Network]) -> bytes:
    """DCAE block: header, then per layer its array shapes and little-endian f64 data"""
    layers = [layer for net in networks for layer in net.layers]
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(layers))]
    for layer in layers:
        arrays = layer.state_arrays()
        chunks.append(struct.pack("<I", len(arrays)))
        for array in arrays:
            chunks.append(struct.pack("<I", array.ndim))
            chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
            chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, shape: Tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").reshape(shape).astype(np.float64)


def decode_networks(data: bytes, networks: Sequence[Network]) -> int:
    """Load a DCAE block into `networks` in place; returns the number of bytes consumed"""
    reader = _Reader(data)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DCAE checkpoint (bad magic)")
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers = [layer for net in networks for layer in net.layers]
    count = reader.u32("layer count")
    if count != len(layers):
        raise CheckpointError(f"checkpoint has {count} layers, network has {len(layers)}")
    for index, layer in enumerate(layers):
        n_arrays = reader.u32(f"layer {index} array count")
        arrays = []
        for _ in range(n_arrays):
            ndim = reader.u32(f"layer {index} ndim")
            shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"layer {index} dims"))
            arrays.append(reader.f64(tuple(shape), f"layer {index} data"))
        try:
            layer.load_state_arrays(arrays)
        except ShapeError as e:
            raise CheckpointError(f"layer {index} ({layer.kind}): {e}") from e
    return reader.offset


def encode_centroids(centroids: np.ndarray) -> bytes:
    k, d = centroids.shape
    return CENTROID_MAGIC + struct.pack("<II", k, d) + np.ascontiguousarray(centroids, dtype="<f8").tobytes()


def decode_centroids(data: bytes) -> np.ndarray:
    reader = _Reader(data)
    if reader.take(4, "centroid magic") != CENTROID_MAGIC:
        raise CheckpointError("centroid block has bad magic")
    k = reader.u32("centroid count")
    d = reader.u32("centroid dimension")
    centroids = reader.f64((k, d), "centroid data")
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after centroid block")
    return centroids


def save_checkpoint(path: Union[str, Path], autoencoder: Autoencoder, centroids: Optional[np.ndarray] = None):
    """Write the autoencoder's parameters and, optionally, a centroid block"""
    payload = encode_networks(autoencoder.networks)
    if centroids is not None:
        payload += encode_centroids(np.asarray(centroids, dtype=np.float64))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.info(f"Saved checkpoint to {path} ({len(payload)} bytes)")


def load_checkpoint(path: Union[str, Path], autoencoder: Autoencoder) -> Optional[np.ndarray]:
    """Restore parameters into `autoencoder`; returns the stored centroids, if any"""
    data = Path(path).read_bytes()
    offset = decode_networks(data, autoencoder.networks)
    centroids = decode_centroids(data[offset:]) if offset < len(data) else None
    logger.info(f"Loaded checkpoint from {path}")
    return centroids
