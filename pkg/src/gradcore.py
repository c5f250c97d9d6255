"""
Dense tensor engine for masked networks.

Forward and backward passes are written by hand for the handful of layer
kinds a desk-scale PEMN network needs:
- linear and conv2d (bias-free, weights masked elementwise)
- relu, flatten and avgpool2d (no weights)

A Tensor is a plain numpy array: float32 in production, float64 when the
caller passes float64 arrays (the gradient-check mode).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

Tensor = np.ndarray

LAYER_KINDS = ("linear", "conv2d", "relu", "flatten", "avgpool2d")
WEIGHTED_KINDS = ("linear", "conv2d")


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class LabelError(ValueError):
    """Raised when a label falls outside [0, class_count)."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network. Only linear and conv2d carry weights."""
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind: {self.kind}")
        if self.kind == "linear" and (self.in_dim < 1 or self.out_dim < 1):
            raise ValueError("linear layer needs in_dim >= 1 and out_dim >= 1")
        if self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
                raise ValueError("conv2d layer needs positive channels and kernel")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d layer needs stride >= 1 and padding >= 0")
        if self.kind == "avgpool2d" and self.pool < 1:
            raise ValueError("avgpool2d layer needs pool >= 1")

    @classmethod
    def linear(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls("linear", in_dim=in_dim, out_dim=out_dim)

    @classmethod
    def conv2d(cls, in_channels: int, out_channels: int, kernel: int,
               stride: int = 1, padding: int = 0) -> "LayerSpec":
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_h=kernel, kernel_w=kernel, stride=stride, padding=padding)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls("relu")

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls("flatten")

    @classmethod
    def avgpool2d(cls, pool: int) -> "LayerSpec":
        return cls("avgpool2d", pool=pool)

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "linear":
            return (self.out_dim, self.in_dim)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        return ()

    @property
    def d(self) -> int:
        """Weight element count d_l (0 for weightless layers)."""
        if not self.has_weights:
            return 0
        return int(np.prod(self.weight_shape))

    @property
    def fan_in(self) -> int:
        if self.kind == "linear":
            return self.in_dim
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_h * self.kernel_w
        return 0

    def output_shape(self, input_shape: Tuple[int, ...], index: int = None) -> Tuple[int, ...]:
        """Per-sample output shape, or ShapeError if the input does not fit."""
        if self.kind == "linear":
            if input_shape != (self.in_dim,):
                raise ShapeError(f"linear expects ({self.in_dim},), got {input_shape}", index)
            return (self.out_dim,)
        if self.kind == "conv2d":
            if len(input_shape) != 3 or input_shape[0] != self.in_channels:
                raise ShapeError(
                    f"conv2d expects ({self.in_channels}, H, W), got {input_shape}", index)
            _, h, w = input_shape
            oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
            ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"conv2d kernel larger than padded input {input_shape}", index)
            return (self.out_channels, oh, ow)
        if self.kind == "avgpool2d":
            if len(input_shape) != 3:
                raise ShapeError(f"avgpool2d expects (C, H, W), got {input_shape}", index)
            c, h, w = input_shape
            if h < self.pool or w < self.pool:
                raise ShapeError(f"pool {self.pool} larger than input {input_shape}", index)
            return (c, h // self.pool, w // self.pool)
        if self.kind == "flatten":
            return (int(np.prod(input_shape)),)
        return tuple(input_shape)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers plus the per-sample input shape and class count."""
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.input_shape or min(self.input_shape) < 1:
            raise ShapeError(f"input shape must be non-empty and positive: {self.input_shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            shape = layer.output_shape(shape, index)
        if shape != (self.num_classes,):
            raise ShapeError(
                f"network output {shape} does not match class count {self.num_classes}",
                len(self.layers) - 1 if self.layers else None)

    @property
    def weighted_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_weights]

    @property
    def weighted_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.has_weights]

    @property
    def num_params(self) -> int:
        """p: total weight count over all weighted layers."""
        return sum(layer.d for layer in self.layers)

    def shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample input shape of every layer, plus the final output."""
        out = [self.input_shape]
        for index, layer in enumerate(self.layers):
            out.append(layer.output_shape(out[-1], index))
        return out


@dataclass
class ForwardTrace:
    """Caches from one forward call, consumed by the backward passes."""
    batch_size: int
    inputs: Dict[int, Tensor] = field(default_factory=dict)
    input_shapes: Dict[int, Tuple[int, ...]] = field(default_factory=dict)
    relu_masks: Dict[int, Tensor] = field(default_factory=dict)
    num_layers: int = 0


def build_preset(name: str, input_shape: Sequence[int], num_classes: int) -> NetworkSpec:
    """Desk-scale networks used by the CLI."""
    input_shape = tuple(input_shape)
    flat = int(np.prod(input_shape))
    if name == "mlp_small":
        layers = [
            LayerSpec.flatten(),
            LayerSpec.linear(flat, 256), LayerSpec.relu(),
            LayerSpec.linear(256, 256), LayerSpec.relu(),
            LayerSpec.linear(256, num_classes),
        ]
    elif name == "mlp_wide":
        layers = [
            LayerSpec.flatten(),
            LayerSpec.linear(flat, 512), LayerSpec.relu(),
            LayerSpec.linear(512, 512), LayerSpec.relu(),
            LayerSpec.linear(512, 512), LayerSpec.relu(),
            LayerSpec.linear(512, num_classes),
        ]
    elif name == "conv_small":
        if len(input_shape) != 3:
            raise ValueError(f"conv_small needs (C, H, W) input, got {input_shape}")
        channels = input_shape[0]
        layers = [
            LayerSpec.conv2d(channels, 16, 3, stride=2, padding=1), LayerSpec.relu(),
            LayerSpec.conv2d(16, 32, 3, stride=2, padding=1), LayerSpec.relu(),
        ]
        shape = input_shape
        for index, layer in enumerate(layers):
            shape = layer.output_shape(shape, index)
        _, ph, pw = shape
        layers += [
            LayerSpec.avgpool2d(min(ph, pw)),
            LayerSpec.flatten(),
            LayerSpec.linear(32, num_classes),
        ]
    else:
        raise ValueError(f"Unknown preset: {name}")
    return NetworkSpec(tuple(layers), input_shape, num_classes)


def _im2col(x: Tensor, layer: LayerSpec) -> Tensor:
    """[B, C, H, W] -> [B, C*kh*kw, OH*OW], columns ordered (C, kh, kw)."""
    p, s = layer.padding, layer.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(x, (layer.kernel_h, layer.kernel_w), axis=(2, 3))
    windows = windows[:, :, ::s, ::s]
    b, c, oh, ow, kh, kw = windows.shape
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def _col2im(dcols: Tensor, layer: LayerSpec, input_shape: Tuple[int, ...],
            out_hw: Tuple[int, int]) -> Tensor:
    b = dcols.shape[0]
    c, h, w = input_shape
    p, s = layer.padding, layer.stride
    kh, kw = layer.kernel_h, layer.kernel_w
    oh, ow = out_hw
    dcols = dcols.reshape(b, c, kh, kw, oh, ow)
    dx = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
    if p:
        dx = dx[:, :, p:p + h, p:p + w]
    return dx


def _check_params(net: NetworkSpec, weights: Sequence[Tensor],
                  masks: Optional[Sequence[Tensor]]) -> None:
    indices = net.weighted_indices
    if len(weights) != len(indices):
        raise ShapeError(f"expected {len(indices)} weight tensors, got {len(weights)}")
    if masks is not None and len(masks) != len(indices):
        raise ShapeError(f"expected {len(indices)} mask tensors, got {len(masks)}")
    for slot, index in enumerate(indices):
        expected = net.layers[index].weight_shape
        if tuple(weights[slot].shape) != expected:
            raise ShapeError(f"weight shape {weights[slot].shape} != {expected}", index)
        if masks is not None and tuple(masks[slot].shape) != expected:
            raise ShapeError(f"mask shape {masks[slot].shape} != {expected}", index)


def effective_weights(weights: Sequence[Tensor],
                      masks: Optional[Sequence[Tensor]]) -> List[Tensor]:
    """w ⊙ m per layer (w itself when masks is None)."""
    if masks is None:
        return list(weights)
    return [w * m.astype(w.dtype, copy=False) for w, m in zip(weights, masks)]


def forward(net: NetworkSpec, weights: Sequence[Tensor], masks: Optional[Sequence[Tensor]],
            batch: Tensor) -> Tuple[Tensor, ForwardTrace]:
    """Run the masked network on a batch; returns logits [B, classes] and a trace."""
    _check_params(net, weights, masks)
    if tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} != input shape {net.input_shape}", 0)

    effective = effective_weights(weights, masks)
    trace = ForwardTrace(batch_size=batch.shape[0], num_layers=len(net.layers))
    x = batch
    slot = 0
    for index, layer in enumerate(net.layers):
        trace.input_shapes[index] = tuple(x.shape[1:])
        if layer.kind == "linear":
            w = effective[slot]
            slot += 1
            trace.inputs[index] = x
            x = x @ w.T
        elif layer.kind == "conv2d":
            w = effective[slot]
            slot += 1
            cols = _im2col(x, layer)
            trace.inputs[index] = cols
            _, oh, ow = layer.output_shape(tuple(x.shape[1:]), index)
            out = np.matmul(w.reshape(layer.out_channels, -1), cols)
            x = out.reshape(x.shape[0], layer.out_channels, oh, ow)
        elif layer.kind == "relu":
            positive = x > 0
            trace.relu_masks[index] = positive
            x = np.where(positive, x, np.zeros((), dtype=x.dtype))
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == "avgpool2d":
            k = layer.pool
            b, c, h, w_ = x.shape
            oh, ow = h // k, w_ // k
            x = x[:, :, :oh * k, :ow * k].reshape(b, c, oh, k, ow, k).mean(axis=(3, 5))
    return x, trace


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tuple[float, Tensor]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise LabelError(f"expected {batch} labels, got {labels.shape}")
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes})")
    if batch == 0:
        return 0.0, np.zeros_like(logits)

    log_z = logsumexp(logits, axis=1, keepdims=True)
    log_probs = logits - log_z
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= batch
    return loss, grad.astype(logits.dtype, copy=False)


def _backward(net: NetworkSpec, weights: Sequence[Tensor], masks: Optional[Sequence[Tensor]],
              trace: ForwardTrace, grad_logits: Tensor) -> List[Tensor]:
    """Gradients of the loss with respect to each effective weight w ⊙ m."""
    _check_params(net, weights, masks)
    if trace.num_layers != len(net.layers):
        raise ShapeError(f"trace covers {trace.num_layers} layers, network has {len(net.layers)}")
    if grad_logits.shape != (trace.batch_size, net.num_classes):
        raise ShapeError(
            f"grad_logits shape {grad_logits.shape} != {(trace.batch_size, net.num_classes)}",
            len(net.layers) - 1)

    effective = effective_weights(weights, masks)
    grads: List[Optional[Tensor]] = [None] * len(effective)
    slot = len(effective)
    g = grad_logits
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        in_shape = trace.input_shapes[index]
        if layer.kind == "linear":
            slot -= 1
            x = trace.inputs.get(index)
            if x is None or x.shape[0] != g.shape[0]:
                raise ShapeError("trace has no matching linear input", index)
            grads[slot] = g.T @ x
            if index > 0:
                g = g @ effective[slot]
        elif layer.kind == "conv2d":
            slot -= 1
            cols = trace.inputs.get(index)
            if cols is None or cols.shape[0] != g.shape[0]:
                raise ShapeError("trace has no matching conv2d input", index)
            b, o, oh, ow = g.shape
            g_flat = g.reshape(b, o, oh * ow)
            grads[slot] = np.einsum("bol,bkl->ok", g_flat, cols).reshape(layer.weight_shape)
            if index > 0:
                w_mat = effective[slot].reshape(o, -1)
                dcols = np.matmul(w_mat.T, g_flat)
                g = _col2im(dcols, layer, in_shape, (oh, ow))
        elif layer.kind == "relu":
            positive = trace.relu_masks.get(index)
            if positive is None or positive.shape != g.shape:
                raise ShapeError("trace has no matching relu mask", index)
            g = np.where(positive, g, np.zeros((), dtype=g.dtype))
        elif layer.kind == "flatten":
            g = g.reshape((g.shape[0],) + in_shape)
        elif layer.kind == "avgpool2d":
            k = layer.pool
            c, h, w_ = in_shape
            oh, ow = h // k, w_ // k
            spread = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            g_full = np.zeros((g.shape[0], c, h, w_), dtype=g.dtype)
            g_full[:, :, :oh * k, :ow * k] = spread
            g = g_full
    return grads


def backward_scores(net: NetworkSpec, weights: Sequence[Tensor], masks: Sequence[Tensor],
                    trace: ForwardTrace, grad_logits: Tensor) -> List[Tensor]:
    """Straight-through score gradients: dL/d(w ⊙ m) ⊙ w, the indicator treated as identity."""
    grads = _backward(net, weights, masks, trace, grad_logits)
    return [g * w for g, w in zip(grads, weights)]


def backward_weights(net: NetworkSpec, weights: Sequence[Tensor], masks: Optional[Sequence[Tensor]],
                     trace: ForwardTrace, grad_logits: Tensor) -> List[Tensor]:
    """Weight gradients of a masked network, zero wherever the mask is zero."""
    grads = _backward(net, weights, masks, trace, grad_logits)
    if masks is None:
        return grads
    return [g * m.astype(g.dtype, copy=False) for g, m in zip(grads, masks)]


def predict(net: NetworkSpec, weights: Sequence[Tensor], masks: Optional[Sequence[Tensor]],
            images: Tensor, batch_size: int = 1000) -> Tensor:
    """Logits for a whole split, computed in fixed-size chunks."""
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        logits, _ = forward(net, weights, masks, images[start:start + batch_size])
        chunks.append(logits)
    if not chunks:
        return np.zeros((0, net.num_classes), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def accuracy(net: NetworkSpec, weights: Sequence[Tensor], masks: Optional[Sequence[Tensor]],
             images: Tensor, labels: Tensor, batch_size: int = 1000) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if images.shape[0] == 0:
        return 0.0
    logits = predict(net, weights, masks, images, batch_size)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
