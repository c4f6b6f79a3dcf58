"""Differentiable computation graph for small embedding networks.

An :class:`EmbeddingNet` is an ordered stack of fully connected layers and
relu activations, finished by L2 normalization of the embedding rows. The
full-precision ("shadow") weights are the single source of truth; when the
net runs in quantized mode every weight passes through a fake-quantization
node (quantize-then-dequantize, per-channel over output rows, parameters
derived live from the current shadow weights) and every activation site
passes through a fake-quantization node with parameters frozen at
calibration time. Biases stay full precision.

Backward passes replay a :class:`GradTape` recorded during the forward.
The fake-quantization nodes use the straight-through estimator: the
gradient passes unchanged where the input lies inside the node's clipping
range [range_lo, range_hi] and is zeroed outside, which keeps weight
gradients alive despite the piecewise-constant forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, StateError
from .quantizer import (
    SUPPORTED_BIT_WIDTHS,
    QuantParams,
    RangeObserver,
    dequantize,
    derive_params,
    quantize,
)
from .tensor_core import Tensor, l2_normalize, matmul, relu, transpose


@dataclass
class Linear:
    """Fully connected layer y = x @ W^T + b with shadow weights W [out, in]."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.rank != 2 or self.bias.rank != 1:
            raise DimensionError(
                f"linear expects weight rank 2 and bias rank 1, got {self.weight.shape} / {self.bias.shape}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionError(
                f"bias size {self.bias.shape[0]} != output dim {self.weight.shape[0]}")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


class Relu:
    """Marker node for an elementwise relu between linear layers."""

    def __repr__(self) -> str:
        return "Relu()"


class EmbeddingNet:
    """Layer stack ending in an L2-normalized embedding head.

    Quantization state:

    * ``quant_bits`` — bit width used for both weights and activations
      when running in quantized mode (None = not configured).
    * ``activation_params`` — frozen per-site activation QuantParams, one
      per activation site (after each relu plus after the final linear),
      produced by calibration.
    * ``frozen_weight_params`` — per-layer weight QuantParams pinned by
      loading a quantized model file. When absent, weight parameters are
      re-derived from the live shadow weights on every forward pass.
    """

    def __init__(self, layers: Sequence[Linear | Relu]):
        layers = list(layers)
        if not layers or not isinstance(layers[-1], Linear):
            raise DimensionError("network must end in a linear embedding layer")
        prev = None
        for layer in layers:
            if isinstance(layer, Linear):
                if prev is not None and layer.in_dim != prev:
                    raise DimensionError(
                        f"layer input dim {layer.in_dim} does not compose with previous output {prev}")
                prev = layer.out_dim
        self.layers = layers
        self.quant_bits: int | None = None
        self.activation_params: list[QuantParams] | None = None
        self.frozen_weight_params: list[list[QuantParams]] | None = None
        self._velocity: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- structure ---------------------------------------------------------

    @property
    def linear_layers(self) -> list[Linear]:
        return [l for l in self.layers if isinstance(l, Linear)]

    @property
    def input_dim(self) -> int:
        return self.linear_layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.linear_layers[-1].out_dim

    @property
    def activation_site_count(self) -> int:
        """Fake-quant sites: one after each relu, one after the final linear."""
        return sum(1 for l in self.layers if isinstance(l, Relu)) + 1

    @property
    def param_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.linear_layers)

    @property
    def weight_param_count(self) -> int:
        return sum(l.weight.size for l in self.linear_layers)

    def set_quantization(self, bit_width: int) -> "EmbeddingNet":
        if bit_width not in SUPPORTED_BIT_WIDTHS:
            raise DomainError(f"unsupported bit width {bit_width}")
        self.quant_bits = bit_width
        self.activation_params = None
        self.frozen_weight_params = None
        return self

    @property
    def is_calibrated(self) -> bool:
        return self.quant_bits is not None and self.activation_params is not None

    def same_architecture(self, other: "EmbeddingNet") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if isinstance(a, Linear) != isinstance(b, Linear):
                return False
            if isinstance(a, Linear) and (a.weight.shape != b.weight.shape):
                return False
        return True


def build_embedding_net(input_dim: int,
                        hidden_dims: Sequence[int] = (64, 64),
                        embed_dim: int = 32,
                        seed: int = 0) -> EmbeddingNet:
    """Fresh network in -> hidden... -> embed with relu between linears.

    Weights use scaled-normal init (std = 1/sqrt(fan_in)), biases start at
    zero; fully determined by the seed.
    """
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden_dims, embed_dim]
    layers: list[Linear | Relu] = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append(Linear(weight=Tensor(w.astype(np.float32)),
                             bias=Tensor.zeros((fan_out,))))
        if i < len(dims) - 2:
            layers.append(Relu())
    return EmbeddingNet(layers)


def clone_net(net: EmbeddingNet) -> EmbeddingNet:
    """Independent copy sharing no mutable state (tensors are immutable)."""
    out = EmbeddingNet([
        Linear(weight=l.weight, bias=l.bias) if isinstance(l, Linear) else Relu()
        for l in net.layers
    ])
    out.quant_bits = net.quant_bits
    out.activation_params = list(net.activation_params) if net.activation_params else None
    out.frozen_weight_params = (
        [list(p) for p in net.frozen_weight_params] if net.frozen_weight_params else None)
    return out


def net_fingerprint(net: EmbeddingNet) -> str:
    """SHA-256 over all shadow weights and biases, for immutability checks."""
    import hashlib

    h = hashlib.sha256()
    for layer in net.linear_layers:
        h.update(layer.weight.data.tobytes())
        h.update(layer.bias.data.tobytes())
    return h.hexdigest()


# -- differentiable nodes ----------------------------------------------------


def fake_quant(x: Tensor,
               params: QuantParams | Sequence[QuantParams],
               channel_axis: int | None = None) -> Tensor:
    """Quantize-then-dequantize: real-valued output snapped to the code grid."""
    return dequantize(quantize(x, params, channel_axis))


def in_range_mask(x: Tensor,
                  params: QuantParams | Sequence[QuantParams],
                  channel_axis: int | None = None) -> np.ndarray:
    """Indicator of [range_lo, range_hi] per element (the STE pass-through set)."""
    if isinstance(params, QuantParams):
        lo = np.float32(params.range_lo)
        hi = np.float32(params.range_hi)
    else:
        plist = list(params)
        bshape = [1] * x.rank
        bshape[channel_axis] = len(plist)
        lo = np.array([p.range_lo for p in plist], dtype=np.float32).reshape(bshape)
        hi = np.array([p.range_hi for p in plist], dtype=np.float32).reshape(bshape)
    return ((x.data >= lo) & (x.data <= hi)).astype(np.float32)


def fake_quant_backward(x: Tensor,
                        params: QuantParams | Sequence[QuantParams],
                        upstream: Tensor,
                        channel_axis: int | None = None) -> Tensor:
    """Straight-through estimator: upstream gradient gated by the range mask."""
    if upstream.shape != x.shape:
        raise DimensionError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    return Tensor._wrap(upstream.data * in_range_mask(x, params, channel_axis))


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ W^T + b for a batch of row vectors."""
    if x.rank != 2:
        raise DimensionError(f"linear expects a rank-2 input batch, got {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input dim {x.shape[1]} != weight input dim {weight.shape[1]}")
    y = matmul(x, transpose(weight))
    return Tensor._wrap(y.data + bias.data[None, :])


def linear_backward(x: Tensor, weight: Tensor,
                    upstream: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of y = x @ W^T + b: returns (d_x, d_weight, d_bias)."""
    if upstream.shape != (x.shape[0], weight.shape[0]):
        raise DimensionError(
            f"upstream shape {upstream.shape} incompatible with {x.shape} x {weight.shape}")
    d_x = matmul(upstream, weight)
    d_w = matmul(transpose(upstream), x)
    d_b = Tensor._wrap(upstream.data.sum(axis=0, dtype=np.float32))
    return d_x, d_w, d_b


def l2_normalize_backward(x: Tensor, upstream: Tensor) -> Tensor:
    """Gradient of row-wise normalization: (g - (g . u) u) / |x| per row."""
    xd = x.data.astype(np.float64)
    g = upstream.data.astype(np.float64)
    norms = np.sqrt(np.sum(xd * xd, axis=1, keepdims=True))
    u = xd / norms
    proj = np.sum(g * u, axis=1, keepdims=True)
    return Tensor._wrap(((g - proj * u) / norms).astype(np.float32))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    if logits.rank != 2:
        raise DimensionError(f"logits must be rank 2, got {logits.shape}")
    m, c = logits.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (m,):
        raise DimensionError(f"{idx.shape[0] if idx.ndim else 0} labels for batch of {m}")
    if idx.min() < 0 or idx.max() >= c:
        raise DimensionError(f"labels out of range for {c} classes")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    p = expz / expz.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(p[np.arange(m), idx])))
    grad = p.copy()
    grad[np.arange(m), idx] -= 1.0
    return loss, Tensor._wrap((grad / m).astype(np.float32))


# -- forward / backward over a whole net -------------------------------------


@dataclass
class _Record:
    kind: str
    layer_index: int | None = None
    inputs: Tensor | None = None
    mask: np.ndarray | None = None
    weight_used: Tensor | None = None


@dataclass
class GradTape:
    """Cached activations from one forward pass; backward consumes it once."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False


def _weight_params(net: EmbeddingNet, linear_index: int, layer: Linear) -> list[QuantParams]:
    if net.frozen_weight_params is not None:
        return net.frozen_weight_params[linear_index]
    # Live derivation: per-channel over output rows of the current shadow weight.
    return derive_params(layer.weight, net.quant_bits, channel_axis=0)


def forward_embed(net: EmbeddingNet, x: Tensor, quantized: bool,
                  observers: list[RangeObserver] | None = None) -> tuple[Tensor, GradTape]:
    """Run the net on a batch, returning L2-normalized embeddings and a tape.

    ``quantized`` routes every weight and activation site through fake
    quantization; it requires ``quant_bits`` and calibrated activation
    parameters. ``observers`` (calibration only, full-precision mode)
    receive every activation-site output.
    """
    if x.rank != 2 or x.shape[1] != net.input_dim:
        raise DimensionError(f"input shape {x.shape} incompatible with input dim {net.input_dim}")
    if quantized:
        if net.quant_bits is None:
            raise StateError("quantized forward requires a configured bit width")
        if net.activation_params is None:
            raise StateError("quantized forward requires calibrated activation ranges")
    if observers is not None and len(observers) != net.activation_site_count:
        raise DimensionError(
            f"{len(observers)} observers for {net.activation_site_count} activation sites")

    tape = GradTape()
    site = 0
    linear_index = 0
    h = x
    for layer in net.layers:
        if isinstance(layer, Linear):
            if quantized:
                wp = _weight_params(net, linear_index, layer)
                w_used = fake_quant(layer.weight, wp, channel_axis=0)
                wmask = in_range_mask(layer.weight, wp, channel_axis=0)
            else:
                w_used = layer.weight
                wmask = None
            tape.records.append(_Record(kind="linear", layer_index=linear_index,
                                        inputs=h, mask=wmask, weight_used=w_used))
            h = linear_forward(h, w_used, layer.bias)
            linear_index += 1
            is_last = linear_index == len(net.linear_layers)
            if is_last:
                h = _activation_site(net, tape, h, site, quantized, observers)
                site += 1
        else:
            tape.records.append(_Record(kind="relu", inputs=h))
            h = relu(h)
            h = _activation_site(net, tape, h, site, quantized, observers)
            site += 1
    tape.records.append(_Record(kind="normalize", inputs=h))
    return l2_normalize(h), tape


def _activation_site(net: EmbeddingNet, tape: GradTape, h: Tensor, site: int,
                     quantized: bool, observers: list[RangeObserver] | None) -> Tensor:
    if observers is not None:
        observers[site].update(h)
    if not quantized:
        return h
    p = net.activation_params[site]
    tape.records.append(_Record(kind="act_quant", inputs=h,
                                mask=in_range_mask(h, p)))
    return fake_quant(h, p)


def observe_activations(net: EmbeddingNet, x: Tensor,
                        observers: list[RangeObserver]) -> None:
    """Full-precision forward that only feeds the observers.

    Skips the final normalization (irrelevant to activation ranges), so
    degenerate inputs that would produce zero-norm embeddings still
    calibrate cleanly.
    """
    if x.rank != 2 or x.shape[1] != net.input_dim:
        raise DimensionError(f"input shape {x.shape} incompatible with input dim {net.input_dim}")
    if len(observers) != net.activation_site_count:
        raise DimensionError(
            f"{len(observers)} observers for {net.activation_site_count} activation sites")
    site = 0
    linear_index = 0
    h = x
    for layer in net.layers:
        if isinstance(layer, Linear):
            h = linear_forward(h, layer.weight, layer.bias)
            linear_index += 1
            if linear_index == len(net.linear_layers):
                observers[site].update(h)
                site += 1
        else:
            h = relu(h)
            observers[site].update(h)
            site += 1


def backward_embed(net: EmbeddingNet, tape: GradTape,
                   grad_output: Tensor) -> dict[int, tuple[Tensor, Tensor]]:
    """Backpropagate a gradient wrt the normalized embeddings through the tape.

    Returns per-linear-layer (d_weight, d_bias) addressed by linear index.
    Weight gradients flow to the shadow weights through the fake-quant STE
    mask when the forward ran quantized.
    """
    if tape.consumed:
        raise StateError("gradient tape already consumed")
    tape.consumed = True
    grads: dict[int, tuple[Tensor, Tensor]] = {}
    g = grad_output
    for rec in reversed(tape.records):
        if rec.kind == "normalize":
            g = l2_normalize_backward(rec.inputs, g)
        elif rec.kind == "act_quant":
            g = Tensor._wrap(g.data * rec.mask)
        elif rec.kind == "relu":
            g = Tensor._wrap(g.data * (rec.inputs.data > 0).astype(np.float32))
        else:  # linear
            d_x, d_w, d_b = linear_backward(rec.inputs, rec.weight_used, g)
            if rec.mask is not None:
                d_w = Tensor._wrap(d_w.data * rec.mask)
            grads[rec.layer_index] = (d_w, d_b)
            g = d_x
    return grads


def sgd_step(net: EmbeddingNet, grads: dict[int, tuple[Tensor, Tensor]],
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> EmbeddingNet:
    """SGD with momentum and decoupled-from-nothing classic weight decay.

    v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v.
    Updates the shadow weights in place (quantized views refresh on the
    next forward) and returns the net for chaining.
    """
    linears = net.linear_layers
    for idx in sorted(grads):
        if not 0 <= idx < len(linears):
            raise DimensionError(f"gradient for unknown layer {idx}")
        layer = linears[idx]
        d_w, d_b = grads[idx]
        if d_w.shape != layer.weight.shape or d_b.shape != layer.bias.shape:
            raise DimensionError(f"gradient shapes {d_w.shape}/{d_b.shape} do not match layer {idx}")
        if idx not in net._velocity:
            net._velocity[idx] = (np.zeros(layer.weight.shape, dtype=np.float32),
                                  np.zeros(layer.bias.shape, dtype=np.float32))
        v_w, v_b = net._velocity[idx]
        lr32 = np.float32(lr)
        mom32 = np.float32(momentum)
        wd32 = np.float32(weight_decay)
        v_w = mom32 * v_w + d_w.data + wd32 * layer.weight.data
        v_b = mom32 * v_b + d_b.data + wd32 * layer.bias.data
        net._velocity[idx] = (v_w, v_b)
        layer.weight = Tensor._wrap(layer.weight.data - lr32 * v_w)
        layer.bias = Tensor._wrap(layer.bias.data - lr32 * v_b)
    return net
