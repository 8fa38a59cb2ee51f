"""Dense ReLU networks with cached forward traces and exact gradients.

A network is a stack of dense layers with ReLU between them and identity at
the output.  The final layer is bias-free: the closed-form curvature
expressions in :mod:`trhreg.trh` are traces over the top weight matrix
alone, and a bias-free top layer makes them the complete top-layer trace.
Hidden layers may carry biases.

Weight layout is fixed and documented: layer order, weight matrices
row-major ``(d_in, d_out)``, bias (when present) after the weights of its
layer.  ``flatten_weights``/``unflatten_weights`` round-trip bit-exactly in
this ordering, which is what the finite-difference oracles and the Gaussian
posterior machinery operate on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .numerics import Rng


class TrainingDivergence(RuntimeError):
    """Objective evaluated to a non-finite value."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (d_in, d_out)
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("layer weights must be 2-d")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[1],):
                raise ValueError("bias shape must match layer output dim")

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class MlpNetwork:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError(f"layer dims do not chain: {a.d_out} vs {b.d_in}")
        if self.layers[-1].bias is not None:
            raise ValueError("final layer must be bias-free")
        if self.num_classes < 2:
            raise ValueError("output dimension must be >= 2")

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].d_out

    @property
    def depth(self) -> int:
        return len(self.layers)

    def copy(self) -> "MlpNetwork":
        return MlpNetwork([DenseLayer(l.weights.copy(),
                                      None if l.bias is None else l.bias.copy())
                           for l in self.layers])


@dataclass
class ForwardTrace:
    """Cached activations of one forward pass.

    ``layer_inputs[i]`` is the input to layer i (``layer_inputs[0]`` is x),
    ``preacts[i]`` the pre-activation output of layer i; hidden layer
    inputs satisfy ``layer_inputs[i+1] = max(0, preacts[i])`` and the
    logits are exactly ``features @ W_top``.
    """

    layer_inputs: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def features(self) -> np.ndarray:
        """Penultimate representation: input to the top layer."""
        return self.layer_inputs[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.preacts[-1]


def init_mlp(dims, rng: Rng, hidden_bias: bool = True) -> MlpNetwork:
    """Gaussian init with variance 1/d_in per layer; biases start at zero."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        last = i == len(dims) - 2
        b = None if (last or not hidden_bias) else np.zeros(d_out)
        layers.append(DenseLayer(w, b))
    return MlpNetwork(layers)


def forward(net: MlpNetwork, x: np.ndarray) -> ForwardTrace:
    """Run the network on x (``(d,)`` or ``(m, d)``) and cache the trace."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != net.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != network input dim {net.input_dim}")
    layer_inputs = [X]
    preacts = []
    cur = X
    for i, layer in enumerate(net.layers):
        pre = cur @ layer.weights
        if layer.bias is not None:
            pre = pre + layer.bias
        preacts.append(pre)
        if i < net.depth - 1:
            cur = np.maximum(pre, 0.0)
            layer_inputs.append(cur)
    if single:
        layer_inputs = [a[0] for a in layer_inputs]
        preacts = [a[0] for a in preacts]
    return ForwardTrace(layer_inputs, preacts)


def min_preact_magnitude(net: MlpNetwork, x: np.ndarray) -> float:
    """Smallest |hidden pre-activation|; small values sit on a ReLU kink."""
    tr = forward(net, x)
    hidden = tr.preacts[:-1]
    if not hidden:
        return np.inf
    return min(float(np.min(np.abs(p))) for p in hidden)


# -- parameter vector <-> network ------------------------------------


def param_count(net: MlpNetwork) -> int:
    n = 0
    for l in net.layers:
        n += l.weights.size
        if l.bias is not None:
            n += l.bias.size
    return n


def flatten_weights(net: MlpNetwork) -> np.ndarray:
    parts = []
    for l in net.layers:
        parts.append(l.weights.ravel())
        if l.bias is not None:
            parts.append(l.bias)
    return np.concatenate(parts)


def unflatten_weights(net: MlpNetwork, w: np.ndarray) -> MlpNetwork:
    w = np.asarray(w, dtype=np.float64)
    if w.size != param_count(net):
        raise ValueError(f"expected {param_count(net)} params, got {w.size}")
    layers = []
    pos = 0
    for l in net.layers:
        k = l.weights.size
        weights = w[pos:pos + k].reshape(l.weights.shape).copy()
        pos += k
        bias = None
        if l.bias is not None:
            bias = w[pos:pos + l.bias.size].copy()
            pos += l.bias.size
        layers.append(DenseLayer(weights, bias))
    return MlpNetwork(layers)


def flat_index_slices(net: MlpNetwork):
    """Per-layer (weight_slice, bias_slice_or_None) into the flat vector."""
    out = []
    pos = 0
    for l in net.layers:
        ws = slice(pos, pos + l.weights.size)
        pos += l.weights.size
        bs = None
        if l.bias is not None:
            bs = slice(pos, pos + l.bias.size)
            pos += l.bias.size
        out.append((ws, bs))
    return out


# -- differentiation ---------------------------------------------------


def lift(net: MlpNetwork):
    """Wrap every parameter in a tape leaf: list of (W node, bias node|None)."""
    return [(tape.leaf(l.weights), None if l.bias is None else tape.leaf(l.bias))
            for l in net.layers]


def forward_nodes(lifted, X):
    """Tape forward pass on constant inputs X (m, d).

    Returns (layer_input_nodes, preact_nodes) mirroring ForwardTrace.
    """
    cur = tape.constant(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    layer_inputs = [cur]
    preacts = []
    depth = len(lifted)
    for i, (w, b) in enumerate(lifted):
        pre = cur @ w
        if b is not None:
            pre = pre + b
        preacts.append(pre)
        if i < depth - 1:
            cur = tape.relu(pre)
            layer_inputs.append(cur)
    return layer_inputs, preacts


def backprop(net: MlpNetwork, objective):
    """Exact gradients of a scalar objective built on lifted parameters.

    `objective` receives the lifted layer list and returns a scalar tape
    node (typically the mean loss of a batch plus regularizers).  Returns
    ``(loss_value, grads)`` with one ``(dW, db|None)`` pair per layer.
    Raises :class:`TrainingDivergence` if the loss is non-finite.
    """
    lifted = lift(net)
    out = objective(lifted)
    value = float(out.value)
    if not np.isfinite(value):
        raise TrainingDivergence(f"objective evaluated to {value}")
    tape.backward(out)
    grads = []
    for w, b in lifted:
        gw = w.grad if w.grad is not None else np.zeros(w.shape)
        gb = None
        if b is not None:
            gb = b.grad if b.grad is not None else np.zeros(b.shape)
        grads.append((gw, gb))
    return value, grads


def gradient_vector(net: MlpNetwork, objective):
    """Like :func:`backprop` but with the gradient flattened."""
    value, grads = backprop(net, objective)
    parts = []
    for gw, gb in grads:
        parts.append(np.asarray(gw).ravel())
        if gb is not None:
            parts.append(np.asarray(gb))
    return value, np.concatenate(parts)


def input_gradient(net: MlpNetwork, X: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of a loss w.r.t. the input, given d(loss)/d(logits).

    Closed-form reverse pass used by the attack loops; X and dlogits are
    ``(m, d)`` and ``(m, K)``.
    """
    tr = forward(net, X)
    delta = np.asarray(dlogits, dtype=np.float64)
    for i in range(net.depth - 1, 0, -1):
        delta = delta @ net.layers[i].weights.T
        delta = delta * (tr.preacts[i - 1] > 0)
    return delta @ net.layers[0].weights.T


# -- checkpoint format -------------------------------------------------

CHECKPOINT_MAGIC = "TRHNET v1"


def save_checkpoint(net: MlpNetwork, path) -> None:
    """Write the value-exact `TRHNET v1` text format."""
    lines = [f"{CHECKPOINT_MAGIC} {net.depth}"]
    for i, l in enumerate(net.layers):
        has_bias = 0 if l.bias is None else 1
        lines.append(f"layer {i} {l.d_in} {l.d_out} {has_bias}")
        for row in l.weights:
            lines.append(" ".join(repr(float(v)) for v in row))
        if l.bias is not None:
            lines.append(" ".join(repr(float(v)) for v in l.bias))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> MlpNetwork:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError("empty checkpoint file")
    header = lines[0].split()
    if " ".join(header[:2]) != CHECKPOINT_MAGIC:
        raise ValueError(f"not a {CHECKPOINT_MAGIC} checkpoint: {lines[0]!r}")
    try:
        num_layers = int(header[2])
        layers = []
        pos = 1
        for i in range(num_layers):
            tag, idx, d_in, d_out, has_bias = lines[pos].split()
            if tag != "layer" or int(idx) != i:
                raise ValueError(
                    f"malformed layer header at line {pos + 1}: {lines[pos]!r}")
            d_in, d_out, has_bias = int(d_in), int(d_out), int(has_bias)
            pos += 1
            rows = []
            for _ in range(d_in):
                vals = [float(v) for v in lines[pos].split()]
                if len(vals) != d_out:
                    raise ValueError(f"expected {d_out} values at line {pos + 1}")
                rows.append(vals)
                pos += 1
            bias = None
            if has_bias:
                bias = np.array([float(v) for v in lines[pos].split()])
                pos += 1
            layers.append(DenseLayer(np.array(rows), bias))
    except IndexError:
        raise ValueError("truncated checkpoint file") from None
    net = MlpNetwork(layers)
    if not np.all(np.isfinite(flatten_weights(net))):
        raise ValueError("checkpoint contains non-finite weights")
    return net
