"""Seven time series architectures sharing one forward interface.

Recurrent models (RNN, LSTM, stacked LSTM, GRU) consume the window step by
step and feed the final hidden state to a single linear head.  CNN applies
conv -> relu -> maxpool -> flatten -> head.  CNN-LSTM runs a shared conv
block over fixed-length subsequences of the window and an LSTM over the
resulting feature sequence; ConvLSTM is an LSTM cell whose input and
recurrent transforms are same-padded 1-D convolutions over the subsequence
axis.  Regression heads emit raw values, classification heads a sigmoid
probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, ShapeError
from ._serialize import read_arrays, write_arrays

ARCHITECTURES = ("lstm", "stacked_lstm", "gru", "rnn", "cnn", "cnn_lstm", "conv_lstm")
TASKS = ("regression", "classification")

# Probabilities are clamped to this range inside the cross-entropy loss.
BCE_CLAMP = 1e-7

ModelParams = dict


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameters are a pure function of this."""

    architecture: str
    window: int = 23
    channels: int = 1
    hidden_size: int = 64
    layers: int = 1
    task: str = "regression"
    seed: int = 0
    filters: int = 32
    kernel: int = 3
    subsequences: int = 4

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; "
                             f"expected one of {ARCHITECTURES}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.hidden_size < 1 or self.channels < 1:
            raise ValueError("hidden_size and channels must be >= 1")
        if self.architecture == "stacked_lstm":
            if self.layers < 2:
                raise ValueError("stacked_lstm requires layers >= 2")
        elif self.layers != 1:
            raise ValueError(f"{self.architecture} requires layers == 1")
        if self.architecture in ("cnn", "cnn_lstm", "conv_lstm"):
            if self.kernel < 1 or self.filters < 1 or self.subsequences < 1:
                raise ValueError("kernel, filters and subsequences must be >= 1")
        # Fail early when conv/pool geometry cannot produce any output.
        _layout(self)

    @property
    def padded_window(self) -> int:
        """Window length after front padding to a subsequence multiple."""
        s = self.subsequences
        return ((self.window + s - 1) // s) * s

    @property
    def subseq_len(self) -> int:
        return self.padded_window // self.subsequences


def spec_to_meta(spec: ModelSpec) -> dict:
    return asdict(spec)


def spec_from_meta(meta: dict) -> ModelSpec:
    return ModelSpec(**meta)


# ---------------------------------------------------------------------------
# parameter layout and initialization

_ZERO = "zero"
_LSTM_BIAS = "lstm_bias"  # zeros with the forget-gate slice set to 1


def _layout(spec: ModelSpec) -> list[tuple[str, tuple, object]]:
    """(name, shape, init) triples; init is a fan-in int or a bias tag."""
    H, C, T = spec.hidden_size, spec.channels, spec.window
    a = spec.architecture
    out = []
    if a == "rnn":
        out += [("rnn.w_ih", (C, H), C), ("rnn.w_hh", (H, H), H), ("rnn.b", (H,), _ZERO)]
        head_in = H
    elif a == "lstm":
        out += [("lstm.w_ih", (C, 4 * H), C), ("lstm.w_hh", (H, 4 * H), H),
                ("lstm.b", (4 * H,), _LSTM_BIAS)]
        head_in = H
    elif a == "stacked_lstm":
        for layer in range(spec.layers):
            cin = C if layer == 0 else H
            out += [(f"lstm{layer}.w_ih", (cin, 4 * H), cin),
                    (f"lstm{layer}.w_hh", (H, 4 * H), H),
                    (f"lstm{layer}.b", (4 * H,), _LSTM_BIAS)]
        head_in = H
    elif a == "gru":
        out += [("gru.w_ih", (C, 3 * H), C), ("gru.w_hh", (H, 3 * H), H),
                ("gru.b", (3 * H,), _ZERO)]
        head_in = H
    elif a == "cnn":
        K, F = spec.kernel, spec.filters
        conv_len = T - K + 1
        if conv_len < 2:
            raise ValueError(f"cnn: window {T} too short for kernel {K} plus pooling")
        out += [("conv.w", (K, C, F), K * C), ("conv.b", (F,), _ZERO)]
        head_in = (conv_len // 2) * F
    elif a == "cnn_lstm":
        K, F, Ls = spec.kernel, spec.filters, spec.subseq_len
        conv_len = Ls - K + 1
        if conv_len < 2:
            raise ValueError(
                f"cnn_lstm: subsequence length {Ls} too short for kernel {K} plus pooling")
        feat = (conv_len // 2) * F
        out += [("conv.w", (K, C, F), K * C), ("conv.b", (F,), _ZERO),
                ("lstm.w_ih", (feat, 4 * H), feat), ("lstm.w_hh", (H, 4 * H), H),
                ("lstm.b", (4 * H,), _LSTM_BIAS)]
        head_in = H
    elif a == "conv_lstm":
        K, Ls = spec.kernel, spec.subseq_len
        out += [("convlstm.w_ih", (K, C, 4 * H), K * C),
                ("convlstm.w_hh", (K, H, 4 * H), K * H),
                ("convlstm.b", (4 * H,), _LSTM_BIAS)]
        head_in = Ls * H
    else:  # pragma: no cover - guarded by ModelSpec validation
        raise ValueError(a)
    out += [("head.w", (head_in, 1), head_in), ("head.b", (1,), _ZERO)]
    return out


def init_params(spec: ModelSpec) -> ModelParams:
    """Deterministic init: weights uniform in +-1/sqrt(fan-in) from a Philox
    stream keyed by spec.seed, biases zero, LSTM forget-gate bias 1."""
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    params: ModelParams = {}
    H = spec.hidden_size
    for name, shape, init in _layout(spec):
        if init == _ZERO:
            params[name] = np.zeros(shape)
        elif init == _LSTM_BIAS:
            b = np.zeros(shape)
            b[H:2 * H] = 1.0
            params[name] = b
        else:
            bound = 1.0 / math.sqrt(init)
            params[name] = rng.uniform(-bound, bound, shape)
    return params


def parameter_count(spec: ModelSpec) -> int:
    return sum(math.prod(shape) for _, shape, _ in _layout(spec))


# ---------------------------------------------------------------------------
# forward passes


def _step_slice(x: Tensor, t: int, width: int = 1) -> Tensor:
    """(B, T, C) -> (B, width*C) slice of steps [t, t+width)."""
    B = x.shape[0]
    s = ad.slice_(x, 1, t, t + width)
    return s.reshape(B, width * x.shape[2])


def _lstm_cell(xt, h, c, w_ih, w_hh, b, H):
    z = ad.matmul(xt, w_ih) + ad.matmul(h, w_hh) + b
    i = ad.sigmoid(ad.slice_(z, 1, 0, H))
    f = ad.sigmoid(ad.slice_(z, 1, H, 2 * H))
    g = ad.tanh(ad.slice_(z, 1, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice_(z, 1, 3 * H, 4 * H))
    c = f * c + i * g
    h = o * ad.tanh(c)
    return h, c


def _lstm_scan(steps, g, params, prefix, H, B):
    h = g.leaf(np.zeros((B, H)))
    c = g.leaf(np.zeros((B, H)))
    w_ih, w_hh, b = params[f"{prefix}.w_ih"], params[f"{prefix}.w_hh"], params[f"{prefix}.b"]
    hs = []
    for xt in steps:
        h, c = _lstm_cell(xt, h, c, w_ih, w_hh, b, H)
        hs.append(h)
    return hs


def _pad_front(x: Tensor, total: int) -> Tensor:
    """Left-pad the time axis to ``total`` steps by repeating the first step."""
    T = x.shape[1]
    if total == T:
        return x
    first = ad.slice_(x, 1, 0, 1)
    return ad.concat([first] * (total - T) + [x], axis=1)


def _conv_block(x: Tensor, params) -> Tensor:
    B = x.shape[0]
    y = ad.relu(ad.conv1d(x, params["conv.w"]) + params["conv.b"])
    y = ad.maxpool1d(y, 2)
    return y.reshape(B, y.shape[1] * y.shape[2])


def _same_conv(x: Tensor, w: Tensor) -> Tensor:
    """Zero-padded conv keeping the spatial length (odd or even kernels)."""
    g = x.graph
    B, T, C = x.shape
    K = w.shape[0]
    left = (K - 1) // 2
    right = K - 1 - left
    parts = []
    if left:
        parts.append(g.leaf(np.zeros((B, left, C))))
    parts.append(x)
    if right:
        parts.append(g.leaf(np.zeros((B, right, C))))
    return ad.conv1d(ad.concat(parts, axis=1) if len(parts) > 1 else x, w)


def _forward_rnn(spec, params, g, x):
    B, H = x.shape[0], spec.hidden_size
    h = g.leaf(np.zeros((B, H)))
    for t in range(spec.window):
        xt = _step_slice(x, t)
        h = ad.tanh(ad.matmul(xt, params["rnn.w_ih"]) + ad.matmul(h, params["rnn.w_hh"])
                    + params["rnn.b"])
    return h


def _forward_lstm(spec, params, g, x):
    steps = [_step_slice(x, t) for t in range(spec.window)]
    hs = _lstm_scan(steps, g, params, "lstm", spec.hidden_size, x.shape[0])
    return hs[-1]


def _forward_stacked_lstm(spec, params, g, x):
    steps = [_step_slice(x, t) for t in range(spec.window)]
    for layer in range(spec.layers):
        steps = _lstm_scan(steps, g, params, f"lstm{layer}", spec.hidden_size, x.shape[0])
    return steps[-1]


def _forward_gru(spec, params, g, x):
    B, H = x.shape[0], spec.hidden_size
    h = g.leaf(np.zeros((B, H)))
    for t in range(spec.window):
        xt = _step_slice(x, t)
        a = ad.matmul(xt, params["gru.w_ih"]) + params["gru.b"]
        rec = ad.matmul(h, params["gru.w_hh"])
        z = ad.sigmoid(ad.slice_(a, 1, 0, H) + ad.slice_(rec, 1, 0, H))
        r = ad.sigmoid(ad.slice_(a, 1, H, 2 * H) + ad.slice_(rec, 1, H, 2 * H))
        n = ad.tanh(ad.slice_(a, 1, 2 * H, 3 * H) + r * ad.slice_(rec, 1, 2 * H, 3 * H))
        h = (1.0 - z) * n + z * h
    return h


def _forward_cnn(spec, params, g, x):
    return _conv_block(x, params)


def _forward_cnn_lstm(spec, params, g, x):
    B, S, Ls = x.shape[0], spec.subsequences, spec.subseq_len
    x = _pad_front(x, spec.padded_window)
    sub = x.reshape(B * S, Ls, spec.channels)
    feat = _conv_block(sub, params)               # (B*S, feat)
    feat = feat.reshape(B, S, feat.shape[1])
    steps = [_step_slice(feat, s) for s in range(S)]
    hs = _lstm_scan(steps, g, params, "lstm", spec.hidden_size, B)
    return hs[-1]


def _forward_conv_lstm(spec, params, g, x):
    B, S, Ls, H = x.shape[0], spec.subsequences, spec.subseq_len, spec.hidden_size
    x = _pad_front(x, spec.padded_window)
    h = g.leaf(np.zeros((B, Ls, H)))
    c = g.leaf(np.zeros((B, Ls, H)))
    w_ih, w_hh, b = params["convlstm.w_ih"], params["convlstm.w_hh"], params["convlstm.b"]
    for s in range(S):
        xs = ad.slice_(x, 1, s * Ls, (s + 1) * Ls)        # (B, Ls, C)
        z = _same_conv(xs, w_ih) + _same_conv(h, w_hh) + b  # (B, Ls, 4H)
        i = ad.sigmoid(ad.slice_(z, 2, 0, H))
        f = ad.sigmoid(ad.slice_(z, 2, H, 2 * H))
        gt = ad.tanh(ad.slice_(z, 2, 2 * H, 3 * H))
        o = ad.sigmoid(ad.slice_(z, 2, 3 * H, 4 * H))
        c = f * c + i * gt
        h = o * ad.tanh(c)
    return h.reshape(B, Ls * H)


_FORWARDS = {
    "rnn": _forward_rnn,
    "lstm": _forward_lstm,
    "stacked_lstm": _forward_stacked_lstm,
    "gru": _forward_gru,
    "cnn": _forward_cnn,
    "cnn_lstm": _forward_cnn_lstm,
    "conv_lstm": _forward_conv_lstm,
}


def forward(spec: ModelSpec, params: dict, graph: Graph, x) -> Tensor:
    """Build the forward pass on ``graph``; returns the (B, 1) output head.

    ``params`` maps names to Tensors already on the graph (or raw arrays,
    which are lifted).  Classification output is a sigmoid probability.
    """
    if not isinstance(x, Tensor):
        x = graph.leaf(x)
    if x.ndim != 3 or x.shape[1] != spec.window or x.shape[2] != spec.channels:
        raise ShapeError(
            f"forward: expected (B, {spec.window}, {spec.channels}) input, got {x.shape}")
    tensors = {k: (v if isinstance(v, Tensor) else graph.leaf(v)) for k, v in params.items()}
    features = _FORWARDS[spec.architecture](spec, tensors, graph, x)
    out = ad.matmul(features, tensors["head.w"]) + tensors["head.b"]
    if spec.task == "classification":
        out = ad.sigmoid(out)
    return out


def loss(pred: Tensor, target, task: str) -> Tensor:
    """Scalar training loss: MSE for regression, clamped BCE for classification."""
    g = pred.graph
    y = target if isinstance(target, Tensor) else g.leaf(target)
    if y.shape != pred.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {y.shape}")
    if task == "regression":
        return ad.mean(ad.square(pred - y))
    if task == "classification":
        bad = ~((y.data == 0.0) | (y.data == 1.0))
        if bad.any():
            raise ValueError(
                f"classification targets must be 0 or 1, found {y.data[bad].ravel()[0]!r}")
        p = ad.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
        ll = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
        return -ad.mean(ll)
    raise ValueError(f"unknown task {task!r}")


def per_sample_loss(pred: np.ndarray, target: np.ndarray, task: str) -> np.ndarray:
    """Per-sample losses (B,) matching :func:`loss` before the batch mean."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if task == "regression":
        return (p - y) ** 2
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


class Network:
    """A ModelSpec bundled with graph-building and batched inference."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    @property
    def task(self) -> str:
        return self.spec.task

    def init_params(self) -> ModelParams:
        return init_params(self.spec)

    def predict_graph(self, graph: Graph, params: dict, x) -> Tensor:
        return forward(self.spec, params, graph, x)

    def predict(self, params: ModelParams, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Forward pass without gradients; returns (N, 1) outputs."""
        X = np.asarray(X, dtype=np.float64)
        outs = []
        for lo in range(0, len(X), batch_size):
            g = Graph()
            outs.append(self.predict_graph(g, params, X[lo:lo + batch_size]).data)
        return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_KIND = "checkpoint"


def save_checkpoint(path, params: ModelParams, spec: ModelSpec) -> None:
    write_arrays(path, params, {"kind": _CKPT_KIND, "spec": spec_to_meta(spec)})


def load_checkpoint(path) -> tuple[ModelParams, ModelSpec]:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != _CKPT_KIND:
        raise ValueError(f"{path}: not a model checkpoint")
    return arrays, spec_from_meta(meta["spec"])


# ---------------------------------------------------------------------------
# model-level gradient checking


def model_grad_check(spec: ModelSpec, params: ModelParams, x: np.ndarray,
                     y: np.ndarray, h: float = 1e-5) -> float:
    """Max FD error over the input batch and every parameter tensor."""
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0

    def against_input(xt: Tensor) -> Tensor:
        g = xt.graph
        pred = forward(spec, {k: g.leaf(v) for k, v in params.items()}, g, xt)
        return loss(pred, y, spec.task)

    worst = max(worst, ad.grad_check(against_input, x, h))
    for name in params:
        def against_param(pt: Tensor, _name=name) -> Tensor:
            g = pt.graph
            lifted = {k: (pt if k == _name else g.leaf(v)) for k, v in params.items()}
            pred = forward(spec, lifted, g, x)
            return loss(pred, y, spec.task)

        worst = max(worst, ad.grad_check(against_param, params[name], h))
    return worst
