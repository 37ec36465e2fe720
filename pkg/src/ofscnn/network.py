"""Small binary-classification CNN, its training loop and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .ofs import K_MAX, K_MIN, OfsConv2d, bounds_of, init_filters

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class ConvSpec:
    out_channels: int
    mode: str = "learned"          # "learned" or "fixed"
    size: int | None = None        # fixed filter size
    k0: float = 4.0                # initial continuous size

    def __post_init__(self):
        if self.mode not in ("learned", "fixed"):
            raise ValueError(f"conv mode must be 'learned' or 'fixed', got {self.mode!r}")
        if self.mode == "fixed":
            if self.size is None or self.size < 1 or self.size % 2 == 0:
                raise ValueError(f"fixed conv layers need an odd size >= 1, got {self.size}")
        elif self.k0 < 1:
            raise ValueError(f"initial size must be >= 1, got {self.k0}")


@dataclass
class LossConfig:
    positive_weight: float = 1.0

    def __post_init__(self):
        if not self.positive_weight > 0:
            raise ValueError(f"positive_weight must be > 0, got {self.positive_weight}")


@dataclass
class NetworkSpec:
    """Conv stack -> ReLU (-> avg pool) per layer, then two affine layers.

    The defaults give the three-conv 32/32/64 network with average pooling
    after the first two convolutions.
    """
    input_resolution: tuple = (64, 48)
    conv_layers: list = field(default_factory=lambda: [
        ConvSpec(32), ConvSpec(32), ConvSpec(64)])
    pool_window: int = 3
    pool_stride: int = 3
    pool_after: tuple = (0, 1)
    fc_nodes: int = 64
    hidden_relu: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    k_min: float = K_MIN
    k_max: float = K_MAX

    def __post_init__(self):
        self.input_resolution = tuple(self.input_resolution)
        self.pool_after = tuple(self.pool_after)
        self.conv_layers = [c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.conv_layers]
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.conv_layers:
            raise ValueError("network needs at least one conv layer")
        for i in self.pool_after:
            if not 0 <= i < len(self.conv_layers):
                raise ValueError(f"pool_after index {i} out of range")

    def with_conv(self, index: int, conv: ConvSpec) -> "NetworkSpec":
        layers = list(self.conv_layers)
        layers[index] = conv
        d = asdict(self)
        d["conv_layers"] = layers
        d["loss"] = self.loss
        return NetworkSpec(**d)


@dataclass
class OptimizerConfig:
    weight_lr: float = 0.01
    size_lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 100
    iterations: int = 2000
    seed: int = 0
    size_momentum: bool = True
    weight_decay: float = 0.0
    report_iteration: int = 2000

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.weight_lr < 0 or self.size_lr < 0:
            raise ValueError("learning rates must be >= 0")


# --------------------------------------------------------------------------
# seeding
# --------------------------------------------------------------------------

# spawn-key purposes under a run seed
INIT_STREAM = 0
SHUFFLE_STREAM = 1


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (run seed, purpose, index...)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Conv2d:
    def __init__(self, in_channels, out_channels, size, rng):
        self.weight = init_filters(rng, out_channels, in_channels, size)
        self.bias = np.zeros(out_channels)
        self.weight_velocity = np.zeros_like(self.weight)
        self.bias_velocity = np.zeros_like(self.bias)
        self.need_input_grad = True
        self.grads = {}

    def forward(self, x):
        self._x = x
        self._cols = T.im2col(x, self.weight.shape[-1])
        return T.conv2d_same(x, self.weight, self.bias, cols=self._cols)

    def backward(self, dout):
        dx, dw, db = T.conv2d_same_backward(dout, self._x, self.weight, cols=self._cols,
                                            need_input=self.need_input_grad)
        self.grads = {"weight": dw, "bias": db}
        return dx


class ReLU:
    def forward(self, x):
        self._x = x
        return T.relu(x)

    def backward(self, dout):
        return T.relu_backward(dout, self._x)


class AvgPool:
    def __init__(self, window, stride):
        self.window, self.stride = window, stride

    def forward(self, x):
        self._shape = x.shape
        return T.avg_pool(x, self.window, self.stride)

    def backward(self, dout):
        return T.avg_pool_backward(dout, self._shape, self.window, self.stride)


class Flatten:
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear:
    def __init__(self, n_in, n_out, rng):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.bias = np.zeros(n_out)
        self.weight_velocity = np.zeros_like(self.weight)
        self.bias_velocity = np.zeros_like(self.bias)
        self.grads = {}

    def forward(self, x):
        self._x = x
        return T.linear(x, self.weight, self.bias)

    def backward(self, dout):
        dx, dw, db = T.linear_backward(dout, self._x, self.weight)
        self.grads = {"weight": dw, "bias": db}
        return dx


PARAM_LAYERS = (Conv2d, OfsConv2d, Linear)


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.layers = []
        h, w = spec.input_resolution
        channels = 1
        for i, conv in enumerate(spec.conv_layers):
            rng = substream(seed, INIT_STREAM, i)
            if conv.mode == "learned":
                layer = OfsConv2d(channels, conv.out_channels, conv.k0, rng=rng,
                                  k_min=spec.k_min, k_max=spec.k_max)
            else:
                layer = Conv2d(channels, conv.out_channels, conv.size, rng)
            self.layers += [layer, ReLU()]
            channels = conv.out_channels
            if i in spec.pool_after:
                self.layers.append(AvgPool(spec.pool_window, spec.pool_stride))
                h = (h - spec.pool_window) // spec.pool_stride + 1
                w = (w - spec.pool_window) // spec.pool_stride + 1
                if h < 1 or w < 1:
                    raise ValueError(f"input resolution {spec.input_resolution} too small for pooling")
        self.layers[0].need_input_grad = False
        n_feat = channels * h * w
        k = len(spec.conv_layers)
        self.layers += [Flatten(), Linear(n_feat, spec.fc_nodes, substream(seed, INIT_STREAM, k))]
        if spec.hidden_relu:
            self.layers.append(ReLU())
        self.layers.append(Linear(spec.fc_nodes, 1, substream(seed, INIT_STREAM, k + 1)))

    @property
    def ofs_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, OfsConv2d)]

    @property
    def param_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, PARAM_LAYERS)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x[:, 0]

    def backward(self, dlogits: np.ndarray) -> None:
        d = dlogits[:, None]
        for layer in reversed(self.layers):
            d = layer.backward(d)
            if d is None:
                break

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(batch_loss(self.forward(x), y, self.spec.loss.positive_weight)[0])

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> float:
        loss, dlogits = batch_loss(self.forward(x), y, self.spec.loss.positive_weight)
        self.backward(dlogits)
        return loss

    def predict(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Sigmoid scores, evaluated in chunks to bound memory."""
        logits = np.concatenate([self.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)])
        return sigmoid(logits)

    def state_dict(self) -> dict:
        state = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, OfsConv2d):
                for key, value in layer.state_dict().items():
                    state[f"layer{i}.{key}"] = value
            elif isinstance(layer, PARAM_LAYERS):
                for key in ("weight", "bias", "weight_velocity", "bias_velocity"):
                    state[f"layer{i}.{key}"] = getattr(layer, key).copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        for i, layer in enumerate(self.layers):
            prefix = f"layer{i}."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if isinstance(layer, OfsConv2d):
                layer.load_state_dict(sub)
            elif isinstance(layer, PARAM_LAYERS):
                for key in ("weight", "bias", "weight_velocity", "bias_velocity"):
                    value = np.array(sub[key], dtype=T.DTYPE)
                    if value.shape != getattr(layer, key).shape:
                        raise T.ShapeError(f"{prefix}{key}: stored shape {value.shape} "
                                           f"!= expected {getattr(layer, key).shape}")
                    setattr(layer, key, value)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def weighted_sigmoid_ce(logit, target, positive_weight: float = 1.0):
    """Elementwise loss and d loss / d logit, stable for any finite logit."""
    z = np.asarray(logit, dtype=T.DTYPE)
    t = np.asarray(target, dtype=T.DTYPE)
    loss = positive_weight * t * np.logaddexp(0.0, -z) + (1.0 - t) * np.logaddexp(0.0, z)
    s = sigmoid(z)
    grad = positive_weight * t * (s - 1.0) + (1.0 - t) * s
    if np.ndim(loss) == 0:
        return float(loss), float(grad)
    return loss, grad


def batch_loss(logits, targets, positive_weight: float = 1.0):
    """Mean loss over the batch and its gradient w.r.t. each logit."""
    loss, grad = weighted_sigmoid_ce(np.atleast_1d(logits), np.atleast_1d(targets), positive_weight)
    n = len(loss)
    return float(loss.mean()), grad / n


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TraceRecord:
    iteration: int
    loss: float
    sizes: list  # one (k, k_minus, k_plus, alpha) per learned layer


@dataclass
class TrainingTrace:
    records: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    events: list = field(default_factory=list)  # (iteration, layer, "expand"/"shrink")

    def converged_sizes(self, report_iteration: int | None = None) -> list:
        """Learned k per layer after ``report_iteration`` updates (or the last)."""
        if not self.records:
            return []
        idx = len(self.records) - 1
        if report_iteration is not None and report_iteration >= 1:
            idx = min(report_iteration, len(self.records)) - 1
        return [s[0] for s in self.records[idx].sizes]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, trace: TrainingTrace):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


def _momentum_step(param, velocity, grad, lr, momentum):
    velocity *= momentum
    velocity += grad
    param -= lr * velocity


def sgd_update(net: Network, opt: OptimizerConfig) -> list:
    """Apply one optimizer step to every parameterized layer.

    Returns a list of (layer index, event) for filter transformations.
    """
    events = []
    size_momentum = opt.momentum if opt.size_momentum else 0.0
    for idx, layer in enumerate(net.layers):
        if not isinstance(layer, PARAM_LAYERS):
            continue
        g = layer.grads
        gw = g["weight"] + opt.weight_decay * layer.weight if opt.weight_decay else g["weight"]
        _momentum_step(layer.weight, layer.weight_velocity, gw, opt.weight_lr, opt.momentum)
        _momentum_step(layer.bias, layer.bias_velocity, g["bias"], opt.weight_lr, opt.momentum)
        if isinstance(layer, OfsConv2d):
            k_new = layer.sgd_step_size(g["k"], opt.size_lr, size_momentum)
            event = layer.transform_if_needed(k_new)
            if event:
                events.append((idx, event))
    return events


def _size_tuple(layer: OfsConv2d) -> tuple:
    s = layer.size
    return (s.k, s.k_minus, s.k_plus, s.alpha)


def train(spec: NetworkSpec, opt: OptimizerConfig, data: Dataset, net: Network | None = None,
          callback=None):
    """Minibatch momentum SGD over weights, biases and every learned size.

    Returns ``(network, trace)``.  Each trace record holds the minibatch
    loss at iteration t and the sizes after that iteration's update.
    """
    if data.samples.shape[2:] != tuple(spec.input_resolution):
        raise T.ShapeError(f"dataset resolution {data.samples.shape[2:]} != network "
                           f"input resolution {tuple(spec.input_resolution)}")
    if net is None:
        net = Network(spec, opt.seed)
    trace = TrainingTrace()
    shuffle = substream(opt.seed, SHUFFLE_STREAM)
    n = len(data.labels)
    bs = min(opt.batch_size, n)
    order = shuffle.permutation(n)
    pos = 0
    for t in range(opt.iterations):
        if pos + bs > n:
            order = shuffle.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        loss = net.loss_and_grads(data.samples[idx], data.labels[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(t, trace)
        for layer_idx, event in sgd_update(net, opt):
            trace.events.append((t, layer_idx, event))
        trace.records.append(TraceRecord(t, loss, [_size_tuple(l) for l in net.ofs_layers]))
        if callback is not None:
            callback(t, net, trace)
    return net, trace


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def f1_score(predicted, labels) -> float:
    predicted = np.asarray(predicted).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = int(np.sum(predicted & labels))
    fp = int(np.sum(predicted & ~labels))
    fn = int(np.sum(~predicted & labels))
    return f1_from_counts(tp, fp, fn)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def two_afc(scores, labels) -> float | None:
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    scores = np.asarray(scores, dtype=T.DTYPE)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        return None
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins) / (len(pos) * len(neg))


def evaluate(net: Network, data: Dataset, threshold: float = 0.5) -> dict:
    scores = net.predict(data.samples)
    labels = np.asarray(data.labels).astype(bool)
    predicted = scores >= threshold
    return {
        "f1": f1_score(predicted, labels),
        "two_afc": two_afc(scores, labels),
        "accuracy": float(np.mean(predicted == labels)),
    }


# --------------------------------------------------------------------------
# fixed-size sweep
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    config: str
    seed: int | None
    f1: float | None
    two_afc: float | None
    accuracy: float | None
    converged_sizes: list
    status: str = "ok"


def sweep_configurations(spec: NetworkSpec, sizes, layer: int = 0, k0: float = 4.0) -> list:
    """(name, spec) pairs: one fixed size per entry of ``sizes`` plus the learned variant."""
    configs = []
    for s in sizes:
        if s % 2 == 0 or not spec.k_min <= s <= spec.k_max + 2:
            raise ValueError(f"sweep size {s} must be odd and inside the clamp range")
        configs.append((f"fixed-{s}", spec.with_conv(layer, ConvSpec(
            spec.conv_layers[layer].out_channels, mode="fixed", size=s))))
    configs.append(("ofs", spec.with_conv(layer, ConvSpec(
        spec.conv_layers[layer].out_channels, mode="learned", k0=k0))))
    return configs


def run_one(name: str, spec: NetworkSpec, opt: OptimizerConfig, train_data: Dataset,
            test_data: Dataset, threshold: float = 0.5) -> SweepRow:
    try:
        net, trace = train(spec, opt, train_data)
    except TrainingDiverged as exc:
        log.warning("%s seed %d diverged at iteration %d", name, opt.seed, exc.iteration)
        return SweepRow(name, opt.seed, None, None, None, [], status="failed")
    m = evaluate(net, test_data, threshold)
    return SweepRow(name, opt.seed, m["f1"], m["two_afc"], m["accuracy"],
                    trace.converged_sizes(opt.report_iteration))


def aggregate_rows(rows: list) -> list:
    """One mean row per configuration, over seeds that completed."""
    out = []
    names = list(dict.fromkeys(r.config for r in rows))
    for name in names:
        ok = [r for r in rows if r.config == name and r.status == "ok"]
        if not ok:
            out.append(SweepRow(name, None, None, None, None, [], status="failed"))
            continue

        def mean(values):
            values = [v for v in values if v is not None]
            return float(np.mean(values)) if values else None

        sizes = [float(np.mean(col)) for col in zip(*[r.converged_sizes for r in ok])] if ok[0].converged_sizes else []
        out.append(SweepRow(name, None, mean(r.f1 for r in ok), mean(r.two_afc for r in ok),
                            mean(r.accuracy for r in ok), sizes))
    return out


def exhaustive_sweep(spec: NetworkSpec, sizes, opt: OptimizerConfig, train_data: Dataset,
                     test_data: Dataset, seeds, layer: int = 0, k0: float = 4.0,
                     threshold: float = 0.5, runner=None):
    """Train every fixed size and the learned-size variant for every seed.

    ``runner`` maps a list of zero-argument jobs to their results; the
    default runs them in order.  Returns ``(per_seed_rows, aggregate_rows)``.
    """
    jobs = []
    for name, cfg in sweep_configurations(spec, sizes, layer, k0):
        for seed in seeds:
            run_opt = OptimizerConfig(**{**asdict(opt), "seed": int(seed)})
            jobs.append((name, cfg, run_opt, train_data, test_data, threshold))
    if runner is None:
        rows = [run_one(*job) for job in jobs]
    else:
        rows = runner(jobs)
    return rows, aggregate_rows(rows)


def check_size_tuple(k, k_minus, k_plus, alpha, tol=1e-12) -> bool:
    ref = bounds_of(k)
    return (ref.k_minus == k_minus and ref.k_plus == k_plus
            and abs(k_minus + 2 * alpha - k) <= tol and 0 <= alpha < 1)
