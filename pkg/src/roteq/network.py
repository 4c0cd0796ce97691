"""Model composition, loss, SGD training loop, and gradient harness.

A model is an ordered list of layer descriptors plus a parameter store.
Tied layers keep only their base parameters; expanded filter banks are
cached per parameter version and rebuilt after each optimizer step, so
a whole epoch of forward passes reuses one expansion.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import eqlayers
from .conv import (
    ConvGeometry,
    correlate2d,
    correlate2d_backward,
    max_pool2d,
    max_pool2d_backward,
    output_size,
    stride_preserves_equivariance,
)
from .eqlayers import (
    CycleParams,
    DecycleParams,
    GroupBatchNorm,
    IsotonicParams,
    collapse_cycle_grad,
    collapse_decycle_grad,
    collapse_isotonic_grad,
    expand_cycle,
    expand_decycle,
    expand_isotonic,
    global_spatial_avg_pool,
    global_spatial_avg_pool_backward,
    group_cross_channel_pool,
    group_cross_channel_pool_backward,
    shared_bias_add,
    shared_bias_backward,
)
from .tensor import GroupLayout, layout_for

TRAINABLE_KINDS = ("cycle", "isotonic", "decycle", "conv", "shared_bias", "group_batchnorm")
DREN_KINDS = ("cycle", "isotonic", "decycle", "group_pool_max", "group_pool_mean")
ALL_KINDS = (
    "cycle",
    "isotonic",
    "decycle",
    "conv",
    "relu",
    "shared_bias",
    "group_batchnorm",
    "dropout",
    "max_pool",
    "group_pool_max",
    "group_pool_mean",
    "global_avg_pool",
)


class ModelSpecError(ValueError):
    """Layer stack violates ordering or channel-chaining rules."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model.

    `width` is the output group count for cycle/isotonic layers and the
    output channel count for decycle/conv layers; `rate` only applies
    to dropout.
    """

    kind: str
    width: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    rate: float = 0.25

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ModelSpecError(f"unknown layer kind {self.kind!r}")


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    precision: str = "float32"
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class Model:
    specs: list
    in_channels: int
    dtype: object
    params: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    channels: list = field(default_factory=list)
    in_dren_zone: list = field(default_factory=list)
    _bn: dict = field(default_factory=dict)
    _expanded: dict = field(default_factory=dict)

    def expanded_filter(self, i: int) -> np.ndarray:
        """Filter bank for trainable layer i, cached until the next update."""
        w = self._expanded.get(i)
        if w is None:
            kind = self.specs[i].kind
            base = self.params[i]["base"] if kind != "conv" else self.params[i]["w"]
            if kind == "cycle":
                w = expand_cycle(CycleParams(base))
            elif kind == "isotonic":
                w = expand_isotonic(IsotonicParams(base))
            elif kind == "decycle":
                w = expand_decycle(DecycleParams(base))
            elif kind == "conv":
                w = base
            else:
                raise ValueError(f"layer {i} ({kind}) has no filter bank")
            self._expanded[i] = w
        return w

    def invalidate_expansions(self) -> None:
        self._expanded.clear()

    def parameter_counts(self) -> dict:
        return {i: sum(a.size for a in p.values()) for i, p in self.params.items()}

    @property
    def num_parameters(self) -> int:
        return sum(self.parameter_counts().values())


def _conv_uniform(rng, c_out, c_in, k, dtype):
    bound = float(np.sqrt(6.0 / (c_in * k * k)))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)


def build_model(
    specs: list,
    in_channels: int = 1,
    seed: int = 0,
    precision: str = "float32",
    input_size: int | None = None,
) -> Model:
    """Validate a layer stack, initialize parameters, and return the model.

    Ordering rules for stacks containing tied layers: the first
    trainable layer must be a cycle layer; isotonic layers may only
    appear between it and a single decycle (or group pool) terminator;
    after the terminator the only trainable allowed besides bias/norm is
    a 1x1 conv head. Stride settings that break the quarter-turn
    equivariance condition produce a warning naming the layer.
    """
    if not specs:
        raise ModelSpecError("layer stack is empty")
    dtype = np.float32 if precision == "float32" else np.float64
    uses_dren = any(s.kind in DREN_KINDS for s in specs)

    rng = np.random.default_rng(seed)
    model = Model(specs=list(specs), in_channels=in_channels, dtype=dtype)

    c = in_channels
    size = input_size
    zone = "pre"  # pre -> dren (after cycle) -> post (after terminator); plain stacks stay "pre"
    for i, spec in enumerate(specs):
        kind = spec.kind
        model.in_dren_zone.append(zone == "dren")
        if kind == "cycle":
            if zone != "pre":
                raise ModelSpecError(f"layer {i}: cycle layer must come before all other tied layers")
            if uses_dren and any(s.kind in ("conv",) for s in specs[:i]):
                raise ModelSpecError(f"layer {i}: cycle must be the first trainable layer")
            model.params[i] = {"base": eqlayers.init_cycle(rng, spec.width, c, spec.kernel, dtype).base}
            c = 4 * spec.width
            zone = "dren"
        elif kind == "isotonic":
            if zone != "dren":
                raise ModelSpecError(f"layer {i}: isotonic layer outside the cycle..decycle segment")
            g_in = _groups_of(c, i, kind)
            model.params[i] = {
                "base": eqlayers.init_isotonic(rng, spec.width, g_in, spec.kernel, dtype).base
            }
            c = 4 * spec.width
        elif kind == "decycle":
            if zone != "dren":
                raise ModelSpecError(f"layer {i}: decycle layer requires a preceding cycle layer")
            g_in = _groups_of(c, i, kind)
            model.params[i] = {
                "base": eqlayers.init_decycle(rng, spec.width, g_in, spec.kernel, dtype).base
            }
            c = spec.width
            zone = "post"
        elif kind in ("group_pool_max", "group_pool_mean"):
            if zone != "dren":
                raise ModelSpecError(f"layer {i}: group pooling requires a preceding cycle layer")
            c = _groups_of(c, i, kind)
            zone = "post"
        elif kind == "conv":
            if zone == "dren":
                raise ModelSpecError(f"layer {i}: untied conv inside the cycle..decycle segment")
            model.params[i] = {"w": _conv_uniform(rng, spec.width, c, spec.kernel, dtype)}
            c = spec.width
        elif kind == "shared_bias":
            groups = _groups_of(c, i, kind)
            model.params[i] = {"bias": np.zeros(groups, dtype=dtype)}
        elif kind == "group_batchnorm":
            group_size = 4 if zone == "dren" else 1
            bn = GroupBatchNorm(c // group_size, group_size=group_size)
            model._bn[i] = bn
            model.params[i] = bn.init_params(dtype)
            model.state[i] = bn.init_state(dtype)
        elif kind in ("relu", "dropout", "global_avg_pool", "max_pool"):
            pass
        else:  # pragma: no cover - ALL_KINDS is closed
            raise ModelSpecError(f"unknown layer kind {kind!r}")

        if size is not None:
            if kind in ("cycle", "isotonic", "decycle", "conv"):
                if uses_dren and not stride_preserves_equivariance(
                    size + 2 * spec.pad, spec.stride, spec.kernel
                ):
                    warnings.warn(
                        f"layer {i} ({kind}): input size {size} with stride {spec.stride} and "
                        f"kernel {spec.kernel} breaks the rotation-equivariance condition",
                        stacklevel=2,
                    )
                size = output_size(size, spec.kernel, spec.stride, spec.pad)
            elif kind == "max_pool":
                if uses_dren and not stride_preserves_equivariance(size, spec.stride, spec.kernel):
                    warnings.warn(
                        f"layer {i} (max_pool): input size {size} with stride {spec.stride} and "
                        f"kernel {spec.kernel} breaks the rotation-equivariance condition",
                        stacklevel=2,
                    )
                size = output_size(size, spec.kernel, spec.stride)
            elif kind == "global_avg_pool":
                size = 1
        model.channels.append(c)

    if zone == "dren":
        raise ModelSpecError(
            "tied stack never terminated: add a decycle or group pooling layer"
        )
    for i, p in model.params.items():
        model.velocity[i] = {k: np.zeros_like(v) for k, v in p.items()}
    return model


def _groups_of(channels: int, i: int, kind: str) -> int:
    if channels % 4 != 0:
        raise ModelSpecError(f"layer {i} ({kind}): channel count {channels} is not divisible by 4")
    return channels // 4


@dataclass
class ForwardCache:
    layer_caches: list
    new_state: dict
    logits_shape: tuple


def forward(model: Model, x: np.ndarray, mode: str = "train", rng=None):
    """Run the stack; returns (logits, cache). Logits are (n, features)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    caches = []
    new_state = {}
    h = x.astype(model.dtype, copy=False)
    for i, spec in enumerate(model.specs):
        kind = spec.kind
        if kind in ("cycle", "isotonic", "decycle", "conv"):
            geom = ConvGeometry(spec.stride, spec.pad)
            w = model.expanded_filter(i)
            caches.append((kind, h, geom))
            h = correlate2d(h, w, geom)
        elif kind == "relu":
            caches.append((kind, h > 0))
            h = np.maximum(h, 0)
        elif kind == "shared_bias":
            layout = layout_for(h.shape[1])
            caches.append((kind, layout))
            h = shared_bias_add(h, layout, model.params[i]["bias"])
        elif kind == "group_batchnorm":
            bn = model._bn[i]
            h, cache, st = bn.forward(h, model.params[i], model.state[i], train)
            caches.append((kind, cache))
            if train:
                new_state[i] = st
        elif kind == "dropout":
            if train:
                if rng is None:
                    raise ValueError("training-mode forward through dropout needs an rng")
                keep = rng.random(h.shape) >= spec.rate
                scale = 1.0 / (1.0 - spec.rate)
                caches.append((kind, keep, scale))
                h = h * keep * np.asarray(scale, dtype=model.dtype)
            else:
                caches.append((kind, None, 1.0))
        elif kind == "max_pool":
            caches.append((kind, h))
            h = max_pool2d(h, spec.kernel, spec.stride)
        elif kind in ("group_pool_max", "group_pool_mean"):
            layout = layout_for(h.shape[1])
            caches.append((kind, h, layout))
            h = group_cross_channel_pool(h, layout, "max" if kind.endswith("max") else "mean")
        elif kind == "global_avg_pool":
            caches.append((kind, h))
            h = global_spatial_avg_pool(h)
    n = h.shape[0]
    cache = ForwardCache(caches, new_state, h.shape)
    return h.reshape(n, -1), cache


def backward(model: Model, cache: ForwardCache, grad_logits: np.ndarray) -> dict:
    """Walk the stack backwards; returns {layer index: {param name: grad}}."""
    grads = {}
    g = grad_logits.reshape(cache.logits_shape).astype(model.dtype, copy=False)
    for i in range(len(model.specs) - 1, -1, -1):
        spec = model.specs[i]
        kind = spec.kind
        entry = cache.layer_caches[i]
        if kind in ("cycle", "isotonic", "decycle", "conv"):
            _, x_in, geom = entry
            g, grad_w = correlate2d_backward(g, x_in, model.expanded_filter(i), geom)
            if kind == "cycle":
                grads[i] = {"base": collapse_cycle_grad(grad_w, spec.width)}
            elif kind == "isotonic":
                g_in = model.params[i]["base"].shape[2]
                grads[i] = {"base": collapse_isotonic_grad(grad_w, spec.width, g_in)}
            elif kind == "decycle":
                grads[i] = {"base": collapse_decycle_grad(grad_w)}
            else:
                grads[i] = {"w": grad_w}
        elif kind == "relu":
            g = g * entry[1]
        elif kind == "shared_bias":
            grads[i] = {"bias": shared_bias_backward(g, entry[1])}
        elif kind == "group_batchnorm":
            g, grads[i] = model._bn[i].backward(g, model.params[i], entry[1])
        elif kind == "dropout":
            _, keep, scale = entry
            if keep is not None:
                g = g * keep * np.asarray(scale, dtype=model.dtype)
        elif kind == "max_pool":
            g = max_pool2d_backward(g, entry[1], spec.kernel, spec.stride)
        elif kind in ("group_pool_max", "group_pool_mean"):
            _, x_in, layout = entry
            g = group_cross_channel_pool_backward(
                g, x_in, layout, "max" if kind.endswith("max") else "mean"
            )
        elif kind == "global_avg_pool":
            g = global_spatial_avg_pool_backward(g, entry[1])
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    nll = np.log(denom[:, 0]) - z[np.arange(n), labels]
    grad = ez / denom
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(nll.mean()), grad.astype(logits.dtype)


def sgd_step(model: Model, grads: dict, lr: float, momentum: float) -> None:
    for i, layer_grads in grads.items():
        for name, g in layer_grads.items():
            v = model.velocity[i][name]
            v *= momentum
            v -= lr * g
            model.params[i][name] += v
    model.invalidate_expansions()


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions; ties break toward the lowest class index."""
    out = []
    for lo in range(0, images.shape[0], batch_size):
        logits, _ = forward(model, images[lo : lo + batch_size], mode="eval")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def evaluate(model: Model, dataset, batch_size: int = 256) -> float:
    """Error rate in [0, 1] on a dataset with .images and .labels."""
    preds = predict(model, dataset.images, batch_size)
    return float(np.mean(preds != dataset.labels))


def train(model: Model, train_ds, val_ds, config: TrainConfig) -> list:
    """Momentum-SGD training; returns [(epoch, train_loss, val_error), ...].

    The config seed fully determines shuffling and dropout masks;
    initialization is fixed separately at build time.
    """
    rng = np.random.default_rng(config.seed)
    n = train_ds.images.shape[0]
    history = []
    decay_after = (2 * config.epochs) // 3
    for epoch in range(1, config.epochs + 1):
        lr = config.lr * (config.lr_decay if epoch > decay_after else 1.0)
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb = train_ds.images[idx]
            yb = train_ds.labels[idx]
            logits, cache = forward(model, xb, mode="train", rng=rng)
            loss, grad = softmax_cross_entropy(logits, yb)
            grads = backward(model, cache, grad)
            for i, st in cache.new_state.items():
                model.state[i] = st
            sgd_step(model, grads, lr, config.momentum)
            losses.append(loss)
        val_error = evaluate(model, val_ds)
        history.append((epoch, float(np.mean(losses)), val_error))
    return history


def finite_diff_check(model: Model, x: np.ndarray, labels: np.ndarray, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Sweeps every parameter component. Per-component deviations are
    scaled by |fd| + |analytic|, floored at 1e-3 of the gradient's max
    magnitude so that difference-quotient roundoff on vanishing
    components cannot drown the check. The model must be deterministic
    (no dropout layers); double precision is strongly recommended.
    """
    if any(s.kind == "dropout" for s in model.specs):
        raise ValueError("finite_diff_check requires a model without dropout layers")

    def loss_of() -> float:
        model.invalidate_expansions()
        logits, _ = forward(model, x, mode="train")
        loss, _ = softmax_cross_entropy(logits, labels)
        return loss

    logits, cache = forward(model, x, mode="train")
    _, grad_logits = softmax_cross_entropy(logits, labels)
    grads = backward(model, cache, grad_logits)
    gmax = max(
        (float(np.max(np.abs(g))) for lg in grads.values() for g in lg.values()), default=0.0
    )
    floor = max(1e-3 * gmax, 1e-12)

    worst = 0.0
    for i, layer_grads in grads.items():
        for name, g in layer_grads.items():
            p = model.params[i][name]
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                hi = loss_of()
                flat[j] = orig - epsilon
                lo = loss_of()
                flat[j] = orig
                fd = (hi - lo) / (2 * epsilon)
                denom = max(abs(fd) + abs(gflat[j]), floor)
                worst = max(worst, abs(fd - gflat[j]) / denom)
    model.invalidate_expansions()
    return worst


def preset_stack(name: str) -> list:
    """Named layer stacks used by the CLI, benchmarks, and tests."""
    k3, k4 = 3, 4
    if name == "dren-small":
        return [
            LayerSpec("cycle", width=5, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("isotonic", width=5, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("isotonic", width=5, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("decycle", width=10, kernel=k3),
            LayerSpec("global_avg_pool"),
        ]
    if name == "cnn-small":
        return [
            LayerSpec("conv", width=20, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("conv", width=20, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("conv", width=20, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("conv", width=10, kernel=k3),
            LayerSpec("global_avg_pool"),
        ]
    if name == "z2cnn-shape":
        stack = []
        for layer in range(6):
            stack += [
                LayerSpec("conv", width=20, kernel=k3),
                LayerSpec("relu"),
                LayerSpec("dropout", rate=0.25),
                LayerSpec("group_batchnorm"),
            ]
            if layer == 1:
                stack.append(LayerSpec("max_pool", kernel=2, stride=2))
        stack += [LayerSpec("conv", width=10, kernel=k4), LayerSpec("global_avg_pool")]
        return stack
    if name == "dren-z2cnn-shape":
        stack = [
            LayerSpec("cycle", width=5, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("dropout", rate=0.25),
            LayerSpec("group_batchnorm"),
        ]
        for layer in range(5):
            stack += [
                LayerSpec("isotonic", width=5, kernel=k3),
                LayerSpec("relu"),
                LayerSpec("dropout", rate=0.25),
                LayerSpec("group_batchnorm"),
            ]
            if layer == 0:
                stack.append(LayerSpec("max_pool", kernel=2, stride=2))
        stack += [LayerSpec("decycle", width=10, kernel=k4), LayerSpec("global_avg_pool")]
        return stack
    if name == "bench-z2cnn-shape":
        stack = [LayerSpec("cycle", width=5, kernel=k3), LayerSpec("relu")]
        for layer in range(5):
            stack += [LayerSpec("isotonic", width=5, kernel=k3), LayerSpec("relu")]
            if layer == 0:
                stack.append(LayerSpec("max_pool", kernel=2, stride=2))
        stack += [LayerSpec("decycle", width=10, kernel=k4), LayerSpec("global_avg_pool")]
        return stack
    if name == "bench-nin-shape":
        return [
            LayerSpec("cycle", width=8, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("isotonic", width=8, kernel=1),
            LayerSpec("relu"),
            LayerSpec("isotonic", width=8, kernel=1),
            LayerSpec("relu"),
            LayerSpec("max_pool", kernel=2, stride=2),
            LayerSpec("isotonic", width=8, kernel=k3),
            LayerSpec("relu"),
            LayerSpec("isotonic", width=8, kernel=1),
            LayerSpec("relu"),
            LayerSpec("decycle", width=10, kernel=1),
            LayerSpec("global_avg_pool"),
        ]
    raise ValueError(f"unknown preset {name!r}")
