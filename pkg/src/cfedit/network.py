"""Minimal CNN runtime split into a spatial feature extractor and a decision head.

The layer vocabulary is fixed: conv2d, relu, maxpool2d, flatten, dense,
log-softmax.  Tensors are channels-last, float64, batched as (N, H, W, C).
The extractor maps pixels to an h x w x d feature grid; the head maps a grid
to class log-probabilities.  Everything needed downstream is provided here:
forward evaluation, reverse-mode gradients (including gradients w.r.t. the
head input, used by the relaxed edit optimizer), a desk-scale SGD trainer,
and a portable two-file model format (JSON manifest + float64 blob).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ShapeError, TrainingError, UnsupportedLayerError
from .grids import FeatureGrid
from .rng import substream

FORMAT_VERSION = 1

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "dense", "log-softmax")

# fixed parameter order per kind, for blob serialization
PARAM_ORDER = {"conv2d": ("kernel", "bias"), "dense": ("weight", "bias")}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int | None = None
    padding: int = 0
    window: int | None = None
    units: int | None = None

    def __post_init__(self):
        k = self.kind
        if k not in LAYER_KINDS:
            raise UnsupportedLayerError(f"unknown layer kind {k!r}")
        if k == "conv2d":
            if not (self.out_channels and self.out_channels > 0):
                raise ShapeError("conv2d needs positive out_channels")
            if not (self.kernel_size and self.kernel_size > 0):
                raise ShapeError("conv2d needs positive kernel_size")
            if (self.stride or 1) <= 0:
                raise ShapeError("conv2d stride must be positive")
            if not (0 <= self.padding < self.kernel_size):
                raise ShapeError("conv2d padding must satisfy 0 <= padding < kernel_size")
        elif k == "maxpool2d":
            if not (self.window and self.window > 0):
                raise ShapeError("maxpool2d needs positive window")
            if (self.stride or self.window) <= 0:
                raise ShapeError("maxpool2d stride must be positive")
        elif k == "dense":
            if not (self.units and self.units > 0):
                raise ShapeError("dense needs positive units")

    def effective_stride(self) -> int:
        if self.kind == "conv2d":
            return self.stride or 1
        if self.kind == "maxpool2d":
            return self.stride or self.window
        return 1

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        for name in ("out_channels", "kernel_size", "stride", "padding", "window", "units"):
            v = getattr(self, name)
            if v is not None and not (name == "padding" and v == 0):
                out[name] = v
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        obj = dict(obj)
        kind = obj.pop("kind", None)
        if kind not in LAYER_KINDS:
            raise UnsupportedLayerError(f"unknown layer kind {kind!r} in manifest")
        known = {"out_channels", "kernel_size", "stride", "padding", "window", "units"}
        bad = set(obj) - known
        if bad:
            raise FormatError(f"unknown layer fields {sorted(bad)}")
        return cls(kind=kind, **obj)


@dataclass
class Layer:
    spec: LayerSpec
    weights: dict = field(default_factory=dict)


def output_geometry(spec: LayerSpec, geom: tuple) -> tuple:
    """Geometry after applying one layer. Spatial geometry is (h, w, c); after
    flatten it is (n,)."""
    k = spec.kind
    if k in ("relu", "log-softmax"):
        return geom
    if k == "conv2d":
        h, w, c = geom
        s = spec.effective_stride()
        oh = (h + 2 * spec.padding - spec.kernel_size) // s + 1
        ow = (w + 2 * spec.padding - spec.kernel_size) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv2d output collapses to {oh}x{ow} from input {h}x{w}")
        return (oh, ow, spec.out_channels)
    if k == "maxpool2d":
        h, w, c = geom
        s = spec.effective_stride()
        oh = (h - spec.window) // s + 1
        ow = (w - spec.window) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"maxpool2d output collapses to {oh}x{ow} from input {h}x{w}")
        return (oh, ow, c)
    if k == "flatten":
        return (int(np.prod(geom)),)
    if k == "dense":
        if len(geom) != 1:
            raise ShapeError("dense layer requires flattened input")
        return (spec.units,)
    raise UnsupportedLayerError(k)


def init_layer(spec: LayerSpec, geom: tuple, rng: np.random.Generator) -> tuple[Layer, tuple]:
    """Layer with freshly initialized weights (uniform +-1/sqrt(fan_in))."""
    out_geom = output_geometry(spec, geom)
    weights = {}
    if spec.kind == "conv2d":
        kh = kw = spec.kernel_size
        cin = geom[2]
        bound = 1.0 / np.sqrt(kh * kw * cin)
        weights["kernel"] = rng.uniform(-bound, bound, size=(kh, kw, cin, spec.out_channels))
        weights["bias"] = rng.uniform(-bound, bound, size=(spec.out_channels,))
    elif spec.kind == "dense":
        fan_in = geom[0]
        bound = 1.0 / np.sqrt(fan_in)
        weights["weight"] = rng.uniform(-bound, bound, size=(fan_in, spec.units))
        weights["bias"] = rng.uniform(-bound, bound, size=(spec.units,))
    return Layer(spec, weights), out_geom


# ---------------------------------------------------------------------------
# forward / backward per kind (batched, channels-last)
# ---------------------------------------------------------------------------

def _conv_forward(x, layer):
    spec = layer.spec
    kern, bias = layer.weights["kernel"], layer.weights["bias"]
    kh, kw, cin, cout = kern.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d input has {x.shape[3]} channels, kernel expects {cin}")
    s, p = spec.effective_stride(), spec.padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    n, hp, wp, _ = x.shape
    oh = (hp - kh) // s + 1
    ow = (wp - kw) // s + 1
    out = np.broadcast_to(bias, (n, oh, ow, cout)).copy()
    for dh in range(kh):
        for dw in range(kw):
            xs = x[:, dh : dh + oh * s : s, dw : dw + ow * s : s, :]
            out += xs @ kern[dh, dw]
    return out, x  # cache padded input


def _conv_backward(g, layer, xpad):
    spec = layer.spec
    kern = layer.weights["kernel"]
    kh, kw, _, _ = kern.shape
    s, p = spec.effective_stride(), spec.padding
    _, oh, ow, _ = g.shape
    gk = np.zeros_like(kern)
    gx = np.zeros_like(xpad)
    for dh in range(kh):
        for dw in range(kw):
            xs = xpad[:, dh : dh + oh * s : s, dw : dw + ow * s : s, :]
            gk[dh, dw] = np.einsum("nhwc,nhwo->co", xs, g)
            gx[:, dh : dh + oh * s : s, dw : dw + ow * s : s, :] += g @ kern[dh, dw].T
    gb = g.sum(axis=(0, 1, 2))
    if p:
        gx = gx[:, p:-p, p:-p, :]
    return gx, {"kernel": gk, "bias": gb}


def _pool_forward(x, layer):
    spec = layer.spec
    k, s = spec.window, spec.effective_stride()
    n, h, w, c = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    stack = np.stack(
        [x[:, dh : dh + oh * s : s, dw : dw + ow * s : s, :] for dh in range(k) for dw in range(k)],
        axis=-1,
    )
    # argmax picks the first maximum in (dh, dw) scan order: deterministic ties
    idx = np.argmax(stack, axis=-1)
    out = np.take_along_axis(stack, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(g, layer, cache):
    spec = layer.spec
    k, s = spec.window, spec.effective_stride()
    idx, xshape = cache
    gx = np.zeros(xshape)
    oh, ow = g.shape[1], g.shape[2]
    for m in range(k * k):
        dh, dw = divmod(m, k)
        sel = g * (idx == m)
        gx[:, dh : dh + oh * s : s, dw : dw + ow * s : s, :] += sel
    return gx, {}


def _relu_forward(x, layer):
    return np.maximum(x, 0.0), x > 0


def _relu_backward(g, layer, mask):
    return g * mask, {}


def _flatten_forward(x, layer):
    n = x.shape[0]
    return x.reshape(n, -1), x.shape


def _flatten_backward(g, layer, shape):
    return g.reshape(shape), {}


def _dense_forward(x, layer):
    w, b = layer.weights["weight"], layer.weights["bias"]
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense input size {x.shape[1]} does not match weight rows {w.shape[0]}")
    return x @ w + b, x


def _dense_backward(g, layer, x):
    w = layer.weights["weight"]
    return g @ w.T, {"weight": x.T @ g, "bias": g.sum(axis=0)}


def _logsoftmax_forward(x, layer):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse, z - lse


def _logsoftmax_backward(g, layer, y):
    p = np.exp(y)
    return g - p * g.sum(axis=-1, keepdims=True), {}


_FORWARD = {
    "conv2d": _conv_forward,
    "maxpool2d": _pool_forward,
    "relu": _relu_forward,
    "flatten": _flatten_forward,
    "dense": _dense_forward,
    "log-softmax": _logsoftmax_forward,
}

_BACKWARD = {
    "conv2d": _conv_backward,
    "maxpool2d": _pool_backward,
    "relu": _relu_backward,
    "flatten": _flatten_backward,
    "dense": _dense_backward,
    "log-softmax": _logsoftmax_backward,
}


def forward_layers(layers, x, keep_caches=False):
    caches = [] if keep_caches else None
    for layer in layers:
        fn = _FORWARD.get(layer.spec.kind)
        if fn is None:
            raise UnsupportedLayerError(layer.spec.kind)
        x, cache = fn(x, layer)
        if keep_caches:
            caches.append(cache)
    return (x, caches) if keep_caches else x


def backward_layers(layers, caches, g):
    """Gradient of a scalar objective w.r.t. the stack input, given the
    upstream gradient at the stack output. Also returns per-layer weight grads."""
    grads = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        fn = _BACKWARD.get(layer.spec.kind)
        if fn is None:
            raise UnsupportedLayerError(layer.spec.kind)
        g, wg = fn(g, layer, caches[idx])
        grads[idx] = wg
    return g, grads


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogProbVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"log-prob vector must be 1-d, got shape {v.shape}")
        if np.any(v > 0) or abs(np.exp(v).sum() - 1.0) > 1e-9:
            raise ShapeError("log-probabilities must be <= 0 and exponentiate-sum to 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def argmax(self) -> int:
        return int(np.argmax(self.values))

    def __getitem__(self, c: int) -> float:
        return float(self.values[c])


@dataclass
class ModelBundle:
    extractor: list
    head: list
    class_count: int
    input_shape: tuple  # (h, w, c) in pixels
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.head or self.head[-1].spec.kind != "log-softmax":
            raise ShapeError("head must end in a log-softmax layer")
        geom = tuple(self.input_shape)
        for layer in self.extractor:
            geom = output_geometry(layer.spec, geom)
        if len(geom) != 3:
            raise ShapeError("extractor must produce a spatial h x w x d geometry")
        self.feature_shape = geom
        for layer in self.head:
            geom = output_geometry(layer.spec, geom)
        if geom != (self.class_count,):
            raise ShapeError(
                f"head output geometry {geom} does not match class count {self.class_count}"
            )

    @property
    def h(self):
        return self.feature_shape[0]

    @property
    def w(self):
        return self.feature_shape[1]

    @property
    def d(self):
        return self.feature_shape[2]


def _as_batch(model: ModelBundle, image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape != tuple(model.input_shape):
        raise ShapeError(f"image shape {img.shape} does not match model input {model.input_shape}")
    return img[None]


def forward_features(model: ModelBundle, image: np.ndarray) -> FeatureGrid:
    """f(image): run the extractor, returning the spatial feature grid."""
    out = forward_layers(model.extractor, _as_batch(model, image))
    return FeatureGrid.from_array(out[0])


def head_logprobs_batch(model: ModelBundle, values: np.ndarray) -> np.ndarray:
    """g over a batch of grids given as (N, hw, d) matrices; returns (N, classes)."""
    h, w, d = model.feature_shape
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or v.shape[1:] != (h * w, d):
        raise ShapeError(f"expected batch of ({h * w}, {d}) grids, got {v.shape}")
    return forward_layers(model.head, v.reshape(-1, h, w, d))


def head_logprobs(model: ModelBundle, F: FeatureGrid) -> LogProbVector:
    """g(F): class log-probabilities for one feature grid."""
    if (F.h, F.w, F.d) != model.feature_shape:
        raise ShapeError(
            f"grid geometry {(F.h, F.w, F.d)} does not match head input {model.feature_shape}"
        )
    return LogProbVector(head_logprobs_batch(model, F.values[None])[0])


def head_input_gradient(
    model: ModelBundle,
    F: FeatureGrid,
    target_class: int | None = None,
    upstream: np.ndarray | None = None,
) -> np.ndarray:
    """d(objective)/dF through the head, as an (hw, d) matrix.

    The objective is the log-probability of `target_class`; callers may instead
    (or additionally) supply an explicit upstream gradient over the head output.
    """
    if (F.h, F.w, F.d) != model.feature_shape:
        raise ShapeError(
            f"grid geometry {(F.h, F.w, F.d)} does not match head input {model.feature_shape}"
        )
    h, w, d = model.feature_shape
    x = F.values.reshape(1, h, w, d)
    _, caches = forward_layers(model.head, x, keep_caches=True)
    g = np.zeros((1, model.class_count))
    if target_class is not None:
        g[0, target_class] = 1.0
    if upstream is not None:
        g = g + np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    gx, _ = backward_layers(model.head, caches, g)
    return gx.reshape(h * w, d)


def full_logprobs(model: ModelBundle, image: np.ndarray) -> LogProbVector:
    """g(f(image)) through the full stack."""
    out = forward_layers(model.head, forward_layers(model.extractor, _as_batch(model, image)))
    return LogProbVector(out[0])


def predict_batch(model: ModelBundle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    preds = []
    for lo in range(0, len(imgs), batch_size):
        out = forward_layers(model.head, forward_layers(model.extractor, imgs[lo : lo + batch_size]))
        preds.append(np.argmax(out, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0


def _accuracy(model, images, labels):
    if len(images) == 0:
        return float("nan")
    return float(np.mean(predict_batch(model, images) == labels))


def train(
    extractor_specs,
    head_specs,
    images,
    labels,
    config: TrainConfig = TrainConfig(),
    test_images=None,
    test_labels=None,
    class_count: int | None = None,
) -> ModelBundle:
    """SGD-with-momentum trainer; deterministic given config.seed."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0:
        raise ShapeError("dataset is empty")
    if class_count is None:
        class_count = int(labels.max()) + 1
    if np.any(labels >= class_count) or np.any(labels < 0):
        raise ShapeError("labels must lie in [0, class_count)")

    init_rng = substream(config.seed, "init")
    geom = images.shape[1:]
    layers = []
    for spec in list(extractor_specs) + list(head_specs):
        layer, geom = init_layer(spec, geom, init_rng)
        layers.append(layer)
    n_ext = len(list(extractor_specs))
    model = ModelBundle(layers[:n_ext], layers[n_ext:], class_count, tuple(images.shape[1:]))

    all_layers = model.extractor + model.head
    velocity = [{k: np.zeros_like(v) for k, v in ly.weights.items()} for ly in all_layers]

    shuffle_rng = substream(config.seed, "shuffle")
    n = len(images)
    step = 0
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            x, y = images[idx], labels[idx]
            out, caches = forward_layers(all_layers, x, keep_caches=True)
            loss = -float(np.mean(out[np.arange(len(y)), y]))
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at step {step}", step=step)
            g = np.zeros_like(out)
            g[np.arange(len(y)), y] = -1.0 / len(y)
            _, wgrads = backward_layers(all_layers, caches, g)
            for ly, vel, wg in zip(all_layers, velocity, wgrads):
                for name, grad in wg.items():
                    vel[name] = config.momentum * vel[name] - config.learning_rate * grad
                    ly.weights[name] += vel[name]
            step += 1

    model.metrics["train_accuracy"] = _accuracy(model, images, labels)
    if test_images is not None and test_labels is not None:
        model.metrics["test_accuracy"] = _accuracy(
            model, np.asarray(test_images, dtype=np.float64), np.asarray(test_labels, dtype=int)
        )
    return model


# ---------------------------------------------------------------------------
# model serialization: manifest JSON + little-endian float64 blob
# ---------------------------------------------------------------------------

def _weight_entries(model: ModelBundle):
    for section, layers in (("extractor", model.extractor), ("head", model.head)):
        for idx, layer in enumerate(layers):
            for name in PARAM_ORDER.get(layer.spec.kind, ()):
                yield f"{section}.{idx}.{name}", layer.weights[name]


def save_model(model: ModelBundle, path: str):
    """Write `path/manifest.json` and `path/weights.bin` (bit-exact round trip)."""
    os.makedirs(path, exist_ok=True)
    entries = list(_weight_entries(model))
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "extractor": [ly.spec.to_json() for ly in model.extractor],
        "head": [ly.spec.to_json() for ly in model.head],
        "weights": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
        "metrics": model.metrics,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    blob = np.concatenate([arr.ravel() for _, arr in entries]) if entries else np.zeros(0)
    blob.astype("<f8").tofile(os.path.join(path, "weights.bin"))


def load_model(path: str) -> ModelBundle:
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r}")
    for key in ("input_shape", "class_count", "extractor", "head", "weights"):
        if key not in manifest:
            raise FormatError(f"manifest missing field {key!r}")

    ext_specs = [LayerSpec.from_json(o) for o in manifest["extractor"]]
    head_specs = [LayerSpec.from_json(o) for o in manifest["head"]]
    blob = np.fromfile(os.path.join(path, "weights.bin"), dtype="<f8")
    expected = sum(int(np.prod(e["shape"])) for e in manifest["weights"])
    if blob.size != expected:
        raise FormatError(
            f"weights blob holds {blob.size} values but manifest declares {expected}"
        )

    arrays = {}
    off = 0
    for entry in manifest["weights"]:
        size = int(np.prod(entry["shape"]))
        arrays[entry["name"]] = blob[off : off + size].reshape(entry["shape"]).copy()
        off += size

    def build(section, specs):
        layers = []
        for idx, spec in enumerate(specs):
            weights = {}
            for name in PARAM_ORDER.get(spec.kind, ()):
                key = f"{section}.{idx}.{name}"
                if key not in arrays:
                    raise FormatError(f"manifest missing weight entry {key!r}")
                weights[name] = arrays[key]
            layers.append(Layer(spec, weights))
        return layers

    model = ModelBundle(
        build("extractor", ext_specs),
        build("head", head_specs),
        int(manifest["class_count"]),
        tuple(manifest["input_shape"]),
        metrics=dict(manifest.get("metrics", {})),
    )
    return model


# ---------------------------------------------------------------------------
# reference architecture (28x28 grayscale, 4x4x20 feature grid)
# ---------------------------------------------------------------------------

def reference_extractor_specs():
    return [
        LayerSpec("conv2d", out_channels=10, kernel_size=5, stride=1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", window=2, stride=2),
        LayerSpec("conv2d", out_channels=20, kernel_size=5, stride=1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", window=2, stride=2),
    ]


def reference_head_specs(class_count: int = 10):
    return [
        LayerSpec("flatten"),
        LayerSpec("dense", units=50),
        LayerSpec("relu"),
        LayerSpec("dense", units=class_count),
        LayerSpec("log-softmax"),
    ]
