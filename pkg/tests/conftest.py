import os

import numpy as np
import pytest

from cfedit.grids import FeatureGrid
from cfedit.network import (
    LayerSpec,
    ModelBundle,
    TrainConfig,
    head_logprobs,
    init_layer,
    reference_extractor_specs,
    reference_head_specs,
    train,
)
from cfedit.rng import substream

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_dir():
    return os.environ.get("CFEDIT_MNIST_DIR", os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))


def mnist_paths_or_skip():
    base = mnist_dir()
    paths = {k: os.path.join(base, v) for k, v in MNIST_FILES.items()}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        pytest.skip(
            "MNIST IDX files not available (set CFEDIT_MNIST_DIR or place them under "
            f"{base}); dataset downloads are blocked in this environment"
        )
    return paths


def make_model(ext_specs, head_specs, input_shape, class_count, seed=0) -> ModelBundle:
    rng = substream(seed, "init")
    geom = tuple(input_shape)
    layers = []
    for spec in list(ext_specs) + list(head_specs):
        layer, geom = init_layer(spec, geom, rng)
        layers.append(layer)
    n = len(list(ext_specs))
    return ModelBundle(layers[:n], layers[n:], class_count, tuple(input_shape))


def identity_feature_model(h, w, d, class_count, seed=0, linear=True) -> ModelBundle:
    """Model whose extractor is a 1x1 identity conv: feature grid == input pixels."""
    head = (
        [LayerSpec("flatten"), LayerSpec("dense", units=class_count), LayerSpec("log-softmax")]
        if linear
        else [
            LayerSpec("flatten"),
            LayerSpec("dense", units=8),
            LayerSpec("relu"),
            LayerSpec("dense", units=class_count),
            LayerSpec("log-softmax"),
        ]
    )
    model = make_model(
        [LayerSpec("conv2d", out_channels=d, kernel_size=1, stride=1)], head, (h, w, d), class_count, seed
    )
    kernel = model.extractor[0].weights["kernel"]
    kernel[...] = np.eye(d).reshape(1, 1, d, d)
    model.extractor[0].weights["bias"][...] = 0.0
    return model


def random_grid(rng, h, w, d) -> FeatureGrid:
    return FeatureGrid(h, w, d, rng.normal(size=(h * w, d)))


def brute_force_best_edit(model, F, F2, target_class, excluded_query=(), excluded_source=()):
    """Independent double-loop oracle: materialize every edited grid, run the head."""
    from cfedit.grids import single_edit

    best = None
    for i in range(F.cells):
        if i in set(excluded_query):
            continue
        for j in range(F.cells):
            if j in set(excluded_source):
                continue
            score = head_logprobs(model, single_edit(F, F2, i, j))[target_class]
            if best is None or score > best[2]:
                best = (i, j, score)
    return best


@pytest.fixture(scope="session")
def digits_surrogate():
    """Real handwritten digits (8x8 UCI set) upsampled to the 28x28 reference
    input; desk-scale stand-in where MNIST itself is unavailable."""
    sklearn_datasets = pytest.importorskip("sklearn.datasets")
    X, y = sklearn_datasets.load_digits(return_X_y=True)
    imgs = X.reshape(-1, 8, 8) / 16.0
    imgs = np.pad(np.repeat(np.repeat(imgs, 3, axis=1), 3, axis=2), ((0, 0), (2, 2), (2, 2)))
    order = np.random.default_rng(0).permutation(len(imgs))
    imgs, y = imgs[order], y[order].astype(int)
    split = 1437
    return {
        "train_images": imgs[:split],
        "train_labels": y[:split],
        "test_images": imgs[split:],
        "test_labels": y[split:],
    }


@pytest.fixture(scope="session")
def digits_model(digits_surrogate):
    return train(
        reference_extractor_specs(),
        reference_head_specs(10),
        digits_surrogate["train_images"],
        digits_surrogate["train_labels"],
        TrainConfig(epochs=12, seed=0, learning_rate=0.05),
        test_images=digits_surrogate["test_images"],
        test_labels=digits_surrogate["test_labels"],
        class_count=10,
    )
