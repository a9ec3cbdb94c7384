"""Small trainable classifiers, synthetic datasets, and Gaussian-augmentation
fine-tuning.

Models are plain rectifier MLPs trained with mini-batch gradient descent on
softmax cross-entropy. When a training config carries ``augment_sigma > 0``,
every sample in every batch is perturbed by fresh Gaussian noise before the
forward pass; that is the whole fine-tuning trick.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .numkit import RngStream, Vector, clamp01_array

SCHEDULES = ("constant", "cyclic")


@dataclass
class Dataset:
    """N inputs of dimension d with class labels in {0..K-1}."""

    inputs: np.ndarray  # (N, d), coordinates in [0, 1]
    labels: np.ndarray  # (N,), int
    name: str = "dataset"
    shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise ValueError("inputs must be a nonempty (N, d) array")
        if len(self.labels) != len(self.inputs):
            raise ValueError("labels and inputs disagree on N")
        if self.shape is not None:
            h, w, c = self.shape
            if h * w * c != self.d:
                raise ValueError("shape metadata does not match dimension")

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def vector(self, i: int) -> Vector:
        return Vector(self.inputs[i], self.shape)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.name, self.shape)


@dataclass
class MlpModel:
    """Feedforward rectifier network; identity on the output layer (logits)."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} parameter shapes disagree with {dims}")
        self.layer_dims = dims

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    augment_sigma: float = 0.0
    seed: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.augment_sigma < 0:
            raise ValueError("augment_sigma must be nonnegative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")


def init_model(
    layer_dims,
    seed: int,
    input_center: float | None = None,
    zero_output: bool = False,
) -> MlpModel:
    """He-initialised weights, deterministic in the seed.

    Hidden biases start slightly positive: near-constant inputs otherwise
    leave rectifier units dead for every sample at once. ``input_center``
    additionally absorbs a constant input offset into the first-layer bias,
    so units see deviations from the center rather than its huge common
    component; use 0.5 for data that hugs the middle of the unit box.
    ``zero_output`` starts the final layer at zero, which removes the
    early-training pressure that silences rectifier units when inputs are
    nearly constant.
    """
    rng = RngStream(seed, 0).child(101)
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        w = rng.normal((d_in, d_out)) * math.sqrt(2.0 / d_in)
        if last and zero_output:
            w = np.zeros((d_in, d_out))
        weights.append(w)
        bias = np.full(d_out, 0.0 if last else 0.01)
        if i == 0 and input_center is not None:
            bias = bias - input_center * w.sum(axis=0)
        biases.append(bias)
    return MlpModel(dims, weights, biases)


def forward_batch(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Logits for a (N, d) batch. Pure function of (model, x)."""
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
    return a


def forward(model: MlpModel, x: Vector) -> np.ndarray:
    """Logits for a single input point."""
    if x.d != model.d_in:
        raise ValueError(f"input has dimension {x.d}, model expects {model.d_in}")
    return forward_batch(model, x.values[None, :])[0]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cached(model, x):
    """Forward pass keeping pre-activations for backprop."""
    acts = [x]
    zs = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        zs.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts, zs


def loss_and_grads(model: MlpModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch plus parameter gradients."""
    n = len(x)
    acts, zs = _forward_cached(model, x)
    probs = _softmax(acts[-1])
    eps = 1e-12
    loss = float(-np.log(probs[np.arange(n), y] + eps).mean())

    dz = probs
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ model.weights[i].T
            dz = da * (zs[i - 1] > 0)
    return loss, grads_w, grads_b


def input_gradient(model: MlpModel, x: np.ndarray, out_weights: np.ndarray) -> np.ndarray:
    """Gradient of ``out_weights . logits(x)`` with respect to the input.

    Defender-side tool (used by reachability oracles and Lipschitz probes);
    attack code never sees it.
    """
    acts, zs = _forward_cached(model, x[None, :])
    da = out_weights[None, :]
    for i in range(len(model.weights) - 1, -1, -1):
        dz = da if i == len(model.weights) - 1 else da * (zs[i] > 0)
        da = dz @ model.weights[i].T
    return da[0]


def _lr_factor(schedule: str, epoch: int, epochs: int) -> float:
    if schedule == "constant" or epochs == 1:
        return 1.0
    # triangular one-cycle peaking at mid-training, floored at 10%
    frac = epoch / (epochs - 1)
    return 0.1 + 0.9 * (1.0 - abs(2.0 * frac - 1.0))


def train(
    model: MlpModel,
    data: Dataset,
    cfg: TrainConfig,
    return_history: bool = False,
):
    """Mini-batch SGD on softmax cross-entropy, starting from ``model``.

    With ``augment_sigma > 0`` each batch sees freshly noised copies of its
    samples. Deterministic given ``cfg.seed``. Raises on non-finite loss.
    """
    if data.d != model.d_in:
        raise ValueError("dataset dimension disagrees with model input")
    if cfg.batch_size > data.n:
        raise ValueError("batch_size exceeds dataset size")
    model = model.copy()
    rng = RngStream(cfg.seed, 0).child(202)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * _lr_factor(cfg.schedule, epoch, cfg.epochs)
        order = rng.permutation(data.n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, data.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = data.inputs[idx]
            if cfg.augment_sigma > 0:
                xb = xb + cfg.augment_sigma * rng.normal(xb.shape)
            loss, gw, gb = loss_and_grads(model, xb, data.labels[idx])
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {n_batches}"
                )
            for i in range(len(model.weights)):
                model.weights[i] -= lr * gw[i]
                model.biases[i] -= lr * gb[i]
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / n_batches)
    if return_history:
        return model, history
    return model


def gf_finetune(model: MlpModel, data: Dataset, cfg: TrainConfig) -> MlpModel:
    """Gaussian-augmentation fine-tuning of an already-trained model."""
    if not cfg.augment_sigma > 0:
        raise ValueError("gf_finetune requires augment_sigma > 0")
    return train(model, data, cfg)


def accuracy(
    model: MlpModel, data: Dataset, noise_sigma: float, rng: RngStream
) -> float:
    """Fraction of samples classified correctly, one noise draw per input.

    ``noise_sigma = 0`` is plain clean accuracy. Argmax ties break toward
    the lowest class index.
    """
    x = data.inputs
    if noise_sigma > 0:
        x = x + noise_sigma * rng.normal(x.shape)
    pred = forward_batch(model, x).argmax(axis=1)
    return float((pred == data.labels).mean())


def make_blobs(
    d: int,
    k: int,
    n: int,
    separation: float,
    seed: int,
    cluster_std: float = 0.015,
    direction: str = "random",
    axis_clip: float | None = None,
    shape: tuple[int, int, int] | None = None,
) -> Dataset:
    """Gaussian clusters with centers on a diagonal line through [0,1]^d.

    Centers sit at equal spacing ``separation`` along a sign-diagonal
    direction, so adjacent clusters are ``separation`` apart in l2 and the
    class boundary is reachable through many small per-coordinate moves.
    ``direction="alternating"`` gives the diagonal strictly alternating
    signs: every contiguous coordinate block is then direction-balanced,
    which stresses block-structured search. ``axis_clip`` truncates each
    cluster's spread along the class axis at that many standard deviations,
    bounding how close any sample can sit to its class boundary.
    Coordinates are clamped to [0, 1] after sampling.
    """
    if d < 2 or k < 2 or n < k:
        raise ValueError("need d >= 2, K >= 2, N >= K")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = RngStream(seed, 0).child(303)
    if direction == "alternating":
        signs = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    elif direction == "random":
        signs = rng.rademacher(d).astype(np.float64)
    else:
        raise ValueError("direction must be 'random' or 'alternating'")
    axis = signs / math.sqrt(d)
    half_span = separation * (k - 1) / 2.0
    max_coord_offset = half_span / math.sqrt(d)
    if max_coord_offset + 4 * cluster_std > 0.5:
        raise ValueError(
            f"separation {separation} infeasible for d={d}, K={k}: "
            f"cluster centers would leave [0,1]^d"
        )
    offsets = separation * (np.arange(k) - (k - 1) / 2.0)
    centers = 0.5 + offsets[:, None] * axis[None, :]
    labels = np.arange(n) % k
    noise = cluster_std * rng.normal((n, d))
    if axis_clip is not None:
        along = noise @ axis
        bound = axis_clip * cluster_std
        noise += (np.clip(along, -bound, bound) - along)[:, None] * axis[None, :]
    inputs = centers[labels] + noise
    order = rng.permutation(n)
    return Dataset(
        clamp01_array(inputs[order]),
        labels[order],
        name=f"blobs-d{d}-k{k}",
        shape=shape,
    )


def make_shortcut_blobs(
    d: int,
    n: int,
    seed: int,
    shortcut_coords: int = 1,
    shortcut_gap: float = 0.07,
    shortcut_std: float = 0.015,
    separation: float = 0.25,
    cluster_std: float = 0.055,
) -> Dataset:
    """Two-class data with a crisp narrow feature and a diffuse wide one.

    The first ``shortcut_coords`` coordinates carry a low-variance class gap
    that training picks up fast but moderate input noise flips; the rest
    carry the class signal as a diagonal offset of aggregate l2 size
    ``separation`` buried under per-coordinate spread ``cluster_std``.
    Evaluating under Gaussian query noise separates models that lean on the
    narrow feature from models that also learned the diffuse one.
    """
    if d < 8 or n < 2 or not 1 <= shortcut_coords < d:
        raise ValueError("need d >= 8, n >= 2, 1 <= shortcut_coords < d")
    rng = RngStream(seed, 0).child(304)
    wide = d - shortcut_coords
    signs = np.where(np.arange(wide) % 2 == 0, 1.0, -1.0)
    axis = signs / math.sqrt(wide)
    labels = np.arange(n) % 2
    side = 2.0 * labels - 1.0  # -1 for class 0, +1 for class 1
    inputs = np.empty((n, d))
    inputs[:, :shortcut_coords] = (
        0.5
        + side[:, None] * (shortcut_gap / 2.0)
        + shortcut_std * rng.normal((n, shortcut_coords))
    )
    body = 0.5 + side[:, None] * (separation / 2.0) * axis[None, :]
    inputs[:, shortcut_coords:] = body + cluster_std * rng.normal((n, wide))
    order = rng.permutation(n)
    return Dataset(
        clamp01_array(inputs[order]), labels[order], name=f"shortcut-d{d}"
    )


def merge_datasets(a: Dataset, b: Dataset, name: str | None = None) -> Dataset:
    if a.d != b.d:
        raise ValueError("dimension mismatch")
    return Dataset(
        np.concatenate([a.inputs, b.inputs]),
        np.concatenate([a.labels, b.labels]),
        name or a.name,
        a.shape,
    )


# ---------------------------------------------------------------------------
# File formats


def save_dataset(data: Dataset, path: str) -> None:
    """Text CSV: header ``label,f0,...,f{d-1}``, one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(data.d)])
        for y, row in zip(data.labels, data.inputs):
            writer.writerow([int(y)] + [f"{v:.12g}" for v in row])


def load_dataset(path: str, shape: tuple[int, int, int] | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: expected header starting with 'label'")
        labels, rows = [], []
        for rec in reader:
            if not rec:
                continue
            labels.append(int(rec[0]))
            rows.append([float(v) for v in rec[1:]])
    return Dataset(
        np.array(rows), np.array(labels), os.path.splitext(os.path.basename(path))[0], shape
    )


def save_model(model: MlpModel, path: str) -> None:
    """Line-oriented text format, 17 significant digits per value."""
    with open(path, "w") as fh:
        fh.write("MODELv1\n")
        fh.write(" ".join(str(d) for d in model.layer_dims) + "\n")
        for w, b in zip(model.weights, model.biases):
            fh.write(" ".join(f"{v:.17g}" for v in w.ravel()) + "\n")
            fh.write(" ".join(f"{v:.17g}" for v in b) + "\n")


def load_model(path: str) -> MlpModel:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != "MODELv1":
            raise ValueError(f"{path}: not a MODELv1 file (got {magic!r})")
        dims = tuple(int(t) for t in fh.readline().split())
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = np.array([float(t) for t in fh.readline().split()])
            b = np.array([float(t) for t in fh.readline().split()])
            if w.size != d_in * d_out or b.size != d_out:
                raise ValueError(f"{path}: layer size mismatch")
            weights.append(w.reshape(d_in, d_out))
            biases.append(b)
    return MlpModel(dims, weights, biases)
