"""Desk-scale predictors and the orbit-softmax pose canonicalizer.

Two small architectures are available for both the classifier and the
canonicalizer's energy network: a bare softmax-linear map and a one-hidden-
layer tanh MLP.  The canonicalizer scores every rotation of its input with
the energy network and softmaxes over the orbit, which makes its posterior
exactly translation-covariant under lossless (quarter-turn) group actions.

All training is plain minibatch SGD (optionally with momentum), single
threaded and fully determined by the config seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import FormatError, TrainingError
from .groups import CyclicGroup, GridImage, GroupElement, inverse, rotate_array

__all__ = [
    "TrainConfig",
    "Classifier",
    "Canonicalizer",
    "GroupDistribution",
    "LogitTable",
    "train_classifier",
    "train_canonicalizer",
    "group_posterior",
    "canonicalize",
    "canonicalize_batch",
    "prior_loss",
    "prior_loss_and_gradients",
    "export_logits",
    "ingest_logits",
    "save_classifier",
    "load_classifier",
    "save_canonicalizer",
    "load_canonicalizer",
]

ARCHITECTURES = ("softmax-linear", "mlp-1hidden")

_LOGIT_CLAMP = 50.0
_LOGITS_MAGIC = b"CP2L"
_LOGITS_VERSION = 1


@dataclass
class TrainConfig:
    """Hyperparameters for SGD training."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = 0
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    patience: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")


class _Net:
    """Tiny feed-forward network with explicit float64 parameters."""

    def __init__(self, arch: str, in_dim: int, out_dim: int, hidden: int, rng, zero_head: bool):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden if arch == "mlp-1hidden" else 0
        p: dict[str, np.ndarray] = {}
        if arch == "softmax-linear":
            if zero_head:
                p["W"] = np.zeros((in_dim, out_dim))
            else:
                p["W"] = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim))
            p["b"] = np.zeros(out_dim)
        else:
            p["W1"] = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden))
            p["b1"] = np.zeros(hidden)
            if zero_head:
                p["W2"] = np.zeros((hidden, out_dim))
            else:
                p["W2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, out_dim))
            p["b2"] = np.zeros(out_dim)
        self.params = p

    def forward(self, x: np.ndarray):
        if self.arch == "softmax-linear":
            return x @ self.params["W"] + self.params["b"], (x,)
        a = np.tanh(x @ self.params["W1"] + self.params["b1"])
        return a @ self.params["W2"] + self.params["b2"], (x, a)

    def backward(self, cache, gout: np.ndarray) -> dict[str, np.ndarray]:
        if self.arch == "softmax-linear":
            (x,) = cache
            return {"W": x.T @ gout, "b": gout.sum(axis=0)}
        x, a = cache
        gw2 = a.T @ gout
        gb2 = gout.sum(axis=0)
        gz = (gout @ self.params["W2"].T) * (1.0 - a * a)
        return {"W1": x.T @ gz, "b1": gz.sum(axis=0), "W2": gw2, "b2": gb2}


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.clip(logits, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x) -> np.ndarray:
    """Accept a GridImage, one (H, H) array, or an (N, H, H) stack."""
    if isinstance(x, GridImage):
        arr = x.pixels[None]
    else:
        arr = np.asarray(x)
        if arr.ndim == 2:
            arr = arr[None]
    n = arr.shape[0]
    return arr.reshape(n, -1).astype(np.float64)


class Classifier:
    """A trained probabilistic classifier over glyph classes."""

    def __init__(self, net: _Net, num_classes: int, side: int):
        self.net = net
        self.num_classes = num_classes
        self.side = side
        self.train_accuracy: float | None = None
        self.train_loss_history: list[float] = []

    @property
    def architecture(self) -> str:
        return self.net.arch

    def predict_logits(self, x) -> np.ndarray:
        out, _ = self.net.forward(_as_batch(x))
        return out

    def predict_proba(self, x) -> np.ndarray:
        """Class probabilities; (K,) for a single image, (N, K) for a stack."""
        probs = _softmax(self.predict_logits(x))
        if isinstance(x, GridImage) or np.asarray(x).ndim == 2:
            return probs[0]
        return probs


class GroupDistribution:
    """A probability vector over the elements of one cyclic group."""

    __slots__ = ("probs",)

    def __init__(self, probs: np.ndarray):
        arr = np.asarray(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("group distribution must be a non-empty vector")
        if arr.min() < -1e-12:
            raise ValueError("group distribution has negative mass")
        if abs(arr.sum() - 1.0) > 1e-6:
            raise ValueError(f"group distribution sums to {arr.sum()}, not 1")
        arr = arr.copy()
        arr.flags.writeable = False
        self.probs = arr

    def __len__(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


class Canonicalizer:
    """Energy network plus group; maps images to posteriors over poses."""

    def __init__(self, net: _Net, group: CyclicGroup, temperature: float, side: int):
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        self.net = net
        self.group = group
        self.temperature = temperature
        self.side = side
        self.train_loss_history: list[float] = []

    def posterior_matrix(self, images: np.ndarray) -> np.ndarray:
        """Posteriors for an (N, H, H) stack, returned as (N, |G|)."""
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        n = images.shape[0]
        order = self.group.order
        energies = np.empty((n, order))
        for g in range(order):
            rotated = rotate_array(inverse(self.group.element(g)), images)
            out, _ = self.net.forward(rotated.reshape(n, -1).astype(np.float64))
            energies[:, g] = out[:, 0]
        return _softmax(energies / self.temperature)


def group_posterior(cn: Canonicalizer, x: GridImage) -> GroupDistribution:
    """Softmax over the energies of every inverse-rotated copy of ``x``."""
    return GroupDistribution(cn.posterior_matrix(x.pixels[None])[0])


def canonicalize_batch(
    cn: Canonicalizer, images: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Argmax-canonicalize an (N, H, H) stack.

    Returns the standardized images, the chosen pose index per sample, and
    the full (N, |G|) posterior matrix.
    """
    images = np.asarray(images)
    posteriors = cn.posterior_matrix(images)
    poses = np.argmax(posteriors, axis=1)
    out = np.empty_like(images)
    for pose in np.unique(poses):
        mask = poses == pose
        out[mask] = rotate_array(inverse(cn.group.element(int(pose))), images[mask])
    return out, poses, posteriors


def canonicalize(
    cn: Canonicalizer, x: GridImage, mode: str = "argmax", seed: int | None = None
) -> tuple[GridImage, GroupElement, GroupDistribution]:
    """Undo the predicted pose of ``x``.

    Returns the standardized image ``act(g_hat^-1, x)``, the chosen element
    ``g_hat``, and the full posterior.  ``mode="argmax"`` breaks ties toward
    the lowest index; ``mode="sample"`` draws from the posterior using
    ``seed``.
    """
    posterior = group_posterior(cn, x)
    if mode == "argmax":
        g_idx = posterior.argmax()
    elif mode == "sample":
        rng = np.random.default_rng(seed)
        g_idx = int(rng.choice(cn.group.order, p=posterior.probs))
    else:
        raise ValueError(f"unknown decoding mode {mode!r}")
    g_hat = cn.group.element(g_idx)
    standardized = GridImage(rotate_array(inverse(g_hat), x.pixels))
    return standardized, g_hat, posterior


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class _SGD:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum if cfg.optimizer == "sgd-momentum" else 0.0
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * g
            self.params[k] += v


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_classifier(
    dataset: Dataset,
    cfg: TrainConfig,
    arch: str = "mlp-1hidden",
    hidden: int = 64,
) -> Classifier:
    """Cross-entropy SGD on an upright (canonical-pose) training split."""
    x_all = dataset.images().reshape(len(dataset), -1).astype(np.float64)
    y_all = dataset.labels()
    k = dataset.num_classes
    rng = np.random.default_rng(cfg.seed)
    net = _Net(arch, x_all.shape[1], k, hidden, rng, zero_head=False)
    opt = _SGD(net.params, cfg)

    clf = Classifier(net, k, dataset.side)
    best = np.inf
    stale = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng):
            xb, yb = x_all[idx], y_all[idx]
            # divergence shows up as a non-finite loss; the overflow on the
            # way there is expected and checked below
            with np.errstate(over="ignore", invalid="ignore"):
                logits, cache = net.forward(xb)
                probs = _softmax(logits)
                loss = -np.mean(np.log(probs[np.arange(len(idx)), yb] + 1e-300))
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"classifier loss became non-finite at epoch {epoch} "
                        f"(lr={cfg.learning_rate}, batch={cfg.batch_size})"
                    )
                gout = probs
                gout[np.arange(len(idx)), yb] -= 1.0
                gout /= len(idx)
                opt.step(net.backward(cache, gout))
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        clf.train_loss_history.append(epoch_loss)
        if epoch_loss < best - 1e-12:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break

    preds = np.argmax(clf.predict_proba(dataset.images()), axis=1)
    clf.train_accuracy = float(np.mean(preds == y_all))
    return clf


def _orbit_design(images: np.ndarray, group: CyclicGroup) -> np.ndarray:
    """Stack act(g^-1, x) for every g; shape (N, |G|, side*side), float64."""
    n = images.shape[0]
    order = group.order
    flat = np.empty((n, order, images.shape[1] * images.shape[2]))
    for g in range(order):
        rotated = rotate_array(inverse(group.element(g)), images)
        flat[:, g, :] = rotated.reshape(n, -1)
    return flat


def _prior_forward(cn: Canonicalizer, orbit_flat: np.ndarray):
    n, order, dim = orbit_flat.shape
    out, cache = cn.net.forward(orbit_flat.reshape(n * order, dim))
    energies = out.reshape(n, order)
    probs = _softmax(energies / cn.temperature)
    loss = float(-np.mean(np.log(probs[:, 0] + 1e-300)))
    return loss, probs, cache


def prior_loss(cn: Canonicalizer, images: np.ndarray) -> float:
    """Mean negative log posterior mass on the identity element."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    loss, _, _ = _prior_forward(cn, _orbit_design(images, cn.group))
    return loss


def prior_loss_and_gradients(
    cn: Canonicalizer, images: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic gradients w.r.t. every energy-network parameter."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    orbit = _orbit_design(images, cn.group)
    n, order, _ = orbit.shape
    loss, probs, cache = _prior_forward(cn, orbit)
    gout = probs.copy()
    gout[:, 0] -= 1.0
    gout /= n * cn.temperature
    grads = cn.net.backward(cache, gout.reshape(n * order, 1))
    return loss, grads


def train_canonicalizer(
    dataset: Dataset,
    group: CyclicGroup,
    cfg: TrainConfig,
    arch: str = "mlp-1hidden",
    hidden: int = 32,
    temperature: float = 1.0,
) -> Canonicalizer:
    """Fit the energy network by pushing posterior mass onto the identity.

    The training split must be in canonical pose.  The energy head starts at
    zero, so the initial posterior is exactly uniform and the initial loss is
    log |G|.
    """
    images = dataset.images()
    rng = np.random.default_rng(cfg.seed)
    net = _Net(arch, images.shape[1] * images.shape[2], 1, hidden, rng, zero_head=True)
    cn = Canonicalizer(net, group, temperature, dataset.side)
    opt = _SGD(net.params, cfg)

    best = np.inf
    stale = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _epoch_batches(len(dataset), cfg.batch_size, rng):
            orbit = _orbit_design(images[idx], group)
            n_b, order, _ = orbit.shape
            with np.errstate(over="ignore", invalid="ignore"):
                loss, probs, cache = _prior_forward(cn, orbit)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"canonicalizer loss became non-finite at epoch {epoch} "
                        f"(lr={cfg.learning_rate}, batch={cfg.batch_size})"
                    )
                gout = probs.copy()
                gout[:, 0] -= 1.0
                gout /= n_b * cn.temperature
                opt.step(net.backward(cache, gout.reshape(n_b * order, 1)))
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        cn.train_loss_history.append(epoch_loss)
        if epoch_loss < best - 1e-12:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return cn


# ---------------------------------------------------------------------------
# frozen logits
# ---------------------------------------------------------------------------


class LogitTable:
    """Black-box predictor backed by a table of per-sample logits."""

    def __init__(self, logits: np.ndarray):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.num_classes = self.logits.shape[1]

    def __len__(self) -> int:
        return self.logits.shape[0]

    def predict_proba(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self):
            raise IndexError(f"sample index {index} outside [0, {len(self)})")
        return _softmax(self.logits[index].astype(np.float64))

    def predict_proba_all(self) -> np.ndarray:
        return _softmax(self.logits.astype(np.float64))


def export_logits(classifier: Classifier, dataset: Dataset, path) -> None:
    """Write per-sample logits in the binary logits container.

    Logits are shifted per sample so their maximum is zero (softmax is shift
    invariant), which keeps float32 storage faithful.
    """
    logits = classifier.predict_logits(dataset.images())
    logits = logits - logits.max(axis=1, keepdims=True)
    parts = [
        struct.pack(
            "<4sHII", _LOGITS_MAGIC, _LOGITS_VERSION, logits.shape[0], logits.shape[1]
        ),
        logits.astype("<f4").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def ingest_logits(path) -> LogitTable:
    """Read a logits container back into a table-backed predictor."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 14:
        raise FormatError(
            f"truncated file: needed 14 header bytes at byte offset 0, have {len(data)}"
        )
    magic = data[:4]
    if magic != _LOGITS_MAGIC:
        raise FormatError(
            f"bad magic {magic!r} at byte offset 0, expected {_LOGITS_MAGIC!r}"
        )
    (version,) = struct.unpack("<H", data[4:6])
    if version != _LOGITS_VERSION:
        raise FormatError(f"unsupported format version {version} at byte offset 4")
    count, k = struct.unpack("<II", data[6:14])
    expected = 14 + 4 * count * k
    if len(data) < expected:
        raise FormatError(
            f"truncated file: needed {expected - 14} payload bytes at byte offset 14, "
            f"have {len(data) - 14}"
        )
    logits = np.frombuffer(data[14:expected], dtype="<f4").reshape(count, k)
    return LogitTable(logits)


# ---------------------------------------------------------------------------
# model persistence (artifact files for the command-line workflow)
# ---------------------------------------------------------------------------


def save_classifier(clf: Classifier, path) -> None:
    np.savez(
        path,
        kind="classifier",
        arch=clf.net.arch,
        num_classes=clf.num_classes,
        side=clf.side,
        hidden=clf.net.hidden,
        train_accuracy=-1.0 if clf.train_accuracy is None else clf.train_accuracy,
        **{f"param_{k}": v for k, v in clf.net.params.items()},
    )


def load_classifier(path) -> Classifier:
    with np.load(path, allow_pickle=False) as blob:
        if str(blob["kind"]) != "classifier":
            raise FormatError(f"{path} does not hold a classifier")
        net = _Net.__new__(_Net)
        net.arch = str(blob["arch"])
        net.hidden = int(blob["hidden"])
        net.params = {
            k[len("param_") :]: blob[k] for k in blob.files if k.startswith("param_")
        }
        first = next(iter(net.params.values()))
        net.in_dim = first.shape[0]
        net.out_dim = int(blob["num_classes"])
        clf = Classifier(net, int(blob["num_classes"]), int(blob["side"]))
        acc = float(blob["train_accuracy"])
        clf.train_accuracy = None if acc < 0 else acc
        return clf


def save_canonicalizer(cn: Canonicalizer, path) -> None:
    np.savez(
        path,
        kind="canonicalizer",
        arch=cn.net.arch,
        group_order=cn.group.order,
        side=cn.side,
        hidden=cn.net.hidden,
        temperature=cn.temperature,
        **{f"param_{k}": v for k, v in cn.net.params.items()},
    )


def load_canonicalizer(path) -> Canonicalizer:
    with np.load(path, allow_pickle=False) as blob:
        if str(blob["kind"]) != "canonicalizer":
            raise FormatError(f"{path} does not hold a canonicalizer")
        net = _Net.__new__(_Net)
        net.arch = str(blob["arch"])
        net.hidden = int(blob["hidden"])
        net.params = {
            k[len("param_") :]: blob[k] for k in blob.files if k.startswith("param_")
        }
        first = next(iter(net.params.values()))
        net.in_dim = first.shape[0]
        net.out_dim = 1
        return Canonicalizer(
            net,
            CyclicGroup(int(blob["group_order"])),
            float(blob["temperature"]),
            int(blob["side"]),
        )
