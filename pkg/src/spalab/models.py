"""Small classifiers, cross-entropy, SGD training and checkpoint I/O."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, conv2d

log = logging.getLogger(__name__)

ARCH_IDS = {"mlp": 1, "cnn": 2}
MAGIC = b"SPALM1"


@dataclass
class Model:
    """A feed-forward classifier over ``[n, h, w, c]`` images.

    ``params`` maps names to float64 arrays; the layer stack is implied by
    ``arch`` and the parameter shapes, so a checkpoint needs nothing else.
    """

    arch: str
    params: dict[str, np.ndarray]
    activation: str = "softplus"

    @property
    def input_shape(self) -> tuple[int, int, int]:
        if self.arch == "cnn":
            hin = int(self.params["input_hw"][0]), int(self.params["input_hw"][1])
            return hin[0], hin[1], self.params["conv1.w"].shape[2]
        return tuple(int(v) for v in self.params["input_shape"])

    @property
    def num_classes(self) -> int:
        return self.params["out.w"].shape[1]

    def copy(self) -> "Model":
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, self.activation)

    def trainable(self) -> list[str]:
        return [k for k in self.params if not k.startswith("input_")]

    def _act(self, t: Tensor) -> Tensor:
        return t.softplus() if self.activation == "softplus" else t.relu()

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        """Build the graph for logits ``[n, classes]``."""
        if params is None:
            params = {k: Tensor(self.params[k]) for k in self.trainable()}
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ValueError(f"expected input [n, {self.input_shape}], got {x.shape}")
        n = x.shape[0]
        if self.arch == "cnn":
            h = self._act(conv2d(x, params["conv1.w"]).add_bias(params["conv1.b"]))
            h = self._act(conv2d(h, params["conv2.w"]).add_bias(params["conv2.b"]))
            h = h.avg_pool(2)
            h = h.reshape(n, -1)
        elif self.arch == "mlp":
            h = x.reshape(n, -1)
        else:
            raise ValueError(f"unknown architecture {self.arch!r}")
        h = self._act(h.matmul(params["fc.w"]).add_bias(params["fc.b"]))
        return h.matmul(params["out.w"]).add_bias(params["out.b"])

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x)).data


def make_cnn(input_shape, num_classes: int, seed: int = 0, widths=(16, 32), hidden: int = 64,
             activation: str = "softplus") -> Model:
    """Reference CNN: two valid 3x3 convs, 2x2 average pooling, one hidden layer."""
    h, w, c = input_shape
    rng = np.random.default_rng(seed)
    oh, ow = h - 4, w - 4
    if oh <= 0 or ow <= 0 or oh % 2 or ow % 2:
        raise ValueError(f"input {input_shape} incompatible with the reference CNN")
    flat = (oh // 2) * (ow // 2) * widths[1]

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    params = {
        "input_hw": np.array([h, w], dtype=np.float64),
        "conv1.w": he((3, 3, c, widths[0]), 9 * c),
        "conv1.b": np.zeros(widths[0]),
        "conv2.w": he((3, 3, widths[0], widths[1]), 9 * widths[0]),
        "conv2.b": np.zeros(widths[1]),
        "fc.w": he((flat, hidden), flat),
        "fc.b": np.zeros(hidden),
        "out.w": he((hidden, num_classes), hidden),
        "out.b": np.zeros(num_classes),
    }
    return Model("cnn", params, activation)


def make_mlp(input_shape, num_classes: int, hidden: int = 64, seed: int = 0,
             activation: str = "softplus") -> Model:
    rng = np.random.default_rng(seed)
    d = int(np.prod(input_shape))
    params = {
        "input_shape": np.array(input_shape, dtype=np.float64),
        "fc.w": rng.normal(0.0, np.sqrt(2.0 / d), size=(d, hidden)),
        "fc.b": np.zeros(hidden),
        "out.w": rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, num_classes)),
        "out.b": np.zeros(num_classes),
    }
    return Model("mlp", params, activation)


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a batch; ``argmax`` (lowest index on ties) is the prediction."""
    return model.logits(np.asarray(x, dtype=np.float64))


def predict_labels(model: Model, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [np.argmax(predict(model, x[i : i + chunk]), axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_labels(model, x) == y)) if len(y) else 0.0


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels.astype(np.intp)


def cross_entropy(logits, labels, reduction: str = "mean"):
    """Cross-entropy of ``logits`` against integer ``labels``.

    Accepts a Tensor (returns a Tensor node) or an ndarray (returns a float or,
    with ``reduction='none'``, the per-row losses).
    """
    if isinstance(logits, Tensor):
        labels = _check_labels(labels, logits.shape[1])
        nll = -logits.log_softmax().pick(labels)
        if reduction == "sum":
            return nll.sum()
        if reduction == "mean":
            return nll.mean()
        return nll
    z = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, z.shape[1])
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    per = lse - z[np.arange(len(z)), labels]
    if reduction == "none":
        return per
    return float(per.sum() if reduction == "sum" else per.mean())


def loss_and_input_grad(model: Model, x: np.ndarray, y: np.ndarray):
    """Logits and the gradient of the summed cross-entropy w.r.t. the input.

    The loss is summed (not averaged) so each instance's gradient is
    independent of the batch it was evaluated in.
    """
    xt = Tensor(x, requires_grad=True)
    logits = model.forward(xt)
    backward(cross_entropy(logits, y, reduction="sum"))
    return logits.data, xt.grad


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    decay_points: tuple[float, ...] = (0.25, 0.75)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hflip: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for frac in self.decay_points:
            if epoch >= frac * self.epochs:
                lr *= self.decay_factor
        return lr


@dataclass
class TrainHistory:
    clean_acc: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    step_losses: list[tuple[float, float]] = field(default_factory=list)
    extra: dict[str, list] = field(default_factory=dict)


BatchLoss = Callable[[Model, dict, np.ndarray, np.ndarray, int, np.random.Generator], Tensor]


def clean_batch_loss(model, params, xb, yb, epoch, rng):
    return cross_entropy(model.forward(Tensor(xb), params), yb)


def fit(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
        batch_loss: BatchLoss = clean_batch_loss, track_steps: bool = False,
        on_epoch: Callable[[int, Model, TrainHistory], None] | None = None):
    """Minibatch SGD with momentum; ``batch_loss`` supplies the objective.

    Batches are drawn from a permutation fixed by ``cfg.seed`` so a run is
    reproducible bit for bit.  Returns ``(model, history)``; the input model
    is not modified.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    names = model.trainable()
    velocity = {k: np.zeros_like(model.params[k]) for k in names}
    hist = TrainHistory()
    n = len(images)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None, None], xb[:, :, ::-1, :], xb)
            params = {k: Tensor(model.params[k], requires_grad=True) for k in names}
            loss = batch_loss(model, params, xb, yb, epoch, rng)
            backward(loss)
            for k in names:
                g = params[k].grad
                if g is None:
                    g = np.zeros_like(model.params[k])
                g = g + cfg.weight_decay * model.params[k]
                velocity[k] = cfg.momentum * velocity[k] + g
                model.params[k] = model.params[k] - lr * velocity[k]
            losses.append(float(loss.data))
            if track_steps:
                after = float(batch_loss(model, None, xb, yb, epoch, rng).data)
                hist.step_losses.append((float(loss.data), after))
        hist.train_loss.append(float(np.mean(losses)))
        hist.clean_acc.append(accuracy(model, images, labels))
        log.info("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, hist.train_loss[-1], hist.clean_acc[-1])
        if on_epoch is not None:
            on_epoch(epoch, model, hist)
    return model, hist


def sgd_train(model: Model, dataset, cfg: TrainConfig, **kw):
    """Clean training on a :class:`~spalab.data.Dataset`."""
    return fit(model, dataset.images, dataset.labels, cfg, **kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Write ``model`` in the SPALM1 container (little-endian throughout)."""
    chunks = [MAGIC, struct.pack("<II", ARCH_IDS[model.arch], len(model.params))]
    act = model.activation.encode()
    for name, arr in model.params.items():
        bname = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(bname)) + bname)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    # trailing activation tag after the parameter blocks
    chunks.append(struct.pack("<I", len(act)) + act)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:6] != MAGIC:
        raise ValueError(f"{path}: not a SPALM1 checkpoint")
    arch_id, count = struct.unpack_from("<II", buf, 6)
    arch = {v: k for k, v in ARCH_IDS.items()}.get(arch_id)
    if arch is None:
        raise ValueError(f"{path}: unknown architecture id {arch_id}")
    off = 14
    params = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
        activation = "softplus"
        if off < len(buf):
            (ln,) = struct.unpack_from("<I", buf, off)
            activation = buf[off + 4 : off + 4 + ln].decode()
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return Model(arch, params, activation)
