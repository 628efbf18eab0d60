"""Quantization-aware training of the 784-128-64-10 binary MLP.

Real-valued latent weights are binarized with the sign function in the
forward pass; gradients flow through a straight-through estimator whose
gate passes upstream gradient wherever the pre-binarization value lies in
[-1, 1] and zeroes it outside. Batch normalization (gamma fixed at 1, beta
learnable) runs after every layer; hidden layers then binarize again, the
output layer keeps its real-valued normalized activations for the softmax
cross-entropy loss.

Everything is plain numpy in float64 and fully deterministic given the
seed. The backward pass is hand-written; its correctness is checked against
central finite differences of the surrogate network in which every sign is
replaced by its straight-through surrogate clip(x, -1, 1) (the two modes
share the backward code path).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mnist_data import BatchPlan, Dataset, binarize_images_pm1

DIMS = (784, 128, 64, 10)

MANIFEST_NAME = "manifest.txt"
CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 15
    lr0: float = 0.001
    decay: float = 0.96
    decay_steps: int = 1000
    staircase: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_eps: float = 1e-3
    bn_momentum: float = 0.99
    dims: tuple = DIMS

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr0", "decay", "adam_eps", "bn_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.decay_steps < 1:
            raise ValueError("batch_size and decay_steps must be positive")


class BNStats:
    """Per-neuron batch-norm state: running moments plus the learnable offset.

    The scale is fixed at 1 for every neuron, so only mu, sigma2, beta and
    eps matter. Running moments start at (0, 1) and follow an exponential
    moving average of the batch moments.
    """

    def __init__(self, n: int, eps: float):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.mu = np.zeros(n, dtype=np.float64)
        self.sigma2 = np.ones(n, dtype=np.float64)
        self.beta = np.zeros(n, dtype=np.float64)
        self.eps = float(eps)

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def update_running(self, batch_mu: np.ndarray, batch_var: np.ndarray, momentum: float):
        self.mu = momentum * self.mu + (1.0 - momentum) * batch_mu
        self.sigma2 = momentum * self.sigma2 + (1.0 - momentum) * batch_var

    def copy(self) -> "BNStats":
        out = BNStats(self.n, self.eps)
        out.mu = self.mu.copy()
        out.sigma2 = self.sigma2.copy()
        out.beta = self.beta.copy()
        return out


class DenseBinaryLayer:
    """Latent real weights (outputs x inputs) plus batch-norm state.

    No bias term exists; the batch-norm offset plays that role. `kind` is
    "hidden" (sign activation follows) or "output" (real activations kept).
    """

    def __init__(self, latent: np.ndarray, bn: BNStats, kind: str):
        if kind not in ("hidden", "output"):
            raise ValueError(f"kind must be 'hidden' or 'output', got {kind!r}")
        if latent.ndim != 2:
            raise ValueError("latent weights must be a 2-D (outputs x inputs) matrix")
        if latent.shape[0] != bn.n:
            raise ValueError(
                f"bn size {bn.n} does not match output count {latent.shape[0]}"
            )
        if not np.isfinite(latent).all():
            raise ValueError("latent weights must be finite")
        self.latent = latent.astype(np.float64)
        self.bn = bn
        self.kind = kind

    @property
    def out_features(self) -> int:
        return self.latent.shape[0]

    @property
    def in_features(self) -> int:
        return self.latent.shape[1]


class TrainableNetwork:
    """Stack of DenseBinaryLayer plus Adam state and a step counter."""

    def __init__(self, layers: list[DenseBinaryLayer]):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.out_features} -> {nxt.in_features}"
                )
        self.layers = layers
        self.adam_m = [
            {"w": np.zeros_like(l.latent), "beta": np.zeros_like(l.bn.beta)} for l in layers
        ]
        self.adam_v = [
            {"w": np.zeros_like(l.latent), "beta": np.zeros_like(l.bn.beta)} for l in layers
        ]
        self.t = 0

    @property
    def dims(self) -> tuple:
        return (self.layers[0].in_features,) + tuple(l.out_features for l in self.layers)

    @classmethod
    def initialize(cls, cfg: TrainConfig) -> "TrainableNetwork":
        """Glorot-uniform latent weights from a PCG64 stream seeded by cfg.seed."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xB17])))
        layers = []
        dims = cfg.dims
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            latent = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            kind = "output" if i == len(dims) - 2 else "hidden"
            layers.append(DenseBinaryLayer(latent, BNStats(fan_out, cfg.bn_eps), kind))
        return cls(layers)


def ste_sign(x: np.ndarray):
    """Binarize with sign (0 maps to +1); returns (values, backward rule).

    The backward rule multiplies the upstream gradient by the indicator of
    |x| <= 1, the straight-through estimate of the sign derivative.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.where(x >= 0.0, 1.0, -1.0)
    gate = (np.abs(x) <= 1.0).astype(np.float64)

    def backward(grad):
        return grad * gate

    return y, backward


def ste_surrogate(x: np.ndarray):
    """clip(x, -1, 1): the differentiable stand-in ste_sign's gradient assumes."""
    x = np.asarray(x, dtype=np.float64)
    y = np.clip(x, -1.0, 1.0)
    gate = (np.abs(x) <= 1.0).astype(np.float64)

    def backward(grad):
        return grad * gate

    return y, backward


_QUANTIZERS = {"sign": ste_sign, "surrogate": ste_surrogate}


def batchnorm_forward(x: np.ndarray, bn: BNStats, mode: str, momentum: float = 0.99):
    """Normalize per neuron; gamma is fixed at 1 so output = xhat + beta.

    Train mode uses the batch moments and folds them into the running
    moments with momentum; infer mode uses the stored running moments.
    Returns (output, cache) where cache feeds batchnorm_backward.
    """
    if mode == "train":
        if x.shape[0] < 1:
            raise ValueError("train-mode batch must be non-empty")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        bn.update_running(mu, var, momentum)
    elif mode == "infer":
        mu = bn.mu
        var = bn.sigma2
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    std = np.sqrt(var + bn.eps)
    xhat = (x - mu) / std
    out = xhat + bn.beta
    cache = {"xhat": xhat, "std": std, "mode": mode, "batch": x.shape[0]}
    return out, cache


def batchnorm_backward(dout: np.ndarray, cache: dict):
    """Gradient through batch normalization; returns (dx, dbeta).

    In train mode the batch moments depend on x, so the Jacobian couples
    the whole batch; in infer mode the moments are constants.
    """
    xhat, std = cache["xhat"], cache["std"]
    dbeta = dout.sum(axis=0)
    if cache["mode"] == "infer":
        return dout / std, dbeta
    dxhat = dout
    dx = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) / std
    return dx, dbeta


def forward_train(net: TrainableNetwork, x_pm1: np.ndarray, cfg: TrainConfig,
                  quantize: str = "sign", mode: str = "train"):
    """Run the quantized forward pass over a batch of +/-1 inputs.

    Returns (logits, caches). quantize="surrogate" replaces every sign with
    clip(x, -1, 1); the gradient path is identical, which is what lets the
    finite-difference oracle validate the backward code.
    """
    quant = _QUANTIZERS[quantize]
    a = np.asarray(x_pm1, dtype=np.float64)
    caches = []
    for layer in net.layers:
        if a.shape[1] != layer.in_features:
            raise ValueError(
                f"input width {a.shape[1]} does not match layer fan-in {layer.in_features}"
            )
        wq, w_back = quant(layer.latent)
        z = a @ wq.T
        y, bn_cache = batchnorm_forward(z, layer.bn, mode, cfg.bn_momentum)
        cache = {"a": a, "wq": wq, "w_back": w_back, "bn": bn_cache}
        if layer.kind == "hidden":
            a, a_back = quant(y)
            cache["a_back"] = a_back
        else:
            a = y
        caches.append(cache)
    return a, caches


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over the batch; returns (loss, dlogits)."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("labels out of range for logit width")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    b = logits.shape[0]
    loss = float(-np.log(probs[np.arange(b), labels] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def loss_and_grad(net: TrainableNetwork, x_pm1: np.ndarray, labels: np.ndarray,
                  cfg: TrainConfig, quantize: str = "sign"):
    """Forward + backward over one batch; returns (loss, grads).

    grads is a list of {"w": dLatent, "beta": dBeta} per layer, with the
    straight-through gates applied at every binarization site.
    """
    logits, caches = forward_train(net, x_pm1, cfg, quantize=quantize)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = [None] * len(net.layers)
    da = dlogits
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cache = caches[i]
        dy = cache["a_back"](da) if layer.kind == "hidden" else da
        dz, dbeta = batchnorm_backward(dy, cache["bn"])
        dwq = dz.T @ cache["a"]
        dlatent = cache["w_back"](dwq)
        da = dz @ cache["wq"]
        grads[i] = {"w": dlatent, "beta": dbeta}
    return loss, grads


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Staircase schedule: lr0 * decay^floor(step / decay_steps)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.staircase:
        exponent = step // cfg.decay_steps
    else:
        exponent = step / cfg.decay_steps
    return cfg.lr0 * cfg.decay**exponent


def adam_step(net: TrainableNetwork, grads, cfg: TrainConfig):
    """Bias-corrected Adam update, then clip latent weights to [-1, 1].

    The clip keeps every latent weight inside the straight-through window
    so its gradient gate never shuts permanently.
    """
    lr = lr_at(cfg, net.t)
    net.t += 1
    t = net.t
    for layer, g, m, v in zip(net.layers, grads, net.adam_m, net.adam_v):
        for key, param in (("w", layer.latent), ("beta", layer.bn.beta)):
            m[key] = cfg.beta1 * m[key] + (1 - cfg.beta1) * g[key]
            v[key] = cfg.beta2 * v[key] + (1 - cfg.beta2) * g[key] ** 2
            m_hat = m[key] / (1 - cfg.beta1**t)
            v_hat = v[key] / (1 - cfg.beta2**t)
            param -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        np.clip(layer.latent, -1.0, 1.0, out=layer.latent)


def evaluate_float(net: TrainableNetwork, dataset: Dataset, chunk: int = 2048) -> float:
    """Accuracy of the real-valued path: inference-mode BN on every layer,
    argmax over the normalized output logits (ties go to the lowest index)."""
    x = binarize_images_pm1(dataset.images)
    correct = 0
    cfg = TrainConfig()  # momentum unused in infer mode
    for start in range(0, len(dataset), chunk):
        xb = x[start : start + chunk].astype(np.float64)
        logits, _ = forward_train(net, xb, cfg, quantize="sign", mode="infer")
        pred = np.argmax(logits, axis=1)
        correct += int((pred == dataset.labels[start : start + chunk]).sum())
    return correct / len(dataset)


def predict_float(net: TrainableNetwork, x_pm1: np.ndarray) -> np.ndarray:
    """Predicted classes for a +/-1 input batch via the real-valued path."""
    logits, _ = forward_train(net, np.atleast_2d(x_pm1), TrainConfig(), mode="infer")
    return np.argmax(logits, axis=1)


def train(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset | None = None,
          log=None):
    """Full quantization-aware training loop.

    Returns (net, history); history holds one record per epoch with the
    mean train loss and, when a test set is given, the float-path accuracy.
    Deterministic: (seed, config, data) fixes the entire trajectory.
    """
    net = TrainableNetwork.initialize(cfg)
    history = []
    if cfg.epochs == 0:
        return net, history
    x_all = binarize_images_pm1(train_ds.images)
    y_all = train_ds.labels.astype(np.int64)
    plan = BatchPlan(len(train_ds), cfg.batch_size, cfg.seed)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in plan.batches(epoch):
            xb = x_all[idx].astype(np.float64)
            loss, grads = loss_and_grad(net, xb, y_all[idx], cfg)
            adam_step(net, grads, cfg)
            losses.append(loss)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if test_ds is not None:
            record["test_accuracy"] = evaluate_float(net, test_ds)
        record["seconds"] = time.perf_counter() - t0
        history.append(record)
        if log is not None:
            acc = record.get("test_accuracy")
            log(
                f"epoch {epoch:2d}  loss {record['train_loss']:.4f}"
                + (f"  test_acc {acc:.4f}" if acc is not None else "")
                + f"  ({record['seconds']:.1f}s, lr {lr_at(cfg, net.t - 1):.2e})"
            )
    return net, history


# ---------------------------------------------------------------------------
# checkpoint format: a directory holding manifest.txt (key = value lines)
# plus one raw little-endian float64 array file per tensor, C-order:
#   layer<i>.latent.bin   (outputs x inputs)
#   layer<i>.bn_mu.bin    (outputs,)
#   layer<i>.bn_var.bin   (outputs,)
#   layer<i>.bn_beta.bin  (outputs,)
# ---------------------------------------------------------------------------

def _write_array(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(path: Path, shape) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ValueError(f"{path}: expected {expected} float64 values, found {arr.size}")
    return arr.reshape(shape)


def save_checkpoint(net: TrainableNetwork, cfg: TrainConfig, path,
                    epochs_trained: int | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dims = ",".join(str(d) for d in net.dims)
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"dims = {dims}",
        f"bn_eps = {cfg.bn_eps!r}",
        f"bn_momentum = {cfg.bn_momentum!r}",
        f"seed = {cfg.seed}",
        f"epochs_trained = {cfg.epochs if epochs_trained is None else epochs_trained}",
        f"step = {net.t}",
        "dtype = float64-little-endian",
    ]
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    for i, layer in enumerate(net.layers):
        _write_array(path / f"layer{i}.latent.bin", layer.latent)
        _write_array(path / f"layer{i}.bn_mu.bin", layer.bn.mu)
        _write_array(path / f"layer{i}.bn_var.bin", layer.bn.sigma2)
        _write_array(path / f"layer{i}.bn_beta.bin", layer.bn.beta)


def read_manifest(path) -> dict:
    manifest = {}
    text = (Path(path) / MANIFEST_NAME).read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    return manifest


def load_checkpoint(path) -> tuple[TrainableNetwork, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    dims = tuple(int(d) for d in manifest["dims"].split(","))
    eps = float(manifest["bn_eps"])
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        latent = _read_array(path / f"layer{i}.latent.bin", (fan_out, fan_in))
        bn = BNStats(fan_out, eps)
        bn.mu = _read_array(path / f"layer{i}.bn_mu.bin", (fan_out,))
        bn.sigma2 = _read_array(path / f"layer{i}.bn_var.bin", (fan_out,))
        bn.beta = _read_array(path / f"layer{i}.bn_beta.bin", (fan_out,))
        kind = "output" if i == len(dims) - 2 else "hidden"
        layers.append(DenseBinaryLayer(latent, bn, kind))
    net = TrainableNetwork(layers)
    net.t = int(manifest.get("step", 0))
    return net, manifest
