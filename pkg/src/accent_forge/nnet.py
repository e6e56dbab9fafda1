"""Small feed-forward networks in numpy: dense layers, dropout, losses, optimizers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dataio import ModelFile

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "linear", "softmax")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class NetworkSpec:
    sizes: tuple
    activations: tuple
    dropout: tuple
    seed: int = 0

    def __post_init__(self):
        n_layers = len(self.sizes) - 1
        if n_layers < 1 or min(self.sizes) < 1:
            raise ValueError(f"bad layer sizes {self.sizes}")
        if len(self.activations) != n_layers or len(self.dropout) != n_layers:
            raise ValueError("need one activation and one dropout rate per layer")
        for i, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if act == "softmax" and i != n_layers - 1:
                raise ValueError("softmax is only allowed on the output layer")
        if any(not 0.0 <= p < 1.0 for p in self.dropout) or self.dropout[-1] != 0.0:
            raise ValueError("dropout rates must lie in [0, 1) and be 0 on the output layer")

    @classmethod
    def mlp(cls, n_in: int, hidden: Sequence[int], n_out: int, output: str = "linear",
            hidden_activation: str = "relu", dropout: Sequence[float] = (), seed: int = 0):
        hidden = tuple(hidden)
        drops = tuple(dropout) + (0.0,) * (len(hidden) - len(dropout))
        return cls((n_in,) + hidden + (n_out,), (hidden_activation,) * len(hidden) + (output,),
                   drops + (0.0,), seed)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def to_meta(self, prefix: str) -> dict:
        return {f"{prefix}.sizes": ",".join(map(str, self.sizes)),
                f"{prefix}.activations": ",".join(self.activations),
                f"{prefix}.dropout": ",".join(repr(p) for p in self.dropout),
                f"{prefix}.seed": str(self.seed)}

    @classmethod
    def from_meta(cls, meta: dict, prefix: str) -> "NetworkSpec":
        return cls(tuple(int(s) for s in meta[f"{prefix}.sizes"].split(",")),
                   tuple(meta[f"{prefix}.activations"].split(",")),
                   tuple(float(p) for p in meta[f"{prefix}.dropout"].split(",")),
                   int(meta[f"{prefix}.seed"]))


@dataclass
class NetworkParams:
    weights: list  # (fan_in, fan_out) per layer
    biases: list

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_model_file(self, mf: ModelFile, tag_prefix: str = "NET") -> ModelFile:
        # one chunk per layer: weight rows followed by the bias as a final row
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            mf[f"{tag_prefix}{i}"] = np.vstack([w, b[None, :]])
        return mf

    @classmethod
    def from_model_file(cls, mf: ModelFile, n_layers: int, tag_prefix: str = "NET") -> "NetworkParams":
        ws, bs = [], []
        for i in range(n_layers):
            chunk = mf[f"{tag_prefix}{i}"]
            ws.append(chunk[:-1].copy())
            bs.append(chunk[-1].copy())
        return cls(ws, bs)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.optimizer not in ("adam", "rmsprop", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rate must be > 0 and batch size >= 1")


def _lse(z, axis):
    # scipy's logsumexp carries heavy per-call overhead on small minibatches
    m = z.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def init_params(spec: NetworkSpec) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(spec.seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return NetworkParams(ws, bs)


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    if act == "softmax":
        return np.exp(z - _lse(z, -1))
    return z


@dataclass
class Forward:
    """Everything backprop needs from a forward pass."""

    inputs: list  # input to each layer
    pre: list  # pre-activations
    post: list  # activations before dropout
    masks: list  # scaled dropout masks (None where inactive)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


def dropout_masks(spec: NetworkSpec, batch: int, rng: np.random.Generator) -> list:
    """Inverted-dropout masks: 0 for dropped units, ``1/(1-p)`` for kept ones."""
    masks = []
    for size, p in zip(spec.sizes[1:], spec.dropout):
        if p > 0:
            keep = rng.random((batch, size)) >= p
            masks.append(keep / (1.0 - p))
        else:
            masks.append(None)
    return masks


def forward(params: NetworkParams, spec: NetworkSpec, x, mode: str = "infer",
            rng: Optional[np.random.Generator] = None, masks: Optional[list] = None) -> Forward:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.sizes[0]:
        raise ValueError(f"input width {x.shape[1]} does not match network input {spec.sizes[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    if mode == "train" and masks is None:
        masks = dropout_masks(spec, x.shape[0], rng if rng is not None else np.random.default_rng())
    elif mode != "train":
        masks = [None] * spec.n_layers
    fwd = Forward([], [], [], masks)
    h = x
    for w, b, act, mask in zip(params.weights, params.biases, spec.activations, masks):
        fwd.inputs.append(h)
        z = h @ w + b
        a = _activate(z, act)
        fwd.pre.append(z)
        fwd.post.append(a)
        h = a if mask is None else a * mask
    return fwd


def predict(params: NetworkParams, spec: NetworkSpec, x) -> np.ndarray:
    return forward(params, spec, x).output


def backward(params: NetworkParams, spec: NetworkSpec, fwd: Forward, grad_out,
             grad_wrt: str = "output"):
    """Backpropagate ``grad_out``.

    ``grad_wrt="logits"`` treats ``grad_out`` as the gradient with respect to
    the last pre-activation (used with softmax cross-entropy).
    Returns ``(grads, grad_input)`` where ``grads`` mirrors ``NetworkParams``.
    """
    gw = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    g = np.asarray(grad_out, dtype=np.float64)
    for i in reversed(range(spec.n_layers)):
        act = spec.activations[i]
        if i == spec.n_layers - 1 and grad_wrt == "logits":
            dz = g
        else:
            if fwd.masks[i] is not None:
                g = g * fwd.masks[i]
            if act == "relu":
                dz = g * (fwd.pre[i] > 0)
            elif act == "tanh":
                dz = g * (1.0 - fwd.post[i] ** 2)
            elif act == "softmax":
                p = fwd.post[i]
                dz = p * (g - (g * p).sum(-1, keepdims=True))
            else:
                dz = g
        gw[i] = fwd.inputs[i].T @ dz
        gb[i] = dz.sum(0)
        g = dz @ params.weights[i].T
    return NetworkParams(gw, gb), g


# ---------------------------------------------------------------------------
# losses (batch means)

def softmax_xent_loss(logits, labels):
    """Mean cross-entropy of integer labels; gradient is with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ValueError("label out of range")
    logp = z - _lse(z, 1)
    n = z.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


def contrastive_loss(out1, out2, y, margin: float = 1.0):
    """``(1-y) d^2 + y max(0, margin-d)^2`` averaged over pairs; y=0 marks a matched pair.

    Returns ``(loss, grad_out1, grad_out2)``.  At ``d = 0`` the hinge term
    contributes zero gradient.
    """
    o1 = np.asarray(out1, dtype=np.float64)
    o2 = np.asarray(out2, dtype=np.float64)
    single = o1.ndim == 1
    o1, o2 = np.atleast_2d(o1), np.atleast_2d(o2)
    if o1.shape != o2.shape:
        raise ValueError("contrastive loss needs equally shaped outputs")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    diff = o1 - o2
    d = np.sqrt((diff * diff).sum(1))
    hinge = np.maximum(0.0, margin - d)
    n = o1.shape[0]
    loss = float(((1.0 - y) * d * d + y * hinge * hinge).mean())
    safe_d = np.where(d > 0, d, 1.0)
    coef = 2.0 * (1.0 - y) - np.where(d > 0, 2.0 * y * hinge / safe_d, 0.0)
    g1 = coef[:, None] * diff / n
    if single:
        return loss, g1[0], -g1[0]
    return loss, g1, -g1


def squared_loss(out, target):
    out = np.atleast_2d(np.asarray(out, dtype=np.float64))
    target = np.asarray(target, dtype=np.float64).reshape(out.shape)
    diff = out - target
    n = out.shape[0]
    return float(0.5 * (diff * diff).sum() / n), diff / n


def pair_distances(e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    return np.sqrt(((e1 - e2) ** 2).sum(-1))


# ---------------------------------------------------------------------------
# optimizers

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, arrays, grads):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RMSprop:
    def __init__(self, lr, decay=0.9, eps=1e-8):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.v = None

    def step(self, arrays, grads):
        if self.v is None:
            self.v = [np.zeros_like(a) for a in arrays]
        for a, g, v in zip(arrays, grads, self.v):
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            a -= self.lr * g / (np.sqrt(v) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, arrays, grads):
        for a, g in zip(arrays, grads):
            a -= self.lr * g


def make_optimizer(config: TrainConfig):
    return {"adam": Adam, "rmsprop": RMSprop, "sgd": SGD}[config.optimizer](config.learning_rate)


# ---------------------------------------------------------------------------
# objectives: loss + gradient over a batch of row indices

class _Classifier:
    def __init__(self, params, spec, x, y):
        self.nets = [params]
        self.spec = spec
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)

    def __len__(self):
        return self.x.shape[0]

    def loss_grad(self, idx, rng):
        fwd = forward(self.nets[0], self.spec, self.x[idx], "train", rng)
        loss, g = softmax_xent_loss(fwd.logits, self.y[idx])
        grads, _ = backward(self.nets[0], self.spec, fwd, g, grad_wrt="logits")
        return loss, [grads]

    def dev_metric(self, dev):
        x, y = dev
        pred = np.argmax(forward(self.nets[0], self.spec, x).logits, axis=1)
        return float(np.mean(pred == np.asarray(y)))


class _Regressor(_Classifier):
    def __init__(self, params, spec, x, y):
        super().__init__(params, spec, x, y)
        self.y = np.asarray(y, dtype=np.float64)

    def loss_grad(self, idx, rng):
        fwd = forward(self.nets[0], self.spec, self.x[idx], "train", rng)
        loss, g = squared_loss(fwd.output, self.y[idx])
        grads, _ = backward(self.nets[0], self.spec, fwd, g)
        return loss, [grads]

    def dev_metric(self, dev):
        x, y = dev
        return -squared_loss(forward(self.nets[0], self.spec, x).output, y)[0]


class _Twin:
    """Contrastive objective over two branches; a shared twin uses one parameter set."""

    def __init__(self, params, spec, x1, x2, y):
        self.shared = isinstance(params, NetworkParams)
        self.nets = [params] if self.shared else list(params)
        self.spec = spec
        self.x1 = np.asarray(x1, dtype=np.float64)
        self.x2 = np.asarray(x2, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)

    def __len__(self):
        return self.x1.shape[0]

    @property
    def branches(self):
        return (self.nets[0], self.nets[0]) if self.shared else tuple(self.nets)

    def loss_grad(self, idx, rng):
        p1, p2 = self.branches
        f1 = forward(p1, self.spec, self.x1[idx], "train", rng)
        f2 = forward(p2, self.spec, self.x2[idx], "train", rng)
        loss, g1, g2 = contrastive_loss(f1.output, f2.output, self.y[idx])
        grads1, _ = backward(p1, self.spec, f1, g1)
        grads2, _ = backward(p2, self.spec, f2, g2)
        if self.shared:
            return loss, [NetworkParams([a + b for a, b in zip(grads1.weights, grads2.weights)],
                                        [a + b for a, b in zip(grads1.biases, grads2.biases)])]
        return loss, [grads1, grads2]

    def dev_metric(self, dev):
        x1, x2, y = dev
        p1, p2 = self.branches
        loss, _, _ = contrastive_loss(predict(p1, self.spec, x1), predict(p2, self.spec, x2), y)
        return -loss


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    dev_metric: list = field(default_factory=list)
    best_epoch: int = -1


def train(params, spec: NetworkSpec, config: TrainConfig, dataset, loss_kind: str = "xent",
          dev=None):
    """Mini-batch training with optional early stopping on a dev metric.

    Parameters
    ----------
    params : NetworkParams, or a pair of them for an unshared twin
        Starting point; never modified.
    dataset : tuple
        ``(x, labels)`` for ``"xent"``, ``(x, targets)`` for ``"mse"``,
        ``(x1, x2, y)`` for ``"contrastive"``.
    dev : tuple, optional
        Same layout as ``dataset``.  Without it the dev metric is computed on
        the training data and the final epoch's parameters are kept.

    Returns
    -------
    params, TrainHistory
        The best-dev parameters (same structure as the input) and per-epoch
        metrics.
    """
    start = params.copy() if isinstance(params, NetworkParams) else tuple(p.copy() for p in params)
    if loss_kind == "xent":
        obj = _Classifier(start, spec, *dataset)
    elif loss_kind == "mse":
        obj = _Regressor(start, spec, *dataset)
    elif loss_kind == "contrastive":
        obj = _Twin(start, spec, *dataset)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    n = len(obj)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config)
    arrays = [a for net in obj.nets for a in net.arrays()]
    history = TrainHistory()
    best = [net.copy() for net in obj.nets]
    best_metric = -np.inf
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start_idx in range(0, n, config.batch_size):
            idx = order[start_idx:start_idx + config.batch_size]
            loss, grads = obj.loss_grad(idx, rng)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            opt.step(arrays, [g for net in grads for g in net.arrays()])
            total += loss * len(idx)
        history.train_loss.append(total / n)
        metric = obj.dev_metric(dev) if dev is not None else -history.train_loss[-1]
        history.dev_metric.append(metric)
        if dev is None or metric > best_metric:
            best_metric = metric
            best = [net.copy() for net in obj.nets]
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break
    single = not isinstance(obj, _Twin) or obj.shared
    return (best[0] if single else tuple(best)), history


# ---------------------------------------------------------------------------
# finite-difference verification

def _rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(spec: NetworkSpec, loss_kind: str = "xent", seed: int = 0, batch: int = 4,
               pair_label: int = 0, step: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences over all parameters.

    Parameters and biases are randomized (biases included, so they are
    exercised); dropout masks are drawn once and replayed for every
    evaluation.  ``"contrastive"`` checks a shared twin with all pairs
    labelled ``pair_label``.
    """
    rng = np.random.default_rng(seed)
    params = init_params(replace(spec, seed=seed))
    params.biases = [rng.normal(0, 0.1, b.shape) for b in params.biases]
    n_in, n_out = spec.sizes[0], spec.sizes[-1]
    x = rng.standard_normal((batch, n_in))
    m1 = dropout_masks(spec, batch, rng)
    if loss_kind == "xent":
        labels = rng.integers(0, n_out, batch)

        def loss_fn(p, want_grad=False):
            f = forward(p, spec, x, "train", masks=m1)
            loss, g = softmax_xent_loss(f.logits, labels)
            return (loss, backward(p, spec, f, g, grad_wrt="logits")[0]) if want_grad else loss
    elif loss_kind == "mse":
        target = rng.standard_normal((batch, n_out))

        def loss_fn(p, want_grad=False):
            f = forward(p, spec, x, "train", masks=m1)
            loss, g = squared_loss(f.output, target)
            return (loss, backward(p, spec, f, g)[0]) if want_grad else loss
    elif loss_kind == "contrastive":
        x2 = rng.standard_normal((batch, n_in))
        m2 = dropout_masks(spec, batch, rng)
        y = np.full(batch, pair_label)

        def loss_fn(p, want_grad=False):
            f1 = forward(p, spec, x, "train", masks=m1)
            f2 = forward(p, spec, x2, "train", masks=m2)
            loss, g1, g2 = contrastive_loss(f1.output, f2.output, y)
            if not want_grad:
                return loss
            a, _ = backward(p, spec, f1, g1)
            b, _ = backward(p, spec, f2, g2)
            return loss, NetworkParams([u + v for u, v in zip(a.weights, b.weights)],
                                       [u + v for u, v in zip(a.biases, b.biases)])
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    _, analytic = loss_fn(params, want_grad=True)
    worst = 0.0
    for arr, g in zip(params.arrays(), analytic.arrays()):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_fn(params)
            flat[k] = orig - step
            down = loss_fn(params)
            flat[k] = orig
            worst = max(worst, float(_rel_err(gflat[k], (up - down) / (2 * step))))
    return worst
