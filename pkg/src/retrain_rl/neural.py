"""Small dense networks in numpy: tanh MLPs, exact backprop and Adam.

Checkpoint format (little-endian throughout)::

    magic   8 bytes   b"MLPCKPT\\0"
    version uint32    currently 1
    n_dims  uint32    number of entries in layer_dims
    dims    uint32[n_dims]
    params  float64[] for each layer: W (in x out, row-major) then b (out)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MLPCKPT\0"
VERSION = 1


@dataclass
class Mlp:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = 0

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator, hidden_gain: float = np.sqrt(2),
             output_gain: float = 1.0) -> Mlp:
        """Orthogonal init with zero biases; ``output_gain`` scales the last layer."""
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dimensions")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            gain = output_gain if i == len(dims) - 2 else hidden_gain
            weights.append(gain * orthogonal(fan_in, fan_out, rng))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases)

    @classmethod
    def zeros(cls, layer_dims) -> Mlp:
        dims = tuple(int(d) for d in layer_dims)
        return cls(dims, [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                   [np.zeros(b) for b in dims[1:]])

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> Mlp:
        return Mlp(self.layer_dims, [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[0]


def orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q if rows >= cols else q.T)


@dataclass
class ForwardCache:
    net_id: int
    net_version: int
    activations: list[np.ndarray]
    squeeze: bool


def forward(net: Mlp, x) -> tuple[np.ndarray, ForwardCache]:
    """Affine + tanh on hidden layers, identity output. Accepts a vector or a row batch."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.layer_dims[0]:
        raise ValueError(f"input has {h.shape[1]} features, network expects {net.layer_dims[0]}")
    acts = [h]
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    out = h[0] if squeeze else h
    return out, ForwardCache(id(net), net.version, acts, squeeze)


def backward(net: Mlp, cache: ForwardCache, grad_out) -> list[np.ndarray]:
    """Parameter gradients given dLoss/dOutput; same ordering as ``net.params``."""
    if (cache.net_id, cache.net_version) != (id(net), net.version) \
            or len(cache.activations) != len(net.weights) + 1:
        raise ValueError("stale forward cache")
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    if g.shape != cache.activations[-1].shape:
        raise ValueError("output gradient shape does not match the cached forward pass")
    grads: list[np.ndarray] = []
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * (1.0 - cache.activations[i + 1] ** 2)
        grads = [cache.activations[i].T @ g, g.sum(axis=0)] + grads
        if i > 0:
            g = g @ net.weights[i].T
    return grads


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = 0.5
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, **kwargs) -> AdamState:
        return cls(m=[np.zeros_like(p) for p in net.params],
                   v=[np.zeros_like(p) for p in net.params], **kwargs)

    def copy(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.max_grad_norm,
                         self.step, [a.copy() for a in self.m], [a.copy() for a in self.v])


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def adam_step(net: Mlp, grads, opt: AdamState) -> tuple[Mlp, AdamState]:
    """In-place bias-corrected Adam update; returns ``(net, opt)`` for chaining."""
    params = net.params
    if len(grads) != len(params) or len(opt.m) != len(params):
        raise ValueError("gradient / optimizer layout does not match the network")
    if opt.max_grad_norm is not None:
        norm = global_norm(grads)
        if norm > opt.max_grad_norm:
            scale = opt.max_grad_norm / (norm + 1e-6)
            grads = [g * scale for g in grads]
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    net.version += 1
    return net, opt


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax_logprob_entropy(logits, action):
    """Action probabilities, log-probability of ``action`` and entropy.

    Works on a single logit vector or a row batch (with an action array).
    """
    logp = log_softmax(logits)
    probs = np.exp(logp)
    entropy = -np.sum(probs * logp, axis=-1)
    action = np.asarray(action)
    if logp.ndim == 1:
        return probs, float(logp[int(action)]), float(entropy)
    chosen = logp[np.arange(logp.shape[0]), action.astype(int)]
    return probs, chosen, entropy


def save(net: Mlp, path) -> None:
    dims = net.layer_dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        for p in net.params:
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load(path) -> Mlp:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an MLP checkpoint")
    version, n = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = struct.unpack_from(f"<{n}I", data, 16)
    flat = np.frombuffer(data, dtype="<f8", offset=16 + 4 * n).astype(float)
    net = Mlp.zeros(dims)
    pos = 0
    for p in net.params:
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    if pos != flat.size:
        raise ValueError(f"{path}: parameter count mismatch")
    return net


def gradient_check(net: Mlp, loss_and_grad, h: float = 1e-5, floor: float = 1e-6,
                   loss_fn=None) -> float:
    """Largest element-wise relative error between analytic and central-difference gradients.

    ``loss_and_grad(net)`` returns ``(loss, grads)`` with grads in ``net.params``
    order; ``loss_fn(net)``, if given, returns the loss alone and speeds up the
    finite differences. Relative errors use ``max(|a|, |b|, floor)`` as
    denominator so that entries that are zero up to rounding do not dominate.
    """
    _, grads = loss_and_grad(net)
    loss_fn = loss_fn or (lambda n: loss_and_grad(n)[0])
    worst = 0.0
    for p, g in zip(net.params, grads):
        num = np.empty(p.shape)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss_fn(net)
            p[idx] = orig - h
            down = loss_fn(net)
            p[idx] = orig
            num[idx] = (up - down) / (2 * h)
        a = np.asarray(g, dtype=float)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst


def linear_probe_loss(x, weights_out):
    """Loss ``sum(net(x) * weights_out)`` with its gradients, for self-tests."""
    def loss_and_grad(net: Mlp):
        out, cache = forward(net, x)
        return float(np.sum(out * weights_out)), backward(net, cache, np.atleast_2d(weights_out))
    return loss_and_grad
