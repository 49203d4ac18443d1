"""Fixed-architecture MLPs with hand-written reverse-mode gradients.

All parameters of a network live in one flat float64 vector; the per-layer
weight and bias arrays are views into it.  That keeps the optimizer and the
target-network mixing down to a couple of vectorised operations.

Weight convention: ``W`` has shape ``(out, in)`` and a layer computes
``z = x @ W.T + b``.  Jacobians follow ``J[i, j] = d out_i / d in_j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = "dvpg-mlp"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity", "tanh")


class NonFiniteError(ValueError):
    """Raised when a NaN/inf shows up where a finite number is required."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


class MLP:
    """Dense feed-forward network.

    ``sizes`` lists the layer widths including input and output, e.g.
    ``(3, 64, 64, 1)``.  ``activations`` holds one tag per layer.  An output
    ``"tanh"`` layer is scaled by ``out_scale`` so that a bounded actor
    emits values in ``[-out_scale, out_scale]``.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str],
                 out_scale=None, params: np.ndarray | None = None):
        sizes = tuple(int(n) for n in sizes)
        activations = tuple(activations)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self._sizes = sizes
        self._activations = activations
        if out_scale is None:
            self._out_scale = None
        else:
            scale = np.broadcast_to(np.asarray(out_scale, dtype=float), (sizes[-1],)).copy()
            scale.setflags(write=False)
            self._out_scale = scale

        shapes = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            shapes.append((n_out, n_in))
        self._n_params = sum(o * i + o for o, i in shapes)
        if params is None:
            params = np.zeros(self._n_params)
        else:
            params = np.array(params, dtype=float).reshape(-1)
            if params.size != self._n_params:
                raise ValueError(f"expected {self._n_params} parameters, got {params.size}")
        self.params = params
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        offset = 0
        for o, i in shapes:
            self.weights.append(self.params[offset:offset + o * i].reshape(o, i))
            offset += o * i
            self.biases.append(self.params[offset:offset + o])
            offset += o

    # architecture is read-only
    @property
    def sizes(self) -> tuple[int, ...]:
        return self._sizes

    @property
    def activations(self) -> tuple[str, ...]:
        return self._activations

    @property
    def out_scale(self):
        return self._out_scale

    @property
    def n_in(self) -> int:
        return self._sizes[0]

    @property
    def n_out(self) -> int:
        return self._sizes[-1]

    @property
    def n_params(self) -> int:
        return self._n_params

    def copy(self) -> "MLP":
        return MLP(self._sizes, self._activations, self._out_scale, self.params.copy())

    def __repr__(self):
        return f"MLP(sizes={self._sizes}, activations={self._activations})"

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.n_in:
            raise ValueError(f"input has shape {x.shape}, network expects (..., {self.n_in})")
        return X, single

    def _forward(self, X: np.ndarray):
        """Forward pass keeping what backprop needs: layer inputs and derivative factors."""
        inputs = []
        dacts = []
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ W.T + b
            act = self._activations[i]
            if act == "relu":
                h = np.maximum(z, 0.0)
                dacts.append(z > 0.0)
            elif act == "tanh":
                th = np.tanh(z)
                d = 1.0 - th * th
                if i == last and self._out_scale is not None:
                    h = th * self._out_scale
                    d = d * self._out_scale
                else:
                    h = th
                dacts.append(d)
            else:
                h = z
                dacts.append(None)
        return h, inputs, dacts

    def __call__(self, x) -> np.ndarray:
        X, single = self._as_batch(x)
        _check_finite(X, "network input")
        out, _, _ = self._forward(X)
        return out[0] if single else out

    forward = __call__

    def vjp(self, x, upstream, want_params: bool = True, want_input: bool = True):
        """Reverse pass for the scalar ``sum_i <upstream_i, f(x_i)>``.

        Returns ``(param_grad, input_grad)``; the parameter gradient is summed
        over the batch, the input gradient keeps the batch axis.
        """
        X, single = self._as_batch(x)
        U = np.asarray(upstream, dtype=float)
        U = U[None, :] if U.ndim == 1 else U
        if U.shape != (X.shape[0], self.n_out):
            raise ValueError(f"upstream shape {np.shape(upstream)} does not match output "
                             f"({X.shape[0]}, {self.n_out})")
        _, inputs, dacts = self._forward(X)
        grad = np.empty(self._n_params) if want_params else None
        gW = gb = None
        if want_params:
            gW, gb = self._grad_views(grad)
        delta = U
        for i in range(len(self.weights) - 1, -1, -1):
            if dacts[i] is not None:
                delta = delta * dacts[i]
            if want_params:
                np.matmul(delta.T, inputs[i], out=gW[i])
                np.sum(delta, axis=0, out=gb[i])
            if i > 0 or want_input:
                delta = delta @ self.weights[i]
        gx = None
        if want_input:
            gx = delta[0] if single else delta
        return grad, gx

    def _grad_views(self, flat: np.ndarray):
        gW, gb = [], []
        offset = 0
        for W in self.weights:
            o, i = W.shape
            gW.append(flat[offset:offset + o * i].reshape(o, i))
            offset += o * i
            gb.append(flat[offset:offset + o])
            offset += o
        return gW, gb

    def param_grad(self, x, upstream) -> np.ndarray:
        grad, _ = self.vjp(x, upstream, want_params=True, want_input=False)
        return grad

    def input_grad(self, x, upstream) -> np.ndarray:
        _, gx = self.vjp(x, upstream, want_params=False, want_input=True)
        return gx

    def input_jacobian(self, x) -> np.ndarray:
        """Full input Jacobian, ``(out, in)`` for one input or ``(B, out, in)`` for a batch."""
        X, single = self._as_batch(x)
        _, _, dacts = self._forward(X)
        B = X.shape[0]
        J = np.broadcast_to(np.eye(self.n_out), (B, self.n_out, self.n_out))
        for i in range(len(self.weights) - 1, -1, -1):
            if dacts[i] is not None:
                J = J * dacts[i][:, None, :]
            J = J @ self.weights[i]
        return J[0] if single else J


def mlp_forward(net: MLP, x) -> np.ndarray:
    return net(x)


def param_grad(net: MLP, x, upstream) -> np.ndarray:
    return net.param_grad(x, upstream)


def input_jacobian(net: MLP, x) -> np.ndarray:
    return net.input_jacobian(x)


def make_mlp(n_in: int, n_out: int, rng: np.random.Generator, hidden=(64, 64),
             hidden_activation: str = "relu", out_activation: str = "identity",
             out_scale=None, final_init: float | None = 3e-3) -> MLP:
    """Build a network with fan-in uniform initialisation.

    Hidden layers draw from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.  When
    ``final_init`` is set the output layer draws from ``U(-final_init, final_init)``
    instead, which keeps initial actor/critic outputs near zero.
    """
    sizes = (n_in, *hidden, n_out)
    acts = (hidden_activation,) * len(hidden) + (out_activation,)
    net = MLP(sizes, acts, out_scale=out_scale)
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        bound = final_init if (i == last and final_init is not None) else 1.0 / np.sqrt(W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return net


@dataclass
class TargetPair:
    online: MLP
    target: MLP
    tau: float = 0.001

    @classmethod
    def from_online(cls, online: MLP, tau: float = 0.001) -> "TargetPair":
        return cls(online, online.copy(), tau)


def soft_update(pair: TargetPair, tau: float | None = None) -> TargetPair:
    """target <- tau * online + (1 - tau) * target, in place."""
    tau = pair.tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if pair.online.sizes != pair.target.sizes:
        raise ValueError("online and target architectures differ")
    t = pair.target.params
    if tau == 1.0:
        t[...] = pair.online.params
    elif tau > 0.0:
        t *= 1.0 - tau
        t += tau * pair.online.params
    return pair


class Adam:
    """Adaptive-moment optimizer on a flat parameter vector (minimises)."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        if grad.shape != params.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient; optimizer step rejected")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        if lr == 0.0:
            return params
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        denom = np.sqrt(self.v / bc2) + self.eps
        params -= (lr / bc1) * self.m / denom
        return params


def optimizer_step(state: Adam, params: MLP | np.ndarray, grad: np.ndarray, lr: float):
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    flat = params.params if isinstance(params, MLP) else params
    state.step(flat, grad, lr)
    return params


def save_checkpoint(net: MLP, path, role: str = "net") -> None:
    lines = [
        f"# {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}",
        f"role={role}",
        "sizes=" + ",".join(str(n) for n in net.sizes),
        "activations=" + ",".join(net.activations),
        "out_scale=" + ("none" if net.out_scale is None
                        else ",".join(repr(float(v)) for v in net.out_scale)),
        f"n_params={net.n_params}",
        "---",
    ]
    for W, b in zip(net.weights, net.biases):
        for row in W:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[MLP, str]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# {CHECKPOINT_MAGIC} v"):
        raise ValueError(f"{path}: not a network checkpoint")
    version = int(text[0].rsplit("v", 1)[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = {}
    i = 1
    while text[i] != "---":
        key, _, value = text[i].partition("=")
        header[key] = value
        i += 1
    sizes = [int(v) for v in header["sizes"].split(",")]
    acts = header["activations"].split(",")
    scale = None if header["out_scale"] == "none" else [float(v) for v in header["out_scale"].split(",")]
    values = [float(v) for line in text[i + 1:] for v in line.split()]
    net = MLP(sizes, acts, out_scale=scale, params=np.array(values))
    if net.n_params != int(header["n_params"]):
        raise ValueError(f"{path}: parameter count mismatch")
    return net, header.get("role", "net")


class LinearPolicy:
    """Affine policy ``mu(s) = K s + b``; same call/gradient surface as :class:`MLP`.

    Flat parameters are ``K`` in row-major order followed by ``b``.
    """

    def __init__(self, K, b=None):
        K = np.atleast_2d(np.asarray(K, dtype=float))
        m, d = K.shape
        self.params = np.zeros(m * d + m)
        self.K = self.params[:m * d].reshape(m, d)
        self.bias = self.params[m * d:]
        self.K[...] = K
        if b is not None:
            self.bias[...] = np.asarray(b, dtype=float).reshape(m)

    @property
    def n_in(self) -> int:
        return self.K.shape[1]

    @property
    def n_out(self) -> int:
        return self.K.shape[0]

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "LinearPolicy":
        return LinearPolicy(self.K.copy(), self.bias.copy())

    def __repr__(self):
        return f"LinearPolicy(K={self.K.tolist()}, b={self.bias.tolist()})"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input has shape {x.shape}, policy expects (..., {self.n_in})")
        return x @ self.K.T + self.bias

    def input_jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.K, x.shape[:-1] + self.K.shape).copy()

    def param_grad(self, x, upstream) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        U = np.atleast_2d(np.asarray(upstream, dtype=float))
        if U.shape != (X.shape[0], self.n_out):
            raise ValueError("upstream shape does not match policy output")
        return np.concatenate([(U.T @ X).ravel(), U.sum(axis=0)])

    def input_grad(self, x, upstream) -> np.ndarray:
        return np.asarray(upstream, dtype=float) @ self.K
