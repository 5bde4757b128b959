"""Minimal deterministic neural network engine on numpy arrays.

Dense and convolutional layers with periodic padding, average / max
pooling, SELU activation, batch normalization, manual backpropagation,
ADAM with decoupled weight decay and early stopping.  Everything runs in
float64 and is bit reproducible for a fixed seed and data order.

Array conventions: dense activations are (batch, features); image
activations are channels-last (batch, height, width, channels).
Convolutions wrap periodically, so a stride-1 convolution preserves the
spatial size and a stride-s convolution yields ceil(n/s) pixels per axis.
Stride-1 convolutions and overlapping pooling evaluate through the
Fourier domain; strided convolutions gather their windows at the output
resolution.  Both paths realize the same periodic modular sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


def selu(x):
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(x))


def selu_grad(x):
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(x))


_ACTIVATIONS = {"selu": (selu, selu_grad), "identity": (lambda x: x, lambda x: np.ones_like(x))}


class Layer:
    """Shared trivial implementations; parameters are updated in place."""

    def params(self):
        return []

    def grads(self):
        return []

    def state_arrays(self):
        return []

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def spec(self):
        raise NotImplementedError


class Activation(Layer):
    def __init__(self, fn="selu"):
        if fn not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {fn!r}")
        self.fn = fn
        self._cache = None

    def forward(self, x, training=False):
        if training:
            self._cache = x
        return _ACTIVATIONS[self.fn][0](x)

    def backward(self, dy):
        return dy * _ACTIVATIONS[self.fn][1](self._cache)

    def spec(self):
        return {"kind": "activation", "fn": self.fn}


class Dense(Layer):
    def __init__(self, n_in, n_out, activation="identity", rng=None, zero_init=False):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.activation = activation
        if zero_init or rng is None:
            self.w = np.zeros((self.n_in, self.n_out))
        else:
            # LeCun normal, the customary pairing with SELU
            self.w = rng.normal(0.0, 1.0 / np.sqrt(self.n_in), size=(self.n_in, self.n_out))
        self.b = np.zeros(self.n_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None
        self._z = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DataError(f"dense layer expected (*, {self.n_in}) input, got {x.shape}")
        z = x @ self.w + self.b
        if training:
            self._x, self._z = x, z
        return _ACTIVATIONS[self.activation][0](z)

    def backward(self, dy):
        dz = dy * _ACTIVATIONS[self.activation][1](self._z)
        self.dw[...] = self._x.T @ dz
        self.db[...] = dz.sum(axis=0)
        return dz @ self.w.T

    def spec(self):
        return {"kind": "dense", "in": self.n_in, "out": self.n_out, "activation": self.activation}


def _centered_kernel_fft(w, n):
    """rfft2 of the kernel scattered onto an n x n canvas, centered at the origin.

    Kernel taps land at their modular positions, so kernels wider than the
    map fold periodically onto it (the exact equivalent of the wrapped sum).
    """
    k = w.shape[0]
    p = k // 2
    canvas = np.zeros((n, n) + w.shape[2:])
    idx = (np.arange(k) - p) % n
    np.add.at(canvas, (idx[:, None], idx[None, :]), w)
    return np.fft.rfft2(canvas, axes=(0, 1))


def _conv_indices(n, k, stride):
    """Modular window rows: idx[o, u] = (o*stride + u - k//2) % n."""
    n_out = -(-n // stride)
    anchors = np.arange(n_out) * stride
    return (anchors[:, None] + np.arange(k)[None, :] - k // 2) % n


class Conv2dPeriodic(Layer):
    """Square-kernel convolution with periodic padding.

    out[b, o1, o2, f] = act( sum_{u,v,c} w[u,v,c,f]
                             * x[b, (o1*s+u-p) % n1, (o2*s+v-p) % n2, c] + bias[f] )
    with p = kernel // 2, so stride 1 preserves the spatial size and the
    kernel wraps across the periodic seam (kernels wider than the map fold
    onto it).  Stride-1 layers evaluate through the Fourier domain; strided
    layers gather windows at the reduced output resolution, which is much
    cheaper.  Both realize the identical modular sum.
    """

    def __init__(self, kernel, c_in, c_out, stride=1, activation="identity", rng=None, zero_init=False):
        if kernel < 1 or stride < 1:
            raise ConfigError("kernel and stride must be >= 1")
        self.k, self.c_in, self.c_out, self.stride = int(kernel), int(c_in), int(c_out), int(stride)
        self.activation = activation
        fan_in = self.k * self.k * self.c_in
        if zero_init or rng is None:
            self.w = np.zeros((self.k, self.k, self.c_in, self.c_out))
        else:
            self.w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(self.k, self.k, self.c_in, self.c_out))
        self.b = np.zeros(self.c_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise DataError(f"conv layer expected (*,h,w,{self.c_in}) input, got {x.shape}")
        if x.shape[1] != x.shape[2]:
            raise DataError("conv layer expects square spatial input")
        return x.shape[1], x.shape[2]

    def forward(self, x, training=False):
        n1, n2 = self._check_input(x)
        if self.stride == 1:
            fx = np.fft.rfft2(x, axes=(1, 2))
            fw = _centered_kernel_fft(self.w, n1)
            z = np.fft.irfft2(
                np.einsum("bhwc,hwcf->bhwf", fx, np.conj(fw)), s=(n1, n2), axes=(1, 2)
            ) + self.b
            if training:
                self._cache = ("fft", fx, z, (n1, n2))
        else:
            iy = _conv_indices(n1, self.k, self.stride)
            ix = _conv_indices(n2, self.k, self.stride)
            win = x[:, iy[:, None, :, None], ix[None, :, None, :], :]  # (B,Ho,Wo,k,k,C)
            cols = win.reshape(win.shape[:3] + (-1,))
            z = cols @ self.w.reshape(-1, self.c_out) + self.b
            if training:
                self._cache = ("gather", cols, z, (n1, n2), iy, ix)
        return _ACTIVATIONS[self.activation][0](z)

    def backward(self, dy):
        if self._cache[0] == "fft":
            _, fx, z, (n1, n2) = self._cache
            dz = dy * _ACTIVATIONS[self.activation][1](z)
            self.db[...] = dz.sum(axis=(0, 1, 2))
            fup = np.fft.rfft2(dz, axes=(1, 2))
            # dw[u,v,c,f] = T[(u-p) % n, (v-p) % n, c, f] with T the batch
            # summed cross correlation of input and output gradient
            t = np.fft.irfft2(
                np.einsum("bhwf,bhwc->hwcf", np.conj(fup), fx), s=(n1, n2), axes=(0, 1)
            )
            p = self.k // 2
            rows = (np.arange(self.k) - p) % n1
            cols = (np.arange(self.k) - p) % n2
            self.dw[...] = t[np.ix_(rows, cols)]
            fw = _centered_kernel_fft(self.w, n1)
            return np.fft.irfft2(
                np.einsum("bhwf,hwcf->bhwc", fup, fw), s=(n1, n2), axes=(1, 2)
            )
        _, cols, z, (n1, n2), iy, ix = self._cache
        dz = dy * _ACTIVATIONS[self.activation][1](z)
        self.db[...] = dz.sum(axis=(0, 1, 2))
        flat_cols = cols.reshape(-1, cols.shape[-1])
        flat_dz = dz.reshape(-1, self.c_out)
        self.dw[...] = (flat_cols.T @ flat_dz).reshape(self.w.shape)
        dcols = (flat_dz @ self.w.reshape(-1, self.c_out).T).reshape(
            dz.shape[:3] + (self.k, self.k, self.c_in)
        )
        dx = np.zeros((dz.shape[0], n1, n2, self.c_in))
        # stride positions are distinct modulo n, so for a fixed kernel
        # offset every window writes to a different pixel: plain fancy
        # indexed accumulation is exact
        for u in range(self.k):
            ru = iy[:, u]
            for v in range(self.k):
                dx[:, ru[:, None], ix[:, v][None, :], :] += dcols[:, :, :, u, v, :]
        return dx

    def spec(self):
        return {
            "kind": "conv",
            "kernel": self.k,
            "in_channels": self.c_in,
            "out_channels": self.c_out,
            "stride": self.stride,
            "activation": self.activation,
        }


def _pool_windows(n, size, stride):
    """Modular window index grid covering ceil(n/stride) anchor positions."""
    n_out = -(-n // stride)
    anchors = np.arange(n_out) * stride
    return (anchors[:, None] + np.arange(size)[None, :]) % n


class AvgPool(Layer):
    """Average pooling with top-left anchored windows wrapping periodically.

    Non-overlapping tiles reduce by reshape; the general (overlapping or
    non-dividing) case runs as a depthwise convolution with a uniform
    kernel through the Fourier domain, like the conv layers.
    """

    def __init__(self, size, stride=None):
        if size < 1:
            raise ConfigError("pool size must be >= 1")
        self.size = int(size)
        self.stride = int(stride) if stride is not None else int(size)
        self._cache = None

    def _tiled(self, n):
        return self.stride == self.size and n % self.size == 0

    def _kernel_fft(self, n):
        k0 = np.zeros((n, n))
        k0[: self.size, : self.size] = 1.0 / self.size**2
        return np.fft.rfft2(k0)

    def forward(self, x, training=False):
        b, n1, n2, c = x.shape
        s = self.size
        if self._tiled(n1) and self._tiled(n2):
            y = x.reshape(b, n1 // s, s, n2 // s, s, c).mean(axis=(2, 4))
            if training:
                self._cache = ("tiled", x.shape)
            return y
        fk = self._kernel_fft(n1)
        full = np.fft.irfft2(
            np.fft.rfft2(x, axes=(1, 2)) * np.conj(fk)[None, :, :, None], s=(n1, n2), axes=(1, 2)
        )
        y = full[:, :: self.stride, :: self.stride]
        if training:
            self._cache = ("fft", x.shape)
        return y

    def backward(self, dy):
        s = self.size
        if self._cache[0] == "tiled":
            _, shape = self._cache
            b, n1, n2, c = shape
            g = np.broadcast_to(
                dy[:, :, None, :, None, :] / (s * s), (b, n1 // s, s, n2 // s, s, c)
            )
            return g.reshape(shape)
        _, shape = self._cache
        b, n1, n2, c = shape
        up = np.zeros(shape)
        up[:, :: self.stride, :: self.stride] = dy
        fk = self._kernel_fft(n1)
        return np.fft.irfft2(
            np.fft.rfft2(up, axes=(1, 2)) * fk[None, :, :, None], s=(n1, n2), axes=(1, 2)
        )

    def spec(self):
        return {"kind": "avg_pool", "size": self.size, "stride": self.stride}


class MaxPool(Layer):
    """Max pooling; on ties the lowest window index receives the gradient."""

    def __init__(self, size, stride=None):
        if size < 1:
            raise ConfigError("pool size must be >= 1")
        self.size = int(size)
        self.stride = int(stride) if stride is not None else int(size)
        self._cache = None

    def forward(self, x, training=False):
        b, n1, n2, c = x.shape
        s = self.size
        iy = _pool_windows(n1, s, self.stride)
        ix = _pool_windows(n2, s, self.stride)
        win = x[:, iy[:, None, :, None], ix[None, :, None, :], :]
        flat = win.reshape(b, iy.shape[0], ix.shape[0], s * s, c)
        arg = flat.argmax(axis=3)
        y = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        if training:
            self._cache = (x.shape, iy, ix, arg)
        return y

    def backward(self, dy):
        shape, iy, ix, arg = self._cache
        s = self.size
        dx = np.zeros(shape)
        uu, vv = np.divmod(arg, s)  # winning in-window offsets, (b, ho, wo, c)
        for u in range(s):
            for v in range(s):
                mask = (uu == u) & (vv == v)
                if not mask.any():
                    continue
                contrib = np.where(mask, dy, 0.0)
                np.add.at(
                    dx,
                    (slice(None), iy[:, u][:, None], ix[:, v][None, :], slice(None)),
                    contrib,
                )
        return dx

    def spec(self):
        return {"kind": "max_pool", "size": self.size, "stride": self.stride}


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def spec(self):
        return {"kind": "flatten"}


class BatchNorm(Layer):
    """Batch normalization; per feature for dense inputs, per channel for images.

    Training mode normalizes with batch statistics and updates the running
    estimates with momentum 0.99; inference mode uses the running values, so
    a frozen network's output does not depend on batch composition.
    """

    def __init__(self, dim, conv=False, momentum=0.99, eps=1e-5):
        self.dim = int(dim)
        self.conv = bool(conv)
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(self.dim)
        self.beta = np.zeros(self.dim)
        self.dgamma = np.zeros(self.dim)
        self.dbeta = np.zeros(self.dim)
        self.running_mean = np.zeros(self.dim)
        self.running_var = np.ones(self.dim)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.dgamma, self.dbeta]

    def state_arrays(self):
        return [self.running_mean, self.running_var]

    def _axes(self):
        return (0, 1, 2) if self.conv else (0,)

    def forward(self, x, training=False):
        if x.shape[-1] != self.dim:
            raise DataError(f"batch norm dim {self.dim} does not match input {x.shape}")
        if training:
            axes = self._axes()
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * inv
            m = x.size // self.dim
            self._cache = (xhat, inv, m)
            self.running_mean[...] = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var[...] = self.momentum * self.running_var + (1 - self.momentum) * var
            return self.gamma * xhat + self.beta
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return self.gamma * (x - self.running_mean) * inv + self.beta

    def backward(self, dy):
        xhat, inv, m = self._cache
        axes = self._axes()
        self.dgamma[...] = (dy * xhat).sum(axis=axes)
        self.dbeta[...] = dy.sum(axis=axes)
        dxhat = dy * self.gamma
        return inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))

    def spec(self):
        return {"kind": "batch_norm", "dim": self.dim, "conv": self.conv}


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def grads(self):
        return [g for l in self.layers for g in l.grads()]

    def state_arrays(self):
        return [s for l in self.layers for s in l.state_arrays()]

    def forward(self, x, training=False):
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, training=training)
            except DataError as exc:
                raise DataError(f"layer {i} ({layer.spec()['kind']}): {exc}") from exc
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def spec(self):
        return {"kind": "sequential", "layers": [l.spec() for l in self.layers]}


class Parallel(Layer):
    """Runs branches on the same input and concatenates their outputs.

    mode 'channel' concatenates along the channel axis (branch outputs must
    share the spatial shape); mode 'flat' flattens each branch output and
    concatenates the feature vectors.
    """

    def __init__(self, branches, mode="channel"):
        if mode not in ("channel", "flat"):
            raise ConfigError(f"unknown parallel mode {mode!r}")
        self.branches = list(branches)
        self.mode = mode
        self._cache = None

    def params(self):
        return [p for b in self.branches for p in b.params()]

    def grads(self):
        return [g for b in self.branches for g in b.grads()]

    def state_arrays(self):
        return [s for b in self.branches for s in b.state_arrays()]

    def forward(self, x, training=False):
        outs = [b.forward(x, training=training) for b in self.branches]
        if self.mode == "channel":
            spatial = {o.shape[1:3] for o in outs}
            if len(spatial) != 1:
                raise DataError(f"branch spatial shapes differ: {sorted(spatial)}")
            self._cache = [o.shape for o in outs]
            return np.concatenate(outs, axis=-1)
        flat = [o.reshape(o.shape[0], -1) for o in outs]
        self._cache = [o.shape for o in outs]
        return np.concatenate(flat, axis=1)

    def backward(self, dy):
        shapes = self._cache
        dx = None
        ofs = 0
        for branch, shape in zip(self.branches, shapes):
            if self.mode == "channel":
                width = shape[-1]
                piece = dy[..., ofs : ofs + width]
            else:
                width = int(np.prod(shape[1:]))
                piece = dy[:, ofs : ofs + width].reshape(shape)
            ofs += width
            contrib = branch.backward(piece)
            dx = contrib if dx is None else dx + contrib
        return dx

    def spec(self):
        return {
            "kind": "parallel",
            "mode": self.mode,
            "branches": [b.spec()["layers"] for b in self.branches],
        }


def build_layers(specs, rng=None):
    """Instantiate a Sequential from a list of layer spec dicts."""
    layers = []
    for s in specs:
        kind = s["kind"]
        if kind == "dense":
            layers.append(
                Dense(s["in"], s["out"], s.get("activation", "identity"), rng=rng,
                      zero_init=s.get("zero_init", False))
            )
        elif kind == "conv":
            layers.append(
                Conv2dPeriodic(
                    s["kernel"], s["in_channels"], s["out_channels"],
                    stride=s.get("stride", 1), activation=s.get("activation", "identity"),
                    rng=rng, zero_init=s.get("zero_init", False),
                )
            )
        elif kind == "avg_pool":
            layers.append(AvgPool(s["size"], s.get("stride")))
        elif kind == "max_pool":
            layers.append(MaxPool(s["size"], s.get("stride")))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "batch_norm":
            layers.append(BatchNorm(s["dim"], conv=s.get("conv", False)))
        elif kind == "activation":
            layers.append(Activation(s.get("fn", "selu")))
        elif kind == "parallel":
            layers.append(
                Parallel([build_layers(b, rng=rng) for b in s["branches"]], mode=s.get("mode", "channel"))
            )
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
    return Sequential(layers)


def parameter_count(net) -> int:
    return int(sum(p.size for p in net.params()))


@dataclass
class TrainConfig:
    """Optimization settings; deterministic for a fixed seed and data order."""

    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    loss: str = "mse"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ConfigError("train config entries must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")


class AdamW:
    """ADAM moment updates with decoupled weight decay, applied in place."""

    def __init__(self, params, config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        c = self.config
        self.t += 1
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m[...] = c.beta1 * m + (1 - c.beta1) * g
            v[...] = c.beta2 * v + (1 - c.beta2) * g * g
            p -= c.learning_rate * ((m / b1t) / (np.sqrt(v / b2t) + c.eps) + c.weight_decay * p)


def adamw_step(params, grads, state: AdamW | None, config: TrainConfig) -> AdamW:
    """Functional single-step wrapper; returns the (updated) optimizer state."""
    if state is None:
        state = AdamW(params, config)
    state.step(grads)
    return state


def early_stop(history, patience: int) -> bool:
    """True iff the last `patience` entries brought no new minimum."""
    if len(history) <= patience:
        return False
    best = int(np.argmin(history))
    return len(history) - 1 - best >= patience


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. the prediction."""
    diff = pred - target
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size


def rel_mse_loss(pred, target, floor: float = 0.2):
    """Squared error relative to the squared target, floored for small targets.

    Components with |target| below `floor` are scaled by 1/floor^2 instead
    of 1/target^2, which keeps near-zero off-diagonal targets trainable.
    """
    diff = pred - target
    w = 1.0 / np.maximum(target * target, floor * floor)
    loss = float((diff * diff * w).mean())
    return loss, 2.0 * diff * w / diff.size


LOSSES = {"mse": mse_loss, "rel_mse": rel_mse_loss}


def snapshot(net):
    """Copies of all parameters and state arrays (for early-stopping restore)."""
    return [a.copy() for a in list(net.params()) + list(net.state_arrays())]


def restore(net, snap):
    arrays = list(net.params()) + list(net.state_arrays())
    if len(arrays) != len(snap):
        raise DataError("snapshot does not match the network")
    for a, s in zip(arrays, snap):
        a[...] = s


def gradient_check(net, x, target, loss_fn=mse_loss, h: float = 1e-6, n_probe: int = 5,
                   rng=None, floor: float = 1e-3):
    """Max relative deviation between analytic and central-difference gradients.

    Probes `n_probe` randomly chosen entries of every parameter array.  The
    denominator is floored: central differences at step h carry a roundoff
    noise of about eps/h, so the relative deviation is only certifiable for
    gradients above that noise level (parameters whose influence is exactly
    cancelled downstream, e.g. a bias in front of batch norm, have true
    gradient zero and would otherwise compare pure noise).
    """
    rng = rng or np.random.default_rng(0)
    out = net.forward(x, training=True)
    _, dout = loss_fn(out, target)
    net.backward(dout)
    worst = 0.0
    for p, g in zip(net.params(), net.grads()):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        idx = rng.choice(flat_p.size, size=min(n_probe, flat_p.size), replace=False)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp, _ = loss_fn(net.forward(x, training=True), target)
            flat_p[i] = orig - h
            lm, _ = loss_fn(net.forward(x, training=True), target)
            flat_p[i] = orig
            numeric = (lp - lm) / (2 * h)
            denom = max(abs(numeric), abs(flat_g[i]), floor)
            worst = max(worst, abs(numeric - flat_g[i]) / denom)
    return worst
