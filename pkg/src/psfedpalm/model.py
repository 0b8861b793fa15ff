"""Two-stage convolutional embedder with hand-written backward pass.

Layout is NHWC internally. Every trainable weight, together with the
normalization running statistics, lives in one flat float64 array so that
federated aggregation is plain vector arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5
EMBED_EPS = 1e-12
RUNNING_MOMENTUM = 0.9


@dataclass(frozen=True)
class ArchitectureDescriptor:
    num_classes: int
    input_height: int = 32
    input_width: int = 32
    conv_channels: tuple = (8, 16)
    embedding_dim: int = 64

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.num_classes <= 1:
            raise ValueError("num_classes must be > 1")
        pools = 2 ** len(self.conv_channels)
        if self.input_height % pools or self.input_width % pools:
            raise ValueError(
                f"input size {self.input_height}x{self.input_width} not divisible by {pools}"
            )
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))

    @property
    def flat_features(self) -> int:
        pools = 2 ** len(self.conv_channels)
        return (self.input_height // pools) * (self.input_width // pools) * self.conv_channels[-1]

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c_in = 1
        for k, c_out in enumerate(self.conv_channels, start=1):
            shapes += [
                (f"conv{k}.weight", (c_out, c_in, 3, 3)),
                (f"conv{k}.bias", (c_out,)),
                (f"norm{k}.scale", (c_out,)),
                (f"norm{k}.shift", (c_out,)),
                (f"norm{k}.running_mean", (c_out,)),
                (f"norm{k}.running_var", (c_out,)),
            ]
            c_in = c_out
        n = self.embedding_dim
        shapes += [
            ("head.embed.weight", (n, self.flat_features)),
            ("head.embed.bias", (n,)),
            ("head.cls.weight", (self.num_classes, n)),
            ("head.cls.bias", (self.num_classes,)),
        ]
        return shapes

    def num_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.layer_shapes()))

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "conv_channels": list(self.conv_channels),
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        return cls(
            num_classes=int(d["num_classes"]),
            input_height=int(d["input_height"]),
            input_width=int(d["input_width"]),
            conv_channels=tuple(d["conv_channels"]),
            embedding_dim=int(d["embedding_dim"]),
        )


def build_layer_map(arch: ArchitectureDescriptor) -> dict[str, tuple[int, int, tuple]]:
    """Map layer name -> (offset, length, shape); slices tile the vector."""
    layer_map = {}
    offset = 0
    for name, shape in arch.layer_shapes():
        length = int(np.prod(shape))
        layer_map[name] = (offset, length, shape)
        offset += length
    return layer_map


def is_statistic(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


@dataclass
class ParamVector:
    arch: ArchitectureDescriptor
    values: np.ndarray
    layer_map: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        if self.layer_map is None:
            self.layer_map = build_layer_map(self.arch)
        if len(self.values) != self.arch.num_params():
            raise ValueError(
                f"length {len(self.values)} does not match architecture ({self.arch.num_params()})"
            )

    def __len__(self):
        return len(self.values)

    def get(self, name: str) -> np.ndarray:
        offset, length, shape = self.layer_map[name]
        return self.values[offset:offset + length].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.arch, self.values.copy(), self.layer_map)

    def mask(self, predicate) -> np.ndarray:
        """Boolean mask over the flat vector selecting layers where predicate(name)."""
        out = np.zeros(len(self.values), dtype=bool)
        for name, (offset, length, _) in self.layer_map.items():
            if predicate(name):
                out[offset:offset + length] = True
        return out

    def trainable_mask(self) -> np.ndarray:
        return self.mask(lambda name: not is_statistic(name))

    @classmethod
    def zeros(cls, arch: ArchitectureDescriptor) -> "ParamVector":
        return cls(arch, np.zeros(arch.num_params()))


def init_params(arch: ArchitectureDescriptor, seed: int) -> ParamVector:
    """He-scaled Gaussian weights, zero biases, identity normalization."""
    rng = np.random.default_rng(seed)
    params = ParamVector.zeros(arch)
    for name, (offset, length, shape) in params.layer_map.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            params.values[offset:offset + length] = rng.normal(0.0, np.sqrt(2.0 / fan_in), length)
        elif name.endswith(".scale") or name.endswith(".running_var"):
            params.values[offset:offset + length] = 1.0
    return params


# -- layer primitives ------------------------------------------------------

def _im2col(x):
    """x: (B, H, W, C) -> columns (B*H*W, C*9) for a padded 3x3 convolution."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    B, H, W, C = x.shape
    return win.reshape(B * H * W, C * 9)


def _col2im(dcols, shape):
    B, H, W, C = shape
    d = dcols.reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, H + 2, W + 2, C))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + H, j:j + W, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


def _maxpool(x):
    """2x2 / stride 2 max pool over the spatial axes of (B, H, W, C)."""
    return np.maximum(np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]),
                      np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]))


def _maxpool_backward(dout, x, pooled):
    """Route dout to the first maximal element of each window."""
    dx = np.zeros(x.shape)
    taken = np.zeros(pooled.shape, dtype=bool)
    for i in (0, 1):
        for j in (0, 1):
            hit = (x[:, i::2, j::2] == pooled) & ~taken
            taken |= hit
            dx[:, i::2, j::2] = dout * hit
    return dx


def _as_batch(arch, images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (arch.input_height, arch.input_width):
        raise ValueError(
            f"expected images of shape (B, {arch.input_height}, {arch.input_width}), got {x.shape}"
        )
    return x[..., None]


@dataclass
class ForwardCache:
    params: ParamVector
    mode: str
    layers: list
    flat: np.ndarray
    raw_embedding: np.ndarray
    norm: np.ndarray
    consumed: bool = False


@dataclass
class ForwardOutput:
    logits: np.ndarray
    embedding: np.ndarray
    raw_embedding: np.ndarray
    cache: ForwardCache
    running_stats: dict


def forward(params: ParamVector, images, mode: str = "train") -> ForwardOutput:
    """Run the network on a (B, H, W) batch.

    In ``train`` mode normalization uses batch statistics and the refreshed
    running statistics are returned in ``running_stats`` (params are not
    touched). ``eval`` mode uses the stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    arch = params.arch
    x = _as_batch(arch, images)
    layers = []
    running = {}
    for k in range(1, len(arch.conv_channels) + 1):
        w = params.get(f"conv{k}.weight")
        c_out = w.shape[0]
        w2 = w.reshape(c_out, -1)
        scale = params.get(f"norm{k}.scale")
        shift = params.get(f"norm{k}.shift")
        bias = params.get(f"conv{k}.bias")
        cols = _im2col(x)
        out_shape = x.shape[:3] + (c_out,)
        if mode == "train":
            # the conv bias cancels against the batch mean; it only moves the running mean
            z = cols @ w2.T
            ones = np.full(len(z), 1.0 / len(z))
            # column sums through BLAS; numpy axis-0 reductions on narrow arrays are slow
            mean = ones @ z
            centered = z - mean
            var = ones @ (centered * centered)
            m = RUNNING_MOMENTUM
            running[f"norm{k}.running_mean"] = m * params.get(f"norm{k}.running_mean") + (1 - m) * (mean + bias)
            running[f"norm{k}.running_var"] = m * params.get(f"norm{k}.running_var") + (1 - m) * var
            inv_std = 1.0 / np.sqrt(var + NORM_EPS)
            gain = scale * inv_std
            y = (z * gain + (shift - mean * gain)).reshape(out_shape)
            layers.append({"x_shape": x.shape, "cols": cols, "centered": centered, "inv_std": inv_std, "y": y})
        else:
            inv_std = 1.0 / np.sqrt(params.get(f"norm{k}.running_var") + NORM_EPS)
            gain = scale * inv_std
            offset = shift + (bias - params.get(f"norm{k}.running_mean")) * gain
            y = (cols @ (w2 * gain[:, None]).T + offset).reshape(out_shape)
        # relu commutes with max pooling, so pool first on the 4x larger map
        pooled = _maxpool(y)
        if mode == "train":
            layers[-1]["pooled"] = pooled
        x = np.maximum(pooled, 0.0)
    B = x.shape[0]
    flat = x.reshape(B, -1)
    raw = flat @ params.get("head.embed.weight").T + params.get("head.embed.bias")
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    emb = raw / np.maximum(norm, EMBED_EPS)
    logits = raw @ params.get("head.cls.weight").T + params.get("head.cls.bias")
    cache = ForwardCache(params, mode, layers, flat, raw, norm)
    return ForwardOutput(logits, emb, raw, cache, running)


def backward(cache: ForwardCache, grad_logits=None, grad_embedding=None) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector.

    ``grad_logits`` and ``grad_embedding`` are upstream gradients on the
    logits and on the L2-normalized embedding; either may be None.
    Statistic slices always receive zero gradient.
    """
    if cache.consumed:
        raise RuntimeError("forward cache already used by a previous backward call")
    if cache.mode != "train":
        raise RuntimeError("backward requires a cache from a train-mode forward")
    cache.consumed = True
    params = cache.params
    grad = ParamVector.zeros(params.arch)
    B = cache.raw_embedding.shape[0]

    d_raw = np.zeros_like(cache.raw_embedding)
    if grad_logits is not None:
        grad_logits = np.asarray(grad_logits, dtype=np.float64)
        grad.get("head.cls.weight")[...] = grad_logits.T @ cache.raw_embedding
        grad.get("head.cls.bias")[...] = grad_logits.sum(axis=0)
        d_raw += grad_logits @ params.get("head.cls.weight")
    if grad_embedding is not None:
        g = np.asarray(grad_embedding, dtype=np.float64)
        norm = cache.norm
        safe = np.maximum(norm, EMBED_EPS)
        emb = cache.raw_embedding / safe
        proj = np.where(norm > EMBED_EPS, g - emb * np.sum(emb * g, axis=1, keepdims=True), g)
        d_raw += proj / safe

    grad.get("head.embed.weight")[...] = d_raw.T @ cache.flat
    grad.get("head.embed.bias")[...] = d_raw.sum(axis=0)
    dx = (d_raw @ params.get("head.embed.weight")).reshape((B,) + cache.layers[-1]["pooled"].shape[1:])

    for k in range(len(cache.layers), 0, -1):
        lay = cache.layers[k - 1]
        w = params.get(f"conv{k}.weight")
        c_out = w.shape[0]
        dpooled = dx * (lay["pooled"] > 0)
        dy = _maxpool_backward(dpooled, lay["y"], lay["pooled"]).reshape(-1, c_out)
        zhat = lay["centered"] * lay["inv_std"]
        ones = np.ones(len(dy))
        dscale = ones @ (dy * zhat)
        dshift = ones @ dy
        grad.get(f"norm{k}.scale")[...] = dscale
        grad.get(f"norm{k}.shift")[...] = dshift
        scale = params.get(f"norm{k}.scale")
        count = dy.shape[0]
        # batch-norm input gradient with the dzhat = dy*scale sums folded in
        dz2 = (lay["inv_std"] * scale) * (dy - dshift / count - zhat * (dscale / count))
        grad.get(f"conv{k}.weight")[...] = (dz2.T @ lay["cols"]).reshape(w.shape)
        grad.get(f"conv{k}.bias")[...] = ones @ dz2
        if k > 1:
            dx = _col2im(dz2 @ w.reshape(c_out, -1), lay["x_shape"])
    return grad.values


def apply_running_stats(params: ParamVector, running_stats: dict) -> None:
    """Write running statistics from a train-mode forward into params (in place)."""
    for name, value in running_stats.items():
        params.get(name)[...] = value


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = 0.01, **kwargs) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kwargs)


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_step(state: AdamState, params: ParamVector, grads) -> tuple[AdamState, ParamVector]:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ValueError("gradient, optimizer state and parameters must have equal length")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteGradientError(f"{len(bad)} non-finite gradient entries (first at {bad[0]})")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, ParamVector(params.arch, new_values, params.layer_map)
