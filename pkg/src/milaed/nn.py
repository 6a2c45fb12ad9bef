"""A small fixed menu of differentiable layers with hand-written backward passes.

Tensors are batched along the first axis. Image-like inputs use
(batch, height, width, channels) layout, so a log-mel instance
(mel x frames x channels) is fed as-is.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import IncompatibleDims, ShapeMismatch, StaleCache, TooShallow

KINDS = ("dense", "conv2d", "relu", "flatten", "maxpool2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise IncompatibleDims(f"unknown layer kind {self.kind!r}")
        expected = {"dense": 2, "conv2d": 4, "maxpool2d": 2}.get(self.kind, 0)
        if len(self.dims) != expected or any(int(d) < 1 for d in self.dims):
            raise IncompatibleDims(f"{self.kind} needs {expected} positive dims, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], tuple(d.get("dims", ())))

    def __str__(self):
        if self.kind == "dense":
            return f"dense {self.dims[0]}->{self.dims[1]}"
        if self.kind == "conv2d":
            return f"conv2d {self.dims[0]}->{self.dims[1]} {self.dims[2]}x{self.dims[3]}"
        if self.kind == "maxpool2d":
            return f"maxpool2d {self.dims[0]}x{self.dims[1]}"
        return self.kind


def dense(n_in, n_out):
    return LayerSpec("dense", (n_in, n_out))


def conv2d(in_ch, out_ch, kh, kw):
    return LayerSpec("conv2d", (in_ch, out_ch, kh, kw))


def maxpool2d(ph, pw):
    return LayerSpec("maxpool2d", (ph, pw))


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


def mlp_specs(n_in: int, hidden: Sequence[int], n_out: int) -> list[LayerSpec]:
    specs = []
    for h in hidden:
        specs += [dense(n_in, h), RELU]
        n_in = h
    return specs + [dense(n_in, n_out)]


def mil_dnn_specs(n_in: int = 512, n_classes: int = 17) -> list[LayerSpec]:
    """Four ReLU hidden layers of 512, 512, 256 and 128 units."""
    return mlp_specs(n_in, (512, 512, 256, 128), n_classes)


def layer_shapes(specs: Sequence[LayerSpec], input_shape: tuple[int, ...] | None) -> list[tuple[int, ...]]:
    """Per-layer input shapes (without batch axis), plus the final output shape."""
    if not specs:
        raise IncompatibleDims("empty layer list")
    if input_shape is None:
        first = specs[0]
        if first.kind != "dense":
            raise IncompatibleDims(f"input_shape required when the first layer is {first}")
        input_shape = (first.dims[0],)
    shape = tuple(int(s) for s in input_shape)
    shapes = [shape]
    prev = "input"
    for i, spec in enumerate(specs):
        where = f"layer {i - 1} ({prev}) -> layer {i} ({spec})"
        if spec.kind == "dense":
            if len(shape) != 1 or shape[0] != spec.dims[0]:
                raise IncompatibleDims(f"{where}: incoming shape {shape}, dense expects ({spec.dims[0]},)")
            shape = (spec.dims[1],)
        elif spec.kind == "conv2d":
            in_ch, out_ch, kh, kw = spec.dims
            if len(shape) != 3 or shape[2] != in_ch:
                raise IncompatibleDims(f"{where}: incoming shape {shape}, conv2d expects (H, W, {in_ch})")
            if shape[0] < kh or shape[1] < kw:
                raise IncompatibleDims(f"{where}: kernel {kh}x{kw} larger than input {shape[:2]}")
            shape = (shape[0] - kh + 1, shape[1] - kw + 1, out_ch)
        elif spec.kind == "maxpool2d":
            ph, pw = spec.dims
            if len(shape) != 3 or shape[0] < ph or shape[1] < pw:
                raise IncompatibleDims(f"{where}: cannot pool {shape} with window {ph}x{pw}")
            shape = (shape[0] // ph, shape[1] // pw, shape[2])
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
        prev = str(spec)
    return shapes


@dataclass(frozen=True, eq=False)
class Model:
    specs: tuple[LayerSpec, ...]
    params: tuple[np.ndarray, ...]  # (W, b) per parametric layer, in layer order
    input_shape: tuple[int, ...]
    seed: int = 0
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    inference_only: bool = False

    @property
    def n_classes(self) -> int:
        return self.output_shape[0]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return layer_shapes(self.specs, self.input_shape)[-1]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def dtype(self):
        return self.params[0].dtype if self.params else np.dtype(np.float64)

    def with_params(self, params) -> "Model":
        return replace(self, params=tuple(params))

    def with_standardization(self, mean, std) -> "Model":
        return replace(self, input_mean=mean, input_std=std)


def build_model(specs: Sequence[LayerSpec], seed: int = 0, input_shape=None) -> Model:
    """Instantiate a spec chain with He-uniform weights and zero biases."""
    specs = tuple(specs)
    shapes = layer_shapes(specs, input_shape)
    if specs[-1].kind != "dense":
        raise IncompatibleDims(f"last layer must be dense (the class head), got {specs[-1]}")
    rng = np.random.default_rng(seed)
    params = []
    for spec in specs:
        if spec.kind == "dense":
            fan_in, n_out = spec.dims
            wshape = (fan_in, n_out)
        elif spec.kind == "conv2d":
            in_ch, n_out, kh, kw = spec.dims
            fan_in = in_ch * kh * kw
            wshape = (kh, kw, in_ch, n_out)
        else:
            continue
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=wshape))
        params.append(np.zeros(n_out))
    return Model(specs=specs, params=tuple(params), input_shape=shapes[0], seed=seed)


def count_parameters(model: Model) -> int:
    return int(sum(p.size for p in model.params))


def sigmoid(z):
    """Stable logistic, kept strictly inside (0, 1) at the representable edges."""
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    fi = np.finfo(s.dtype)
    return np.clip(s, fi.smallest_subnormal, 1.0 - fi.epsneg)


def log_sigmoid(z):
    """ln(sigmoid(z)) without overflow."""
    z = np.asarray(z)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


@dataclass
class Cache:
    params_ref: tuple
    inputs: list = field(default_factory=list)  # input to each layer
    aux: list = field(default_factory=list)  # per-layer extra state (pool argmax, conv patches)
    logits: np.ndarray | None = None
    batch_shape: tuple = ()


@dataclass
class Gradients:
    params: list[np.ndarray]
    input: np.ndarray


def _conv_patches(x, kh, kw):
    # (N, H', W', kh*kw*C), rows ordered (i, j, c) to match W.reshape(-1, out)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))  # N,H',W',C,kh,kw
    win = win.transpose(0, 1, 2, 4, 5, 3)
    n, ho, wo = win.shape[:3]
    return win.reshape(n, ho, wo, -1)


def _pool_forward(x, ph, pw):
    n, h, w, c = x.shape
    ho, wo = h // ph, w // pw
    blocks = x[:, : ho * ph, : wo * pw, :].reshape(n, ho, ph, wo, pw, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, ph * pw)
    idx = blocks.argmax(axis=-1)  # first max wins
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dy, idx, in_shape, ph, pw):
    n, h, w, c = in_shape
    ho, wo = h // ph, w // pw
    blocks = np.zeros((n, ho, wo, c, ph * pw), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(n, ho, wo, c, ph, pw).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * ph, wo * pw, c)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, : ho * ph, : wo * pw, :] = blocks
    return dx


def _prepare_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    expected = model.input_shape
    if x.shape[1:] == expected:
        pass
    elif x.ndim >= 2 and int(np.prod(x.shape[1:])) == model.input_size:
        x = x.reshape((x.shape[0],) + expected)
    else:
        raise ShapeMismatch(f"input batch shape {x.shape[1:]} does not match model input {expected}")
    if model.input_mean is not None:
        x = (x - model.input_mean) / model.input_std
    return x


def _run(model: Model, x: np.ndarray, stop: int, cache: Cache | None) -> np.ndarray:
    p = 0
    for spec in model.specs[:stop]:
        if cache is not None:
            cache.inputs.append(x)
        aux = None
        if spec.kind == "dense":
            x = x @ model.params[p] + model.params[p + 1]
            p += 2
        elif spec.kind == "conv2d":
            _, out_ch, kh, kw = spec.dims
            patches = _conv_patches(x, kh, kw)
            x = patches @ model.params[p].reshape(-1, out_ch) + model.params[p + 1]
            aux = patches
            p += 2
        elif spec.kind == "relu":
            x = np.maximum(x, 0.0)
        elif spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif spec.kind == "maxpool2d":
            x, aux = _pool_forward(x, *spec.dims)
        if cache is not None:
            cache.aux.append(aux)
    return x


def forward_logits(model: Model, x) -> tuple[np.ndarray, Cache]:
    x = _prepare_input(model, x)
    cache = Cache(params_ref=model.params, batch_shape=x.shape)
    logits = _run(model, x, len(model.specs), cache)
    cache.logits = logits
    return logits, cache


def forward(model: Model, x) -> tuple[np.ndarray, Cache]:
    """Class posteriors sigmoid(logits) for a batch, plus the backward cache."""
    logits, cache = forward_logits(model, x)
    return sigmoid(logits), cache


def logits(model: Model, x) -> np.ndarray:
    """Cache-free forward to the logits."""
    return _run(model, _prepare_input(model, x), len(model.specs), None)


def predict(model: Model, x) -> np.ndarray:
    return sigmoid(logits(model, x))


def backward(model: Model, cache: Cache, output_grad) -> Gradients:
    """Back-propagate a gradient w.r.t. the logits through every layer.

    Returns fresh gradient arrays; nothing in ``model`` or ``cache`` is modified.
    """
    if cache.params_ref is not model.params or len(cache.inputs) != len(model.specs):
        raise StaleCache("cache was produced by a different model or parameter set")
    g = np.asarray(output_grad, dtype=model.dtype)
    if g.shape != cache.logits.shape:
        raise ShapeMismatch(f"output_grad shape {g.shape} != logits shape {cache.logits.shape}")

    grads: list[np.ndarray] = [None] * len(model.params)  # type: ignore[list-item]
    p = len(model.params)
    for i in range(len(model.specs) - 1, -1, -1):
        spec = model.specs[i]
        x = cache.inputs[i]
        if spec.kind == "dense":
            p -= 2
            W = model.params[p]
            grads[p] = x.T @ g
            grads[p + 1] = g.sum(axis=0)
            g = g @ W.T
        elif spec.kind == "conv2d":
            p -= 2
            W = model.params[p]
            in_ch, out_ch, kh, kw = spec.dims
            patches = cache.aux[i]
            g2 = g.reshape(-1, out_ch)
            grads[p] = (patches.reshape(-1, patches.shape[-1]).T @ g2).reshape(W.shape)
            grads[p + 1] = g2.sum(axis=0)
            dpatch = (g2 @ W.reshape(-1, out_ch).T).reshape(g.shape[:3] + (kh, kw, in_ch))
            dx = np.zeros_like(x)
            ho, wo = g.shape[1], g.shape[2]
            for a in range(kh):
                for b in range(kw):
                    dx[:, a : a + ho, b : b + wo, :] += dpatch[:, :, :, a, b, :]
            g = dx
        elif spec.kind == "relu":
            g = g * (x > 0)
        elif spec.kind == "flatten":
            g = g.reshape(x.shape)
        elif spec.kind == "maxpool2d":
            g = _pool_backward(g, cache.aux[i], x.shape, *spec.dims)
    if model.input_std is not None:
        g = g / model.input_std
    return Gradients(params=grads, input=g)


def penultimate(model: Model, x) -> np.ndarray:
    """Activations feeding the final dense layer (after its preceding nonlinearity)."""
    if sum(s.parametric for s in model.specs) < 2:
        raise TooShallow("penultimate features need at least two parametric layers")
    x = _prepare_input(model, x)
    h = _run(model, x, len(model.specs) - 1, None)
    return h.reshape(h.shape[0], -1)


def fit_standardization(model: Model, instances: np.ndarray, min_std: float = 1e-6) -> Model:
    """Per-feature mean/std over a training stack of instances, stored on the model."""
    x = np.asarray(instances, dtype=np.float64).reshape((-1,) + model.input_shape)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), min_std)
    return model.with_standardization(mean.astype(model.dtype), std.astype(model.dtype))


def to_inference(model: Model, dtype=np.float32) -> Model:
    cast = lambda a: None if a is None else a.astype(dtype)  # noqa: E731
    return replace(
        model,
        params=tuple(cast(p) for p in model.params),
        input_mean=cast(model.input_mean),
        input_std=cast(model.input_std),
        inference_only=True,
    )
