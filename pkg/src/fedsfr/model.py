"""Dense mirror autoencoder with a VQ codebook.

The encoder maps a flattened ``C*H*W`` image through ``hidden_widths`` to
``N*d`` features. Decoder layer ``j`` mirrors encoder layer ``L-1-j``: its
weight has the transposed shape and its bias has the size of the mirrored
layer's output, added to the decoder layer *input* (``act(W (h + c))``). This
keeps the encoder and decoder parameter counts identical, which the
encoder-only privacy accounting relies on.

Hidden layers use leaky-ReLU (slope 0.2); the last layer of each side is linear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node

LEAKY_SLOPE = 0.2
CHECKPOINT_MAGIC = b"FSFR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int, int] = (1, 8, 8)
    N: int = 16
    d: int = 2
    hidden_widths: tuple[int, ...] = (32,)
    M: int = 16

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "hidden_widths", tuple(int(v) for v in self.hidden_widths))
        if len(self.image_shape) != 3:
            raise ValueError("image_shape must be (C, H, W)")
        dims = list(self.image_shape) + [self.N, self.d, *self.hidden_widths]
        if any(v <= 0 for v in dims):
            raise ValueError(f"zero-width layer in model config {self}")
        if self.M < 2:
            raise ValueError("codebook size M must be >= 2")

    @property
    def pixels(self) -> int:
        C, H, W = self.image_shape
        return C * H * W

    @property
    def feature_width(self) -> int:
        return self.N * self.d

    def encoder_widths(self) -> list[int]:
        return [self.pixels, *self.hidden_widths, self.feature_width]


@dataclass(frozen=True)
class LayerSpan:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class LayerMap:
    spans: tuple[LayerSpan, ...]

    @property
    def D(self) -> int:
        return sum(s.length for s in self.spans)

    def __iter__(self):
        return iter(self.spans)

    def __len__(self):
        return len(self.spans)

    def prefix_length(self, prefix: str) -> int:
        return sum(s.length for s in self.spans if s.name.startswith(prefix))

    def sub(self, prefix: str) -> "LayerMap":
        """Spans whose name starts with ``prefix``, re-based to offset 0 (must be contiguous)."""
        picked = [s for s in self.spans if s.name.startswith(prefix)]
        start = picked[0].offset
        return LayerMap(tuple(LayerSpan(s.name, s.offset - start, s.length, s.shape) for s in picked))


def _layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    widths = config.encoder_widths()
    L = len(widths) - 1
    shapes = []
    for i in range(L):
        shapes.append((f"enc.{i}.weight", (widths[i], widths[i + 1])))
        shapes.append((f"enc.{i}.bias", (widths[i + 1],)))
    for j in range(L):
        i = L - 1 - j
        shapes.append((f"dec.{j}.bias", (widths[i + 1],)))
        shapes.append((f"dec.{j}.weight", (widths[i + 1], widths[i])))
    shapes.append(("codebook", (config.M, config.d)))
    return shapes


def layer_map(config: ModelConfig) -> LayerMap:
    spans, off = [], 0
    for name, shape in _layer_shapes(config):
        n = int(np.prod(shape))
        spans.append(LayerSpan(name, off, n, shape))
        off += n
    return LayerMap(tuple(spans))


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter set; ``theta`` / ``phi`` hold (weight, bias) arrays in layer order."""

    config: ModelConfig
    theta: tuple[np.ndarray, ...]
    phi: tuple[np.ndarray, ...]
    codebook: np.ndarray

    def __post_init__(self):
        for arr in (*self.theta, *self.phi, self.codebook):
            arr.setflags(write=False)

    def named(self) -> dict[str, np.ndarray]:
        names = [n for n, _ in _layer_shapes(self.config)]
        return dict(zip(names, (*self.theta, *self.phi, self.codebook)))

    @property
    def D(self) -> int:
        return layer_map(self.config).D

    def __eq__(self, other):
        if not isinstance(other, ModelParams) or other.config != self.config:
            return NotImplemented
        return np.array_equal(flatten(self)[0], flatten(other)[0])


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x1A17,)))
    arrays = []
    for name, shape in _layer_shapes(config):
        if name == "codebook":
            lim = 1.0 / np.sqrt(config.d)
            arrays.append(rng.uniform(-lim, lim, size=shape))
        elif name.endswith(".weight"):
            lim = 1.0 / np.sqrt(shape[0])
            arrays.append(rng.uniform(-lim, lim, size=shape))
        else:
            arrays.append(np.zeros(shape))
    return _from_arrays(config, arrays)


def _from_arrays(config: ModelConfig, arrays) -> ModelParams:
    n_enc = 2 * (len(config.hidden_widths) + 1)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    return ModelParams(config, tuple(arrays[:n_enc]), tuple(arrays[n_enc : 2 * n_enc]), arrays[-1])


def flatten(params: ModelParams) -> tuple[np.ndarray, LayerMap]:
    """Concatenate theta, phi, codebook (in that order) into one vector."""
    lm = layer_map(params.config)
    vec = np.concatenate([a.ravel() for a in (*params.theta, *params.phi, params.codebook)])
    return vec, lm


def unflatten(vec: np.ndarray, config: ModelConfig) -> ModelParams:
    lm = layer_map(config)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (lm.D,):
        raise ValueError(f"expected flat vector of length {lm.D}, got {vec.shape}")
    return _from_arrays(config, [vec[s.offset : s.offset + s.length].reshape(s.shape) for s in lm])


def _batch_images(config: ModelConfig, images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float64)
    if images.shape == config.image_shape:
        return images.reshape(1, -1), True
    if images.shape[1:] == config.image_shape:
        return images.reshape(len(images), -1), False
    raise ValueError(f"image shape {images.shape} does not match {config.image_shape}")


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def encode(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Features ``(N, d)`` for one image or ``(B, N, d)`` for a batch."""
    cfg = params.config
    h, single = _batch_images(cfg, images)
    th = params.theta
    L = len(th) // 2
    for i in range(L):
        h = h @ th[2 * i] + th[2 * i + 1]
        if i < L - 1:
            h = _leaky(h)
    Y = h.reshape(-1, cfg.N, cfg.d)
    return Y[0] if single else Y


def decode(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Images ``(C, H, W)`` for one feature matrix or ``(B, C, H, W)`` for a batch."""
    cfg = params.config
    features = np.asarray(features, dtype=np.float64)
    if features.shape == (cfg.N, cfg.d):
        h, single = features.reshape(1, -1), True
    elif features.shape[1:] == (cfg.N, cfg.d):
        h, single = features.reshape(len(features), -1), False
    else:
        raise ValueError(f"feature shape {features.shape} does not match ({cfg.N}, {cfg.d})")
    ph = params.phi
    L = len(ph) // 2
    for j in range(L):
        h = (h + ph[2 * j]) @ ph[2 * j + 1]
        if j < L - 1:
            h = _leaky(h)
    X = h.reshape(-1, *cfg.image_shape)
    return X[0] if single else X


# -- graph builders ---------------------------------------------------------


def param_inputs(g: Graph, config: ModelConfig) -> dict[str, Node]:
    return {name: g.input(name) for name, _ in _layer_shapes(config)}


def encoder_graph(g: Graph, x: Node, nodes: dict[str, Node], config: ModelConfig) -> Node:
    """``x`` is (B, C*H*W); output is (B, N*d)."""
    L = len(config.hidden_widths) + 1
    h = x
    for i in range(L):
        h = g.bias_add(g.linear(h, nodes[f"enc.{i}.weight"]), nodes[f"enc.{i}.bias"])
        if i < L - 1:
            h = g.leaky_relu(h, LEAKY_SLOPE)
    return h


def decoder_graph(g: Graph, y: Node, nodes: dict[str, Node], config: ModelConfig) -> Node:
    """``y`` is (B, N*d); output is (B, C*H*W)."""
    L = len(config.hidden_widths) + 1
    h = y
    for j in range(L):
        h = g.linear(g.bias_add(h, nodes[f"dec.{j}.bias"]), nodes[f"dec.{j}.weight"])
        if j < L - 1:
            h = g.leaky_relu(h, LEAKY_SLOPE)
    return h


def grads_to_flat(grads: dict[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    lm = layer_map(config)
    return np.concatenate([np.asarray(grads[s.name]).ravel() for s in lm])


# -- checkpoint files -------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    """``FSFR`` + u32 version + u32 config fields + little-endian f64 parameters."""
    cfg = params.config
    fields = [*cfg.image_shape, cfg.N, cfg.d, cfg.M, len(cfg.hidden_widths), *cfg.hidden_widths]
    vec, _ = flatten(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack(f"<{len(fields)}I", *fields))
        fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take_u32(n):
        nonlocal pos
        if len(raw) < pos + 4 * n:
            raise ValueError(f"{path}: truncated header")
        out = struct.unpack_from(f"<{n}I", raw, pos)
        pos += 4 * n
        return out

    (version,) = take_u32(1)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    C, H, W, N, d, M, n_hidden = take_u32(7)
    hidden = take_u32(n_hidden)
    cfg = ModelConfig((C, H, W), N, d, tuple(hidden), M)
    D = layer_map(cfg).D
    if len(raw) - pos != 8 * D:
        raise ValueError(f"{path}: expected {8 * D} parameter bytes, found {len(raw) - pos}")
    vec = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    return unflatten(vec, cfg)
