"""Image-reconstruction and feature-reconstruction objectives, plus PSNR.

Image loss (client side)::

    Y = enc(X);  Y_hat = C[detect(chan(vq(Y)))]
    X_hat = dec(ST(Y, Y_hat))
    l_c = MSE(X_hat, X) + a * MSE(Y_hat, sg(Y)) + 0.25a * MSE(Y, sg(Y_hat))

Feature loss (server side), two independent channel draws at the same SNR::

    Y1_hat = C[...(Y1)]                       # noise n1
    Y2 = enc(dec(ST(Y1, sg(Y1_hat))))
    Y2_hat = C[...(Y2)]                       # noise n2
    l_s = MSE(Y2, Y1) + a * MSE(Y2_hat, sg(Y2)) + 0.25a * MSE(Y2, sg(Y2_hat))

The second and third FR terms are placed on the second hop exactly as the
VQ terms of the image loss sit on its single hop; the codebook is reached
only through the second term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as jm
from .autodiff import Graph, Node, backward, forward_eval
from .channel import ChannelConfig, Constellation, make_channel

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    term1: float
    term2: float
    term3: float
    alpha: float
    beta: float


@dataclass
class LossGraph:
    graph: Graph
    total: Node
    terms: tuple[Node, Node, Node]
    data_input: str
    alpha: float
    beta: float

    def breakdown(self) -> LossBreakdown:
        t1, t2, t3 = (float(t.value) for t in self.terms)
        return LossBreakdown(float(self.total.value), t1, t2, t3, self.alpha, self.beta)


def _weighted_total(g: Graph, terms, alpha: float, beta: float) -> Node:
    t1, t2, t3 = terms
    return g.add(g.add(t1, g.scale(t2, alpha)), g.scale(t3, beta), name="total")


def build_image_loss_graph(
    config: jm.ModelConfig, const: Constellation, channel: ChannelConfig, alpha_c: float = 1.0
) -> LossGraph:
    g = Graph()
    x = g.input("x")
    p = jm.param_inputs(g, config)
    y = g.reshape(jm.encoder_graph(g, x, p, config), (-1, config.d), name="Y")
    y_hat = g.vq_lookup(y, p["codebook"], make_channel(const, channel), name="Y_hat")
    bridged = g.reshape(g.straight_through(y, y_hat), (-1, config.feature_width))
    x_hat = jm.decoder_graph(g, bridged, p, config)
    terms = (
        g.mse(x_hat, x, name="term1"),
        g.mse(y_hat, g.stop_gradient(y), name="term2"),
        g.mse(y, g.stop_gradient(y_hat), name="term3"),
    )
    beta = 0.25 * alpha_c
    return LossGraph(g, _weighted_total(g, terms, alpha_c, beta), terms, "x", alpha_c, beta)


def build_feature_loss_graph(
    config: jm.ModelConfig, const: Constellation, channel: ChannelConfig, alpha_s: float = 1.0
) -> LossGraph:
    g = Graph()
    y1 = g.input("y1")
    p = jm.param_inputs(g, config)
    chan = make_channel(const, channel)
    y1_hat = g.vq_lookup(y1, p["codebook"], chan, name="Y1_hat")
    # the first hop must not reach the codebook
    hop1 = g.straight_through(y1, g.stop_gradient(y1_hat))
    x2 = jm.decoder_graph(g, g.reshape(hop1, (-1, config.feature_width)), p, config)
    y2 = g.reshape(jm.encoder_graph(g, x2, p, config), (-1, config.d), name="Y2")
    y2_hat = g.vq_lookup(y2, p["codebook"], chan, name="Y2_hat")
    terms = (
        g.mse(y2, y1, name="term1"),
        g.mse(y2_hat, g.stop_gradient(y2), name="term2"),
        g.mse(y2, g.stop_gradient(y2_hat), name="term3"),
    )
    beta = 0.25 * alpha_s
    return LossGraph(g, _weighted_total(g, terms, alpha_s, beta), terms, "y1", alpha_s, beta)


def image_bindings(params: jm.ModelParams, X: np.ndarray) -> dict[str, np.ndarray]:
    b = dict(params.named())
    b["x"] = np.asarray(X, dtype=np.float64).reshape(-1, params.config.pixels)
    return b


def feature_bindings(params: jm.ModelParams, Y1: np.ndarray) -> dict[str, np.ndarray]:
    b = dict(params.named())
    b["y1"] = np.asarray(Y1, dtype=np.float64).reshape(-1, params.config.d)
    return b


def _run(lg: LossGraph, params, bindings, rng) -> tuple[LossBreakdown, np.ndarray]:
    forward_eval(lg.graph, bindings, rng)
    grads = backward(lg.graph, lg.total)
    return lg.breakdown(), jm.grads_to_flat(grads, params.config)


def image_loss(
    params: jm.ModelParams,
    X: np.ndarray,
    channel: ChannelConfig,
    alpha_c: float = 1.0,
    rng: np.random.Generator | None = None,
    const: Constellation | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss and flat gradient for one image ``(C,H,W)`` or a batch (mean over images)."""
    const = const or Constellation.qam(params.config.M)
    lg = build_image_loss_graph(params.config, const, channel, alpha_c)
    return _run(lg, params, image_bindings(params, X), rng)


def feature_loss(
    params: jm.ModelParams,
    Y1: np.ndarray,
    channel: ChannelConfig,
    alpha_s: float = 1.0,
    rng: np.random.Generator | None = None,
    const: Constellation | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """FR loss and flat gradient for one feature matrix ``(N,d)`` or a batch."""
    const = const or Constellation.qam(params.config.M)
    lg = build_feature_loss_graph(params.config, const, channel, alpha_s)
    return _run(lg, params, feature_bindings(params, Y1), rng)


def term_gradients(lg: LossGraph, params: jm.ModelParams, bindings, rng_state=None) -> list[np.ndarray]:
    """Unweighted flat gradient of each of the three terms (same noise replayed)."""
    out = []
    for term in lg.terms:
        rng = None
        if rng_state is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = rng_state
        forward_eval(lg.graph, bindings, rng)
        out.append(jm.grads_to_flat(backward(lg.graph, term), params.config))
    return out


def psnr(X: np.ndarray, X_hat: np.ndarray, peak: float = 1.0) -> float:
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {X_hat.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((X - X_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse)
