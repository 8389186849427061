"""Round orchestration: sampling, local training, uplink, aggregation, FR refinement.

One global iteration in ``fedsfr`` mode:

1. every participant runs ``E_c`` SGD steps on the image loss;
2. good-channel clients (A_m) upload ``Compress(g_k)`` and keep ``g_k - g_bar_k``
   as error memory; poor-channel clients (A_o) upload 4-bit features of public
   images encoded with their updated encoder;
3. the server aggregates ``w - K/K_m * sum_{A_m} p_k g_bar_k``;
4. the server runs ``E_s`` SGD steps of the FR loss on the received features;
5. the refined model is broadcast and A_o memories are cleared.

``baseline`` mode skips 4 and lets A_o clients upload compressed updates
(at the A_o sparsity) like everyone else.

All randomness comes from streams keyed by ``(seed, purpose, round, client)``,
so concurrent client execution gives the same bits as sequential execution.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as jm
from .analysis import assumption1_ratio
from .channel import ChannelConfig, Constellation, transmit
from .compression import compress, uniform_scalar_dequantize, uniform_scalar_quantize
from .config import ExperimentConfig
from .data import Dataset, generate_synthetic, mark_public, partition
from .losses import feature_loss, image_loss, psnr
from .privacy import (
    FEATURE_UPLOAD,
    MODEL_UPLOAD,
    epsilon_budget,
    privatize_encoder,
    privatize_update_with_residual,
)

# stream purposes
_SAMPLE, _CLIENT, _UPLINK, _FEATURES, _SERVER, _EVAL, _PROBE = range(1, 8)


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def lr_at(eta0: float, t: int, decay: float = 0.9, interval: int = 10) -> float:
    return eta0 * decay ** (t // interval)


def convergence_schedule(alpha_t: float, T: int) -> tuple[float, float]:
    """Client / server rates ``alpha/sqrt(T)`` and ``alpha/T**0.75`` of the convergence result."""
    return alpha_t / math.sqrt(T), alpha_t / T**0.75


@dataclass
class ClientState:
    id: int
    data: Dataset
    public: np.ndarray
    memory: np.ndarray
    weight: float


@dataclass(frozen=True)
class RoundPlan:
    A_m: tuple[int, ...]
    A_o: tuple[int, ...]
    scores: dict

    @property
    def participants(self) -> tuple[int, ...]:
        return tuple(sorted(self.A_m + self.A_o))


@dataclass
class Environment:
    """Read-only pieces shared by every round."""

    config: ExperimentConfig
    layers: jm.LayerMap
    const: Constellation
    channel: ChannelConfig
    eval_images: np.ndarray
    probe_images: np.ndarray


@dataclass
class RoundState:
    t: int
    model: jm.ModelParams
    clients: list[ClientState]
    eta_c: float
    eta_s: float
    env: Environment
    metrics: list[dict] = field(default_factory=list)
    g_hat: float = 0.0
    eps_history: list[float] = field(default_factory=list)


def sample_clients(K: int, K_m: int, K_o: int, rng: np.random.Generator) -> RoundPlan:
    """Uniform participants without replacement; the ``K_m`` best channel scores form A_m."""
    if K_m + K_o > K:
        raise ValueError("K_m + K_o exceeds K")
    chosen = rng.choice(K, size=K_m + K_o, replace=False)
    scores = rng.uniform(size=K_m + K_o)
    order = np.argsort(-scores, kind="stable")
    A_m = tuple(sorted(int(c) for c in chosen[order[:K_m]]))
    A_o = tuple(sorted(int(c) for c in chosen[order[K_m:]]))
    return RoundPlan(A_m, A_o, {int(c): float(s) for c, s in zip(chosen, scores)})


@dataclass
class LocalResult:
    model: jm.ModelParams
    g: np.ndarray
    loss: float
    max_grad_norm: float


def local_train(
    client: ClientState,
    w_global: jm.ModelParams,
    E_c: int,
    eta_c: float,
    batch_size: int,
    channel: ChannelConfig,
    rng: np.random.Generator,
    alpha_c: float = 1.0,
    const: Constellation | None = None,
) -> LocalResult:
    """``E_c`` mini-batch SGD steps; ``g = m + eta * sum of batch gradients``."""
    n = len(client.data)
    if n == 0 or batch_size > n:
        raise ValueError(f"client {client.id}: batch size {batch_size} exceeds dataset size {n}")
    const = const or Constellation.qam(w_global.config.M)
    w, _ = jm.flatten(w_global)
    acc = np.zeros_like(w)
    losses, gmax = [], 0.0
    for _ in range(E_c):
        idx = rng.choice(n, size=batch_size, replace=False)
        params = jm.unflatten(w, w_global.config)
        br, grad = image_loss(params, client.data.images[idx], channel, alpha_c, rng, const)
        acc += grad
        w = w - eta_c * grad
        losses.append(br.total)
        gmax = max(gmax, float(np.linalg.norm(grad)))
    g = client.memory + eta_c * acc
    w_local = jm.unflatten(w, w_global.config) if E_c else w_global
    return LocalResult(w_local, g, float(np.mean(losses)) if losses else float("nan"), gmax)


@dataclass
class FeatureSet:
    levels: np.ndarray  # (count, N, d) integer levels
    lo: np.ndarray
    hi: np.ndarray
    bits: int

    def dequantized(self) -> np.ndarray:
        return np.stack(
            [uniform_scalar_dequantize(l, a, b, self.bits) for l, a, b in zip(self.levels, self.lo, self.hi)]
        ) if len(self.levels) else np.zeros((0,) + self.levels.shape[1:])


def extract_features(
    client: ClientState, encoder_params: jm.ModelParams, count: int, bits: int, rng: np.random.Generator
) -> FeatureSet:
    """Encode ``count`` public images (drawn without replacement) and quantize each feature matrix."""
    if count > len(client.public):
        raise ValueError(f"client {client.id}: {count} features requested, public set has {len(client.public)}")
    pick = np.sort(rng.choice(client.public, size=count, replace=False))
    Y = jm.encode(encoder_params, client.data.images[pick])
    levels, lo, hi = [], [], []
    for y in Y:
        q, a, b = uniform_scalar_quantize(y, bits)
        levels.append(q)
        lo.append(a)
        hi.append(b)
    return FeatureSet(np.array(levels), np.array(lo), np.array(hi), bits)


def aggregation_weights(scheme: str, sizes, losses=None) -> np.ndarray:
    """FedAvg size weights, FedDMA softmax of min-max losses, or FedLol inverse-loss weights."""
    if scheme == "fedavg":
        sizes = np.asarray(sizes, dtype=np.float64)
        return sizes / sizes.sum()
    losses = np.asarray(losses, dtype=np.float64)
    K = len(losses)
    if scheme == "feddma":
        span = losses.max() - losses.min()
        norm = np.zeros(K) if span == 0 else (losses - losses.min()) / span
        e = np.exp(norm - norm.max())
        return e / e.sum()
    if scheme == "fedlol":
        if K == 1:
            return np.ones(1)
        total = losses.sum()
        return (total - losses) / total / (K - 1)
    raise ValueError(f"unknown weighting scheme {scheme!r}")


def aggregate(w: jm.ModelParams, updates: dict, weights: dict, K: int, K_m: int) -> jm.ModelParams:
    """``w - K/K_m * sum_k p_k g_bar_k`` over the uploading clients (dense ``g_bar``)."""
    if K_m < 1 or not updates:
        raise ValueError("aggregation needs at least one uploaded update")
    flat, _ = jm.flatten(w)
    step = np.zeros_like(flat)
    for k in sorted(updates):
        step += weights[k] * updates[k]
    return jm.unflatten(flat - (K / K_m) * step, w.config)


def server_refine(
    w_half: jm.ModelParams,
    features: np.ndarray,
    E_s: int,
    eta_s: float,
    batch_size: int,
    channel: ChannelConfig,
    rng: np.random.Generator,
    alpha_s: float = 1.0,
    const: Constellation | None = None,
) -> jm.ModelParams:
    """``E_s`` mini-batch SGD steps of the FR loss on the server feature set."""
    if E_s == 0 or eta_s == 0 or len(features) == 0:
        return w_half
    const = const or Constellation.qam(w_half.config.M)
    w, _ = jm.flatten(w_half)
    n = len(features)
    for _ in range(E_s):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        _, grad = feature_loss(jm.unflatten(w, w_half.config), features[idx], channel, alpha_s, rng, const)
        w = w - eta_s * grad
    return jm.unflatten(w, w_half.config)


def evaluate(params: jm.ModelParams, images: np.ndarray, env: Environment) -> tuple[float, float]:
    """Mean per-image PSNR and pixel MSE through the noisy link (fixed noise stream)."""
    rng = stream(env.config.seed, _EVAL)
    Y = jm.encode(params, images)
    cfg = params.config
    Y_hat, _, _ = transmit(params.codebook, env.const, Y.reshape(-1, cfg.d), env.channel, rng)
    X_hat = jm.decode(params, Y_hat.reshape(Y.shape))
    scores = [psnr(x, xh) for x, xh in zip(images, X_hat)]
    return float(np.mean(scores)), float(np.mean((images - X_hat) ** 2))


def probe_grad_norm_sq(params: jm.ModelParams, env: Environment) -> float:
    cfg = env.config
    _, grad = image_loss(params, env.probe_images, env.channel, cfg.alpha_c, stream(cfg.seed, _PROBE), env.const)
    return float(grad @ grad)


def build_environment(config: ExperimentConfig) -> tuple[Environment, list[ClientState], jm.ModelParams]:
    dspec = config.data
    train = generate_synthetic(dspec.n_train, config.model.image_shape, dspec.kind, config.seed)
    held_out = generate_synthetic(config.eval_count, config.model.image_shape, dspec.kind, config.seed + 7919)
    parts = partition(train, config.K, dspec.partition, config.seed)
    sizes = [len(p) for p in parts]
    weights = aggregation_weights("fedavg", sizes)
    layers = jm.layer_map(config.model)
    clients = [
        ClientState(k, part, mark_public(part, dspec.public_fraction, config.seed * 1009 + k), np.zeros(layers.D), float(weights[k]))
        for k, part in enumerate(parts)
    ]
    probe_idx = stream(config.seed, _PROBE, 1).choice(len(train), size=min(64, len(train)), replace=False)
    env = Environment(
        config,
        layers,
        Constellation.qam(config.model.M),
        ChannelConfig(config.snr_db),
        held_out.images,
        train.images[np.sort(probe_idx)],
    )
    return env, clients, jm.init_model(config.model, config.seed)


def initial_state(config: ExperimentConfig) -> RoundState:
    env, clients, w0 = build_environment(config)
    state = RoundState(0, w0, clients, lr_at(config.eta_c0, 0), lr_at(config.eta_s0, 0), env)
    p, _ = evaluate(w0, env.eval_images, env)
    state.metrics.append(_metric_row(0, p, None, None, None, None, None, state, config, probe_grad_norm_sq(w0, env)))
    return state


def _metric_row(t, p, loss, improved, ratio, nu, eps, state, cfg, gns, extra=None) -> dict:
    mem = [float(c.memory @ c.memory) for c in state.clients]
    row = {
        "t": t,
        "psnr_db": p,
        "loss_mean": loss,
        "fr_improved": improved,
        "eps_ratio_assumption1": ratio,
        "nu_hat": nu,
        "eps_cumulative": eps,
        "eta_c": lr_at(cfg.eta_c0, max(t - 1, 0), cfg.decay_factor, cfg.decay_interval) if t else None,
        "eta_s": lr_at(cfg.eta_s0, max(t - 1, 0), cfg.decay_factor, cfg.decay_interval) if t else None,
        "grad_norm_sq": gns,
        "mem_sq_mean": float(np.mean(mem)),
        "mem_sq_max": float(np.max(mem)),
        "g_hat": state.g_hat,
    }
    row.update(extra or {})
    return row


def _uplink_epsilons(cfg: ExperimentConfig, D: int) -> tuple[float | None, float | None]:
    if not cfg.dp.enabled:
        return None, None
    dp = cfg.dp
    eps_m = epsilon_budget(MODEL_UPLOAD, cfg.frac_m * D, dp.clip_Q, D, dp.sigma1, dp.sigma2)
    if cfg.mode == "fedsfr":
        eps_o = epsilon_budget(FEATURE_UPLOAD, cfg.frac_o * D, dp.clip_Q, D, dp.sigma1, dp.sigma2)
    else:
        eps_o = epsilon_budget(MODEL_UPLOAD, cfg.frac_o * D, dp.clip_Q, D, dp.sigma1, dp.sigma2)
    return eps_m, eps_o


def run_round(state: RoundState, config: ExperimentConfig | None = None, workers: int = 1) -> RoundState:
    """Execute global iteration ``state.t`` and return the next state (input is not mutated)."""
    cfg = config or state.env.config
    env = state.env
    t = state.t
    eta_c = lr_at(cfg.eta_c0, t, cfg.decay_factor, cfg.decay_interval)
    eta_s = lr_at(cfg.eta_s0, t, cfg.decay_factor, cfg.decay_interval)
    w = state.model
    lm = env.layers
    plan = sample_clients(cfg.K, cfg.K_m, cfg.K_o, stream(cfg.seed, _SAMPLE, t))
    clients = {c.id: c for c in state.clients}

    def train(k):
        return k, local_train(
            clients[k], w, cfg.E_c, eta_c, cfg.batch_size, env.channel,
            stream(cfg.seed, _CLIENT, t, k), cfg.alpha_c, env.const,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(train, plan.participants))
    else:
        results = dict(map(train, plan.participants))

    fr_active = cfg.mode == "fedsfr"
    uploaders = plan.A_m if fr_active else plan.participants
    new_mem = {k: c.memory for k, c in clients.items()}
    pre_reset = {}
    g_bars, nus = {}, []
    for k in uploaders:
        g = results[k].g
        frac = cfg.frac_m if k in plan.A_m else cfg.frac_o
        rng = stream(cfg.seed, _UPLINK, t, k)
        if cfg.dp.enabled:
            noisy, residual = privatize_update_with_residual(g, lm, frac, cfg.dp, rng)
            g_bar = noisy.dense(lm)
            new_mem[k] = residual
        else:
            g_bar = compress(g, lm, frac, cfg.qsgd_bits, rng).dense(lm)
            new_mem[k] = g - g_bar
        g_bars[k] = g_bar
        gg = float(g @ g)
        if gg > 0:
            err = g - g_bar
            nus.append(1.0 - float(err @ err) / gg)

    feats = []
    if fr_active:
        n_theta = lm.prefix_length("enc.")
        for k in plan.A_o:
            res = results[k]
            if cfg.dp.enabled:
                g_theta = privatize_encoder(res.g[:n_theta], lm.sub("enc."), cfg.frac_o, cfg.dp, stream(cfg.seed, _UPLINK, t, k))
                flat_w, _ = jm.flatten(w)
                flat_w[:n_theta] -= g_theta
                enc_params = jm.unflatten(flat_w, w.config)
            else:
                enc_params = res.model
            fs = extract_features(clients[k], enc_params, cfg.feature_count, cfg.feature_bits, stream(cfg.seed, _FEATURES, t, k))
            feats.append(fs.dequantized())
            pre_reset[k] = res.g

    if cfg.scheme == "fedavg":
        weights = {k: clients[k].weight for k in uploaders}
    else:
        raw = aggregation_weights(cfg.scheme, None, [results[k].loss for k in uploaders])
        # convex combination after the K/|uploaders| factor
        weights = {k: float(p) * len(uploaders) / cfg.K for k, p in zip(uploaders, raw)}
    w_half = aggregate(w, g_bars, weights, cfg.K, len(uploaders))

    improved, fr_before, fr_after = None, None, None
    w_next = w_half
    if fr_active and feats and cfg.E_s > 0 and eta_s > 0:
        D_s = np.concatenate(feats)
        w_next = server_refine(w_half, D_s, cfg.E_s, eta_s, cfg.batch_size, env.channel,
                               stream(cfg.seed, _SERVER, t), cfg.alpha_s, env.const)
        _, fr_before = evaluate(w_half, env.eval_images, env)
        _, fr_after = evaluate(w_next, env.eval_images, env)
        improved = bool(fr_after < fr_before)
    for k in plan.A_o if fr_active else ():
        new_mem[k] = np.zeros(lm.D)

    # alignment of compression error with the server update
    a = np.zeros(lm.D)
    for k, c in clients.items():
        a += c.weight * pre_reset.get(k, new_mem[k])
    b = jm.flatten(w_half)[0] - jm.flatten(w_next)[0]
    ratio = assumption1_ratio(a, b) if (a @ a + b @ b) > 0 else None

    new_clients = [replace(c, memory=new_mem[c.id]) for c in state.clients]
    g_hat = max([state.g_hat] + [r.max_grad_norm for r in results.values()])
    eps_m, eps_o = _uplink_epsilons(cfg, lm.D)
    eps_hist = list(state.eps_history)
    if eps_m is not None:
        eps_hist.append(max(eps_m, eps_o if cfg.K_o else eps_m))
    nxt = RoundState(t + 1, w_next, new_clients, eta_c, eta_s, env, list(state.metrics), g_hat, eps_hist)
    p, _ = evaluate(w_next, env.eval_images, env)
    extra = {
        "eps_model_upload": eps_m,
        "eps_feature_upload": eps_o,
        "fr_mse_before": fr_before,
        "fr_mse_after": fr_after,
    }
    loss_mean = float(np.mean([r.loss for r in results.values()])) if cfg.E_c else None
    nxt.metrics.append(
        _metric_row(t + 1, p, loss_mean, improved, ratio, float(np.mean(nus)) if nus else None,
                    float(sum(eps_hist)) if eps_m is not None else None, nxt, cfg,
                    probe_grad_norm_sq(w_next, env), extra)
    )
    return nxt


def run_experiment(config: ExperimentConfig, workers: int = 1, progress=None) -> list[dict]:
    """``T`` rounds; returns ``T + 1`` metric rows (row 0 is the initial evaluation)."""
    state = initial_state(config)
    for _ in range(config.T):
        state = run_round(state, config, workers)
        if progress is not None:
            progress(state.metrics[-1])
    return state.metrics


def run_experiment_state(config: ExperimentConfig, workers: int = 1) -> RoundState:
    state = initial_state(config)
    for _ in range(config.T):
        state = run_round(state, config, workers)
    return state


def _ordered_fields(rows: list[dict]) -> list[str]:
    names: list[str] = []
    for r in rows:
        names.extend(k for k in r if k not in names)
    return names


def write_jsonl(rows: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def write_csv(rows: list[dict], path) -> None:
    names = _ordered_fields(rows)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names, restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
