"""Discrete-depth forward propagation.

Implements the identity-ResNet recursion with depth-scaled random
parameters, the generic shallow residual block, and the i.i.d. feedforward
edge-of-chaos baseline. All samplers are chunked over draws with one noise
stream per (chunk, layer), so results are reproducible and independent of
how work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activations import Activation
from .config import ModelConfig, SeedSpec, make_rng
from .errors import ConfigError, SolverError
from .laws import FullyIidLaw, ParamIncrement, sample_eps, scale_eps

# Draws are processed in fixed-size chunks; the chunk index is the
# replicate component of the noise stream id, so the constant is part of
# the reproducibility contract.
DRAW_CHUNK = 256


@dataclass(frozen=True)
class PathBatch:
    """Monte Carlo trajectories for N inputs over a shared time grid.

    ``states`` has shape (n_draws, n_inputs, n_stored, D) where the stored
    time points are ``times``. ``diverged`` flags (draw, input) pairs whose
    trajectory hit a non-finite value or the explosion cap; their states
    are frozen at the last finite value.
    """

    times: np.ndarray
    states: np.ndarray
    diverged: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.states.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.states[:, :, 0, :]

    @property
    def xT(self) -> np.ndarray:
        return self.states[:, :, -1, :]

    @property
    def explosive_fraction(self) -> float:
        return float(self.diverged.any(axis=1).mean())


@dataclass(frozen=True)
class FeedforwardConfig:
    """Plain feedforward net with i.i.d. Gaussian parameters per layer."""

    depth: int
    width: int
    sigma_w2: float
    sigma_b2: float
    activation: Activation

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ConfigError("depth and width must be >= 1")
        if self.sigma_w2 < 0 or self.sigma_b2 < 0:
            raise ConfigError("variances must be nonnegative")


def shallow_block_step(phi: Activation, psi: Activation, A: np.ndarray,
                       a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One residual block: x + phi(A psi(x) + a), activations element-wise."""
    A = np.asarray(A, dtype=float)
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    return x + phi(A @ psi(x) + a)


def _store_plan(L: int, store_stride: int | None):
    """Indices of the stored time steps (always includes 0 and L)."""
    if store_stride is None:
        idx = [0, L] if L > 0 else [0]
    else:
        if store_stride < 1:
            raise ConfigError("store_stride must be >= 1")
        idx = list(range(0, L, store_stride)) + [L]
    return np.unique(np.asarray(idx, dtype=int))


def _freeze_diverged(x_new, x_old, diverged, cap=None):
    """Flag rows that went non-finite (or over the cap) and freeze them."""
    bad = ~np.isfinite(x_new).all(axis=-1)
    if cap is not None:
        with np.errstate(over="ignore", invalid="ignore"):
            bad |= np.linalg.norm(np.nan_to_num(x_new, nan=np.inf,
                                                posinf=np.inf,
                                                neginf=-np.inf),
                                  axis=-1) > cap
    diverged = diverged | bad
    # flagged rows keep their last finite value
    out = np.where(diverged[..., None], x_old, x_new)
    return out, diverged


def _batched_psd_factor(G: np.ndarray) -> np.ndarray:
    """Symmetric PSD square roots of a batch of Gram matrices."""
    w, Q = np.linalg.eigh(G)
    w = np.clip(w, 0.0, None)
    return (Q * np.sqrt(w)[..., None, :]) @ np.swapaxes(Q, -1, -2)


def resnet_forward(config: ModelConfig, x0_batch: np.ndarray, n_draws: int,
                   seed: SeedSpec, store_stride: int | None = None,
                   noise: str = "auto",
                   increments: list[ParamIncrement] | None = None) -> PathBatch:
    """Propagate N inputs jointly through the residual recursion.

    Within a draw one shared parameter sequence drives all inputs, which is
    what couples their trajectories. ``noise`` selects the sampler:

    * ``"materialized"`` draws the full weight/bias increments;
    * ``"projected"`` (fully i.i.d. law only) draws the pre-activations
      directly from their exact joint Gaussian law given the states, which
      is much cheaper at large width with few inputs;
    * ``"auto"`` picks ``projected`` when it is valid and cheaper.

    Both samplers produce the same trajectory law; they consume different
    random streams.
    """
    x0_batch = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    N, D = x0_batch.shape
    if D != config.width:
        raise ConfigError(f"x0 rows have length {D}, model width is {config.width}")
    if n_draws < 1:
        raise ConfigError("n_draws must be >= 1")
    L = config.depth
    dt = config.dt
    law = config.law
    phi, psi = config.phi, config.psi

    if increments is not None:
        if len(increments) != L:
            raise ConfigError(f"need {L} increments, got {len(increments)}")
        mode = "forced"
    elif noise == "auto":
        mode = "projected" if (isinstance(law, FullyIidLaw)
                               and N * N <= D) else "materialized"
    elif noise in ("materialized", "projected"):
        if noise == "projected" and not isinstance(law, FullyIidLaw):
            raise ConfigError("projected noise requires the fully i.i.d. law")
        mode = noise
    else:
        raise ConfigError(f"unknown noise mode {noise!r}")

    keep = _store_plan(L, store_stride)
    states = np.empty((n_draws, N, keep.size, D))
    diverged = np.zeros((n_draws, N), dtype=bool)
    sqdt = np.sqrt(dt)

    for start in range(0, n_draws, DRAW_CHUNK):
        stop = min(start + DRAW_CHUNK, n_draws)
        chunk = stop - start
        rep = start // DRAW_CHUNK
        x = np.broadcast_to(x0_batch, (chunk, N, D)).copy()
        div = np.zeros((chunk, N), dtype=bool)
        kpos = 0
        if keep[0] == 0:
            states[start:stop, :, 0, :] = x
            kpos = 1
        for l in range(L):
            if mode == "forced":
                inc = increments[l]
                h = np.einsum("de,cne->cnd", inc.dW, psi(x)) + inc.db
            elif mode == "materialized":
                rng = make_rng(seed.with_stream(replicate=rep, layer=l))
                epsW, epsb = sample_eps(law, rng, chunk)
                sW, sb = scale_eps(law, epsW, epsb)
                dW = law.mean_W * dt + sW * sqdt
                db = law.mean_b * dt + sb * sqdt
                h = psi(x) @ np.swapaxes(dW, 1, 2) + db[:, None, :]
            else:  # projected
                rng = make_rng(seed.with_stream(replicate=rep, layer=l))
                z = rng.standard_normal((chunk, D, N + 1))
                px = psi(x)
                G = px @ np.swapaxes(px, 1, 2)
                F = _batched_psd_factor(G)
                hw = z[:, :, :N] @ F  # F symmetric
                pre = (law.sigma_w / np.sqrt(D)) * hw \
                    + law.sigma_b * z[:, :, N:]
                h = sqdt * np.swapaxes(pre, 1, 2)
            with np.errstate(over="ignore", invalid="ignore"):
                x_new = x + phi(h)
            x, div = _freeze_diverged(x_new, x, div)
            if kpos < keep.size and keep[kpos] == l + 1:
                states[start:stop, :, kpos, :] = x
                kpos += 1
        diverged[start:stop] = div

    times = keep * dt
    return PathBatch(times=times, states=states, diverged=diverged)


def feedforward_forward(cfg: FeedforwardConfig, x0_batch: np.ndarray,
                        n_draws: int, seed: SeedSpec,
                        noise: str = "auto") -> PathBatch:
    """Propagate inputs through the i.i.d. feedforward baseline.

    Recursion x_{l+1} = phi(A_l x_l + a_l) with A entries
    N(0, sigma_w2/width) and a entries N(0, sigma_b2); parameters are
    shared across the batch within a draw. The stored final state is the
    last layer's pre-activation A_L x_{L-1} + a_L (the quantity whose
    depth-correlation structure the critical initialization preserves);
    only the input and that final layer are stored.
    """
    x0_batch = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    N, D = x0_batch.shape
    if D != cfg.width:
        raise ConfigError(f"x0 rows have length {D}, width is {cfg.width}")
    L = cfg.depth
    phi = cfg.activation
    sw = np.sqrt(cfg.sigma_w2 / D)
    sb = np.sqrt(cfg.sigma_b2)

    if noise == "auto":
        mode = "projected" if N * N <= D else "materialized"
    elif noise in ("materialized", "projected"):
        mode = noise
    else:
        raise ConfigError(f"unknown noise mode {noise!r}")

    states = np.empty((n_draws, N, 2, D))
    diverged = np.zeros((n_draws, N), dtype=bool)

    for start in range(0, n_draws, DRAW_CHUNK):
        stop = min(start + DRAW_CHUNK, n_draws)
        chunk = stop - start
        rep = start // DRAW_CHUNK
        x = np.broadcast_to(x0_batch, (chunk, N, D)).copy()
        div = np.zeros((chunk, N), dtype=bool)
        states[start:stop, :, 0, :] = x
        hlast = np.zeros_like(x)
        for l in range(L):
            rng = make_rng(seed.with_stream(replicate=rep, layer=l))
            if mode == "materialized":
                A = sw * rng.standard_normal((chunk, D, D))
                a = sb * rng.standard_normal((chunk, D))
                h = x @ np.swapaxes(A, 1, 2) + a[:, None, :]
            else:
                z = rng.standard_normal((chunk, D, N + 1))
                G = x @ np.swapaxes(x, 1, 2)
                F = _batched_psd_factor(G)
                hw = z[:, :, :N] @ F  # F symmetric
                h = np.swapaxes(sw * hw + sb * z[:, :, N:], 1, 2)
            with np.errstate(over="ignore", invalid="ignore"):
                x_new = phi(h)
            x, div = _freeze_diverged(x_new, x, div)
            hlast = np.where(div[..., None], hlast, h)
        states[start:stop, :, 1, :] = hlast
        diverged[start:stop] = div

    times = np.array([0.0, float(L)])
    return PathBatch(times=times, states=states, diverged=diverged)


def _expect_phi2(activation: Activation, q: float) -> float:
    """E[phi(sqrt(q) Z)^2] for standard normal Z."""
    if activation.name == "relu":
        return 0.5 * q
    x, w = np.polynomial.hermite.hermgauss(64)
    vals = activation(np.sqrt(2.0 * q) * x) ** 2
    return float((w * vals).sum() / np.sqrt(np.pi))


def _expect_dphi2(activation: Activation, q: float) -> float:
    """E[phi'(sqrt(q) Z)^2] for standard normal Z."""
    if activation.name == "relu":
        # phi' is an indicator; quadrature of a step function is poor, and
        # the half-Gaussian value is exact.
        return 0.5
    if activation.name != "tanh":
        raise ConfigError("eoc_solve supports tanh and relu only")
    x, w = np.polynomial.hermite.hermgauss(64)
    vals = (1.0 - np.tanh(np.sqrt(2.0 * q) * x) ** 2) ** 2
    return float((w * vals).sum() / np.sqrt(np.pi))


def _variance_fixed_point(activation: Activation, sigma_w2: float,
                          sigma_b2: float) -> float:
    """Fixed point of q -> sigma_b2 + sigma_w2 * E[phi(sqrt(q) Z)^2]."""
    def g(q):
        return sigma_b2 + sigma_w2 * _expect_phi2(activation, q) - q

    lo, hi = 0.0, max(1.0, sigma_b2 + sigma_w2)
    g_lo = g(lo)
    if g_lo <= 0.0:
        return lo
    while g(hi) > 0.0:
        hi *= 2.0
        if hi > 1e8:
            raise SolverError("variance map has no fixed point below 1e8")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def eoc_solve(activation: Activation, sigma_b2: float) -> float:
    """Weight variance putting the network on the edge of chaos.

    Returns sigma_w2 such that chi = sigma_w2 * E[phi'(sqrt(q*) Z)^2] = 1
    at the fixed point q* of the layer-to-layer variance map.
    """
    if activation.name not in ("tanh", "relu"):
        raise ConfigError("eoc_solve supports tanh and relu only")
    if sigma_b2 < 0:
        raise ConfigError("sigma_b2 must be nonnegative")

    def chi(sigma_w2):
        q = _variance_fixed_point(activation, sigma_w2, sigma_b2)
        return sigma_w2 * _expect_dphi2(activation, q)

    lo = 1e-4
    if chi(lo) > 1.0:
        raise SolverError("no edge-of-chaos root in [1e-4, 1e4]")
    # grow the bracket from a moderate start; quadrature degrades for very
    # large fixed-point variances, so the cap doubles up instead of probing
    # 1e4 directly
    hi = 1.0
    while chi(hi) < 1.0:
        hi *= 2.0
        if hi > 1e4:
            raise SolverError("no edge-of-chaos root in [1e-4, 1e4]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = chi(mid)
        if abs(c - 1.0) <= 1e-10:
            return mid
        if c < 1.0:
            lo = mid
        else:
            hi = mid
    raise SolverError("edge-of-chaos bisection did not reach |chi - 1| <= 1e-10")
