"""Diffusion-based keypoint refinement.

Each correspondence ``(x1, x2)`` is a 4-vector.  Coordinates are first mapped
to ``[-1, 1]`` by centring on the image and dividing by half the longer image
side (one scale for both axes keeps isotropic pixel noise isotropic).  The
diffused variable is the offset from the initial match, in units of
``offset_scale``; the current coordinate estimate at step ``t`` is

    x_t = anchor + offset_scale * k_t / sqrt(abar_t)

so that ``x_0 = anchor + offset_scale * k_0``.  ``offset_scale`` is chosen
so that the noise level of the forward process at ``start_t`` equals the
observation noise of the matches.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .correspondence import Correspondences
from .errors import GeometryError, TrainingDivergenceError
from .geometry import CameraModel, Pose, essential_from_pose, fundamental_from_essential
from .metrics import LossWeights

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = "epivo-denoiser"
WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# Schedule and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.array(self.betas, dtype=float).reshape(-1)
        if b.size < 1 or np.any((b <= 0) | (b >= 1)):
            raise ValueError("betas must lie in (0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - b)])
        abar.setflags(write=False)
        object.__setattr__(self, "_abar", abar)

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if T < 1:
            raise ValueError("T must be >= 1")
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """``abar[t]`` for ``t = 0..T`` with ``abar[0] = 1``."""
        return self._abar

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def posterior_variance(self, t: int) -> float:
        """``beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t``."""
        ab = self._abar
        return float((1.0 - ab[t - 1]) / (1.0 - ab[t]) * self.betas[t - 1])

    def snr(self) -> np.ndarray:
        ab = self._abar[1:]
        return np.sqrt(ab / (1.0 - ab))

    def check_step(self, t: int, lo: int = 0):
        if not (lo <= t <= self.T) or int(t) != t:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NoiseSchedule":
        return cls(np.asarray(d["betas"], dtype=float))


@dataclass(frozen=True, eq=False)
class KeypointState:
    """``coords`` holds one row ``(x1, y1, x2, y2)`` per correspondence."""

    coords: np.ndarray
    t: int

    def __post_init__(self):
        k = np.array(self.coords, dtype=float).reshape(-1, 4)
        if k.shape[0] < 1:
            raise ValueError("state needs at least one correspondence")
        if not np.all(np.isfinite(k)):
            raise ValueError("state coordinates must be finite")
        if self.t < 0:
            raise ValueError("t must be >= 0")
        k.setflags(write=False)
        object.__setattr__(self, "coords", k)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.coords.ravel()


def image_scale(width: float, height: float) -> float:
    return 0.5 * max(width, height)


def to_unit(px, width: float, height: float) -> np.ndarray:
    """Pixel rows ``(u1, v1, u2, v2)`` to centred unit coordinates."""
    c = np.array([width, height, width, height]) / 2.0
    return (np.asarray(px, dtype=float) - c) / image_scale(width, height)


def from_unit(x, width: float, height: float) -> np.ndarray:
    c = np.array([width, height, width, height]) / 2.0
    return np.asarray(x, dtype=float) * image_scale(width, height) + c


def offset_scale_for(sigma_px: float, schedule: NoiseSchedule, start_t: int,
                     width: float, height: float) -> float:
    """Offset unit that makes forward noise at ``start_t`` equal ``sigma_px``."""
    if not sigma_px > 0:
        raise ValueError("sigma must be positive")
    schedule.check_step(start_t, 1)
    ab = schedule.alpha_bar[start_t]
    return sigma_px / image_scale(width, height) / np.sqrt((1.0 - ab) / ab)


@dataclass(frozen=True, eq=False)
class Conditioning:
    """Per-pair context for a denoiser."""

    anchor: np.ndarray  # (N, 4) initial coordinates, unit scale
    descriptor_distance: np.ndarray  # (N,)
    width: float
    height: float
    offset_scale: float
    schedule: NoiseSchedule
    context_f: np.ndarray | None = None  # pose-free pixel F fitted to the whole match set

    def current(self, state: KeypointState) -> np.ndarray:
        """Coordinate estimate (unit scale) implied by the state."""
        ab = self.schedule.alpha_bar[state.t]
        return self.anchor + self.offset_scale * state.coords / np.sqrt(ab)


class Denoiser(Protocol):
    def predict(self, state: KeypointState, cond: Conditioning) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Forward and reverse process
# ---------------------------------------------------------------------------


def forward_diffuse(k0: KeypointState, t: int, schedule: NoiseSchedule, seed):
    """``k_t = sqrt(abar_t) k_0 + sqrt(1 - abar_t) eps``; returns ``(state, eps)``."""
    schedule.check_step(t)
    eps = np.random.default_rng(seed).standard_normal(k0.coords.shape)
    ab = schedule.alpha_bar[t]
    return KeypointState(np.sqrt(ab) * k0.coords + np.sqrt(1.0 - ab) * eps, t), eps


def predict_x0(state: KeypointState, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar[state.t]
    return (state.coords - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def reverse_step(state: KeypointState, denoiser: Denoiser, schedule: NoiseSchedule,
                 cond: Conditioning | None = None, seed=None, stochastic: bool = True,
                 jitter: float = 0.0) -> KeypointState:
    """One DDPM posterior-mean update, plus ``sigma_t z`` for ``t > 1`` when stochastic.

    ``jitter`` adds extra zero-mean Gaussian perturbation of that std.
    """
    t = state.t
    if t < 1:
        raise ValueError("reverse_step needs t >= 1")
    schedule.check_step(t, 1)
    eps = np.asarray(denoiser.predict(state, cond), dtype=float)
    if eps.shape != state.coords.shape:
        raise ValueError(f"denoiser returned shape {eps.shape}, expected {state.coords.shape}")
    beta = schedule.beta(t)
    ab = schedule.alpha_bar[t]
    mean = (state.coords - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - beta)
    if (stochastic and t > 1) or jitter > 0:
        rng = np.random.default_rng(seed)
        if stochastic and t > 1:
            mean = mean + np.sqrt(schedule.posterior_variance(t)) * rng.standard_normal(mean.shape)
        if jitter > 0:
            mean = mean + jitter * rng.standard_normal(mean.shape)
    return KeypointState(mean, t - 1)


def context_fundamental(corr: Correspondences, cam: CameraModel) -> np.ndarray | None:
    """Pixel fundamental matrix fitted to the match set itself (no pose).

    Gives a per-pair denoiser the set-level epipolar context that a joint
    model would get from attending over all matches.  ``None`` when the set
    is too small or degenerate.
    """
    from .errors import DegenerateConfigurationError
    from .solvers import eight_point, sampson_refit

    if len(corr) < 8:
        return None
    x1, x2 = cam.normalize(corr.x1), cam.normalize(corr.x2)
    try:
        e = sampson_refit(x1, x2, eight_point(x1, x2).e).e
    except (DegenerateConfigurationError, np.linalg.LinAlgError):
        return None
    return fundamental_from_essential(e, cam)


def make_conditioning(corr: Correspondences, cam: CameraModel, schedule: NoiseSchedule,
                      offset_scale: float, context: bool = True) -> Conditioning:
    return Conditioning(to_unit(corr.stacked, cam.width, cam.height), corr.descriptor_distance,
                        cam.width, cam.height, offset_scale, schedule,
                        context_fundamental(corr, cam) if context else None)


def refine(noisy: Correspondences, denoiser: Denoiser, schedule: NoiseSchedule, start_t: int,
           seed, cam: CameraModel, sigma_px: float | None = None, stochastic: bool = True,
           jitter: float = 0.0) -> Correspondences:
    """Run the reverse process from ``start_t`` with the offset initialised at 0.

    ``sigma_px`` sets the offset unit; by default the denoiser's own
    ``sigma_px`` attribute (1 px if it has none).  Count, order and all
    per-pair metadata are preserved.
    """
    schedule.check_step(start_t)
    if len(noisy) == 0 or start_t == 0:
        return noisy
    sigma = sigma_px if sigma_px is not None else getattr(denoiser, "sigma_px", 1.0)
    scale = offset_scale_for(sigma, schedule, start_t, cam.width, cam.height)
    cond = make_conditioning(noisy, cam, schedule, scale,
                             context=getattr(denoiser, "uses_context", False))
    state = KeypointState(np.zeros((len(noisy), 4)), start_t)
    ss = np.random.SeedSequence(seed if seed is not None else 0)
    for child in ss.spawn(start_t):
        state = reverse_step(state, denoiser, schedule, cond, child, stochastic, jitter)
    px = from_unit(cond.anchor + scale * state.coords, cam.width, cam.height)
    return noisy.with_points(px[:, :2], px[:, 2:])


# ---------------------------------------------------------------------------
# Oracle denoiser
# ---------------------------------------------------------------------------


def _project_pairs(F, X):
    """Move ``x2`` onto ``F x1`` and then ``x1`` onto ``F^T x2'`` (pixels)."""
    h1 = np.column_stack([X[:, :2], np.ones(len(X))])
    l2 = h1 @ F.T
    n2 = l2[:, 0] ** 2 + l2[:, 1] ** 2
    ok = n2 > 0
    r2 = np.where(ok, (X[:, 2] * l2[:, 0] + X[:, 3] * l2[:, 1] + l2[:, 2]) / np.where(ok, n2, 1), 0)
    x2 = X[:, 2:] - r2[:, None] * l2[:, :2]
    l1 = np.column_stack([x2, np.ones(len(X))]) @ F
    n1 = l1[:, 0] ** 2 + l1[:, 1] ** 2
    ok &= n1 > 0
    r1 = np.where(ok, (X[:, 0] * l1[:, 0] + X[:, 1] * l1[:, 1] + l1[:, 2]) / np.where(ok, n1, 1), 0)
    x1 = X[:, :2] - r1[:, None] * l1[:, :2]
    out = np.hstack([x1, x2])
    out[~ok] = X[~ok]
    return out, ok


@dataclass(frozen=True, eq=False)
class GeometricOracleDenoiser:
    """Predicts the noise that would move the current estimate onto its
    epipolar lines under a known pose.  Test and supervision use only."""

    true_pose: Pose
    cam: CameraModel
    sigma_px: float = 1.0

    def __post_init__(self):
        try:
            F = fundamental_from_essential(essential_from_pose(self.true_pose), self.cam)
        except GeometryError as exc:
            raise ValueError(f"oracle needs a pose with nonzero translation: {exc}") from exc
        object.__setattr__(self, "_F", F)

    def predict(self, state: KeypointState, cond: Conditioning) -> np.ndarray:
        ab = cond.schedule.alpha_bar[state.t]
        if ab >= 1.0:
            return np.zeros_like(state.coords)
        cur = from_unit(cond.current(state), cond.width, cond.height)
        proj, _ = _project_pairs(self._F, cur)
        k0 = (to_unit(proj, cond.width, cond.height) - cond.anchor) / cond.offset_scale
        return (state.coords - np.sqrt(ab) * k0) / np.sqrt(1.0 - ab)


def geometric_oracle_denoiser(true_pose: Pose, cam: CameraModel,
                              sigma_px: float = 1.0) -> GeometricOracleDenoiser:
    return GeometricOracleDenoiser(true_pose, cam, sigma_px)


# ---------------------------------------------------------------------------
# Trainable denoiser
# ---------------------------------------------------------------------------

N_TIME_FREQ = 4
INPUT_DIM = 4 + 4 + 2 * N_TIME_FREQ + 1 + 4
HIDDEN = (64, 64)
OUTPUT_DIM = 4


def timestep_embedding(t, T: int) -> np.ndarray:
    s = np.atleast_1d(np.asarray(t, dtype=float)) / T
    f = np.pi * 2.0 ** np.arange(N_TIME_FREQ)
    return np.hstack([np.sin(s[:, None] * f), np.cos(s[:, None] * f)])


def epipolar_correction(F, X) -> np.ndarray:
    """First-order step moving pixel rows ``X`` onto ``x2^T F x1 = 0``.

    ``F`` is one matrix or one per row; zero where the gradient vanishes.
    """
    F = np.broadcast_to(F, (X.shape[0], 3, 3))
    h1 = np.column_stack([X[:, :2], np.ones(len(X))])
    h2 = np.column_stack([X[:, 2:], np.ones(len(X))])
    Fx1 = np.einsum("nij,nj->ni", F, h1)
    Ftx2 = np.einsum("nji,nj->ni", F, h2)
    r = (h2 * Fx1).sum(1)
    grad = np.hstack([Ftx2[:, :2], Fx1[:, :2]])
    g = (grad**2).sum(1)
    ok = g > 0
    return np.where(ok, -r / np.where(ok, g, 1.0), 0.0)[:, None] * grad


def context_feature(F, x_cur_unit, size, offset_scale) -> np.ndarray:
    """Epipolar correction of the current estimate, in offset units."""
    if F is None:
        return np.zeros_like(x_cur_unit)
    size = np.broadcast_to(size, (x_cur_unit.shape[0], 2))
    half = 0.5 * size.max(1, keepdims=True)
    px = x_cur_unit * half + np.hstack([size, size]) / 2
    return epipolar_correction(F, px) / half / offset_scale


def denoiser_inputs(x_cur, k, t, T, dist, ctx=None) -> np.ndarray:
    n = x_cur.shape[0]
    emb = timestep_embedding(np.broadcast_to(t, (n,)), T)
    ctx = np.zeros((n, 4)) if ctx is None else ctx
    return np.hstack([x_cur, k, emb, np.asarray(dist, dtype=float).reshape(n, 1), ctx])


def _layer_shapes():
    dims = (INPUT_DIM, *HIDDEN, OUTPUT_DIM)
    return [((dims[i], dims[i + 1]), (dims[i + 1],)) for i in range(len(dims) - 1)]


def n_params() -> int:
    return sum(a[0] * a[1] + b[0] for a, b in _layer_shapes())


def unflatten(theta):
    out, i = [], 0
    for ws, bs in _layer_shapes():
        W = theta[i:i + ws[0] * ws[1]].reshape(ws)
        i += W.size
        b = theta[i:i + bs[0]]
        i += b.size
        out.append((W, b))
    return out


def init_params(seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    parts = []
    for (fan_in, fan_out), _ in _layer_shapes():
        parts.append(rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in))
        parts.append(np.zeros(fan_out))
    theta = np.concatenate(parts)
    # start from the zero predictor
    W_last, b_last = unflatten(theta)[-1]
    W_last[:] = 0.0
    b_last[:] = 0.0
    return theta


def mlp_forward(theta, X):
    """Returns ``(output, cache)``; tanh hidden layers, linear output."""
    acts = [X]
    h = X
    layers = unflatten(theta)
    for li, (W, b) in enumerate(layers):
        z = h @ W + b
        h = z if li == len(layers) - 1 else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(theta, acts, g_out) -> np.ndarray:
    """Gradient of ``sum(g_out * output)`` with respect to the flat parameters."""
    layers = unflatten(theta)
    grads = []
    g = g_out
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        if li != len(layers) - 1:
            g = g * (1.0 - acts[li + 1] ** 2)
        grads.append((acts[li].T @ g, g.sum(0)))
        g = g @ W.T
    flat = []
    for gW, gb in reversed(grads):
        flat.extend([gW.ravel(), gb])
    return np.concatenate(flat)


def sampson_pixels_and_grad(F, X):
    """Sampson distance of pixel rows ``X`` under per-row ``F`` (``(n, 3, 3)``)
    and its gradient with respect to the four coordinates."""
    h1 = np.column_stack([X[:, :2], np.ones(len(X))])
    h2 = np.column_stack([X[:, 2:], np.ones(len(X))])
    Fx1 = np.einsum("nij,nj->ni", F, h1)
    Ftx2 = np.einsum("nji,nj->ni", F, h2)
    r = (h2 * Fx1).sum(1)
    g = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    g = np.maximum(g, 1e-300)
    d = r * r / g
    dr = np.hstack([Ftx2[:, :2], Fx1[:, :2]])
    dg1 = 2.0 * (Fx1[:, 0:1] * F[:, 0, :2] + Fx1[:, 1:2] * F[:, 1, :2])
    dg2 = 2.0 * (Ftx2[:, 0:1] * F[:, :2, 0] + Ftx2[:, 1:2] * F[:, :2, 1])
    dg = np.hstack([dg1, dg2])
    grad = (2.0 * r / g)[:, None] * dr - (r * r / (g * g))[:, None] * dg
    return d, grad


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    """Flattened training rows: one per correspondence."""

    anchor: np.ndarray  # (n, 4) unit coordinates of the noisy match
    target: np.ndarray  # (n, 4) unit coordinates of the pseudo ground truth
    dist: np.ndarray
    F: np.ndarray  # (n, 3, 3) pixel fundamental matrices
    size: np.ndarray  # (n, 2) width, height
    context_f: np.ndarray  # (n, 3, 3) pose-free estimates, zero when unavailable

    def __len__(self):
        return self.anchor.shape[0]

    def take(self, idx) -> "TrainingBatch":
        return TrainingBatch(self.anchor[idx], self.target[idx], self.dist[idx], self.F[idx],
                             self.size[idx], self.context_f[idx])


def batch_from_pairs(dataset) -> tuple[TrainingBatch, float]:
    """Stack labeled pairs; also returns the fitted isotropic pixel sigma."""
    from .sim import fit_isotropic_sigma

    keys = ("anchor", "target", "dist", "F", "size", "context_f")
    rows = {k: [] for k in keys}
    disp = []
    for p in dataset:
        cam = p.cam
        F = fundamental_from_essential(essential_from_pose(p.true_pose), cam)
        n = len(p.noisy)
        rows["anchor"].append(to_unit(p.noisy.stacked, cam.width, cam.height))
        rows["target"].append(to_unit(p.pseudo_gt.stacked, cam.width, cam.height))
        rows["dist"].append(p.noisy.descriptor_distance)
        rows["F"].append(np.broadcast_to(F, (n, 3, 3)))
        rows["size"].append(np.tile([cam.width, cam.height], (n, 1)))
        cf = context_fundamental(p.noisy, cam)
        rows["context_f"].append(np.broadcast_to(np.zeros((3, 3)) if cf is None else cf, (n, 3, 3)))
        disp.append(p.noisy.stacked - p.clean.stacked)
    b = TrainingBatch(*(np.concatenate(rows[k]).astype(float) for k in keys))
    sigma = fit_isotropic_sigma(np.concatenate(disp)) if disp else 0.0
    return b, sigma


def f2_loss_and_grad(theta, batch: TrainingBatch, t, eps, schedule: NoiseSchedule,
                     offset_scale, weights: LossWeights = LossWeights()):
    """``F2 = w1 L_samp + w2 L_ddpm + w3 L_rec`` and its parameter gradient.

    ``t`` and ``eps`` give the diffusion step and noise of every row.
    ``L_samp`` is the mean pixel Sampson distance of the reconstructed pair,
    ``L_ddpm`` the mean squared noise error and ``L_rec`` the mean squared
    reconstruction error (offset units) against the pseudo ground truth.
    """
    n = len(batch)
    ab = schedule.alpha_bar[t][:, None]
    k0 = (batch.target - batch.anchor) / offset_scale
    kt = np.sqrt(ab) * k0 + np.sqrt(1.0 - ab) * eps
    x_cur = batch.anchor + offset_scale * kt / np.sqrt(ab)
    ctx = context_feature(batch.context_f, x_cur, batch.size, offset_scale)
    X = denoiser_inputs(x_cur, kt, t, schedule.T, batch.dist, ctx)
    eps_hat, acts = mlp_forward(theta, X)
    k0_hat = (kt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    dk0_deps = -np.sqrt((1.0 - ab) / ab)

    r_eps = eps_hat - eps
    l_ddpm = float((r_eps**2).mean())
    g = weights.w2 * 2.0 * r_eps / r_eps.size

    r_rec = k0_hat - k0
    l_rec = float((r_rec**2).mean())
    g += weights.w3 * 2.0 * r_rec / r_rec.size * dk0_deps

    half = 0.5 * batch.size.max(1, keepdims=True)
    px = (batch.anchor + offset_scale * k0_hat) * half + np.hstack([batch.size, batch.size]) / 2
    d, gd = sampson_pixels_and_grad(batch.F, px)
    l_samp = float(d.mean())
    g += weights.w1 * (gd / n) * half * offset_scale * dk0_deps

    total = weights.w1 * l_samp + weights.w2 * l_ddpm + weights.w3 * l_rec
    parts = {"samp": l_samp, "ddpm": l_ddpm, "rec": l_rec}
    return total, parts, mlp_backward(theta, acts, g)


@dataclass(frozen=True, eq=False)
class MLPDenoiser:
    """Per-pair noise regressor: two tanh layers of width 64."""

    theta: np.ndarray
    schedule: NoiseSchedule
    sigma_px: float = 1.0
    start_t: int = 25
    uses_context = True

    def __post_init__(self):
        th = np.array(self.theta, dtype=float).reshape(-1)
        if th.size != n_params():
            raise ValueError(f"expected {n_params()} parameters, got {th.size}")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    def predict(self, state: KeypointState, cond: Conditioning) -> np.ndarray:
        cur = cond.current(state)
        ctx = context_feature(cond.context_f, cur, (cond.width, cond.height), cond.offset_scale)
        X = denoiser_inputs(cur, state.coords, state.t, self.schedule.T,
                            cond.descriptor_distance, ctx)
        return mlp_forward(self.theta, X)[0]

    # serialization: one JSON header line, then little-endian float64 parameters
    def to_bytes(self) -> bytes:
        header = {"format": WEIGHTS_MAGIC, "version": WEIGHTS_VERSION,
                  "architecture": {"input": INPUT_DIM, "hidden": list(HIDDEN),
                                   "output": OUTPUT_DIM, "activation": "tanh",
                                   "time_freq": N_TIME_FREQ},
                  "n_params": int(self.theta.size), "sigma_px": self.sigma_px,
                  "start_t": self.start_t, "schedule": self.schedule.to_dict()}
        return (json.dumps(header, sort_keys=True) + "\n").encode() + self.theta.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MLPDenoiser":
        nl = data.index(b"\n")
        header = json.loads(data[:nl].decode())
        if header.get("format") != WEIGHTS_MAGIC or header.get("version") != WEIGHTS_VERSION:
            raise ValueError("not a supported denoiser weights file")
        arch = header["architecture"]
        if (arch["input"], tuple(arch["hidden"]), arch["output"]) != (INPUT_DIM, HIDDEN, OUTPUT_DIM):
            raise ValueError(f"architecture mismatch: {arch}")
        theta = np.frombuffer(data[nl + 1:], dtype="<f8")
        if theta.size != header["n_params"]:
            raise ValueError("truncated weights file")
        return cls(theta.copy(), NoiseSchedule.from_dict(header["schedule"]),
                   float(header["sigma_px"]), int(header["start_t"]))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MLPDenoiser":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 2e-3
    weights: LossWeights = field(default_factory=LossWeights)
    start_t: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or not self.lr > 0:
            raise ValueError("batch_size and lr must be positive")


@dataclass(frozen=True, eq=False)
class TrainResult:
    denoiser: MLPDenoiser
    trace: np.ndarray  # mean F2 per epoch
    parts: list = field(repr=False)


def train_denoiser(dataset, schedule: NoiseSchedule,
                   config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit the regressor by Adam on the F2 objective.

    Steps are drawn uniformly from ``1..start_t`` (the range refinement
    visits).  Raises ``TrainingDivergenceError`` carrying the loss trace if
    the loss becomes non-finite.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training set is empty")
    schedule.check_step(config.start_t, 1)
    batch, sigma = batch_from_pairs(dataset)
    if len(batch) == 0:
        raise ValueError("training set has no correspondences")
    sigma = sigma if sigma > 0 else 1.0
    w, h = batch.size[0]
    scale = offset_scale_for(sigma, schedule, config.start_t, w, h)
    rng = np.random.default_rng([config.seed, 7])
    theta = init_params([config.seed, 8])
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = 0.9, 0.999
    step = 0
    trace, parts = [], []
    n = len(batch)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        tot, acc = 0.0, {"samp": 0.0, "ddpm": 0.0, "rec": 0.0}
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            sub = batch.take(idx)
            t = rng.integers(1, config.start_t + 1, idx.size)
            eps = rng.standard_normal((idx.size, 4))
            loss, p, grad = f2_loss_and_grad(theta, sub, t, eps, schedule, scale, config.weights)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                trace.append(float("nan"))
                raise TrainingDivergenceError(f"loss diverged in epoch {epoch}", np.array(trace))
            step += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad**2
            lr = config.lr * np.sqrt(1 - b2**step) / (1 - b1**step)
            theta = theta - lr * m / (np.sqrt(v) + 1e-8)
            tot += loss * idx.size
            for k in acc:
                acc[k] += p[k] * idx.size
        trace.append(tot / n)
        parts.append({k: v_ / n for k, v_ in acc.items()})
        log.debug("epoch %d F2 %.6g", epoch, trace[-1])
    den = MLPDenoiser(theta, schedule, sigma, config.start_t)
    return TrainResult(den, np.array(trace), parts)


def load_weights(path) -> MLPDenoiser:
    return MLPDenoiser.load(path)


def weights_header(data: bytes) -> dict:
    return json.loads(io.BytesIO(data).readline().decode())
