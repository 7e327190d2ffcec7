"""Noise schedule, forward corruption, training losses, and samplers.

The denoiser is any callable ``model(x, t, y) -> DenoiserOutput`` where
``x`` is (N,3,H,W) or (3,H,W), ``t`` is an int or an (N,) int array and
``y`` is the conditioning map (``None`` selects the null condition). The
samplers run pure-numpy update rules around graph-free model calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor, no_grad

__all__ = [
    "NoiseSchedule",
    "DenoiserOutput",
    "build_schedule",
    "q_sample",
    "diffusion_loss",
    "kl_loss",
    "combine_losses",
    "total_loss",
    "guided_eps",
    "p_sample_step",
    "ddpm_sample",
    "ddim_sample",
    "ddim_timesteps",
]


@dataclass
class NoiseSchedule:
    """Per-step and cumulative diffusion coefficients for T steps."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_var: np.ndarray
    # log of posterior_var with the t=0 entry replaced by the t=1 value so
    # the variance interpolation stays finite at the final denoising step
    posterior_log_var_clipped: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


@dataclass
class DenoiserOutput:
    """Predicted noise and per-pixel variance interpolation coefficient."""

    eps_hat: Tensor
    v_hat: Tensor


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    log_clipped = np.log(np.concatenate([[posterior_var[1] if T > 1 else beta[0]], posterior_var[1:]]))
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        posterior_var=posterior_var,
        posterior_log_var_clipped=log_clipped,
    )


def _per_sample(coef: np.ndarray, t, ndim: int) -> np.ndarray:
    """Index a schedule array at t and shape it to broadcast over samples."""
    vals = np.asarray(coef[t], dtype=np.float32)
    if vals.ndim == 0:
        return vals
    return vals.reshape(vals.shape + (1,) * (ndim - 1))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if x0.shape != eps.shape:
        raise T.ShapeMismatchError("q_sample", "x0 and eps differ", x0.shape, eps.shape)
    tarr = np.asarray(t)
    if np.any(tarr < 0) or np.any(tarr >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T}): {t}")
    batched = x0.ndim == 4
    a = _per_sample(np.sqrt(sched.alpha_bar), t, x0.ndim if batched else 1)
    b = _per_sample(np.sqrt(1.0 - sched.alpha_bar), t, x0.ndim if batched else 1)
    return (a * x0 + b * eps).astype(np.float32)


def _batch_l2_mean(diff: Tensor) -> Tensor:
    """Mean over the batch of per-sample L2 norms."""
    if diff.ndim == 4:
        per = T.sqrt(T.sum_(T.square(diff), axis=(1, 2, 3)))
        return T.mean(per)
    return T.sqrt(T.sum_(T.square(diff)))


def diffusion_loss(model, x0: np.ndarray, y, t, eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    """Noise-prediction loss: batch mean of per-sample ||eps - eps_hat||_2."""
    x_t = q_sample(x0, t, eps, sched)
    out = model(x_t, t, y)
    return _batch_l2_mean(out.eps_hat - Tensor(eps))


def _gaussian_kl(mu_p: Tensor, logvar_p: Tensor, mu_q, logvar_q) -> Tensor:
    """Elementwise KL( N(mu_p, var_p) || N(mu_q, var_q) )."""
    mu_q = mu_q if isinstance(mu_q, Tensor) else Tensor(mu_q)
    logvar_q = logvar_q if isinstance(logvar_q, Tensor) else Tensor(logvar_q)
    return (
        (logvar_q - logvar_p) * 0.5
        + (T.exp(logvar_p) + T.square(mu_p - mu_q)) * T.exp(-logvar_q) * 0.5
        - 0.5
    )


def _std_normal_cdf(z: Tensor) -> Tensor:
    return (T.erf(z * float(1.0 / np.sqrt(2.0))) + 1.0) * 0.5


def _model_mean_logvar(out: DenoiserOutput, x_t: np.ndarray, t, sched: NoiseSchedule, stop_eps: bool):
    nd = x_t.ndim
    beta_t = _per_sample(sched.beta, t, nd)
    sqrt_alpha_t = _per_sample(np.sqrt(sched.alpha), t, nd)
    sqrt_one_minus_abar = _per_sample(np.sqrt(1.0 - sched.alpha_bar), t, nd)
    eps_hat = out.eps_hat.detach() if stop_eps else out.eps_hat
    mu = (Tensor(x_t) - eps_hat * Tensor(beta_t / sqrt_one_minus_abar)) * Tensor(1.0 / sqrt_alpha_t)
    log_beta = _per_sample(np.log(sched.beta), t, nd)
    log_post = _per_sample(sched.posterior_log_var_clipped, t, nd)
    logvar = out.v_hat * Tensor(log_beta) + (1.0 - out.v_hat) * Tensor(log_post)
    return mu, logvar


def kl_loss(model_out: DenoiserOutput, x_t: np.ndarray, x0: np.ndarray, t, sched: NoiseSchedule) -> Tensor:
    """Variance-training term.

    For t >= 1: KL between the model transition (with a gradient-stopped
    predicted mean) and the forward-process posterior. For t = 0: negative
    discretized Gaussian log-likelihood of x0 on 2/255-wide pixel bins.
    Mixed batches are handled per sample.
    """
    x_t = np.asarray(x_t, dtype=np.float32)
    x0 = np.asarray(x0, dtype=np.float32)
    nd = x_t.ndim
    tarr = np.asarray(t)

    mu_p, logvar_p = _model_mean_logvar(model_out, x_t, t, sched, stop_eps=True)

    # true posterior q(x_{t-1} | x_t, x0)
    c0 = _per_sample(np.sqrt(sched.alpha_bar_prev) * sched.beta / (1.0 - sched.alpha_bar), t, nd)
    c1 = _per_sample(np.sqrt(sched.alpha) * (1.0 - sched.alpha_bar_prev) / (1.0 - sched.alpha_bar), t, nd)
    mu_q = c0 * x0 + c1 * x_t
    logvar_q = _per_sample(sched.posterior_log_var_clipped, t, nd)

    kl = _gaussian_kl(mu_p, logvar_p, mu_q, logvar_q)

    # t = 0: discretized decoder likelihood on [-1, 1] pixel bins
    inv_std = T.exp(logvar_p * -0.5)
    centered = mu_p * -1.0 + Tensor(x0)
    half_bin = 1.0 / 255.0
    upper = _std_normal_cdf((centered + half_bin) * inv_std)
    lower = _std_normal_cdf((centered - half_bin) * inv_std)
    upper = Tensor(np.where(x0 >= 1.0 - 1e-6, 1.0, 0.0)) + upper * Tensor(np.where(x0 >= 1.0 - 1e-6, 0.0, 1.0))
    lower = lower * Tensor(np.where(x0 <= -1.0 + 1e-6, 0.0, 1.0))
    prob = T.clip(upper - lower, 1e-12, 1.0)
    nll = -T.log(prob)

    if tarr.ndim == 0:
        term = nll if int(tarr) == 0 else kl
        return T.mean(term)
    mask0 = (tarr == 0).astype(np.float32).reshape(-1, *([1] * (nd - 1)))
    term = Tensor(mask0) * nll + Tensor(1.0 - mask0) * kl
    return T.mean(term)


def combine_losses(l_diffusion: Tensor, l_kl: Tensor, lam: float) -> Tensor:
    """Weighted objective: diffusion term plus lam times the KL term."""
    if lam == 0.0:
        return l_diffusion
    return l_diffusion + l_kl * float(lam)


def total_loss(model, x0: np.ndarray, y, t, eps: np.ndarray, sched: NoiseSchedule, lam: float) -> Tensor:
    x_t = q_sample(x0, t, eps, sched)
    out = model(x_t, t, y)
    l_d = _batch_l2_mean(out.eps_hat - Tensor(eps))
    if lam == 0.0:
        return l_d
    l_kl = kl_loss(out, x_t, x0, t, sched)
    return combine_losses(l_d, l_kl, lam)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _null_like(y):
    if y is None:
        return None
    arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float32)
    return np.zeros_like(arr)


def guided_eps(model, x_t, t, y, scale: float) -> DenoiserOutput:
    """Classifier-free extrapolation of the noise prediction.

    eps = eps_null + scale * (eps_cond - eps_null); the variance output is
    taken from the conditioned pass. scale = 1 is the conditioned
    prediction; scale = 0 the unconditioned one.
    """
    if y is None or scale == 1.0:
        out = model(x_t, t, y)
        return DenoiserOutput(out.eps_hat.detach(), out.v_hat.detach())
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float32)
    yarr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
        yarr = yarr[None]
    n = x.shape[0]
    tarr = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    stacked_x = np.concatenate([x, x], axis=0)
    stacked_y = np.concatenate([yarr, np.zeros_like(yarr)], axis=0)
    stacked_t = np.concatenate([tarr, tarr], axis=0)
    out = model(stacked_x, stacked_t, stacked_y)
    ec = out.eps_hat.data[:n]
    eu = out.eps_hat.data[n:]
    vc = out.v_hat.data[:n]
    eps = eu + np.float32(scale) * (ec - eu)
    if single:
        eps, vc = eps[0], vc[0]
    return DenoiserOutput(Tensor(eps), Tensor(vc))


def p_sample_step(model, x_t, t: int, y, sched: NoiseSchedule, stream: RngStream, guidance: float = 1.0):
    """One ancestral reverse step; deterministic at t = 0."""
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float32)
    t = int(t)
    with no_grad():
        out = guided_eps(model, x, t, y, guidance)
    eps_hat = out.eps_hat.data
    v = out.v_hat.data
    mu = (x - np.float32(sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])) * eps_hat) * np.float32(
        1.0 / np.sqrt(sched.alpha[t])
    )
    if t == 0:
        return mu.astype(np.float32)
    logvar = v * np.float32(np.log(sched.beta[t])) + (1.0 - v) * np.float32(sched.posterior_log_var_clipped[t])
    z = stream.normal(x.shape)
    return (mu + np.exp(0.5 * logvar) * z).astype(np.float32)


def _image_shape(model, y):
    yarr = y.data if isinstance(y, Tensor) else np.asarray(y)
    channels = getattr(model, "in_channels", 3)
    if yarr.ndim == 4:
        return (yarr.shape[0], channels, yarr.shape[2], yarr.shape[3])
    return (channels, yarr.shape[1], yarr.shape[2])


def ddpm_sample(model, y, sched: NoiseSchedule, stream: RngStream, guidance_scale: float = 1.0) -> np.ndarray:
    """Full ancestral chain from pure noise down to a sample."""
    x = stream.normal(_image_shape(model, y))
    for t in range(sched.T - 1, -1, -1):
        x = p_sample_step(model, x, t, y, sched, stream, guidance_scale)
    return x


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced subsampled timesteps, ascending, endpoints included."""
    if steps > T:
        raise ValueError(f"ddim steps ({steps}) exceed schedule length ({T})")
    if steps == 1:
        return np.array([T - 1], dtype=np.int64)
    tau = np.unique(np.round(np.linspace(0, T - 1, steps)).astype(np.int64))
    if tau.size != steps:
        raise ValueError(f"could not place {steps} distinct timesteps in [0, {T})")
    return tau


def ddim_sample(
    model,
    y,
    sched: NoiseSchedule,
    steps: int,
    eta: float,
    stream: RngStream,
    guidance_scale: float = 1.0,
    tap_stride: int | None = None,
    clip_x0: bool = True,
    x_start: np.ndarray | None = None,
):
    """Subsampled reverse trajectory; deterministic when eta = 0.

    Returns (x0, taps) where taps holds (x_t, t) model inputs captured
    after every ``tap_stride`` model calls, counted from the noisy end.
    """
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    tau = ddim_timesteps(sched.T, steps)[::-1]  # descending
    x = stream.normal(_image_shape(model, y)) if x_start is None else np.asarray(x_start, dtype=np.float32)
    taps: list[tuple[np.ndarray, int]] = []
    for i, t in enumerate(tau):
        t = int(t)
        if tap_stride and (i + 1) % tap_stride == 0:
            taps.append((x.copy(), t))
        with no_grad():
            out = guided_eps(model, x, t, y, guidance_scale)
        eps_hat = out.eps_hat.data
        abar = np.float32(sched.alpha_bar[t])
        abar_prev = np.float32(sched.alpha_bar[tau[i + 1]]) if i + 1 < len(tau) else np.float32(1.0)
        x0_hat = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        if clip_x0:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
            eps_hat = (x - np.sqrt(abar) * x0_hat) / np.sqrt(1.0 - abar)
        sigma = np.float32(eta) * np.sqrt((1.0 - abar_prev) / (1.0 - abar)) * np.sqrt(1.0 - abar / abar_prev)
        direction = np.sqrt(np.maximum(1.0 - abar_prev - sigma**2, 0.0)) * eps_hat
        x = np.sqrt(abar_prev) * x0_hat + direction
        if eta > 0.0 and i + 1 < len(tau):
            x = x + sigma * stream.normal(x.shape)
        x = x.astype(np.float32)
    return x, taps
