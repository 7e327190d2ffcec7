"""Noise-aware full-precision training.

Every training sample's conditioning map passes through the channel at a
PSNR drawn uniformly from the configured range, and conditioning drops to
the null (all-zeros) map with the configured probability, so the model
both tolerates channel noise and supports classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .channel import SemanticMap, awgn, encode_map
from .config import RunConfig
from .denoiser import DenoiserNet
from .diffusion import NoiseSchedule, build_schedule, combine_losses, kl_loss, q_sample
from .optim import Adam
from .rng import RngStream
from .tensor import Tensor

__all__ = ["TrainResult", "train_fp"]


@dataclass
class TrainResult:
    model: DenoiserNet
    sched: NoiseSchedule
    loss_rows: list[dict]  # epoch, step, loss, loss_diffusion, loss_kl
    aborted_nan: bool


def _training_batch(pairs, idx, stream: RngStream, cfg: RunConfig, sched: NoiseSchedule):
    imgs = np.stack([pairs[i][1] for i in idx])
    n = imgs.shape[0]
    cls = cfg.dataset.classes
    h, w = imgs.shape[2], imgs.shape[3]
    y = np.empty((n, cls, h, w), dtype=np.float32)
    for j, i in enumerate(idx):
        clean = encode_map(pairs[i][0])
        psnr = float(stream.uniform(cfg.train.psnr_min, cfg.train.psnr_max, ()))
        y[j] = awgn(clean, psnr, stream).data
    drop = stream.uniform(0.0, 1.0, (n,)) < cfg.model.null_cond_prob
    y[drop] = 0.0
    t = stream.integers(0, sched.T, (n,))
    eps = stream.normal(imgs.shape)
    return imgs, y, t, eps


def train_fp(cfg: RunConfig, pairs: list[tuple[SemanticMap, np.ndarray]]) -> TrainResult:
    """Train the denoiser on (map, image) pairs; abort on NaN with the
    last epoch-end parameters restored."""
    if not pairs:
        raise ValueError("empty training set")
    sched = build_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    model = DenoiserNet(cfg.model, RngStream(cfg.seed, "init"))
    opt = Adam(list(model.params.values()), lr=cfg.train.lr)
    stream = RngStream(cfg.seed, "train-noise")

    rows: list[dict] = []
    last_good = model.state()
    aborted = False
    n = len(pairs)
    batch = min(cfg.train.batch, n)
    lam = cfg.train.kl_weight

    for epoch in range(cfg.train.epochs):
        order = stream.permutation(n)
        for step in range(n // batch):
            idx = order[step * batch : (step + 1) * batch]
            imgs, y, t, eps = _training_batch(pairs, idx, stream, cfg, sched)
            x_t = q_sample(imgs, t, eps, sched)
            out = model(x_t, t, y)
            diff = out.eps_hat - Tensor(eps)
            l_d = T.mean(T.sqrt(T.sum_(T.square(diff), axis=(1, 2, 3))))
            if lam > 0.0:
                l_kl = kl_loss(out, x_t, imgs, t, sched)
            else:
                l_kl = Tensor(0.0)
            loss = combine_losses(l_d, l_kl, lam)
            lval = loss.item()
            if not np.isfinite(lval):
                model.load_state(last_good)
                aborted = True
                break
            opt.zero_grad()
            T.backward(loss, params=model.params.values())
            opt.step()
            rows.append(
                {
                    "epoch": epoch,
                    "step": step,
                    "loss": lval,
                    "loss_diffusion": l_d.item(),
                    "loss_kl": l_kl.item(),
                }
            )
        if aborted:
            break
        last_good = model.state()

    return TrainResult(model=model, sched=sched, loss_rows=rows, aborted_nan=aborted)
