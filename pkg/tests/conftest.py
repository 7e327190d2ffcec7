"""Shared fixtures: a small trained conditional model and micro configs."""

import numpy as np
import pytest

from qsemlink import tensor as T
from qsemlink.channel import encode_map
from qsemlink.config import CalibSpec, DatasetSpec, EvalSpec, QuantSpec, RunConfig, ScheduleSpec, TrainSpec
from qsemlink.data import synth_dataset
from qsemlink.denoiser import DenoiserConfig, DenoiserNet
from qsemlink.diffusion import build_schedule, combine_losses, kl_loss, q_sample
from qsemlink.optim import Adam
from qsemlink.rng import RngStream
from qsemlink.tensor import Tensor


class ToyRig:
    """A trained 8x8 two-class conditional denoiser plus its data."""

    def __init__(self, model, sched, pairs):
        self.model = model
        self.sched = sched
        self.pairs = pairs
        self.images = [img for _, img in pairs]
        self.maps = [m for m, _ in pairs]
        self.onehots = [encode_map(m).data for m in self.maps]


@pytest.fixture(scope="session")
def toy_rig() -> ToyRig:
    """Conditional model trained to near-memorization on two pairs."""
    pairs = synth_dataset(2, 8, 8, 2, seed=11)
    cfg = DenoiserConfig(
        in_channels=3, cond_channels=2, base_width=16, depth=1, time_embed_dim=16, null_cond_prob=0.1
    )
    model = DenoiserNet(cfg, RngStream(1, "init"))
    sched = build_schedule(50, 1e-4, 0.25)
    opt = Adam(list(model.params.values()), lr=2e-3)
    stream = RngStream(1, "train-noise")
    ys = [encode_map(m).data for m, _ in pairs]
    xs = [img for _, img in pairs]
    batch = 16
    for _ in range(1600):
        idx = stream.integers(0, len(pairs), (batch,))
        x0 = np.stack([xs[i] for i in idx])
        y = np.stack([ys[i] for i in idx]).copy()
        drop = stream.uniform(0.0, 1.0, (batch,)) < cfg.null_cond_prob
        y[drop] = 0.0
        t = stream.integers(0, sched.T, (batch,))
        eps = stream.normal(x0.shape)
        x_t = q_sample(x0, t, eps, sched)
        out = model(x_t, t, y)
        l_d = T.mean(T.sqrt(T.sum_(T.square(out.eps_hat - Tensor(eps)), axis=(1, 2, 3))))
        l_kl = kl_loss(out, x_t, x0, t, sched)
        loss = combine_losses(l_d, l_kl, 0.001)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    return ToyRig(model, sched, pairs)


@pytest.fixture()
def micro_cfg() -> RunConfig:
    """Smallest config that exercises every stage in seconds."""
    return RunConfig(
        seed=7,
        dataset=DatasetSpec(n=16, height=16, width=16, classes=4, seed=3, train_count=8, calib_count=4, eval_count=4),
        schedule=ScheduleSpec(steps=20, beta_start=1e-4, beta_end=0.2),
        model=DenoiserConfig(cond_channels=4, base_width=16, depth=1, time_embed_dim=16),
        train=TrainSpec(epochs=2, batch=4, lr=2e-4),
        quant=QuantSpec(bits=8, steps=8, calib_batch=4),
        calib=CalibSpec(n_samples=8, ddim_steps=8, tap_stride=4, levels=[10.0, 40.0], guidance=2.0),
        eval=EvalSpec(psnr_list=[40.0, 10.0], n_eval=2, seeds=1, ddim_steps=8),
    )
