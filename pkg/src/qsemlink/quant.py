"""Post-training weight quantization with block-wise adaptive rounding.

Weights are mapped to a symmetric signed integer grid, w_hat =
s * clip(round(w / s), c_min, c_max), and executed as fake quantization:
the forward pass uses dequantized values while full-precision shadow
weights are retained. Blocks feeding on channel concatenations get one
quantizer per incoming branch ("split" quantization) for the first weight
consuming the concatenation. Calibration reconstructs each block's output
with learned per-element rounding offsets and log-domain scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .denoiser import Block, DenoiserNet, enumerate_blocks
from .optim import Adam
from .rng import RngStream
from .tensor import Tensor, no_grad

__all__ = [
    "QuantizerParams",
    "QuantModel",
    "AdaRoundHyper",
    "CalibrationError",
    "quantize_dequantize",
    "fit_range",
    "wrap_model",
    "calibrate_block",
    "calibrate_model",
    "BITS_OFF",
]

# stretch constants for the rectified-sigmoid rounding relaxation
ZETA = 1.1
GAMMA = -0.1

BITS_OFF = 32  # sentinel: wrap_model at 32 bits is a pass-through


class CalibrationError(RuntimeError):
    pass


@dataclass
class QuantizerParams:
    """Grid parameters for one weight tensor or one concat branch slice."""

    bits: int
    scale: float
    c_min: int
    c_max: int
    mode: str = "nearest"  # nearest | adaround
    rounding_logits: np.ndarray | None = None
    all_zero: bool = False  # flagged degenerate fit (scale is a sentinel)

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.c_max - self.c_min + 1 > 2**self.bits:
            raise ValueError(f"clip range [{self.c_min}, {self.c_max}] exceeds {self.bits}-bit grid")
        if (self.mode == "adaround") != (self.rounding_logits is not None):
            raise ValueError("rounding_logits must be present exactly in adaround mode")


def _round_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_dequantize(w: np.ndarray, q: QuantizerParams) -> np.ndarray:
    """Fake-quantize an array on q's grid.

    nearest mode rounds half away from zero; adaround mode uses the
    hardened rounding offsets (logits thresholded at 0.5, i.e. at zero).
    """
    w = np.asarray(w, dtype=np.float32)
    s = np.float32(q.scale)
    if q.mode == "nearest":
        code = _round_away(w / s)
    else:
        if q.rounding_logits.shape != w.shape:
            raise T.ShapeMismatchError("quantize_dequantize", "rounding offsets differ from weights", q.rounding_logits.shape, w.shape)
        code = np.floor(w / s) + (q.rounding_logits >= 0.0).astype(np.float32)
    code = np.clip(code, q.c_min, q.c_max)
    return (s * code).astype(np.float32)


def integer_codes(w: np.ndarray, q: QuantizerParams) -> np.ndarray:
    """The integer grid points underlying quantize_dequantize."""
    w = np.asarray(w, dtype=np.float32)
    s = np.float32(q.scale)
    if q.mode == "nearest":
        code = _round_away(w / s)
    else:
        code = np.floor(w / s) + (q.rounding_logits >= 0.0).astype(np.float32)
    return np.clip(code, q.c_min, q.c_max).astype(np.int64)


def fit_range(w: np.ndarray, bits: int, policy: str = "minmax") -> QuantizerParams:
    """Symmetric signed range fit: c_min = -2^(b-1), c_max = 2^(b-1) - 1.

    minmax sets the scale from the weight extremum; mse_grid scans 80
    scale candidates (including the minmax one) for the lowest
    reconstruction error under nearest rounding.
    """
    w = np.asarray(w, dtype=np.float32)
    if w.size == 0:
        raise ValueError("cannot fit a quantizer to an empty tensor")
    c_min = -(2 ** (bits - 1))
    c_max = 2 ** (bits - 1) - 1
    wmax = float(np.abs(w).max())
    if wmax == 0.0:
        return QuantizerParams(bits, 1.0, c_min, c_max, all_zero=True)
    base = wmax / c_max
    if policy == "minmax":
        return QuantizerParams(bits, base, c_min, c_max)
    if policy == "mse_grid":
        cands = np.unique(np.append(np.linspace(0.2, 1.2, 79), 1.0)) * base
        best_s, best_err = base, np.inf
        for s in cands:
            q = np.clip(_round_away(w / np.float32(s)), c_min, c_max)
            err = float(np.sum((w - np.float32(s) * q) ** 2))
            if err < best_err:
                best_err, best_s = err, float(s)
        return QuantizerParams(bits, best_s, c_min, c_max)
    raise ValueError(f"unknown range policy {policy!r}")


def _soft_offsets(alpha: Tensor) -> Tensor:
    """Rectified-sigmoid relaxation of the rounding offset, in [0, 1]."""
    return T.clip(T.sigmoid(alpha) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def _init_logits(w: np.ndarray, q: QuantizerParams) -> np.ndarray:
    """Logits whose soft offset reproduces the fractional part of w/s."""
    rest = w / np.float32(q.scale) - np.floor(w / np.float32(q.scale))
    rest = np.clip(rest, 1e-4, 1.0 - 1e-4)
    inner = (ZETA - GAMMA) / (rest - GAMMA) - 1.0
    return (-np.log(inner)).astype(np.float32)


def _qdq_soft(w: np.ndarray, alpha: Tensor, log_s: Tensor, q: QuantizerParams) -> Tensor:
    """Differentiable fake-quant: gradients reach alpha and log_s.

    The integer base floor(w/s) is recomputed from the current scale but
    treated as constant; the scale gradient flows through the outer
    multiplication only.
    """
    s_now = float(np.exp(log_s.data))
    base = Tensor(np.clip(np.floor(w / np.float32(s_now)), q.c_min, q.c_max - 1))
    code = T.clip(base + _soft_offsets(alpha), q.c_min, q.c_max)
    return code * T.exp(log_s)


@dataclass
class AdaRoundHyper:
    steps: int = 1000
    batch: int = 16
    lr_alpha: float = 1e-3
    lr_log_scale: float = 4e-5
    lambda_round: float = 0.01
    b_start: float = 20.0
    b_end: float = 2.0
    warmup_frac: float = 0.2
    holdout_frac: float = 0.25
    seed: int = 0

    def anneal_b(self, step: int) -> float:
        start = self.warmup_frac * self.steps
        if step < start or self.steps <= start:
            return self.b_start
        rel = (step - start) / (self.steps - start)
        return self.b_end + (self.b_start - self.b_end) * max(0.0, 1.0 - rel)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch": self.batch,
            "lr_alpha": self.lr_alpha,
            "lr_log_scale": self.lr_log_scale,
            "lambda_round": self.lambda_round,
            "b_start": self.b_start,
            "b_end": self.b_end,
            "warmup_frac": self.warmup_frac,
            "holdout_frac": self.holdout_frac,
            "seed": self.seed,
        }


class QuantModel:
    """Fake-quantized view over a denoiser.

    Every weight tensor keeps one quantizer; concat-input blocks addition-
    ally carry one quantizer per incoming branch, applied to the matching
    input-channel slice of the first weight consuming the concatenation.
    Biases and normalization parameters stay full precision.
    """

    def __init__(self, base: DenoiserNet, bits: int, split_enabled: bool = True, policy: str = "minmax"):
        self.base = base
        self.bits = bits
        self.split_enabled = split_enabled
        self.policy = policy
        self.in_channels = base.in_channels
        self.passthrough = bits >= BITS_OFF
        self.tensor_q: dict[str, QuantizerParams] = {}
        self.branch_q: dict[tuple[str, int], QuantizerParams] = {}
        self.act_q: dict[str, QuantizerParams] = {}
        self.act_quant_enabled = False
        self.shadow: dict[str, np.ndarray] = {}
        self._split_weights: dict[str, str] = {}  # weight name -> block name
        self._cache: dict[str, Tensor] | None = None
        if not self.passthrough:
            self._fit_all()

    # -- construction ----------------------------------------------------------

    def _fit_all(self) -> None:
        for name in self.base.weight_tensor_names():
            w = self.base.params[name].data
            self.shadow[name] = w.copy()
            self.tensor_q[name] = fit_range(w, self.bits, self.policy)
        if self.split_enabled:
            for block in enumerate_blocks(self.base):
                if not block.concat_input:
                    continue
                wname = f"{block.name}.conv1.w"
                self._split_weights[wname] = block.name
                w = self.shadow[wname]
                start = 0
                for j, width in enumerate(block.branch_channels):
                    self.branch_q[(block.name, j)] = fit_range(w[:, start : start + width], self.bits, self.policy)
                    start += width

    def quantizer_count(self) -> int:
        return len(self.tensor_q) + len(self.branch_q)

    def _branch_slices(self, wname: str) -> list[tuple[tuple[str, int], slice]]:
        block_name = self._split_weights[wname]
        block = enumerate_blocks(self.base).by_name(block_name)
        out = []
        start = 0
        for j, width in enumerate(block.branch_channels):
            out.append(((block_name, j), slice(start, start + width)))
            start += width
        return out

    def segments(self, wname: str) -> list[tuple[QuantizerParams, slice | None]]:
        """Quantizer(s) governing a weight tensor: whole or per-branch slices."""
        if self.split_enabled and wname in self._split_weights:
            return [(self.branch_q[key], sl) for key, sl in self._branch_slices(wname)]
        return [(self.tensor_q[wname], None)]

    # -- materialized fake-quant forward ----------------------------------------

    def invalidate(self) -> None:
        self._cache = None

    def quantized_value(self, wname: str) -> np.ndarray:
        w = self.shadow[wname]
        out = np.empty_like(w)
        for qp, sl in self.segments(wname):
            if sl is None:
                out[...] = quantize_dequantize(w, qp)
            else:
                out[:, sl] = quantize_dequantize(w[:, sl], qp)
        return out

    def quantized_params(self) -> dict[str, Tensor]:
        if self._cache is None:
            self._cache = {name: Tensor(self.quantized_value(name)) for name in self.tensor_q}
        return self._cache

    def forward(self, x, t, y):
        if self.passthrough:
            return self.base.forward(x, t, y)
        filt = self._act_filter if self.act_quant_enabled else None
        return self.base.forward(x, t, y, params=self.quantized_params(), block_hook=None, input_filter=filt)

    __call__ = forward

    # -- optional activation fake-quant ------------------------------------------

    def fit_activation_ranges(self, sample_batches) -> None:
        """Per-block-input minmax activation quantizers from probe batches."""
        mags: dict[str, float] = {}

        def hook(block, inputs, temb, out):
            peak = max(float(np.abs(i.data).max()) for i in inputs)
            mags[block.name] = max(mags.get(block.name, 0.0), peak)

        with no_grad():
            for x, t, y in sample_batches:
                self.base.forward(x, t, y, params=self.quantized_params(), block_hook=hook)
        c_max = 2 ** (self.bits - 1) - 1
        for name, peak in mags.items():
            scale = peak / c_max if peak > 0 else 1.0
            self.act_q[name] = QuantizerParams(self.bits, scale, -(c_max + 1), c_max, all_zero=peak == 0)
        self.act_quant_enabled = True

    def _act_filter(self, block, inputs):
        qp = self.act_q.get(block.name)
        if qp is None:
            return inputs
        return [Tensor(quantize_dequantize(i.data, qp)) for i in inputs]


def wrap_model(model: DenoiserNet, bits: int, split_enabled: bool = True, policy: str = "minmax") -> QuantModel:
    """Fake-quantize every weight tensor of a trained model."""
    return QuantModel(model, bits, split_enabled=split_enabled, policy=policy)


# ---------------------------------------------------------------------------
# block calibration
# ---------------------------------------------------------------------------


@dataclass
class BlockCalibResult:
    block: str
    n_train: int
    n_holdout: int
    nearest_mse: float
    calibrated_mse: float
    reverted: bool


def _block_weight_names(block: Block) -> list[str]:
    return [n for n in block.param_names if n.endswith(".w")]


def _stack_inputs(samples: list[tuple[list[np.ndarray], np.ndarray]]) -> tuple[list[np.ndarray], np.ndarray]:
    n_branches = len(samples[0][0])
    stacked = [np.concatenate([s[0][j] for s in samples], axis=0) for j in range(n_branches)]
    temb = np.concatenate([s[1] for s in samples], axis=0)
    return stacked, temb


def _apply_block(model: DenoiserNet, block: Block, inputs: list[np.ndarray], temb: np.ndarray, override) -> Tensor:
    tins = [Tensor(i) for i in inputs]
    return model.block_apply(block, tins, Tensor(temb), override)


def _block_mse(model: DenoiserNet, block: Block, inputs, temb, targets, override) -> float:
    with no_grad():
        out = _apply_block(model, block, inputs, temb, override)
    return float(np.mean((out.data - targets) ** 2))


def calibrate_block(
    qmodel: QuantModel,
    block: Block,
    calib_inputs: list[tuple[list[np.ndarray], np.ndarray]],
    hyper: AdaRoundHyper,
) -> BlockCalibResult:
    """Learn rounding offsets and log-scales reconstructing block outputs.

    The target is the full-precision block applied to the same inputs.
    Minimizes reconstruction MSE plus lambda_round * sum(1 - |2h - 1|^b)
    with b annealed from b_start to b_end; offsets harden afterwards. If
    the hardened result is worse than nearest rounding on the held-out
    split, the block reverts to nearest (monotone-improvement guard).
    """
    if not calib_inputs:
        raise CalibrationError(f"block {block.name}: empty calibration input set")
    model = qmodel.base
    stream = RngStream(hyper.seed, f"adaround/{block.name}")

    all_inputs, all_temb = _stack_inputs(calib_inputs)
    n = all_temb.shape[0]
    n_hold = max(1, int(round(n * hyper.holdout_frac))) if n > 1 else 0
    perm = stream.permutation(n)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if train_idx.size == 0:
        train_idx = perm
    tr_inputs = [a[train_idx] for a in all_inputs]
    tr_temb = all_temb[train_idx]
    ho_inputs = [a[hold_idx] for a in all_inputs] if n_hold else tr_inputs
    ho_temb = all_temb[hold_idx] if n_hold else tr_temb

    # full-precision targets on the same inputs
    with no_grad():
        tr_targets = _apply_block(model, block, tr_inputs, tr_temb, None).data.copy()
        ho_targets = _apply_block(model, block, ho_inputs, ho_temb, None).data.copy()

    wnames = _block_weight_names(block)
    segs: list[tuple[str, QuantizerParams, slice | None, Tensor, Tensor]] = []
    for wname in wnames:
        w = qmodel.shadow[wname]
        for qp, sl in qmodel.segments(wname):
            wseg = w if sl is None else w[:, sl]
            alpha = Tensor(_init_logits(wseg, qp), requires_grad=True)
            log_s = Tensor(np.log(np.float32(qp.scale)), requires_grad=True)
            segs.append((wname, qp, sl, alpha, log_s))

    nearest_holdout = _block_mse_quantized(qmodel, model, block, ho_inputs, ho_temb, ho_targets)

    def build_override(soft: bool) -> dict[str, Tensor]:
        override: dict[str, Tensor] = {}
        by_name: dict[str, list] = {}
        for wname, qp, sl, alpha, log_s in segs:
            by_name.setdefault(wname, []).append((qp, sl, alpha, log_s))
        for wname, parts in by_name.items():
            w = qmodel.shadow[wname]
            if len(parts) == 1 and parts[0][1] is None:
                qp, _, alpha, log_s = parts[0]
                override[wname] = _qdq_soft(w, alpha, log_s, qp)
            else:
                # conv weights are (Cout, Cin, K, K): concat_channels joins
                # the per-branch slices back along the input-channel axis
                pieces = [_qdq_soft(w[:, sl], alpha, log_s, qp) for qp, sl, alpha, log_s in parts]
                override[wname] = T.concat_channels(pieces)
        return override

    opt = Adam(
        [
            ([a for (_, _, _, a, _) in segs], hyper.lr_alpha),
            ([s for (_, _, _, _, s) in segs], hyper.lr_log_scale),
        ]
    )

    n_train = tr_temb.shape[0]
    warmup_steps = hyper.warmup_frac * hyper.steps
    for step in range(hyper.steps):
        if n_train > hyper.batch:
            idx = stream.integers(0, n_train, (hyper.batch,))
            bx = [a[idx] for a in tr_inputs]
            bt = tr_temb[idx]
            btg = tr_targets[idx]
        else:
            bx, bt, btg = tr_inputs, tr_temb, tr_targets
        override = build_override(soft=True)
        out = _apply_block(model, block, bx, bt, override)
        # feature-sum, batch-mean reconstruction error; the rounding
        # regularizer stays off during warmup so reconstruction leads
        diff2 = T.square(out - Tensor(btg))
        rec = T.mean(T.sum_(diff2, axis=tuple(range(1, out.ndim))))
        if step < warmup_steps:
            loss = rec
        else:
            b = hyper.anneal_b(step)
            reg_terms = []
            for _, _, _, alpha, _ in segs:
                h = _soft_offsets(alpha)
                reg_terms.append(T.sum_(1.0 - T.power(T.abs_(h * 2.0 - 1.0), b)))
            reg = reg_terms[0]
            for r in reg_terms[1:]:
                reg = reg + r
            loss = rec + reg * hyper.lambda_round
        if not np.isfinite(loss.item()):
            raise CalibrationError(f"block {block.name}: calibration loss diverged (NaN/Inf) at step {step}")
        opt.zero_grad()
        T.backward(loss)
        opt.step()

    # harden into the model's quantizers
    updated: dict[tuple[str, int] | str, QuantizerParams] = {}
    for wname, qp, sl, alpha, log_s in segs:
        new_qp = QuantizerParams(
            qp.bits,
            float(np.exp(log_s.data)),
            qp.c_min,
            qp.c_max,
            mode="adaround",
            rounding_logits=alpha.data.copy(),
            all_zero=qp.all_zero,
        )
        _replace_quantizer(qmodel, block, wname, sl, new_qp)
    qmodel.invalidate()

    calibrated_holdout = _block_mse_quantized(qmodel, model, block, ho_inputs, ho_temb, ho_targets)
    reverted = False
    if hyper.steps == 0 or calibrated_holdout > nearest_holdout:
        _revert_block(qmodel, block)
        qmodel.invalidate()
        calibrated_holdout = _block_mse_quantized(qmodel, model, block, ho_inputs, ho_temb, ho_targets)
        reverted = True

    return BlockCalibResult(
        block=block.name,
        n_train=int(n_train),
        n_holdout=int(n_hold),
        nearest_mse=nearest_holdout,
        calibrated_mse=calibrated_holdout,
        reverted=reverted,
    )


def _replace_quantizer(qmodel: QuantModel, block: Block, wname: str, sl: slice | None, qp: QuantizerParams) -> None:
    if sl is None:
        qmodel.tensor_q[wname] = qp
        return
    for key, seg_sl in qmodel._branch_slices(wname):
        if seg_sl == sl:
            qmodel.branch_q[key] = qp
            return
    raise CalibrationError(f"block {block.name}: no branch quantizer for slice {sl} of {wname}")


def _revert_block(qmodel: QuantModel, block: Block) -> None:
    """Refit nearest-rounding quantizers for every weight of the block."""
    for wname in _block_weight_names(block):
        w = qmodel.shadow[wname]
        qmodel.tensor_q[wname] = fit_range(w, qmodel.bits, qmodel.policy)
        if qmodel.split_enabled and wname in qmodel._split_weights:
            for key, sl in qmodel._branch_slices(wname):
                qmodel.branch_q[key] = fit_range(w[:, sl], qmodel.bits, qmodel.policy)


def _block_mse_quantized(qmodel, model, block, inputs, temb, targets) -> float:
    override = {n: Tensor(qmodel.quantized_value(n)) for n in _block_weight_names(block)}
    return _block_mse(model, block, inputs, temb, targets, override)


# ---------------------------------------------------------------------------
# whole-model calibration
# ---------------------------------------------------------------------------


def collect_block_inputs(qmodel: QuantModel, samples, block_name: str, batch: int = 16):
    """Replay samples through the quantized model, capturing one block's inputs.

    Predecessor blocks run with their current (already calibrated)
    quantizers, so later blocks see the inputs they will face at
    inference time.
    """
    captured: list[tuple[list[np.ndarray], np.ndarray]] = []

    def hook(block, inputs, temb, out):
        if block.name == block_name:
            captured.append(([i.data.copy() for i in inputs], temb.data.copy()))

    params = qmodel.quantized_params()
    with no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            x = np.stack([s.x_t for s in chunk])
            t = np.array([s.t for s in chunk], dtype=np.int64)
            y = np.stack([s.y_noisy for s in chunk])
            qmodel.base.forward(x, t, y, params=params, block_hook=hook)
    return captured


def calibrate_model(qmodel: QuantModel, calibset, hyper: AdaRoundHyper) -> list[BlockCalibResult]:
    """Calibrate blocks in topological order, re-propagating quantized inputs."""
    if qmodel.passthrough:
        raise CalibrationError("cannot calibrate a pass-through (32-bit) wrapper")
    results = []
    for block in enumerate_blocks(qmodel.base):
        inputs = collect_block_inputs(qmodel, calibset, block.name)
        results.append(calibrate_block(qmodel, block, inputs, hyper))
    return results
