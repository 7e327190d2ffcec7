"""Checkpoint formats.

Full-precision checkpoints are named-tensor containers with a JSON header
carrying the model config and schedule. Quantized checkpoints store, per
weight tensor (or per concat-branch slice), the grid parameters and the
integer codes packed two's-complement at the target bit-width,
little-endian, padded to a byte boundary; biases and normalization
parameters ride along in full precision. The packed payload size in bits
is the quantity the memory accounting reports.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .denoiser import DenoiserConfig, DenoiserNet
from .diffusion import NoiseSchedule, build_schedule
from .quant import QuantModel, integer_codes
from .serialize import FormatError, read_tensor_block, write_tensor_block

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "save_quant_checkpoint",
    "load_quant_checkpoint",
    "read_quant_header",
    "pack_codes",
    "unpack_codes",
    "METADATA_BITS_PER_RECORD",
]

FP_MAGIC = b"QSLF"
QUANT_MAGIC = b"QSLQ"
FORMAT_VERSION = 1

# per quantizer record: scale (32) + c_min (32) + c_max (32), reported
# separately from the code payload
METADATA_BITS_PER_RECORD = 96


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Two's-complement bit-packing, little-endian, byte-padded."""
    flat = codes.astype(np.int64).reshape(-1)
    lo = -(2 ** (bits - 1))
    hi = 2 ** (bits - 1) - 1
    if flat.size and (flat.min() < lo or flat.max() > hi):
        raise ValueError(f"codes out of {bits}-bit range [{lo}, {hi}]")
    u = (flat & ((1 << bits) - 1)).astype(np.uint64)
    bitmat = ((u[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def unpack_codes(raw: bytes, bits: int, count: int) -> np.ndarray:
    allbits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if allbits.size < count * bits:
        raise FormatError(f"payload too short: {allbits.size} bits for {count}x{bits}")
    bitmat = allbits[: count * bits].reshape(count, bits).astype(np.uint64)
    u = (bitmat << np.arange(bits, dtype=np.uint64)).sum(axis=1)
    sign = np.uint64(1 << (bits - 1))
    return (u.astype(np.int64) ^ np.int64(sign)) - np.int64(sign)


# ---------------------------------------------------------------------------
# full-precision checkpoints
# ---------------------------------------------------------------------------


def _write_named_tensors(f, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        f.write(struct.pack("<Q", len(nb)))
        f.write(nb)
        write_tensor_block(f, arr)


def _read_named_tensors(f) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<Q", f.read(8))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", f.read(8))
        name = f.read(nlen).decode("utf-8")
        out[name] = read_tensor_block(f)
    return out


def save_checkpoint(path, model: DenoiserNet, sched: NoiseSchedule, meta: dict | None = None) -> None:
    header = {
        "kind": "fp-checkpoint",
        "format": FORMAT_VERSION,
        "model": model.config.to_dict(),
        "schedule": sched.to_dict(),
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FP_MAGIC)
        f.write(struct.pack("<Q", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        _write_named_tensors(f, model.state())


def load_checkpoint(path) -> tuple[DenoiserNet, NoiseSchedule, dict]:
    with open(path, "rb") as f:
        if f.read(4) != FP_MAGIC:
            raise FormatError(f"{path}: not a full-precision checkpoint")
        (version,) = struct.unpack("<Q", f.read(8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        tensors = _read_named_tensors(f)
    model = DenoiserNet(DenoiserConfig.from_dict(header["model"]))
    model.load_state(tensors)
    s = header["schedule"]
    sched = build_schedule(s["T"], s["beta_start"], s["beta_end"])
    return model, sched, header


# ---------------------------------------------------------------------------
# quantized checkpoints
# ---------------------------------------------------------------------------


def save_quant_checkpoint(path, qmodel: QuantModel, sched: NoiseSchedule, meta: dict | None = None) -> None:
    if qmodel.passthrough:
        raise ValueError("pass-through wrapper has nothing to pack; save the fp checkpoint instead")
    base = qmodel.base
    records = []
    payload = bytearray()
    for wname in base.weight_tensor_names():
        w = qmodel.shadow[wname]
        for qp, sl in qmodel.segments(wname):
            seg = w if sl is None else w[:, sl]
            codes = integer_codes(seg, qp)
            raw = pack_codes(codes, qp.bits)
            records.append(
                {
                    "param": wname,
                    "channels": None if sl is None else [sl.start, sl.stop],
                    "bits": qp.bits,
                    "scale": float(qp.scale),
                    "c_min": qp.c_min,
                    "c_max": qp.c_max,
                    "shape": list(seg.shape),
                    "offset": len(payload),
                    "nbytes": len(raw),
                    "mode": qp.mode,
                }
            )
            payload.extend(raw)
    fp_tensors = {k: v.data for k, v in base.params.items() if k not in qmodel.tensor_q}
    header = {
        "kind": "quant-checkpoint",
        "format": FORMAT_VERSION,
        "model": base.config.to_dict(),
        "schedule": sched.to_dict(),
        "bits": qmodel.bits,
        "split": qmodel.split_enabled,
        "records": records,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(QUANT_MAGIC)
        f.write(struct.pack("<Q", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(struct.pack("<Q", len(payload)))
        f.write(bytes(payload))
        _write_named_tensors(f, fp_tensors)


def read_quant_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != QUANT_MAGIC:
            raise FormatError(f"{path}: not a quantized checkpoint")
        (version,) = struct.unpack("<Q", f.read(8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(hlen).decode("utf-8"))


def load_quant_checkpoint(path) -> tuple[DenoiserNet, NoiseSchedule, dict]:
    """Rebuild an inference model with dequantized weights."""
    with open(path, "rb") as f:
        if f.read(4) != QUANT_MAGIC:
            raise FormatError(f"{path}: not a quantized checkpoint")
        (version,) = struct.unpack("<Q", f.read(8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        (plen,) = struct.unpack("<Q", f.read(8))
        payload = f.read(plen)
        fp_tensors = _read_named_tensors(f)

    model = DenoiserNet(DenoiserConfig.from_dict(header["model"]))
    state = {k: v for k, v in fp_tensors.items()}
    weights: dict[str, np.ndarray] = {}
    for rec in header["records"]:
        count = int(np.prod(rec["shape"]))
        codes = unpack_codes(payload[rec["offset"] : rec["offset"] + rec["nbytes"]], rec["bits"], count)
        seg = (np.float32(rec["scale"]) * codes.astype(np.float32)).reshape(rec["shape"])
        name = rec["param"]
        if name not in weights:
            weights[name] = np.zeros(model.params[name].shape, dtype=np.float32)
        if rec["channels"] is None:
            weights[name][...] = seg
        else:
            a, b = rec["channels"]
            weights[name][:, a:b] = seg
    state.update(weights)
    model.load_state(state)
    s = header["schedule"]
    sched = build_schedule(s["T"], s["beta_start"], s["beta_end"])
    return model, sched, header
