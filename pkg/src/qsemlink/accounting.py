"""Analytic memory and FLOPs accounting.

FLOPs follow the multiply-add convention: conv2d = 2*Cin*Cout*K^2*Hout*
Wout, linear = 2*in*out, normalization and activation = 5 per element;
other glue ops are not counted. The raw count is identical for the
full-precision and fake-quantized model; the convention-weighted count
scales weight-touching multiply-adds by bits/32 and is always reported
next to its convention string.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import METADATA_BITS_PER_RECORD, read_quant_header
from .denoiser import DenoiserNet

__all__ = ["flops_count", "size_bits_fp", "size_bits_quant", "size_bits", "FLOPS_CONVENTION"]

FLOPS_CONVENTION = (
    "multiply-adds x2 for conv/linear, 5/elem for norm+act; "
    "weighted count scales weight-touching ops by bits/32"
)


def flops_count(model: DenoiserNet, height: int, width: int, bits: int | None = None) -> dict:
    """Per-forward-pass FLOPs for one sample at the given input size."""
    rows = []
    weight_total = 0
    other_total = 0
    for spec in model.layer_specs(height, width):
        if spec["kind"] == "conv":
            fl = 2 * spec["cin"] * spec["cout"] * spec["k"] ** 2 * spec["h"] * spec["w"]
            weight = True
        elif spec["kind"] == "linear":
            fl = 2 * spec["nin"] * spec["nout"]
            weight = True
        else:  # norm / act
            fl = 5 * spec["elems"]
            weight = False
        rows.append({"name": spec["name"], "kind": spec["kind"], "flops": fl, "weight_op": weight})
        if weight:
            weight_total += fl
        else:
            other_total += fl
    raw = weight_total + other_total
    factor = 1.0 if bits is None else bits / 32.0
    return {
        "rows": rows,
        "raw": raw,
        "weight_raw": weight_total,
        "other_raw": other_total,
        "weighted": weight_total * factor + other_total,
        "bits": 32 if bits is None else bits,
        "convention": FLOPS_CONVENTION,
    }


def size_bits_fp(model: DenoiserNet) -> dict:
    """32-bit payload accounting over weight tensors; rest listed separately."""
    weight_names = set(model.weight_tensor_names())
    rows = []
    payload = 0
    other = 0
    for name, p in model.params.items():
        bits = 32 * p.numel
        is_weight = name in weight_names
        rows.append({"name": name, "bits": bits, "numel": p.numel, "weight": is_weight})
        if is_weight:
            payload += bits
        else:
            other += bits
    return {"rows": rows, "weight_payload_bits": payload, "other_bits": other, "metadata_bits": 0, "weight_bits_per_value": 32}


def size_bits_quant(path) -> dict:
    """Payload accounting of a packed quantized checkpoint."""
    header = read_quant_header(path)
    rows = []
    payload = 0
    for rec in header["records"]:
        numel = int(np.prod(rec["shape"]))
        bits = rec["bits"] * numel
        rows.append(
            {
                "name": rec["param"] if rec["channels"] is None else f"{rec['param']}[{rec['channels'][0]}:{rec['channels'][1]}]",
                "bits": bits,
                "numel": numel,
                "weight": True,
            }
        )
        payload += bits
    metadata = METADATA_BITS_PER_RECORD * len(header["records"])
    return {
        "rows": rows,
        "weight_payload_bits": payload,
        "metadata_bits": metadata,
        "other_bits": None,  # full-precision non-weight params, reported by the fp side
        "weight_bits_per_value": header["bits"],
    }


def size_bits(fp_model: DenoiserNet, quant_ckpt_path=None) -> dict:
    """Headline memory comparison: payload bits + reduction percentage."""
    fp = size_bits_fp(fp_model)
    out = {"fp": fp}
    if quant_ckpt_path is not None:
        q = size_bits_quant(quant_ckpt_path)
        out["quant"] = q
        out["reduction"] = 1.0 - q["weight_payload_bits"] / fp["weight_payload_bits"]
    return out
