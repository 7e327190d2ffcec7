"""Stage orchestration: every stage reads and writes files under one
output directory, so stages can run as independent processes.

Layout under --out:
  dataset/   maps/NNNN.map, images.bin (with split indices)
  train/     model_fp.ckpt, loss.csv
  quantize/  model_q_nearest.ckpt, quantizers.csv
  calibrate/ calibset.bin, model_q.ckpt, block_mse.csv
  transmit/  sample_NNN.ppm, bandwidth.csv
  evaluate/  metrics.csv, pairs/*.ppm
  report/    summary.csv
Each stage writes manifest.txt (config hash, seed, versions) and the
resolved config; all outputs are byte-reproducible from (config, seed).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import flops_count, size_bits_fp, size_bits_quant
from .calibset import build_calibration_set, load_calibration_set, save_calibration_set, timestep_only_variant
from .channel import SemanticMap, awgn, bandwidth_bits, encode_map, load_map, save_map
from .checkpoint import load_checkpoint, load_quant_checkpoint, save_checkpoint, save_quant_checkpoint
from .config import RunConfig
from .data import synth_dataset
from .metrics import evaluate_models, generate_batch
from .quant import calibrate_model, wrap_model
from .rng import RngStream
from .serialize import read_blob_file, write_blob_file
from .train import train_fp

__all__ = [
    "ArtifactError",
    "stage_synth",
    "stage_train",
    "stage_quantize",
    "stage_calibrate",
    "stage_transmit",
    "stage_evaluate",
    "stage_report",
    "load_dataset",
    "write_ppm",
]

FORMAT_VERSION = 1


class ArtifactError(FileNotFoundError):
    """A required stage artifact is missing."""

    def __init__(self, artifact: str, path):
        self.artifact = artifact
        super().__init__(f"missing artifact {artifact!r}: expected at {path}")


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_ppm(path, img: np.ndarray) -> None:
    """P6 portable pixmap from a (3,H,W) image in [-1, 1]."""
    arr = np.clip((np.asarray(img, dtype=np.float32) + 1.0) * 0.5, 0.0, 1.0)
    bytes_img = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = bytes_img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes_img.tobytes())


def _write_manifest(stage_dir: Path, stage: str, cfg: RunConfig, artifacts: dict[str, str]) -> None:
    lines = {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "seed": str(cfg.seed),
        "dataset_seed": str(cfg.dataset.seed),
        "package_version": __version__,
        "format_version": str(FORMAT_VERSION),
    }
    for k, v in artifacts.items():
        lines[f"artifact.{k}"] = v
    with open(stage_dir / "manifest.txt", "w") as f:
        for k in sorted(lines):
            f.write(f"{k} = {lines[k]}\n")
    cfg.save(stage_dir / "config.ini")


def _stage_dir(out, name: str) -> Path:
    d = Path(out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def stage_synth(cfg: RunConfig, out) -> Path:
    d = _stage_dir(out, "dataset")
    ds = cfg.dataset
    pairs = synth_dataset(ds.n, ds.height, ds.width, ds.classes, ds.seed)
    maps_dir = d / "maps"
    maps_dir.mkdir(exist_ok=True)
    tensors = {}
    for i, (sem, img) in enumerate(pairs):
        save_map(maps_dir / f"{i:04d}.map", sem)
        tensors[f"img{i:04d}"] = img
    splits = {
        "train": list(range(ds.train_count)),
        "calib": list(range(ds.train_count, ds.train_count + ds.calib_count)),
        "eval": list(range(ds.train_count + ds.calib_count, ds.train_count + ds.calib_count + ds.eval_count)),
    }
    write_blob_file(d / "images.bin", {"kind": "dataset-images", "n": ds.n, "splits": splits}, tensors)
    _write_manifest(d, "synth", cfg, {"images": "images.bin", "maps": "maps/"})
    return d


def load_dataset(out) -> tuple[list[tuple[SemanticMap, np.ndarray]], dict]:
    d = Path(out) / "dataset"
    images = d / "images.bin"
    if not images.exists():
        raise ArtifactError("dataset", images)
    header, tensors = read_blob_file(images)
    pairs = []
    for i in range(header["n"]):
        sem = load_map(d / "maps" / f"{i:04d}.map")
        pairs.append((sem, tensors[f"img{i:04d}"]))
    return pairs, header["splits"]


def _split_pairs(pairs, splits, name):
    return [pairs[i] for i in splits[name]]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def stage_train(cfg: RunConfig, out) -> Path:
    pairs, splits = load_dataset(out)
    d = _stage_dir(out, "train")
    result = train_fp(cfg, _split_pairs(pairs, splits, "train"))
    ckpt = d / "model_fp.ckpt"
    save_checkpoint(ckpt, result.model, result.sched, meta={"aborted_nan": result.aborted_nan})
    write_csv(
        d / "loss.csv",
        ["epoch", "step", "loss", "loss_diffusion", "loss_kl"],
        [[r["epoch"], r["step"], r["loss"], r["loss_diffusion"], r["loss_kl"]] for r in result.loss_rows],
    )
    _write_manifest(d, "train", cfg, {"checkpoint": "model_fp.ckpt", "loss_curve": "loss.csv"})
    return ckpt


def _require_fp_ckpt(out) -> Path:
    p = Path(out) / "train" / "model_fp.ckpt"
    if not p.exists():
        raise ArtifactError("full-precision checkpoint", p)
    return p


# ---------------------------------------------------------------------------
# quantize / calibrate
# ---------------------------------------------------------------------------


def _quantizer_rows(qmodel):
    rows = []
    for wname in qmodel.base.weight_tensor_names():
        for qp, sl in qmodel.segments(wname):
            rows.append(
                [
                    wname if sl is None else f"{wname}[{sl.start}:{sl.stop}]",
                    qp.bits,
                    qp.scale,
                    qp.c_min,
                    qp.c_max,
                    qp.mode,
                    int(qp.all_zero),
                ]
            )
    return rows


def stage_quantize(cfg: RunConfig, out) -> Path:
    model, sched, _ = load_checkpoint(_require_fp_ckpt(out))
    d = _stage_dir(out, "quantize")
    qmodel = wrap_model(model, cfg.quant.bits, split_enabled=cfg.quant.split, policy=cfg.quant.policy)
    ckpt = d / "model_q_nearest.ckpt"
    save_quant_checkpoint(ckpt, qmodel, sched, meta={"calibrated": False})
    write_csv(
        d / "quantizers.csv",
        ["param", "bits", "scale", "c_min", "c_max", "mode", "all_zero"],
        _quantizer_rows(qmodel),
    )
    _write_manifest(d, "quantize", cfg, {"checkpoint": "model_q_nearest.ckpt", "quantizers": "quantizers.csv"})
    return ckpt


def stage_calibrate(cfg: RunConfig, out) -> Path:
    model, sched, _ = load_checkpoint(_require_fp_ckpt(out))
    pairs, splits = load_dataset(out)
    calib_maps = [sem for sem, _ in _split_pairs(pairs, splits, "calib")]
    d = _stage_dir(out, "calibrate")

    cal = cfg.calib
    meta = {
        "variant": cal.variant,
        "n_samples": cal.n_samples,
        "ddim_steps": cal.ddim_steps,
        "tap_stride": cal.tap_stride,
        "levels": list(cal.levels) if cal.variant == "noise_timestep" else None,
        "seed": cfg.seed,
    }
    calibset_path = d / "calibset.bin"
    samples = None
    if calibset_path.exists():
        # a persisted set with matching parameters skips the sampler replay
        loaded, header = load_calibration_set(calibset_path)
        if header.get("meta") == meta:
            samples = loaded
    if samples is None:
        if cal.variant == "noise_timestep":
            samples = build_calibration_set(
                model, sched, calib_maps, cal.n_samples, cal.ddim_steps, cal.tap_stride, cal.levels, cfg.seed, cal.guidance
            )
        elif cal.variant == "timestep_only":
            samples = timestep_only_variant(
                model, sched, calib_maps, cal.n_samples, cal.ddim_steps, cal.tap_stride, cfg.seed, cal.guidance
            )
        else:
            raise ValueError(f"unknown calibration variant {cal.variant!r}")
        save_calibration_set(calibset_path, samples, meta=meta)

    qmodel = wrap_model(model, cfg.quant.bits, split_enabled=cfg.quant.split, policy=cfg.quant.policy)
    results = calibrate_model(qmodel, samples, cfg.quant.adaround_hyper(cfg.seed))
    ckpt = d / "model_q.ckpt"
    save_quant_checkpoint(ckpt, qmodel, sched, meta={"calibrated": True, "variant": cal.variant})
    write_csv(
        d / "block_mse.csv",
        ["block", "n_train", "n_holdout", "nearest_mse", "calibrated_mse", "reverted"],
        [[r.block, r.n_train, r.n_holdout, r.nearest_mse, r.calibrated_mse, int(r.reverted)] for r in results],
    )
    _write_manifest(
        d, "calibrate", cfg, {"checkpoint": "model_q.ckpt", "calibset": "calibset.bin", "block_report": "block_mse.csv"}
    )
    return ckpt


def _require_quant_ckpt(out) -> Path:
    p = Path(out) / "calibrate" / "model_q.ckpt"
    if not p.exists():
        raise ArtifactError("calibrated quantized checkpoint", p)
    return p


# ---------------------------------------------------------------------------
# transmit / evaluate / report
# ---------------------------------------------------------------------------


def stage_transmit(cfg: RunConfig, out, use_fp: bool = False, psnr: float | None | str = "default") -> Path:
    if use_fp:
        model, sched, _ = load_checkpoint(_require_fp_ckpt(out))
    else:
        model, sched, _ = load_quant_checkpoint(_require_quant_ckpt(out))
    pairs, splits = load_dataset(out)
    eval_pairs = _split_pairs(pairs, splits, "eval")[: cfg.eval.n_eval]
    if psnr == "default":
        psnr = cfg.eval.psnr_list[0]
    d = _stage_dir(out, "transmit")

    ys, bw_rows = [], []
    for i, (sem, _img) in enumerate(eval_pairs):
        clean = encode_map(sem)
        noisy = awgn(clean, psnr, RngStream(cfg.seed, f"transmit/channel/{i}"))
        ys.append(noisy.data)
        comp, uncomp = bandwidth_bits(sem)
        bw_rows.append([i, _fmt_psnr(psnr), comp, uncomp])
    y_batch = np.stack(ys)
    x_start = np.stack(
        [RngStream(cfg.seed, f"transmit/xinit/{i}").normal((model.in_channels,) + ys[0].shape[1:]) for i in range(len(ys))]
    )
    out_imgs = generate_batch(
        model,
        sched,
        y_batch,
        cfg,
        stream_id="transmit/sample",
        seed=cfg.seed,
        x_start=x_start if cfg.eval.sampler == "ddim" else None,
    )
    for i in range(len(eval_pairs)):
        write_ppm(d / f"sample_{i:03d}.ppm", out_imgs[i])
    write_csv(d / "bandwidth.csv", ["map_index", "psnr_db", "compressed_bits", "uncompressed_bits"], bw_rows)
    _write_manifest(d, "transmit", cfg, {"bandwidth": "bandwidth.csv", "samples": "sample_NNN.ppm"})
    return d


def _fmt_psnr(p) -> str:
    return "clean" if p is None else _fmt(float(p))


def _check_disjoint(pairs, splits) -> None:
    keys = {}
    for name in ("train", "calib", "eval"):
        for i in splits[name]:
            k = pairs[i][0].class_ids.tobytes()
            if k in keys and keys[k] != name:
                raise ValueError(f"leakage guard: identical map in splits {keys[k]!r} and {name!r} (index {i})")
            keys[k] = name


def stage_evaluate(cfg: RunConfig, out) -> Path:
    fp_model, sched, _ = load_checkpoint(_require_fp_ckpt(out))
    q_ckpt = _require_quant_ckpt(out)
    q_model, _, q_header = load_quant_checkpoint(q_ckpt)
    pairs, splits = load_dataset(out)
    _check_disjoint(pairs, splits)
    eval_pairs = _split_pairs(pairs, splits, "eval")
    d = _stage_dir(out, "evaluate")

    rows, dumps = evaluate_models(fp_model, q_model, sched, eval_pairs, cfg, cfg.seed)

    fp_size = size_bits_fp(fp_model)
    q_size = size_bits_quant(q_ckpt)
    fl_fp = flops_count(fp_model, cfg.dataset.height, cfg.dataset.width)
    fl_q = flops_count(fp_model, cfg.dataset.height, cfg.dataset.width, bits=q_header["bits"])

    csv_rows = []
    for r in rows:
        csv_rows.append(["quality", _fmt_psnr(r.psnr), r.model, r.mse, r.miou, r.n, "", "", "", "", "", ""])
    csv_rows.append(
        ["model", "", "fp", "", "", "", 32, fp_size["weight_payload_bits"], 0, fl_fp["raw"], fl_fp["weighted"], 0.0]
    )
    csv_rows.append(
        [
            "model",
            "",
            "quant",
            "",
            "",
            "",
            q_header["bits"],
            q_size["weight_payload_bits"],
            q_size["metadata_bits"],
            fl_q["raw"],
            fl_q["weighted"],
            1.0 - q_size["weight_payload_bits"] / fp_size["weight_payload_bits"],
        ]
    )
    write_csv(
        d / "metrics.csv",
        [
            "kind",
            "psnr_db",
            "model",
            "mse",
            "miou",
            "n",
            "weight_bits",
            "payload_bits",
            "metadata_bits",
            "flops_raw",
            "flops_weighted",
            "size_reduction",
        ],
        csv_rows,
    )

    pair_dir = d / "pairs"
    pair_dir.mkdir(exist_ok=True)
    for (psnr, s), imgs in sorted(dumps.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        strip = np.concatenate([imgs["gt"], imgs["fp"], imgs["quant"]], axis=2)
        write_ppm(pair_dir / f"psnr{_fmt_psnr(psnr)}_seed{s}.ppm", strip)
    _write_manifest(d, "evaluate", cfg, {"metrics": "metrics.csv", "pairs": "pairs/"})
    return d / "metrics.csv"


def stage_report(cfg: RunConfig, out) -> Path:
    metrics = Path(out) / "evaluate" / "metrics.csv"
    if not metrics.exists():
        raise ArtifactError("evaluation metrics", metrics)
    d = _stage_dir(out, "report")

    with open(metrics, newline="") as f:
        rows = list(csv.DictReader(f))
    quality = [r for r in rows if r["kind"] == "quality"]
    model_rows = {r["model"]: r for r in rows if r["kind"] == "model"}

    psnrs = []
    for r in quality:
        if r["psnr_db"] not in psnrs:
            psnrs.append(r["psnr_db"])
    header = ["model", "weight_bits", "payload_bits", "size_reduction_pct", "flops_raw", "flops_weighted", "flops_reduction_pct"]
    for p in psnrs:
        header += [f"mse@psnr{p}", f"miou@psnr{p}"]

    out_rows = []
    fp_flops = float(model_rows["fp"]["flops_weighted"])
    for label in ("fp", "quant"):
        m = model_rows[label]
        red = float(m["size_reduction"]) * 100.0 if m["size_reduction"] else 0.0
        flops_red = (1.0 - float(m["flops_weighted"]) / fp_flops) * 100.0
        row = [label, m["weight_bits"], m["payload_bits"], red, m["flops_raw"], m["flops_weighted"], flops_red]
        for p in psnrs:
            q = next(r for r in quality if r["psnr_db"] == p and r["model"] == label)
            row += [q["mse"], q["miou"]]
        out_rows.append(row)
    write_csv(d / "summary.csv", header, out_rows)
    _write_manifest(d, "report", cfg, {"summary": "summary.csv"})
    return d / "summary.csv"
