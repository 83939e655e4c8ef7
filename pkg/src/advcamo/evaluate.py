"""Detection metrics and attack evaluation: AP, ASR, transfer grids, sweeps.

Reports are written as CSV (grid) plus JSON (full breakdown), with
matplotlib figures rendered alongside. NMS lives here and only here; the
attack path never suppresses detections.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import detector as det
from .scene import RenderedScene, Texture, composite_image, NEUTRAL_GRAY

CONF_THRESHOLD = 0.5
IOU_THRESHOLD = 0.5
NMS_IOU = 0.5


class EvaluateError(Exception):
    pass


# ---------------------------------------------------------------------------
# metrics


def nms(detections, iou_threshold: float = NMS_IOU):
    """Greedy suppression by descending objectness*class score."""
    if not 0 < iou_threshold < 1:
        raise EvaluateError("nms threshold must be in (0, 1)")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    keep = []
    for i in order:
        d = detections[i]
        if all(det.iou(d.corners, k.corners) < iou_threshold for k in keep):
            keep.append(d)
    return keep


def average_precision(per_image_detections, per_image_gts, iou_threshold: float = IOU_THRESHOLD) -> float:
    """All-point interpolated AP, single class, one GT box per image."""
    records = []
    n_gt = 0
    for img_id, (dets, gt) in enumerate(zip(per_image_detections, per_image_gts)):
        if gt is not None:
            n_gt += 1
        for d in dets:
            records.append((d.score, img_id, d))
    if n_gt == 0:
        return 0.0
    records.sort(key=lambda r: -r[0])
    matched = set()
    tp = np.zeros(len(records))
    for rank, (_, img_id, d) in enumerate(records):
        gt = per_image_gts[img_id]
        if gt is None or img_id in matched:
            continue
        if det.iou(d.corners, gt) >= iou_threshold:
            tp[rank] = 1.0
            matched.add(img_id)
    if len(records) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # every-point interpolation: integrate max precision at recall >= r
    ap = 0.0
    prev_r = 0.0
    for r in np.unique(recall):
        if r <= prev_r:
            continue
        p = precision[recall >= r].max()
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def _is_detected(dets, gt, conf_threshold: float, iou_threshold: float) -> bool:
    if gt is None:
        return False
    survivors = nms(dets)
    return any(
        d.score >= conf_threshold and det.iou(d.corners, gt) >= iou_threshold
        for d in survivors
    )


def attack_success_rate(
    clean_detections,
    adv_detections,
    ground_truths,
    conf_threshold: float = CONF_THRESHOLD,
    iou_threshold: float = IOU_THRESHOLD,
) -> float:
    """Fraction of clean-detected images the adversarial render evades."""
    if not (len(clean_detections) == len(adv_detections) == len(ground_truths)):
        raise EvaluateError("attack_success_rate: mismatched image sets")
    clean_hits = [
        i
        for i in range(len(ground_truths))
        if _is_detected(clean_detections[i], ground_truths[i], conf_threshold, iou_threshold)
    ]
    if not clean_hits:
        raise EvaluateError("undefined ASR: no clean detections")
    evaded = sum(
        0 if _is_detected(adv_detections[i], ground_truths[i], conf_threshold, iou_threshold) else 1
        for i in clean_hits
    )
    return evaded / len(clean_hits)


# ---------------------------------------------------------------------------
# running detectors over scenes


def detect_image(model: det.DetectorModel, image: np.ndarray):
    """Tape-free forward pass; all per-cell detections for one image."""
    dets, _ = det.forward(model, image)
    return dets.to_list(0)


def detections_for_texture(model, scenes, texture_values, chunk: int = 8):
    """Per-scene detection lists for scenes re-composited with a texture."""
    out = []
    for start in range(0, len(scenes), chunk):
        group = scenes[start : start + chunk]
        images = np.stack(
            [composite_image(s.face_index, s.mask, s.shading, s.background, texture_values) for s in group]
        )
        dets, _ = det.forward(model, images)
        for b in range(len(group)):
            out.append(dets.to_list(b))
    return out


def gray_texture(scenes) -> np.ndarray:
    n = max(int(s.face_index.max()) + 1 for s in scenes)
    return np.full((max(n, 1), 3), NEUTRAL_GRAY)


def clean_ap(model, scenes, texture_values=None) -> float:
    """AP on the scenes rendered with the clean (neutral gray) texture."""
    if texture_values is None:
        texture_values = gray_texture(scenes)
    dets = detections_for_texture(model, scenes, texture_values)
    gts = [s.gt_box for s in scenes]
    return average_precision(dets, gts)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    model_id: str
    ap: float
    asr: float
    clean_ap: float
    n_images: int
    buckets: list = field(default_factory=list)  # per (distance, pitch) breakdown
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _bucket_key(scene: RenderedScene):
    return (scene.pose.distance, scene.pose.pitch)


def evaluate_texture(
    model: det.DetectorModel,
    model_id: str,
    scenes,
    texture_values,
    clean_texture_values=None,
    metadata=None,
) -> EvalReport:
    """AP and ASR of a texture against one model on a scene set."""
    if clean_texture_values is None:
        clean_texture_values = gray_texture(scenes)
    gts = [s.gt_box for s in scenes]
    clean_dets = detections_for_texture(model, scenes, clean_texture_values)
    adv_dets = detections_for_texture(model, scenes, texture_values)
    ap = average_precision(adv_dets, gts)
    base_ap = average_precision(clean_dets, gts)
    asr = attack_success_rate(clean_dets, adv_dets, gts)

    buckets = []
    keys = sorted({_bucket_key(s) for s in scenes})
    for key in keys:
        sel = [i for i, s in enumerate(scenes) if _bucket_key(s) == key]
        b_ap = average_precision([adv_dets[i] for i in sel], [gts[i] for i in sel])
        try:
            b_asr = attack_success_rate(
                [clean_dets[i] for i in sel], [adv_dets[i] for i in sel], [gts[i] for i in sel]
            )
        except EvaluateError:
            b_asr = float("nan")
        buckets.append({"distance": key[0], "pitch": key[1], "ap": b_ap, "asr": b_asr})
    return EvalReport(
        model_id=model_id,
        ap=ap,
        asr=asr,
        clean_ap=base_ap,
        n_images=len(scenes),
        buckets=buckets,
        metadata=dict(metadata or {}),
    )


def transfer_matrix(textures: dict, models: dict, scenes, clean_texture_values=None) -> dict:
    """Grid of (AP, ASR) per texture source and target model, plus a clean row.

    textures maps source ids to texture value arrays; models maps model ids
    to DetectorModel. The "raw" row evaluates the clean texture against
    itself, so its ASR column is identically zero.
    """
    if clean_texture_values is None:
        clean_texture_values = gray_texture(scenes)
    grid = {"raw": {}}
    for model_id, model in models.items():
        rep = evaluate_texture(model, model_id, scenes, clean_texture_values, clean_texture_values)
        grid["raw"][model_id] = rep
    for source_id, tex in textures.items():
        grid[source_id] = {}
        for model_id, model in models.items():
            grid[source_id][model_id] = evaluate_texture(
                model, model_id, scenes, tex, clean_texture_values, metadata={"source": source_id}
            )
    return grid


def write_transfer_csv(grid: dict, path):
    model_ids = sorted(next(iter(grid.values())).keys())
    fields = ["source"]
    for m in model_ids:
        fields += [f"ap_{m}", f"asr_{m}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for source in grid:
            row = {"source": source}
            for m in model_ids:
                rep = grid[source][m]
                row[f"ap_{m}"] = f"{rep.ap:.6f}"
                row[f"asr_{m}"] = f"{rep.asr:.6f}"
            writer.writerow(row)


def write_transfer_json(grid: dict, path):
    payload = {
        source: {m: rep.to_dict() for m, rep in row.items()} for source, row in grid.items()
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def plot_transfer_grid(grid: dict, path):
    """Annotated AP/ASR heatmaps for the transfer grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sources = list(grid.keys())
    model_ids = sorted(next(iter(grid.values())).keys())
    ap = np.array([[grid[s][m].ap for m in model_ids] for s in sources])
    asr = np.array([[grid[s][m].asr for m in model_ids] for s in sources])
    fig, axes = plt.subplots(1, 2, figsize=(2.2 * len(model_ids) + 4, 0.9 * len(sources) + 2))
    for ax, data, title, cmap in ((axes[0], ap, "AP", "viridis"), (axes[1], asr, "ASR", "magma")):
        im = ax.imshow(data, vmin=0, vmax=1, cmap=cmap)
        ax.set_xticks(range(len(model_ids)), model_ids, rotation=30, ha="right")
        ax.set_yticks(range(len(sources)), sources)
        ax.set_title(title)
        for i in range(len(sources)):
            for j in range(len(model_ids)):
                ax.text(j, i, f"{data[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# sweeps


SWEEP_AXES = ("p", "alpha1", "alpha2", "k", "loss_items")


def sweep_configs(template, axis: str, values):
    """Derived attack configs for a sweep axis, with controlled companions.

    alpha1 sweeps run with alpha2=0; alpha2 sweeps with alpha1=0 and paper
    k=100; k sweeps with alpha1=0, alpha2=1. The k axis takes paper-scale
    values and records the resolution-scaled effective k alongside.
    """
    from . import optimize as opt
    from .losses import effective_topk

    if axis not in SWEEP_AXES:
        raise EvaluateError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise EvaluateError("sweep requires a non-empty value list")
    out = []
    for value in values:
        cfg = opt.replace_config(template)
        extra = {}
        if axis == "p":
            cfg.p_transforms = int(value)
        elif axis == "alpha1":
            cfg.weights.alpha1 = float(value)
            cfg.weights.alpha2 = 0.0
        elif axis == "alpha2":
            cfg.weights.alpha1 = 0.0
            cfg.weights.alpha2 = float(value)
            cfg.weights.k = 100
        elif axis == "k":
            cfg.weights.alpha1 = 0.0
            cfg.weights.alpha2 = 1.0
            cfg.weights.k = int(value)
            extra["k_paper"] = int(value)
            extra["k_eff"] = effective_topk(int(value), cfg.image_size)
        elif axis == "loss_items":
            if value not in ("fas", "baa", "fas+baa"):
                raise EvaluateError(f"loss_items value must be fas|baa|fas+baa, got {value!r}")
            cfg.attention_items = str(value)
        out.append((value, cfg, extra))
    return out


def run_sweep(template, axis, values, mesh, train_scenes, test_scenes, white_box, models, out_dir):
    """One attack plus evaluation per axis value; returns the row dicts."""
    from . import optimize as opt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    clean_tex = gray_texture(test_scenes)
    raw_grid = transfer_matrix({}, models, test_scenes, clean_tex)
    for model_id in sorted(models):
        rep = raw_grid["raw"][model_id]
        rows.append(
            {
                "axis": axis,
                "value": "raw",
                "model": model_id,
                "ap": f"{rep.ap:.6f}",
                "asr": f"{rep.asr:.6f}",
            }
        )
    for value, cfg, extra in sweep_configs(template, axis, values):
        run_dir = out_dir / f"{axis}_{value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        run = opt.attack(cfg, mesh, train_scenes, white_box, run_dir)
        for model_id in sorted(models):
            rep = evaluate_texture(
                models[model_id], model_id, test_scenes, run.final_texture.values, clean_tex,
                metadata={"axis": axis, "value": str(value), **{k: str(v) for k, v in extra.items()}},
            )
            row = {
                "axis": axis,
                "value": str(value),
                "model": model_id,
                "ap": f"{rep.ap:.6f}",
                "asr": f"{rep.asr:.6f}",
            }
            row.update({k: str(v) for k, v in extra.items()})
            rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    fields = ["axis", "value", "model", "ap", "asr"]
    extras = sorted({k for r in rows for k in r} - set(fields))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields + extras)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


def plot_sweep_trend(rows, path):
    """AP and ASR versus the swept value, one line per model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = [r for r in rows if r["value"] != "raw"]
    if not data:
        return
    models = sorted({r["model"] for r in data})
    values = []
    for r in data:
        if r["value"] not in values:
            values.append(r["value"])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for metric, ax in (("ap", axes[0]), ("asr", axes[1])):
        for m in models:
            ys = [float(r[metric]) for r in data if r["model"] == m]
            ax.plot(range(len(ys)), ys, marker="o", label=m)
        ax.set_xticks(range(len(values)), [str(v) for v in values])
        ax.set_xlabel(data[0]["axis"])
        ax.set_ylabel(metric.upper())
        ax.set_ylim(-0.05, 1.05)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
