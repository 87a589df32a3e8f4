"""Desk-scale evaluation: embedding nearest-crop localization.

For each held-out sequence the first frame's ground-truth crop is the
template; on every later frame a grid of candidate boxes (the template's
size) is embedded and the candidate closest to the template in feature
space becomes the prediction.  Protocols 'gt' (copies the ground truth)
and 'random' (uniform random boxes) provide the oracle ceiling and the
baseline floor for the same metric suite.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .cells import DiscreteNet, NetworkPlan
from .config import RunConfig, config_hash
from .data import crop_window
from .errors import ConfigError
from .genotype import genotype_from_dict
from .losses import l2_normalize
from .metrics import (
    NORM_PRECISION_THRESHOLDS,
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    TrackRecord,
    curve_csv,
    metric_report,
    normalized_precision_curve,
    precision_curve,
    success_curve,
)
from .pipeline import get_eval_dataset, load_checkpoint, make_augment_config

logger = logging.getLogger(__name__)


def load_trained_net(weights_path, cfg: RunConfig):
    bundle = load_checkpoint(weights_path)
    meta = bundle["meta"]
    if "genotype" not in meta:
        raise ConfigError(f"{weights_path} carries no genotype; was it written by retraining?")
    genotype = genotype_from_dict(meta["genotype"])
    plan = NetworkPlan(bottom=genotype.bottom, cells_total=genotype.cells_total,
                       stem_channels=genotype.per_node_channels * 4,
                       embed_dim=int(meta.get("embed_dim", cfg.net.embed_dim)),
                       reduction_positions=genotype.reduction_positions)
    net = DiscreteNet(genotype, plan, np.random.default_rng(0))
    net.load_state_dict(bundle["net"])
    net.eval()
    return net, genotype


def _embed(net, crops: np.ndarray, normalize: bool) -> np.ndarray:
    with no_grad():
        emb, _ = net(Tensor(crops))
        if normalize:
            emb = l2_normalize(emb)
    return emb.data


def _grid_centers(image_hw, stride: int):
    h, w = image_hw
    ys = np.arange(stride // 2, h, stride, dtype=np.float64)
    xs = np.arange(stride // 2, w, stride, dtype=np.float64)
    return [(x, y) for y in ys for x in xs]


def track_sequence_model(net, seq, cfg: RunConfig, mean: float, std: float) -> np.ndarray:
    """Predict one box per frame (frame 0 copies the ground truth)."""
    region = cfg.data.eval_region
    context = cfg.data.crop_context
    normalize = cfg.loss.normalize_embeddings
    bw, bh = float(seq.boxes[0, 2]), float(seq.boxes[0, 3])
    side = max(bw, bh) * context

    def norm_crop(frame, cx, cy):
        return (np.repeat(crop_window(frame, cx, cy, side, region)[None], 3, 0) - mean) / std

    cx0 = seq.boxes[0, 0] + bw / 2.0
    cy0 = seq.boxes[0, 1] + bh / 2.0
    template = _embed(net, norm_crop(seq.frames[0], cx0, cy0)[None].astype(np.float32),
                      normalize)[0]
    centers = _grid_centers(seq.frames[0].shape, cfg.eval.grid_stride)
    preds = [seq.boxes[0].copy()]
    for t in range(1, len(seq)):
        crops = np.stack([norm_crop(seq.frames[t], cx, cy) for cx, cy in centers]).astype(np.float32)
        emb = _embed(net, crops, normalize)
        dists = np.linalg.norm(emb - template[None], axis=1)
        cx, cy = centers[int(np.argmin(dists))]
        preds.append(np.array([cx - bw / 2.0, cy - bh / 2.0, bw, bh]))
    return np.stack(preds)


def track_sequence_random(seq, rng: np.random.Generator) -> np.ndarray:
    h, w = seq.frames[0].shape
    preds = []
    for _ in range(len(seq)):
        bw = rng.uniform(0.1, 0.5) * w
        bh = rng.uniform(0.1, 0.5) * h
        preds.append(np.array([rng.uniform(0, w - bw), rng.uniform(0, h - bh), bw, bh]))
    return np.stack(preds)


def run_eval(cfg: RunConfig, weights_path, out_dir, dataset=None,
             protocol: str | None = None) -> dict:
    cfg.validate()
    protocol = protocol or cfg.eval.protocol
    if protocol not in ("model", "gt", "random"):
        raise ConfigError(f"unknown eval protocol {protocol!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)

    dataset = dataset if dataset is not None else get_eval_dataset(cfg)
    for seq in dataset.sequences:
        if len(seq) < 2:
            raise ConfigError("evaluation sequences need at least 2 frames")
    net = None
    mean = std = None
    if protocol == "model":
        if weights_path is None:
            raise ConfigError("protocol 'model' needs --weights")
        net, _ = load_trained_net(weights_path, cfg)
        aug = make_augment_config(cfg, "retrain", dataset)
        mean, std = aug.mean, aug.std

    records = []
    rng = np.random.default_rng([cfg.seed, 0xE7A1])
    for seq in dataset.sequences:
        if protocol == "gt":
            preds = seq.boxes.copy()
        elif protocol == "random":
            preds = track_sequence_random(seq, rng)
        else:
            preds = track_sequence_model(net, seq, cfg, mean, std)
        records.append(TrackRecord(preds, seq.boxes, (dataset.image_size, dataset.image_size)))

    pooled = TrackRecord(np.concatenate([r.pred for r in records]),
                         np.concatenate([r.gt for r in records]),
                         (dataset.image_size, dataset.image_size))
    overall = metric_report(pooled)

    report_path = out / "eval_report.csv"
    with open(report_path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash} seed={cfg.seed} protocol={protocol}\n")
        writer = csv.writer(fh)
        writer.writerow(["sequence", "precision", "success", "norm_precision"])
        for seq, rec in zip(dataset.sequences, records):
            rep = metric_report(rec)
            writer.writerow([f"seq_{seq.identity:03d}", f"{rep['precision']:.6g}",
                             f"{rep['success']:.6g}", f"{rep['norm_precision']:.6g}"])
        writer.writerow(["overall", f"{overall['precision']:.6g}",
                         f"{overall['success']:.6g}", f"{overall['norm_precision']:.6g}"])

    header = f"# config_hash={chash} seed={cfg.seed} protocol={protocol}\n"
    (out / "precision_curve.csv").write_text(
        header + curve_csv(PRECISION_THRESHOLDS, precision_curve(pooled)))
    (out / "success_curve.csv").write_text(
        header + curve_csv(SUCCESS_THRESHOLDS, success_curve(pooled)))
    (out / "norm_precision_curve.csv").write_text(
        header + curve_csv(NORM_PRECISION_THRESHOLDS, normalized_precision_curve(pooled)))

    logger.info("eval protocol=%s precision=%.3f success=%.3f norm_precision=%.3f",
                protocol, overall["precision"], overall["success"], overall["norm_precision"])
    return {"overall": overall, "records": records, "report_path": report_path,
            "protocol": protocol}
