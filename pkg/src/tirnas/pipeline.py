"""Glue shared by the search/retrain/eval commands: dataset resolution,
crop-batch assembly, and versioned checkpoint files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    AugmentConfig,
    SyntheticDataset,
    augment,
    background_box,
    crop_box_region,
    generate_dataset,
    jitter_box,
    load_dataset,
)
from .errors import ConfigError

CHECKPOINT_VERSION = 1
EVAL_SEED_OFFSET = 77003  # decorrelates eval identities from training ones


def get_train_dataset(cfg: RunConfig) -> SyntheticDataset:
    if cfg.data.source == "disk":
        return load_dataset(cfg.data.root)
    return generate_dataset(cfg.data.identities, cfg.data.frames, cfg.data.image_size,
                            seed=cfg.seed, nuisance_rate=cfg.data.nuisance_rate)


def get_eval_dataset(cfg: RunConfig) -> SyntheticDataset:
    if cfg.data.source == "disk":
        eval_root = Path(cfg.data.root) / "eval"
        if not eval_root.is_dir():
            raise ConfigError(f"disk datasets need an eval/ subdirectory under {cfg.data.root}")
        return load_dataset(eval_root)
    return generate_dataset(cfg.data.eval_identities, cfg.data.eval_frames,
                            cfg.data.image_size, seed=cfg.seed + EVAL_SEED_OFFSET,
                            nuisance_rate=cfg.data.nuisance_rate)


def make_augment_config(cfg: RunConfig, phase: str, dataset: SyntheticDataset) -> AugmentConfig:
    mean, std = dataset.stats()
    return AugmentConfig(phase=phase, mean=mean, std=max(std, 1e-3),
                         flip_prob=cfg.augment.flip_prob, pad=cfg.augment.pad,
                         erase_min=cfg.augment.erase_min, erase_max=cfg.augment.erase_max)


def _to3(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[None], 3, axis=0)


def classification_batch(dataset: SyntheticDataset, refs, cfg: RunConfig,
                         aug: AugmentConfig, rng: np.random.Generator):
    """Foreground/background crop pairs for the given (seq, frame) refs."""
    region = cfg.data.train_region
    images, labels = [], []
    for si, ti in refs:
        seq = dataset.sequences[si]
        frame, box = seq.frames[ti], seq.boxes[ti]
        fg = crop_box_region(frame, box, region, cfg.data.crop_context)
        img, _ = augment(_to3(fg), np.empty((0, 4)), aug, rng)
        images.append(img)
        labels.append(1.0)
        for _ in range(cfg.search.bg_per_frame):
            bb = background_box(frame.shape, box, rng)
            bg = crop_box_region(frame, bb, region, cfg.data.crop_context)
            img, _ = augment(_to3(bg), np.empty((0, 4)), aug, rng)
            images.append(img)
            labels.append(0.0)
    return np.stack(images).astype(np.float32), np.array(labels, dtype=np.float32)


def joint_batch(dataset: SyntheticDataset, picks, cfg: RunConfig,
                aug: AugmentConfig, rng: np.random.Generator):
    """Retraining batch: GT crops, jittered-box crops, background crops.

    Returns (images, section slices, identity labels, classification labels);
    the jittered crops stand in for predicted boxes in the center term.
    """
    region = cfg.data.train_region
    gt_imgs, jit_imgs, identities = [], [], []
    for si, ti in picks:
        seq = dataset.sequences[si]
        frame, box = seq.frames[ti], seq.boxes[ti]
        bounds = (frame.shape[1], frame.shape[0])
        gt = crop_box_region(frame, box, region, cfg.data.crop_context)
        jit = crop_box_region(frame, jitter_box(box, rng, cfg.loss.jitter, bounds),
                              region, cfg.data.crop_context)
        img, _ = augment(_to3(gt), np.empty((0, 4)), aug, rng)
        gt_imgs.append(img)
        img, _ = augment(_to3(jit), np.empty((0, 4)), aug, rng)
        jit_imgs.append(img)
        identities.append(seq.identity)
    bg_imgs = []
    for _ in range(cfg.retrain.bg_per_batch):
        si = int(rng.integers(0, len(dataset.sequences)))
        seq = dataset.sequences[si]
        ti = int(rng.integers(0, len(seq)))
        bb = background_box(seq.frames[ti].shape, seq.boxes[ti], rng)
        bg = crop_box_region(seq.frames[ti], bb, region, cfg.data.crop_context)
        img, _ = augment(_to3(bg), np.empty((0, 4)), aug, rng)
        bg_imgs.append(img)

    n_fg = len(gt_imgs)
    parts = gt_imgs + jit_imgs + bg_imgs
    images = np.stack(parts).astype(np.float32)
    sl_gt = slice(0, n_fg)
    sl_jit = slice(n_fg, 2 * n_fg)
    cls_labels = np.concatenate([np.ones(2 * n_fg), np.zeros(len(bg_imgs))]).astype(np.float32)
    return images, (sl_gt, sl_jit), np.array(identities), cls_labels


# ---------------------------------------------------------------------------
# checkpoints


def rng_state_to_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def rng_from_json(text: str) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(text)
    return rng


def save_checkpoint(path, *, kind: str, epoch: int, seed: int, config_hash: str,
                    net_state: dict | None = None, alphas: dict | None = None,
                    optimizers: dict | None = None, rng: np.random.Generator | None = None,
                    extra_meta: dict | None = None) -> None:
    """Versioned .npz bundle: metadata JSON plus prefixed arrays."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "epoch": epoch,
        "seed": seed,
        "config_hash": config_hash,
    }
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    if extra_meta:
        meta.update(extra_meta)
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, arr in (net_state or {}).items():
        arrays["net::" + name] = arr
    for ct, alpha in (alphas or {}).items():
        arrays["alpha::" + ct] = alpha.values.data if hasattr(alpha, "values") else np.asarray(alpha)
    for opt_name, state in (optimizers or {}).items():
        for key, value in state.items():
            if isinstance(value, list):
                for i, arr in enumerate(value):
                    arrays[f"opt::{opt_name}::{key}::{i}"] = arr
            else:
                arrays[f"opt::{opt_name}::{key}"] = np.asarray(value)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(Path(path), allow_pickle=False) as bundle:
        meta = json.loads(bytes(bundle["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        net_state, alphas, optimizers = {}, {}, {}
        for key in bundle.files:
            if key.startswith("net::"):
                net_state[key[5:]] = bundle[key]
            elif key.startswith("alpha::"):
                alphas[key[7:]] = bundle[key]
            elif key.startswith("opt::"):
                _, opt_name, field, *rest = key.split("::")
                slot = optimizers.setdefault(opt_name, {})
                if rest:
                    slot.setdefault(field, {})[int(rest[0])] = bundle[key]
                else:
                    slot[field] = bundle[key]
    for state in optimizers.values():
        for field, value in list(state.items()):
            if isinstance(value, dict):
                state[field] = [value[i] for i in sorted(value)]
            elif field == "t":
                state[field] = int(value)
    return {"meta": meta, "net": net_state, "alphas": alphas, "optimizers": optimizers}
