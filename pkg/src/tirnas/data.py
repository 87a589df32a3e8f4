"""Synthetic thermal-like sequences, crop extraction, augmentation, and the
on-disk sequence layout (one directory per sequence: numbered PNG frames
plus groundtruth.txt with one "x,y,w,h" line per frame).

Each identity is a bright elliptical blob with its own size, intensity,
stripe pattern and gait, moving over a textured background.  Nuisance
events (blur, occlusion, thermal crossover, intensity shift) are injected
per sequence at a configurable rate.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError

logger = logging.getLogger(__name__)

NUISANCE_KINDS = ("blur", "occlusion", "crossover", "intensity_shift")


@dataclass
class NuisanceEvent:
    kind: str
    start: int
    end: int  # exclusive


@dataclass
class SyntheticSequence:
    frames: np.ndarray            # (T, H, W) float32 in [0, 1]
    boxes: np.ndarray             # (T, 4) x, y, w, h in pixels
    identity: int
    nuisances: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ConfigError("a sequence needs at least 2 frames")
        if len(self.frames) != len(self.boxes):
            raise ConfigError("frames and boxes must align")

    def __len__(self):
        return len(self.frames)


@dataclass
class SyntheticDataset:
    sequences: list
    image_size: int
    _stats: tuple | None = None

    def __len__(self):
        return len(self.sequences)

    def identities(self):
        return [s.identity for s in self.sequences]

    def stats(self) -> tuple[float, float]:
        """Dataset-wide pixel mean/std, cached."""
        if self._stats is None:
            pixels = np.concatenate([s.frames.reshape(-1) for s in self.sequences])
            self._stats = (float(pixels.mean()), float(pixels.std()))
        return self._stats


def _identity_params(rng: np.random.Generator, image_size: int) -> dict:
    return {
        "intensity": rng.uniform(0.55, 0.95),
        "rx": rng.uniform(image_size / 13, image_size / 7),
        "ry": rng.uniform(image_size / 13, image_size / 7),
        "stripe_freq": rng.uniform(0.08, 0.30),
        "stripe_phase": rng.uniform(0, 2 * np.pi),
        "stripe_angle": rng.uniform(0, np.pi),
        "stripe_contrast": rng.uniform(0.15, 0.45),
        "gait_amp": rng.uniform(0.04, 0.16),
        "gait_freq": rng.uniform(0.2, 0.7),
        "gait_phase": rng.uniform(0, 2 * np.pi),
    }


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.normal(size=(max(2, size // 8), max(2, size // 8)))
    smooth = ndimage.zoom(coarse, size / coarse.shape[0], order=1)[:size, :size]
    smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-9)
    return (0.08 + 0.20 * smooth).astype(np.float32)


def _render_blob(size: int, cx: float, cy: float, rx: float, ry: float,
                 params: dict, intensity: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    falloff = np.exp(-2.0 * ((dx / rx) ** 2 + (dy / ry) ** 2))
    u = np.cos(params["stripe_angle"]) * dx + np.sin(params["stripe_angle"]) * dy
    pattern = 1.0 + params["stripe_contrast"] * np.sin(
        2 * np.pi * params["stripe_freq"] * u + params["stripe_phase"])
    return (intensity * falloff * pattern).astype(np.float32)


def _sample_events(rng: np.random.Generator, frames: int, rate: float) -> list:
    events = []
    for kind in NUISANCE_KINDS:
        if rng.uniform() < rate:
            span = max(1, int(frames * rng.uniform(0.15, 0.35)))
            start = int(rng.integers(0, max(1, frames - span)))
            events.append(NuisanceEvent(kind, start, start + span))
    return events


def generate_sequence(identity: int, params: dict, frames: int, size: int,
                      rng: np.random.Generator, nuisance_rate: float) -> SyntheticSequence:
    bg = _textured_background(rng, size)
    events = _sample_events(rng, frames, nuisance_rate)
    active = {e.kind: e for e in events}
    margin = max(params["rx"], params["ry"]) + 2
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    step = size / 40.0
    shift_amount = rng.uniform(-0.15, 0.15)
    out_frames = np.empty((frames, size, size), dtype=np.float32)
    out_boxes = np.empty((frames, 4), dtype=np.float32)

    for t in range(frames):
        gait = 1.0 + params["gait_amp"] * np.sin(params["gait_freq"] * t + params["gait_phase"])
        rx, ry = params["rx"] * gait, params["ry"] / gait
        cx = float(np.clip(cx + rng.normal(0, step), margin, size - margin))
        cy = float(np.clip(cy + rng.normal(0, step), margin, size - margin))

        intensity = params["intensity"]
        ev = active.get("crossover")
        if ev and ev.start <= t < ev.end:
            intensity *= 0.45
        img = np.clip(bg + _render_blob(size, cx, cy, rx, ry, params, intensity), 0.0, 1.0)

        ev = active.get("occlusion")
        if ev and ev.start <= t < ev.end:
            ow, oh = max(2, int(rx)), max(2, int(1.2 * ry))
            ox = int(np.clip(cx - ow / 2 + rng.normal(0, 2), 0, size - ow))
            oy = int(np.clip(cy - oh / 2 + rng.normal(0, 2), 0, size - oh))
            img[oy:oy + oh, ox:ox + ow] = float(bg.mean())
        ev = active.get("blur")
        if ev and ev.start <= t < ev.end:
            img = ndimage.gaussian_filter(img, 1.6)
        ev = active.get("intensity_shift")
        if ev and ev.start <= t < ev.end:
            img = np.clip(img + shift_amount, 0.0, 1.0)

        scale = 1.15
        w = max(3.0, 2 * rx * scale)
        h = max(3.0, 2 * ry * scale)
        x = float(np.clip(cx - w / 2, 0, size - w))
        y = float(np.clip(cy - h / 2, 0, size - h))
        out_frames[t] = img.astype(np.float32)
        out_boxes[t] = (x, y, w, h)

    return SyntheticSequence(out_frames, out_boxes, identity, events)


def generate_dataset(num_identities: int, frames_per_identity: int, image_size: int = 64,
                     seed: int = 0, nuisance_rate: float = 0.2) -> SyntheticDataset:
    """One sequence per identity; byte-deterministic under the seed."""
    if num_identities < 1 or frames_per_identity < 2 or image_size < 16:
        raise ConfigError("need >= 1 identity, >= 2 frames, image_size >= 16")
    master = np.random.default_rng(seed)
    sequences = []
    for ident in range(num_identities):
        params = _identity_params(master, image_size)
        seq_rng = np.random.default_rng(master.integers(0, 2 ** 63))
        sequences.append(generate_sequence(ident, params, frames_per_identity,
                                           image_size, seq_rng, nuisance_rate))
    return SyntheticDataset(sequences, image_size)


# ---------------------------------------------------------------------------
# crops


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def box_center(box) -> tuple[float, float]:
    x, y, w, h = box
    return x + w / 2.0, y + h / 2.0


def crop_window(frame: np.ndarray, cx: float, cy: float, side: float,
                out_size: int) -> np.ndarray:
    """Square window around (cx, cy), zero-padded at borders, resized."""
    h, w = frame.shape
    half = side / 2.0
    x0, y0 = int(np.floor(cx - half)), int(np.floor(cy - half))
    x1, y1 = int(np.ceil(cx + half)), int(np.ceil(cy + half))
    out = np.zeros((y1 - y0, x1 - x0), dtype=np.float32)
    sy0, sy1 = max(0, y0), min(h, y1)
    sx0, sx1 = max(0, x0), min(w, x1)
    out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    return resize_bilinear(out, out_size, out_size)


def crop_box_region(frame: np.ndarray, box, out_size: int, context: float = 2.0) -> np.ndarray:
    cx, cy = box_center(box)
    side = max(box[2], box[3]) * context
    return crop_window(frame, cx, cy, side, out_size)


def jitter_box(box, rng: np.random.Generator, frac: float = 0.2,
               bounds: tuple | None = None):
    """Uniform +-frac translation and scale, the stand-in for a predicted box."""
    x, y, w, h = box
    nw = w * (1.0 + rng.uniform(-frac, frac))
    nh = h * (1.0 + rng.uniform(-frac, frac))
    nx = x + rng.uniform(-frac, frac) * w
    ny = y + rng.uniform(-frac, frac) * h
    if bounds is not None:
        bw, bh = bounds
        nw, nh = min(nw, bw), min(nh, bh)
        nx = float(np.clip(nx, 0, bw - nw))
        ny = float(np.clip(ny, 0, bh - nh))
    return (nx, ny, nw, nh)


def _boxes_iou(a, b) -> float:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def background_box(frame_shape, gt_box, rng: np.random.Generator,
                   max_iou: float = 0.2, tries: int = 25):
    """A box matching the target's size that barely overlaps it."""
    h, w = frame_shape
    _, _, bw, bh = gt_box
    bw, bh = min(bw, w - 1), min(bh, h - 1)
    best, best_iou = None, 1.0
    for _ in range(tries):
        x = rng.uniform(0, w - bw)
        y = rng.uniform(0, h - bh)
        cand = (x, y, bw, bh)
        iou = _boxes_iou(cand, gt_box)
        if iou <= max_iou:
            return cand
        if iou < best_iou:
            best, best_iou = cand, iou
    return best


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    """Search phase: erase + flip + pad/crop + normalize.
    Retrain phase: flip + normalize only."""

    phase: str
    mean: float
    std: float
    flip_prob: float = 0.5
    pad: int = 10
    erase_min: float = 0.02
    erase_max: float = 0.2

    def __post_init__(self):
        if self.phase not in ("search", "retrain"):
            raise ConfigError(f"phase must be search|retrain, got {self.phase!r}")

    @property
    def use_pad_crop(self) -> bool:
        return self.phase == "search"

    @property
    def use_erase(self) -> bool:
        return self.phase == "search"


def _flip_horizontal(image: np.ndarray, boxes: np.ndarray) -> tuple:
    w = image.shape[-1]
    flipped = image[..., ::-1].copy()
    out = boxes.copy()
    if len(out):
        out[:, 0] = w - out[:, 0] - out[:, 2]
    return flipped, out


def augment(image: np.ndarray, boxes, config: AugmentConfig,
            rng: np.random.Generator, force_flip: bool | None = None) -> tuple:
    """Apply the phase's augmentations to one (C, H, W) image and its boxes."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4).copy()
    c, h, w = img.shape

    do_flip = force_flip if force_flip is not None else bool(rng.uniform() < config.flip_prob)
    if do_flip:
        img, boxes = _flip_horizontal(img, boxes)

    if config.use_pad_crop and config.pad > 0:
        p = config.pad
        padded = np.pad(img, ((0, 0), (p, p), (p, p)))
        oy = int(rng.integers(0, 2 * p + 1))
        ox = int(rng.integers(0, 2 * p + 1))
        img = padded[:, oy:oy + h, ox:ox + w].copy()
        if len(boxes):
            boxes[:, 0] += p - ox
            boxes[:, 1] += p - oy

    if config.use_erase:
        area = h * w * rng.uniform(config.erase_min, config.erase_max)
        aspect = rng.uniform(0.5, 2.0)
        eh = int(np.clip(np.sqrt(area * aspect), 1, h))
        ew = int(np.clip(np.sqrt(area / aspect), 1, w))
        ey = int(rng.integers(0, h - eh + 1))
        ex = int(rng.integers(0, w - ew + 1))
        img[:, ey:ey + eh, ex:ex + ew] = config.mean

    img = (img - config.mean) / config.std
    return img, boxes


# ---------------------------------------------------------------------------
# disk layout


def save_dataset(dataset: SyntheticDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for seq in dataset.sequences:
        seq_dir = root / f"seq_{seq.identity:03d}"
        seq_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            arr = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(seq_dir / f"{t + 1:06d}.png")
        with open(seq_dir / "groundtruth.txt", "w") as fh:
            for x, y, w, h in seq.boxes:
                fh.write(f"{x:.2f},{y:.2f},{w:.2f},{h:.2f}\n")


def load_dataset(root) -> SyntheticDataset:
    """Load the sequence-on-disk layout (drop-in point for real data)."""
    root = Path(root)
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not seq_dirs:
        raise ConfigError(f"no sequence directories under {root}")
    sequences = []
    size = None
    for i, seq_dir in enumerate(seq_dirs):
        gt = seq_dir / "groundtruth.txt"
        if not gt.exists():
            raise ConfigError(f"{seq_dir} has no groundtruth.txt")
        boxes = np.array([[float(v) for v in line.split(",")]
                          for line in gt.read_text().splitlines() if line.strip()],
                         dtype=np.float32)
        frame_files = sorted(seq_dir.glob("*.png")) + sorted(seq_dir.glob("*.jpg"))
        frames = np.stack([np.asarray(Image.open(f).convert("L"), dtype=np.float32) / 255.0
                           for f in frame_files])
        match = re.search(r"(\d+)$", seq_dir.name)
        identity = int(match.group(1)) if match else i
        size = frames.shape[-1] if size is None else size
        sequences.append(SyntheticSequence(frames, boxes[:len(frames)], identity))
    return SyntheticDataset(sequences, size)
