"""Alternating bilevel optimization of architecture parameters (alpha,
Adam) and operation weights (omega, SGD momentum with cosine annealing).

Each iteration runs one alpha step on a batch from the held-out half of
the training data with the weights frozen, then one omega step on a batch
from the other half with alpha frozen (first-order alternation, fresh
channel masks every forward).  The two halves never exchange samples.
"""

from __future__ import annotations

import csv
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import GradTape, Tensor, count_macs
from .cells import NetworkPlan, SuperNet, init_alphas
from .config import RunConfig, config_hash
from .errors import ConfigError, SearchAborted
from .genotype import alpha_checksum, derive_genotype, save_genotype
from .losses import classification_loss
from .optim import Adam, SGDMomentum, clip_grad_norm, cosine_lr
from .pipeline import (
    classification_batch,
    get_train_dataset,
    make_augment_config,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


@dataclass
class SplitDataset:
    """Disjoint 50/50 frame split; alpha_half updates alpha, omega_half omega."""

    alpha_half: list
    omega_half: list

    def __post_init__(self):
        overlap = set(self.alpha_half) & set(self.omega_half)
        if overlap:
            raise ConfigError(f"dataset halves share {len(overlap)} samples")


def split_dataset(dataset, seed: int) -> SplitDataset:
    refs = [(si, ti) for si, seq in enumerate(dataset.sequences) for ti in range(len(seq))]
    rng = np.random.default_rng([seed, 0xA11])
    rng.shuffle(refs)
    half = len(refs) // 2
    return SplitDataset(alpha_half=refs[:half], omega_half=refs[half:])


@contextmanager
def frozen(params):
    """Temporarily drop requires_grad so backward never touches these."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def search_epoch(net: SuperNet, dataset, split: SplitDataset, cfg: RunConfig,
                 aug, opt_alpha: Adam, opt_omega: SGDMomentum, epoch: int) -> dict:
    """One epoch of alternating alpha/omega updates; returns epoch metrics."""
    batch = cfg.search.batch
    steps = min(len(split.alpha_half), len(split.omega_half)) // batch
    if steps == 0:
        raise ConfigError(f"batch size {batch} exceeds half-set size "
                          f"{min(len(split.alpha_half), len(split.omega_half))}")
    full_steps = len(split.omega_half) // batch
    if steps < full_steps:
        logger.info("epoch %d shortened to %d iteration pairs by the smaller half", epoch, steps)

    order_rng = _epoch_rng(cfg.seed, epoch, 1)
    aug_rng = _epoch_rng(cfg.seed, epoch, 2)
    mask_rng = _epoch_rng(cfg.seed, epoch, 3)
    a_refs = list(split.alpha_half)
    o_refs = list(split.omega_half)
    order_rng.shuffle(a_refs)
    order_rng.shuffle(o_refs)

    lr_omega = cosine_lr(epoch - 1, cfg.search.epochs, cfg.search.omega_lr_max,
                         cfg.search.omega_lr_min)
    alpha_params = net.alpha_parameters()
    omega_params = net.weight_parameters()
    alpha_losses, omega_losses = [], []
    t0 = time.perf_counter()

    with count_macs() as macs_box:
        for step in range(steps):
            a_batch = a_refs[step * batch:(step + 1) * batch]
            images, labels = classification_batch(dataset, a_batch, cfg, aug, aug_rng)
            with frozen(omega_params):
                opt_alpha.zero_grad()
                with GradTape() as tape:
                    _, prob = net(Tensor(images), rng=mask_rng)
                    loss = classification_loss(prob, labels)
                    # optimize the per-sample mean: pure step-size rescale
                    objective = loss * (1.0 / len(labels))
                _check_finite(loss, epoch, step, "alpha")
                tape.backward(objective)
                opt_alpha.step()
            alpha_losses.append(loss.item())

            o_batch = o_refs[step * batch:(step + 1) * batch]
            images, labels = classification_batch(dataset, o_batch, cfg, aug, aug_rng)
            with frozen(alpha_params):
                opt_omega.zero_grad()
                with GradTape() as tape:
                    _, prob = net(Tensor(images), rng=mask_rng)
                    loss = classification_loss(prob, labels)
                    objective = loss * (1.0 / len(labels))
                _check_finite(loss, epoch, step, "omega")
                tape.backward(objective)
                clip_grad_norm(omega_params, cfg.search.grad_clip)
                opt_omega.step(lr=lr_omega)
            omega_losses.append(loss.item())

    wall_ms = (time.perf_counter() - t0) * 1000.0
    return {
        "epoch": epoch,
        "alpha_loss": float(np.mean(alpha_losses)),
        "omega_loss": float(np.mean(omega_losses)),
        "lr": lr_omega,
        "wall_ms": wall_ms,
        "flops_estimate": macs_box[0] // steps,  # forward MACs per iteration pair
        "steps": steps,
    }


def _check_finite(loss, epoch, step, phase):
    if not np.isfinite(loss.data).all():
        raise SearchAborted(f"non-finite {phase} loss at epoch {epoch} step {step}")


def alpha_snapshot_csv(alpha_values: np.ndarray, edges) -> str:
    from .search_space import OP_KINDS

    lines = ["edge_id,from,to," + ",".join(OP_KINDS)]
    for (edge_id, frm, to), row in zip(edges, alpha_values):
        lines.append(f"{edge_id},{frm},{to}," + ",".join(f"{v:.6g}" for v in row))
    return "\n".join(lines) + "\n"


def run_search(cfg: RunConfig, out_dir, dataset=None) -> dict:
    """Full search stage: alternating epochs, logs, checkpoints, genotype."""
    from .cells import make_template

    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "alpha").mkdir(exist_ok=True)
    chash = config_hash(cfg)

    dataset = dataset if dataset is not None else get_train_dataset(cfg)
    aug = make_augment_config(cfg, "search", dataset)
    split = split_dataset(dataset, cfg.seed)

    plan = NetworkPlan(bottom=cfg.net.bottom, cells_total=cfg.net.cells,
                       stem_channels=cfg.net.stem_channels, embed_dim=cfg.net.embed_dim,
                       reduction_positions=cfg.reduction_positions())
    alphas = init_alphas(cfg.net.bottom)
    net = SuperNet(plan, alphas, cfg.search.channel_rate, np.random.default_rng(cfg.seed))
    opt_alpha = Adam(net.alpha_parameters(), cfg.search.alpha_lr,
                     betas=(cfg.search.alpha_beta1, cfg.search.alpha_beta2))
    opt_omega = SGDMomentum(net.weight_parameters(), cfg.search.omega_lr_max,
                            momentum=cfg.search.momentum, weight_decay=cfg.search.weight_decay)

    log_path = out / "search_log.csv"
    templates = {ct: make_template(cfg.net.bottom, ct) for ct in ("normal", "reduction")}
    last_checkpoint = None
    history = []

    with open(log_path, "w", newline="") as log_fh:
        log_fh.write(f"# config_hash={chash} seed={cfg.seed}\n")
        writer = csv.DictWriter(log_fh, fieldnames=[
            "epoch", "alpha_loss", "omega_loss", "lr", "wall_ms", "flops_estimate", "steps"])
        writer.writeheader()
        for epoch in range(1, cfg.search.epochs + 1):
            try:
                metrics = search_epoch(net, dataset, split, cfg, aug, opt_alpha, opt_omega, epoch)
            except SearchAborted as exc:
                raise SearchAborted(str(exc), last_checkpoint=last_checkpoint) from exc
            history.append(metrics)
            writer.writerow(metrics)
            log_fh.flush()
            logger.info("search epoch %d/%d alpha_loss=%.4f omega_loss=%.4f lr=%.4g",
                        epoch, cfg.search.epochs, metrics["alpha_loss"],
                        metrics["omega_loss"], metrics["lr"])

            if epoch % cfg.search.snapshot_every == 0 or epoch == cfg.search.epochs:
                for ct in ("normal", "reduction"):
                    snap = alpha_snapshot_csv(alphas[ct].values.data, templates[ct].edges)
                    path = out / "alpha" / f"{ct}_epoch_{epoch:04d}.csv"
                    path.write_text(f"# config_hash={chash} seed={cfg.seed}\n" + snap)
            if epoch % cfg.search.checkpoint_every == 0 or epoch == cfg.search.epochs:
                last_checkpoint = out / f"search_epoch_{epoch:04d}.npz"
                save_checkpoint(last_checkpoint, kind="search", epoch=epoch, seed=cfg.seed,
                                config_hash=chash, net_state=net.state_dict(), alphas=alphas,
                                optimizers={"alpha": opt_alpha.state_dict(),
                                            "omega": opt_omega.state_dict()})

    genotype = derive_genotype(
        alphas, cfg.net.bottom,
        per_node_channels=cfg.net.stem_channels // 4,
        cells_total=cfg.net.cells,
        reduction_positions=plan.reduction_positions,
        provenance={"seed": cfg.seed, "epoch": cfg.search.epochs,
                    "alpha_sha256": alpha_checksum(alphas)},
    )
    genotype_path = out / "genotype.yaml"
    save_genotype(genotype, genotype_path, config_hash=chash)
    return {
        "genotype_path": genotype_path,
        "log_path": log_path,
        "checkpoint_path": last_checkpoint,
        "history": history,
        "genotype": genotype,
        "net": net,
        "alphas": alphas,
    }
