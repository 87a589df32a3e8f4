"""Retraining stage: the derived discrete network is trained from random
initialization under the joint supervision of foreground classification,
batch-hard triplet, and the predicted-vs-GT center term.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .autodiff import GradTape, Tensor
from .cells import DiscreteNet, NetworkPlan
from .config import RunConfig, config_hash
from .errors import ConfigError, SearchAborted
from .genotype import Genotype, genotype_to_dict, load_genotype
from .losses import (
    batch_hard_triplet,
    center_loss,
    choose_pk_indices,
    classification_loss,
    joint_loss,
    l2_normalize,
)
from .optim import SGDMomentum, clip_grad_norm, cosine_lr
from .pipeline import (
    get_train_dataset,
    joint_batch,
    load_checkpoint,
    make_augment_config,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


def plan_from_genotype(genotype: Genotype, cfg: RunConfig) -> NetworkPlan:
    """Structural fields come from the genotype; conflicts with explicitly
    configured net.* values are errors rather than silent overrides."""
    stem = genotype.per_node_channels * 4
    if cfg.net.bottom != genotype.bottom:
        raise ConfigError(f"config net.bottom={cfg.net.bottom!r} conflicts with "
                          f"genotype bottom={genotype.bottom!r}")
    if cfg.net.cells != genotype.cells_total:
        raise ConfigError(f"config net.cells={cfg.net.cells} conflicts with "
                          f"genotype cells_total={genotype.cells_total}")
    if cfg.net.stem_channels != stem:
        raise ConfigError(f"config net.stem_channels={cfg.net.stem_channels} conflicts with "
                          f"genotype per_node_channels*4={stem}")
    return NetworkPlan(bottom=genotype.bottom, cells_total=genotype.cells_total,
                       stem_channels=stem, embed_dim=cfg.net.embed_dim,
                       reduction_positions=genotype.reduction_positions)


def retrain_step(net: DiscreteNet, images, sections, identities, cls_labels,
                 cfg: RunConfig, opt: SGDMomentum, lr: float) -> dict:
    sl_gt, sl_jit = sections
    opt.zero_grad()
    with GradTape() as tape:
        emb, prob = net(Tensor(images))
        tri_emb = emb[sl_gt]
        if cfg.loss.normalize_embeddings:
            tri_emb = l2_normalize(tri_emb)
        cls = classification_loss(prob, cls_labels)
        tri = batch_hard_triplet(tri_emb, identities, cfg.loss.margin)
        cen = center_loss(emb[sl_jit], emb[sl_gt])
        total = joint_loss(cls, tri, cen, cfg.loss.center_weight)
        # optimize the joint total scaled by batch size; relative component
        # weighting is untouched, only the step size changes
        objective = total * (1.0 / len(images))
    if not np.isfinite(total.data).all():
        raise SearchAborted("non-finite retrain loss")
    tape.backward(objective)
    clip_grad_norm(net.parameters(), cfg.retrain.grad_clip)
    opt.step(lr=lr)
    return {"L_CLS": cls.item(), "L_BHTri": tri.item(), "L_CT": cen.item(),
            "L_total": total.item()}


def run_retrain(cfg: RunConfig, genotype_path, out_dir, dataset=None,
                resume: str | None = None) -> dict:
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)

    genotype = load_genotype(genotype_path)
    plan = plan_from_genotype(genotype, cfg)
    dataset = dataset if dataset is not None else get_train_dataset(cfg)
    aug = make_augment_config(cfg, "retrain", dataset)
    if len(dataset.sequences) < cfg.retrain.m:
        raise ConfigError(f"retrain needs {cfg.retrain.m} identities, dataset has {len(dataset.sequences)}")

    net = DiscreteNet(genotype, plan, np.random.default_rng(cfg.seed + 1))
    opt = SGDMomentum(net.parameters(), cfg.retrain.lr_max,
                      momentum=cfg.retrain.momentum, weight_decay=cfg.retrain.weight_decay)
    start_epoch = 1
    if resume:
        bundle = load_checkpoint(resume)
        if bundle["meta"].get("kind") != "retrain":
            raise ConfigError(f"{resume} is not a retrain checkpoint")
        net.load_state_dict(bundle["net"])
        opt.load_state_dict(bundle["optimizers"]["omega"])
        start_epoch = bundle["meta"]["epoch"] + 1
        logger.info("resumed retraining from %s at epoch %d", resume, start_epoch)

    counts = {si: len(seq) for si, seq in enumerate(dataset.sequences)}
    batch_fg = cfg.retrain.m * cfg.retrain.n
    steps_per_epoch = max(1, sum(counts.values()) // batch_fg)
    log_path = out / "retrain_log.csv"
    epoch_means = []
    last_checkpoint = None

    mode = "a" if resume else "w"
    with open(log_path, mode, newline="") as fh:
        if not resume:
            fh.write(f"# config_hash={chash} seed={cfg.seed}\n")
        writer = csv.DictWriter(fh, fieldnames=["step", "L_CLS", "L_BHTri", "L_CT", "L_total"])
        if not resume:
            writer.writeheader()
        for epoch in range(start_epoch, cfg.retrain.epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch, 11])
            lr = cosine_lr(epoch - 1, cfg.retrain.epochs, cfg.retrain.lr_max, cfg.retrain.lr_min)
            totals = []
            for step in range(steps_per_epoch):
                picks = choose_pk_indices(counts, cfg.retrain.m, cfg.retrain.n, rng)
                images, sections, idents, cls_labels = joint_batch(dataset, picks, cfg, aug, rng)
                parts = retrain_step(net, images, sections, idents, cls_labels, cfg, opt, lr)
                global_step = (epoch - 1) * steps_per_epoch + step + 1
                writer.writerow({"step": global_step, **{k: f"{v:.6g}" for k, v in parts.items()}})
                totals.append(parts["L_total"])
            fh.flush()
            epoch_means.append(float(np.mean(totals)))
            logger.info("retrain epoch %d/%d joint=%.4f lr=%.4g",
                        epoch, cfg.retrain.epochs, epoch_means[-1], lr)
            if epoch % cfg.retrain.checkpoint_every == 0 or epoch == cfg.retrain.epochs:
                last_checkpoint = out / f"retrain_epoch_{epoch:04d}.npz"
                save_checkpoint(last_checkpoint, kind="retrain", epoch=epoch, seed=cfg.seed,
                                config_hash=chash, net_state=net.state_dict(),
                                optimizers={"omega": opt.state_dict()},
                                extra_meta={"genotype": genotype_to_dict(genotype)})

    weights_path = out / "weights.npz"
    save_checkpoint(weights_path, kind="weights", epoch=cfg.retrain.epochs, seed=cfg.seed,
                    config_hash=chash, net_state=net.state_dict(),
                    extra_meta={"genotype": genotype_to_dict(genotype),
                                "embed_dim": cfg.net.embed_dim})
    return {
        "weights_path": weights_path,
        "log_path": log_path,
        "checkpoint_path": last_checkpoint,
        "epoch_means": epoch_means,
        "net": net,
        "genotype": genotype,
    }
