"""Pretraining (teacher scores -> mask -> student step -> EMA), fine-tuning,
and the three-arm ablation."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig
from .losses import pred_loss, rec_loss, seg_loss, total_pretrain_loss
from .masking import MaskSchedule, alpha_at, generate_mask
from .metrics import MetricsReport, aggregate, dsc, evaluate_case
from .nets import (
    DecoderConfig,
    EncoderConfig,
    HPMConfig,
    HPMNet,
    ModelPair,
    SegmentationNet,
    full_positions,
    reconstruct,
    visible_positions,
)
from .patching import normalize_array, patchify_array
from .volume_io import Volume, augment_crop

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


def set_single_threaded():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def lr_at(step, total_steps, warmup_steps, base_lr):
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if step > total_steps:
        raise ValueError(f"step {step} > total_steps {total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def layer_lrs(base_lr, layer_decay, depth):
    """Per-layer rates ``base_lr * decay**(depth - l)`` for l = 0..depth-1,
    followed by the head rate ``base_lr``."""
    if not 0.0 < layer_decay <= 1.0:
        raise ValueError("layer_decay must lie in (0, 1]")
    return [base_lr * layer_decay ** (depth - l) for l in range(depth)] + [base_lr]


def _seed(*parts):
    return np.random.default_rng([int(p) for p in parts])


def hpm_config(cfg: RunConfig) -> HPMConfig:
    m = cfg.model
    crop = cfg.data.crop
    return HPMConfig(
        encoder=EncoderConfig(
            img_size=(crop, crop, crop), patch_size=m.patch_size, embed_dim=m.embed_dim,
            depth=m.depth, num_heads=m.num_heads, mlp_ratio=m.mlp_ratio,
        ),
        reconstructor=DecoderConfig(m.decoder_dim, m.decoder_depth, m.decoder_heads, m.mlp_ratio),
        predictor=DecoderConfig(m.predictor_dim, m.predictor_depth, m.predictor_heads, m.mlp_ratio),
    )


def _param_groups(named_params, weight_decay, lr_scale=1.0):
    decay, no_decay = [], []
    for name, p in named_params:
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 or name.endswith("mask_token") else decay).append(p)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": weight_decay, "lr_scale": lr_scale})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0, "lr_scale": lr_scale})
    return groups


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _augment(data, crop, flip_prob, rng_seed, labels=None):
    v = augment_crop(Volume(data, labels=labels), crop, flip_prob, seed=rng_seed)
    return v.data, v.labels


# ---------------------------------------------------------------------------
# pretraining


def pretrain_step(pair: ModelPair, optimizer, batch, epoch, cfg: RunConfig, lr,
                  mask_rngs: Sequence[np.random.Generator], guided_alpha=None):
    """One pretraining iteration on ``batch`` (B, 1, H, W, D).

    The teacher scores every patch of the full sequence, a per-sample mask is
    drawn from those scores, the student reconstructs the masked patches and
    ranks their difficulty, one optimizer step is taken, then the teacher is
    moved towards the student.
    """
    P = cfg.model.patch_size
    student, teacher = pair.student, pair.teacher
    patches = patchify_array(batch, P)
    B, N, _ = patches.shape
    targets = normalize_array(patches, cfg.pretrain.norm_eps)[0]

    if guided_alpha is None:
        sched = MaskSchedule(cfg.mask.alpha0, cfg.mask.alphaT, cfg.pretrain.epochs, cfg.mask.ratio)
        alpha = alpha_at(sched, epoch) if cfg.mask.guided else 0.0
    else:
        alpha = guided_alpha

    with torch.no_grad():
        pos = full_positions(B, N)
        teacher_scores = teacher.predictor(teacher.encoder(patches, pos), pos)
    if not torch.all(torch.isfinite(teacher_scores)):
        raise TrainingError(
            f"non-finite teacher difficulty scores at epoch {epoch}",
            {"epoch": epoch, "lr": lr, "nonfinite_inputs": int((~torch.isfinite(patches)).sum())},
        )

    masks = [generate_mask(teacher_scores[b].numpy(), alpha, cfg.mask.ratio, mask_rngs[b])
             for b in range(B)]
    mask = torch.from_numpy(np.stack([m.as_bool() for m in masks]))
    vis = visible_positions(mask)
    vis_patches = torch.gather(patches, 1, vis[..., None].expand(-1, -1, patches.shape[-1]))

    student.train()
    emb = student.encoder(vis_patches, vis)
    recon = reconstruct(student.reconstructor, emb, vis, mask)
    l_rec, per_patch = rec_loss(recon, targets, mask)
    student_scores = student.predictor(emb, vis)
    l_pred = pred_loss(student_scores, per_patch.detach(), mask)
    total = total_pretrain_loss(l_rec, l_pred, cfg.pretrain.w_pred)

    if not torch.isfinite(total):
        raise TrainingError(
            f"non-finite pretraining loss at epoch {epoch}",
            {"epoch": epoch, "l_rec": l_rec.detach().item(), "l_pred": l_pred.detach().item(), "lr": lr,
             "guided_count": [m.guided_count for m in masks]},
        )

    _set_lr(optimizer, lr)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    pair.ema_update()

    return {
        "l_rec": l_rec.detach().item(),
        "l_pred": l_pred.detach().item(),
        "total": total.detach().item(),
        "alpha": float(alpha),
        "masked_count": masks[0].num_masked,
        "guided_count": masks[0].guided_count,
        "random_count": masks[0].random_count,
        "N": N,
    }


def make_pretrain_optimizer(student, cfg: RunConfig):
    p = cfg.pretrain
    groups = _param_groups(student.named_parameters(), p.weight_decay)
    return torch.optim.AdamW(groups, lr=p.base_lr, betas=tuple(p.betas))


class Pretrainer:
    """Owns the student/teacher pair, its optimizer and the schedule state."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.pretrain.seed)
        self.net_cfg = hpm_config(cfg)
        self.pair = ModelPair(HPMNet(self.net_cfg), cfg.pretrain.ema_momentum)
        self.optimizer = make_pretrain_optimizer(self.pair.student, cfg)
        self.epoch = 0
        self.global_step = 0
        self.best_l_rec = float("inf")
        self.history: List[dict] = []

    def steps_per_epoch(self, n):
        return math.ceil(n / self.cfg.pretrain.batch_size)

    def run_epoch(self, volumes, on_step=None):
        cfg, p = self.cfg, self.cfg.pretrain
        n = len(volumes)
        spe = self.steps_per_epoch(n)
        total_steps = p.epochs * spe
        warmup = p.warmup() * spe
        e = self.epoch
        stats = []
        for s, idx in enumerate(_batches(n, p.batch_size, _seed(p.seed, 3, e))):
            crops = [
                _augment(volumes[i], cfg.data.crop, cfg.data.flip_prob, _seed(p.seed, 2, e, i))[0]
                for i in idx
            ]
            batch = torch.from_numpy(np.stack(crops)[:, None].astype(np.float32))
            rngs = [_seed(p.seed, 1, e, s, b) for b in range(len(idx))]
            lr = lr_at(self.global_step, total_steps, warmup, p.base_lr)
            out = pretrain_step(self.pair, self.optimizer, batch, e, cfg, lr, rngs)
            out["lr"] = lr
            stats.append(out)
            self.global_step += 1
            if on_step is not None:
                on_step(out)
        rec = {
            "epoch": e,
            "lr": stats[-1]["lr"],
            "l_rec": float(np.mean([s["l_rec"] for s in stats])),
            "l_pred": float(np.mean([s["l_pred"] for s in stats])),
            "total": float(np.mean([s["total"] for s in stats])),
            "alpha": stats[-1]["alpha"],
            "N": stats[-1]["N"],
            "masked_count": stats[-1]["masked_count"],
            "guided_count": stats[-1]["guided_count"],
            "random_count": stats[-1]["random_count"],
        }
        self.epoch += 1
        self.history.append(rec)
        return rec

    def fit(self, volumes, epochs=None, log_path=None, ckpt_dir=None, max_steps=None):
        """Train until ``epochs`` (default: configured total) epochs are done.

        ``max_steps`` stops early after that many optimizer steps (dry run).
        """
        end = self.cfg.pretrain.epochs if epochs is None else epochs
        steps = [0]

        class _Stop(Exception):
            pass

        def on_step(_):
            steps[0] += 1
            if max_steps is not None and steps[0] >= max_steps:
                raise _Stop

        try:
            while self.epoch < end:
                rec = self.run_epoch(volumes, on_step)
                _append_jsonl(log_path, rec)
                if ckpt_dir is not None:
                    self.save(os.path.join(ckpt_dir, "last.ckpt"))
                    if rec["l_rec"] < self.best_l_rec:
                        self.best_l_rec = rec["l_rec"]
                        self.save(os.path.join(ckpt_dir, "best.ckpt"))
                elif rec["l_rec"] < self.best_l_rec:
                    self.best_l_rec = rec["l_rec"]
        except _Stop:
            pass
        return self

    # -- persistence --------------------------------------------------------

    def save(self, path):
        arrays = {}
        arrays.update(ckpt.module_arrays(self.pair.student, "student."))
        arrays.update(ckpt.module_arrays(self.pair.teacher, "teacher."))
        opt_arrays, groups = ckpt.optimizer_arrays(self.optimizer)
        arrays.update(opt_arrays)
        manifest = {
            "kind": "pretrain",
            "architecture": self.net_cfg.to_dict(),
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "best_l_rec": self.best_l_rec,
            "seed": self.cfg.pretrain.seed,
            "optimizer_param_groups": groups,
            "history": self.history,
        }
        ckpt.save_checkpoint(path, arrays, manifest)

    @classmethod
    def load(cls, path, cfg: Optional[RunConfig] = None):
        arrays, manifest = ckpt.load_checkpoint(path)
        if manifest.get("kind") != "pretrain":
            raise ValueError(f"{path} is not a pretraining checkpoint")
        cfg = cfg or RunConfig.from_dict(manifest["config"])
        self = cls(cfg)
        self.pair.student.load_state_dict(ckpt.with_prefix(arrays, "student."))
        self.pair.teacher.load_state_dict(ckpt.with_prefix(arrays, "teacher."))
        ckpt.load_optimizer(self.optimizer, arrays, manifest["optimizer_param_groups"])
        self.epoch = manifest["epoch"]
        self.global_step = manifest["global_step"]
        self.best_l_rec = manifest["best_l_rec"]
        self.history = list(manifest.get("history", []))
        return self


def _append_jsonl(path, rec):
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def pretrain(volumes, cfg: RunConfig, log_path=None, ckpt_dir=None, resume=None,
             max_steps=None) -> Pretrainer:
    trainer = Pretrainer.load(resume, cfg) if resume else Pretrainer(cfg)
    return trainer.fit(volumes, log_path=log_path, ckpt_dir=ckpt_dir, max_steps=max_steps)


def load_encoder_state(path):
    """Student encoder tensors from a pretraining checkpoint."""
    arrays, manifest = ckpt.load_checkpoint(path)
    return ckpt.with_prefix(arrays, "student.encoder."), manifest


# ---------------------------------------------------------------------------
# fine-tuning


def build_segmentation_net(cfg: RunConfig, num_classes, encoder_state=None, seed=None):
    torch.manual_seed(cfg.finetune.seed if seed is None else seed)
    enc = hpm_config(cfg).encoder
    net = SegmentationNet(enc, num_classes, cfg.model.feature_size,
                          drop_path=cfg.finetune.droppath_prob)
    if encoder_state is not None:
        net.encoder.load_state_dict(encoder_state)
    return net


def _encoder_layer(name, depth):
    """Layer id for layer-wise lr decay; ``depth`` means the head."""
    if name.startswith("encoder.patch_embed"):
        return 0
    if name.startswith("encoder.blocks."):
        return int(name.split(".")[2])
    return depth


def layer_decay_groups(net: SegmentationNet, ft):
    depth = len(net.encoder.blocks)
    rates = layer_lrs(1.0, ft.layer_decay, depth)
    by_layer = {}
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        by_layer.setdefault(_encoder_layer(name, depth), []).append((name, p))
    groups = []
    for layer in sorted(by_layer):
        groups += _param_groups(by_layer[layer], ft.weight_decay, rates[layer])
    return groups


def make_finetune_optimizer(net, cfg: RunConfig):
    ft = cfg.finetune
    if ft.freeze_encoder:
        for p in net.encoder.parameters():
            p.requires_grad_(False)
    return torch.optim.AdamW(layer_decay_groups(net, ft), lr=ft.base_lr, betas=tuple(ft.betas))


def window_starts(n, w):
    if n <= w:
        return [0]
    starts = list(range(0, n - w + 1, w))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def predict_logits(net: SegmentationNet, data):
    """Logits (K, H, W, D) via non-overlapping sliding windows of the net's
    input size (the last window on each axis is aligned to the edge)."""
    win = net.enc_cfg.img_size
    data = np.asarray(data, dtype=np.float32)
    for axis, (n, w) in enumerate(zip(data.shape, win)):
        if n < w:
            raise ValueError(f"axis {axis} of size {n} smaller than network input {w}")
    was = net.training
    net.eval()
    out = torch.zeros((net.num_classes,) + data.shape)
    with torch.no_grad():
        for a in window_starts(data.shape[0], win[0]):
            for b in window_starts(data.shape[1], win[1]):
                for c in window_starts(data.shape[2], win[2]):
                    sl = (slice(a, a + win[0]), slice(b, b + win[1]), slice(c, c + win[2]))
                    x = torch.from_numpy(np.ascontiguousarray(data[sl]))[None, None]
                    out[(slice(None),) + sl] = net(x)[0]
    net.train(was)
    return out


def predict_labels(net, data):
    return predict_logits(net, data).argmax(0).numpy().astype(np.uint8)


def evaluate(net, cases, classes, class_names=None, spacing=(1.0, 1.0, 1.0)) -> MetricsReport:
    reports = []
    for i, (data, labels) in enumerate(cases):
        pred = predict_labels(net, data)
        reports.append(evaluate_case(pred, labels, classes, class_names, spacing, case_id=str(i)))
    return aggregate(reports)


def finetune(net: SegmentationNet, train, cfg: RunConfig, val=None, classes=None,
             log_path=None, max_steps=None):
    """Fine-tune on ``train`` [(data, labels), ...].

    Returns ``(net, history)``; when ``val`` is given the weights with the best
    validation mean DSC are restored at the end.
    """
    ft = cfg.finetune
    K = net.num_classes
    for _, labels in train:
        if int(labels.max()) >= K:
            raise ValueError(f"label {int(labels.max())} >= network class count {K}")
    classes = list(range(1, K)) if classes is None else list(classes)
    torch.manual_seed(ft.seed)
    optimizer = make_finetune_optimizer(net, cfg)
    n = len(train)
    spe = math.ceil(n / ft.batch_size)
    total_steps = ft.epochs * spe
    warmup = ft.warmup() * spe
    step = 0
    history = []
    best = (-1.0, None)
    for e in range(ft.epochs):
        net.train()
        losses = []
        lr = 0.0
        for s, idx in enumerate(_batches(n, ft.batch_size, _seed(ft.seed, 13, e))):
            xs, ys = zip(*[
                _augment(train[i][0], cfg.data.crop, cfg.data.flip_prob, _seed(ft.seed, 12, e, i),
                         labels=train[i][1])
                for i in idx
            ])
            x = torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
            y = torch.from_numpy(np.stack(ys).astype(np.int64))
            lr = lr_at(step, total_steps, warmup, ft.base_lr)
            _set_lr(optimizer, lr)
            loss = seg_loss(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite segmentation loss at epoch {e}",
                                    {"epoch": e, "step": step, "lr": lr})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.detach().item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        rec = {"epoch": e, "lr": lr, "seg_loss": float(np.mean(losses))}
        if val:
            report = evaluate(net, val, classes)
            rec["dsc"] = {k: v["dsc"] for k, v in report.per_class.items()}
            rec["mean_dsc"] = report.averages["dsc"]
            if report.averages["dsc"] > best[0]:
                best = (report.averages["dsc"], copy.deepcopy(net.state_dict()))
        history.append(rec)
        _append_jsonl(log_path, rec)
        if max_steps is not None and step >= max_steps:
            break
    if best[1] is not None:
        net.load_state_dict(best[1])
    return net, history


def save_segmentation(path, net: SegmentationNet, cfg: RunConfig, extra=None):
    manifest = {
        "kind": "segmentation",
        "num_classes": net.num_classes,
        "config": cfg.to_dict(),
        "seed": cfg.finetune.seed,
    }
    manifest.update(extra or {})
    ckpt.save_checkpoint(path, ckpt.module_arrays(net, "seg."), manifest)


def load_segmentation(path):
    arrays, manifest = ckpt.load_checkpoint(path)
    if manifest.get("kind") != "segmentation":
        raise ValueError(f"{path} is not a segmentation checkpoint")
    cfg = RunConfig.from_dict(manifest["config"])
    net = build_segmentation_net(cfg, manifest["num_classes"])
    net.load_state_dict(ckpt.with_prefix(arrays, "seg."))
    return net, cfg, manifest


# ---------------------------------------------------------------------------
# ablation

ABLATION_ROWS = ("w/o L_pred, learn to mask", "w/o learn to mask", "full method")


def ablation_configs(cfg: RunConfig):
    """Three pretraining arms: plain MAE, loss prediction only, full method."""
    full = copy.deepcopy(cfg)
    full.mask.guided = True
    if full.pretrain.w_pred == 0:
        full.pretrain.w_pred = 1.0
    no_mask = copy.deepcopy(full)
    no_mask.mask.guided = False
    mae = copy.deepcopy(no_mask)
    mae.pretrain.w_pred = 0.0
    return dict(zip(ABLATION_ROWS, (mae, no_mask, full)))


@dataclass
class AblationResult:
    rows: Dict[str, MetricsReport]
    configs: Dict[str, RunConfig]
    seed: int
    pretrain_history: Dict[str, List[dict]] = field(default_factory=dict)
    finetune_history: Dict[str, List[dict]] = field(default_factory=dict)

    def table(self):
        return [(label, r.averages["dsc"], r.averages["hd95"]) for label, r in self.rows.items()]


def ablate(train_volumes, train_cases, test_cases, cfg: RunConfig, num_classes,
           classes=None, class_names=None, spacing=(1.0, 1.0, 1.0), val=None) -> AblationResult:
    """Pretrain and fine-tune each arm with identical budgets and seeds, then
    evaluate on ``test_cases``. ``val`` selects each arm's fine-tuned weights."""
    rows, hist_p, hist_f = {}, {}, {}
    configs = ablation_configs(cfg)
    classes = list(range(1, num_classes)) if classes is None else classes
    for label, arm in configs.items():
        log.info("ablation arm: %s", label)
        pt = Pretrainer(arm).fit(train_volumes)
        state = {k: v.clone() for k, v in pt.pair.student.encoder.state_dict().items()}
        net = build_segmentation_net(arm, num_classes, state)
        net, fh = finetune(net, train_cases, arm, val=val, classes=classes)
        rows[label] = evaluate(net, test_cases, classes, class_names, spacing)
        hist_p[label] = pt.history
        hist_f[label] = fh
    return AblationResult(rows, configs, cfg.pretrain.seed, hist_p, hist_f)
