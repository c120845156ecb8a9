"""scikit-learn style wrappers around the pretraining and fine-tuning loops.

``HPMPretrainer`` is a transformer: ``fit`` runs hard-patch-mining
pretraining on unlabeled volumes, ``transform`` returns mean-pooled encoder
features. ``UNETRSegmenter`` is a per-voxel classifier whose encoder can be
initialized from a fitted ``HPMPretrainer`` or a pretraining checkpoint.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .losses import rec_loss
from .masking import generate_mask
from .metrics import dsc
from .nets import full_positions, reconstruct, visible_positions
from .patching import normalize_array, patchify_array
from .trainer import (
    Pretrainer,
    build_segmentation_net,
    finetune,
    load_encoder_state,
    predict_logits,
)
from .validation import check_labels, check_volumes


def _center_crop(X, crop):
    starts = [(n - crop) // 2 for n in X.shape[1:]]
    return X[:, starts[0]:starts[0] + crop, starts[1]:starts[1] + crop, starts[2]:starts[2] + crop]


def _resolve_crop(X, crop):
    if crop is not None:
        return int(crop)
    if len(set(X.shape[1:])) != 1:
        raise ValueError("non-cubic volumes need an explicit crop size")
    return int(X.shape[1])


class HPMPretrainer(TransformerMixin, BaseEstimator):
    def __init__(self, patch_size=16, embed_dim=192, depth=6, num_heads=3,
                 decoder_dim=128, decoder_depth=2, decoder_heads=4,
                 predictor_dim=64, predictor_depth=1, predictor_heads=2,
                 mask_ratio=0.75, alpha0=0.0, alphaT=0.5, guided=True, w_pred=1.0,
                 epochs=100, batch_size=4, base_lr=1.5e-4, weight_decay=0.05,
                 warmup_epochs=None, ema_momentum=0.999, crop=None, flip_prob=0.5,
                 random_state=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.decoder_dim = decoder_dim
        self.decoder_depth = decoder_depth
        self.decoder_heads = decoder_heads
        self.predictor_dim = predictor_dim
        self.predictor_depth = predictor_depth
        self.predictor_heads = predictor_heads
        self.mask_ratio = mask_ratio
        self.alpha0 = alpha0
        self.alphaT = alphaT
        self.guided = guided
        self.w_pred = w_pred
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.ema_momentum = ema_momentum
        self.crop = crop
        self.flip_prob = flip_prob
        self.random_state = random_state

    def to_run_config(self, crop) -> RunConfig:
        cfg = RunConfig()
        m = cfg.model
        m.patch_size, m.embed_dim, m.depth, m.num_heads = (
            self.patch_size, self.embed_dim, self.depth, self.num_heads)
        m.decoder_dim, m.decoder_depth, m.decoder_heads = (
            self.decoder_dim, self.decoder_depth, self.decoder_heads)
        m.predictor_dim, m.predictor_depth, m.predictor_heads = (
            self.predictor_dim, self.predictor_depth, self.predictor_heads)
        cfg.mask.ratio, cfg.mask.alpha0, cfg.mask.alphaT, cfg.mask.guided = (
            self.mask_ratio, self.alpha0, self.alphaT, self.guided)
        p = cfg.pretrain
        p.epochs, p.batch_size, p.base_lr, p.weight_decay = (
            self.epochs, self.batch_size, self.base_lr, self.weight_decay)
        p.warmup_epochs, p.ema_momentum, p.w_pred, p.seed = (
            self.warmup_epochs, self.ema_momentum, self.w_pred, self.random_state)
        cfg.data.crop, cfg.data.flip_prob = crop, self.flip_prob
        return cfg.validate()

    def fit(self, X, y=None):
        X = check_volumes(X)
        crop = _resolve_crop(X, self.crop)
        check_volumes(X, min_size=crop)
        self._trainer = Pretrainer(self.to_run_config(crop)).fit(list(X))
        self.history_ = self._trainer.history
        self.crop_ = crop
        self.n_patches_ = self._trainer.pair.student.num_patches
        return self

    @property
    def trainer_(self):
        check_is_fitted(self, "history_")
        return self._trainer

    def _patches(self, X):
        check_is_fitted(self, "history_")
        X = _center_crop(check_volumes(X, min_size=self.crop_), self.crop_)
        x = torch.from_numpy(np.ascontiguousarray(X))[:, None]
        return patchify_array(x, self.patch_size)

    def transform(self, X):
        """Mean-pooled student encoder features over the full sequence: (n, embed_dim)."""
        patches = self._patches(X)
        enc = self._trainer.pair.student.encoder
        enc.eval()
        with torch.no_grad():
            pos = full_positions(patches.shape[0], patches.shape[1])
            return enc(patches, pos).mean(1).numpy()

    def predict_difficulty(self, X):
        """Teacher-predicted per-patch reconstruction loss: (n, N)."""
        patches = self._patches(X)
        t = self._trainer.pair.teacher
        with torch.no_grad():
            pos = full_positions(patches.shape[0], patches.shape[1])
            return t.predictor(t.encoder(patches, pos), pos).numpy()

    def score(self, X, y=None):
        """Negative masked reconstruction loss under random masking."""
        patches = self._patches(X)
        B, N, _ = patches.shape
        net = self._trainer.pair.student
        net.eval()
        rng = np.random.default_rng(self.random_state)
        mask = torch.from_numpy(np.stack([
            generate_mask(np.zeros(N), 0.0, self.mask_ratio, rng).as_bool() for _ in range(B)
        ]))
        targets = normalize_array(patches, self._trainer.cfg.pretrain.norm_eps)[0]
        with torch.no_grad():
            vis = visible_positions(mask)
            vp = torch.gather(patches, 1, vis[..., None].expand(-1, -1, patches.shape[-1]))
            pred = reconstruct(net.reconstructor, net.encoder(vp, vis), vis, mask)
            total, _ = rec_loss(pred, targets, mask)
        return -float(total)

    def save(self, path):
        self.trainer_.save(path)


class UNETRSegmenter(BaseEstimator):
    """Per-voxel classifier. ``pretrained`` is a fitted :class:`HPMPretrainer`,
    a pretraining checkpoint path, or None (random encoder init)."""

    def __init__(self, pretrained=None, num_classes=None, patch_size=16, embed_dim=192,
                 depth=6, num_heads=3, feature_size=8, epochs=50, batch_size=4,
                 base_lr=8e-4, weight_decay=0.05, warmup_epochs=None, layer_decay=0.75,
                 droppath_prob=0.1, freeze_encoder=False, crop=None, flip_prob=0.5,
                 random_state=0):
        self.pretrained = pretrained
        self.num_classes = num_classes
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.feature_size = feature_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.layer_decay = layer_decay
        self.droppath_prob = droppath_prob
        self.freeze_encoder = freeze_encoder
        self.crop = crop
        self.flip_prob = flip_prob
        self.random_state = random_state

    def _encoder_source(self):
        """(model config dict, crop, encoder state) from ``pretrained``."""
        if self.pretrained is None:
            return None, None, None
        if isinstance(self.pretrained, HPMPretrainer):
            tr = self.pretrained.trainer_
            state = {k: v.clone() for k, v in tr.pair.student.encoder.state_dict().items()}
            return tr.cfg.to_dict()["model"], tr.cfg.data.crop, state
        state, manifest = load_encoder_state(self.pretrained)
        return manifest["config"]["model"], manifest["config"]["data"]["crop"], state

    def to_run_config(self, crop, model=None) -> RunConfig:
        cfg = RunConfig()
        if model is not None:
            cfg = RunConfig.from_dict({"model": model})
        else:
            m = cfg.model
            m.patch_size, m.embed_dim, m.depth, m.num_heads = (
                self.patch_size, self.embed_dim, self.depth, self.num_heads)
        cfg.model.feature_size = self.feature_size
        ft = cfg.finetune
        ft.epochs, ft.batch_size, ft.base_lr, ft.weight_decay = (
            self.epochs, self.batch_size, self.base_lr, self.weight_decay)
        ft.warmup_epochs, ft.layer_decay, ft.droppath_prob = (
            self.warmup_epochs, self.layer_decay, self.droppath_prob)
        ft.freeze_encoder, ft.seed = self.freeze_encoder, self.random_state
        cfg.data.crop, cfg.data.flip_prob = crop, self.flip_prob
        return cfg.validate()

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_volumes(X)
        y = check_labels(y, X, self.num_classes)
        model, crop, state = self._encoder_source()
        if crop is None:
            crop = _resolve_crop(X, self.crop)
        check_volumes(X, min_size=crop)
        K = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        cfg = self.to_run_config(crop, model)
        net = build_segmentation_net(cfg, K, state)
        val = None
        if X_val is not None:
            Xv = check_volumes(X_val)
            val = list(zip(Xv, check_labels(y_val, Xv, K)))
        net, history = finetune(net, list(zip(X, y)), cfg, val=val)
        self.net_ = net
        self.history_ = history
        self.classes_ = np.arange(K)
        self.config_ = cfg
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_volumes(X, min_size=self.config_.data.crop)
        return np.stack([predict_logits(self.net_, x).softmax(0).numpy() for x in X])

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_volumes(X, min_size=self.config_.data.crop)
        return np.stack([predict_logits(self.net_, x).argmax(0).numpy() for x in X]).astype(np.uint8)

    def score(self, X, y):
        """Mean foreground DSC over classes and volumes."""
        pred = self.predict(X)
        y = check_labels(y, check_volumes(X))
        scores = [dsc(p == k, t == k) for p, t in zip(pred, y) for k in self.classes_[1:]]
        return float(np.mean(scores))
