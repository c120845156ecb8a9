"""Original / masked / reconstructed slice strips for a pretrained model."""

from __future__ import annotations

import os

import numpy as np
import torch
from PIL import Image

from .masking import generate_mask
from .nets import HPMNet, full_positions, reconstruct, visible_positions
from .patching import PatchConfig, normalize_array, patchify_array, unpatchify_array


def reconstruct_volume(net: HPMNet, data, mask_ratio, alpha, seed, teacher=None, eps=1e-6):
    """Returns ``(masked, reconstruction, voxel_mask, mask)`` volumes.

    Masked patches are predicted in normalized space and mapped back with the
    original patch statistics; visible patches are pasted back unchanged.
    """
    cfg = net.cfg.encoder
    P = cfg.patch_size
    pc = PatchConfig.for_shape(data.shape, P)
    x = torch.from_numpy(np.asarray(data, dtype=np.float32))[None, None]
    patches = patchify_array(x, P)
    N = patches.shape[1]
    scorer = teacher if teacher is not None else net
    with torch.no_grad():
        pos = full_positions(1, N)
        scores = scorer.predictor(scorer.encoder(patches, pos), pos)[0].numpy()
        m = generate_mask(scores, alpha, mask_ratio, seed)
        mask = torch.from_numpy(m.as_bool())[None]
        vis = visible_positions(mask)
        vp = torch.gather(patches, 1, vis[..., None].expand(-1, -1, patches.shape[-1]))
        pred = reconstruct(net.reconstructor, net.encoder(vp, vis), vis, mask)
    _, mean, std = normalize_array(patches.double(), eps)
    idx = torch.from_numpy(m.masked_indices)
    recon = patches.clone()
    recon[0, idx] = (pred[0].double() * std[0, idx] + mean[0, idx]).float()
    masked = patches.clone()
    masked[0, idx] = 0.0
    vmask = torch.zeros_like(patches, dtype=torch.bool)
    vmask[0, idx] = True
    to_vol = lambda t: unpatchify_array(t, pc)[0, 0].numpy()
    return to_vol(masked), to_vol(recon), to_vol(vmask), m


def to_uint8(img):
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_slice_strips(out_dir, original, masked, recon, depths, prefix="slice"):
    """One PNG per depth (last axis): original / masked / reconstruction rows."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for z in depths:
        if not 0 <= z < original.shape[2]:
            raise ValueError(f"slice depth {z} outside [0, {original.shape[2]})")
        strip = np.concatenate(
            [to_uint8(original[:, :, z]), to_uint8(masked[:, :, z]), to_uint8(recon[:, :, z])],
            axis=0,
        )
        path = os.path.join(out_dir, f"{prefix}_{z:03d}.png")
        Image.fromarray(strip, mode="L").save(path)
        paths.append(path)
    return paths
