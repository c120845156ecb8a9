"""ViT encoder, masked decoders (reconstructor, difficulty predictor), the
EMA student/teacher pair, and the UNETR-style segmentation network."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patching import PatchConfig, patchify_array


# ---------------------------------------------------------------------------
# positional embeddings


def sincos_1d(dim, pos):
    """(len(pos), dim) sine/cosine table; ``dim`` must be even."""
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,d->md", pos.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_3d(dim, grid_dims):
    """Fixed 3D sine-cosine table of shape (prod(grid_dims), dim).

    Each axis gets ``2 * (dim // 6)`` channels; leftover channels are zero.
    """
    per_axis = 2 * (dim // 6)
    if per_axis == 0:
        raise ValueError(f"embedding dim {dim} too small for 3D sin-cos (need >= 6)")
    coords = np.stack(
        np.meshgrid(*[np.arange(n) for n in grid_dims], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    parts = [sincos_1d(per_axis, coords[:, a]) for a in range(3)]
    table = np.concatenate(parts, axis=1)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return table.astype(np.float32)


# ---------------------------------------------------------------------------
# transformer pieces


class DropPath(nn.Module):
    def __init__(self, p=0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.dim() - 1)
        noise = x.new_empty(shape).bernoulli_(keep)
        return x * noise / keep


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, n, C = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(B, n, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(B, n, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# configs


@dataclass
class EncoderConfig:
    img_size: Tuple[int, int, int] = (64, 64, 64)
    patch_size: int = 16
    in_chans: int = 1
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.img_size = tuple(int(n) for n in self.img_size)
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def patch_config(self) -> PatchConfig:
        return PatchConfig.for_shape(self.img_size, self.patch_size, self.in_chans)


@dataclass
class DecoderConfig:
    dim: int = 128
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0


@dataclass
class HPMConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    reconstructor: DecoderConfig = field(default_factory=DecoderConfig)
    predictor: DecoderConfig = field(
        default_factory=lambda: DecoderConfig(dim=64, depth=1, num_heads=2)
    )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            reconstructor=DecoderConfig(**d["reconstructor"]),
            predictor=DecoderConfig(**d["predictor"]),
        )


# ---------------------------------------------------------------------------
# pretraining networks


class PatchEncoder(nn.Module):
    """ViT over a (sub)set of patch tokens with fixed 3D sin-cos positions."""

    def __init__(self, cfg: EncoderConfig, drop_path=0.0):
        super().__init__()
        self.cfg = cfg
        pc = cfg.patch_config
        self.num_patches = pc.N
        self.patch_embed = nn.Linear(pc.patch_dim, cfg.embed_dim)
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_3d(cfg.embed_dim, pc.grid_dims)),
            persistent=False,
        )
        rates = np.linspace(0.0, drop_path, cfg.depth) if cfg.depth else []
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, float(r)) for r in rates
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.apply(_init_weights)

    def set_drop_path(self, p):
        rates = np.linspace(0.0, p, len(self.blocks))
        for blk, r in zip(self.blocks, rates):
            blk.drop_path.p = float(r)

    def forward(self, patches, positions, return_hidden: Sequence[int] = ()):
        """``patches`` (B, n, L), ``positions`` (B, n) patch indices.

        With ``return_hidden``, also returns the outputs of the listed blocks
        (1-based depth).
        """
        if patches.shape[:2] != positions.shape:
            raise ValueError(
                f"{tuple(patches.shape[:2])} patches vs {tuple(positions.shape)} positions"
            )
        x = self.patch_embed(patches) + self.pos_embed[positions]
        hidden = []
        for d, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if d in return_hidden:
                hidden.append(x)
        x = self.norm(x)
        if return_hidden:
            return x, hidden
        return x


class MaskedDecoder(nn.Module):
    """Transformer decoder over all N positions: encoder tokens sit at their
    positions, a learned mask token fills every other position."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: DecoderConfig, out_dim: int):
        super().__init__()
        grid = enc_cfg.patch_config.grid_dims
        self.num_patches = enc_cfg.patch_config.N
        self.embed = nn.Linear(enc_cfg.embed_dim, cfg.dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_3d(cfg.dim, grid)), persistent=False
        )
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, out_dim)
        self.apply(_init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward_features(self, tokens, positions):
        B, n, _ = tokens.shape
        N = self.num_patches
        x = self.mask_token.expand(B, N, -1).clone()
        x = x.scatter(1, positions[..., None].expand(B, n, x.shape[-1]), self.embed(tokens))
        x = x + self.pos_embed[None]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, tokens, positions):
        return self.head(self.forward_features(tokens, positions))


class Reconstructor(MaskedDecoder):
    def __init__(self, enc_cfg, cfg):
        super().__init__(enc_cfg, cfg, enc_cfg.patch_config.patch_dim)


class DifficultyPredictor(MaskedDecoder):
    def __init__(self, enc_cfg, cfg):
        super().__init__(enc_cfg, cfg, 1)

    def forward(self, tokens, positions):
        return super().forward(tokens, positions)[..., 0]


class HPMNet(nn.Module):
    """Encoder + image reconstructor + difficulty predictor."""

    def __init__(self, cfg: HPMConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(cfg.encoder)
        self.reconstructor = Reconstructor(cfg.encoder, cfg.reconstructor)
        self.predictor = DifficultyPredictor(cfg.encoder, cfg.predictor)

    @property
    def num_patches(self):
        return self.encoder.num_patches


def encode(encoder: PatchEncoder, visible_patches, positions):
    return encoder(visible_patches, positions)


def reconstruct(reconstructor: Reconstructor, embeddings, positions, mask):
    """Predictions for the masked patches, ascending index order: (B, M, L)."""
    mask = mask.bool()
    if mask.dim() == 1:
        mask = mask[None]
    B, N = mask.shape
    if embeddings.shape[1] != N - int(mask[0].sum()):
        raise ValueError("embedding count does not match the visible set of the mask")
    out = reconstructor(embeddings, positions)
    M = int(mask[0].sum())
    idx = torch.nonzero(mask, as_tuple=False)[:, 1].view(B, M)
    return torch.gather(out, 1, idx[..., None].expand(B, M, out.shape[-1]))


def predict_difficulty(predictor: DifficultyPredictor, embeddings, positions):
    """Predicted reconstruction loss for all N patches: (B, N)."""
    return predictor(embeddings, positions)


def full_positions(B, N, device=None):
    return torch.arange(N, device=device).expand(B, N)


def visible_positions(mask):
    """(B, N) boolean mask -> (B, N - M) visible indices, ascending."""
    B, N = mask.shape
    vis = ~mask.bool()
    n = int(vis[0].sum())
    return torch.nonzero(vis, as_tuple=False)[:, 1].view(B, n)


class ModelPair:
    """Student network trained by gradients; teacher tracks it by EMA."""

    def __init__(self, student: HPMNet, momentum: float = 0.999, teacher: HPMNet = None):
        self.student = student
        self.teacher = teacher if teacher is not None else copy.deepcopy(student)
        self.momentum = momentum
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()

    @torch.no_grad()
    def ema_update(self, momentum: Optional[float] = None):
        m = self.momentum if momentum is None else momentum
        ps = list(self.student.parameters())
        pt = list(self.teacher.parameters())
        if len(ps) != len(pt):
            raise ValueError("student and teacher architectures differ")
        for t, s in zip(pt, ps):
            if t.shape != s.shape:
                raise ValueError(f"parameter shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
            t.mul_(m).add_(s.detach(), alpha=1.0 - m)
        return self


def ema_update(pair: ModelPair) -> ModelPair:
    return pair.ema_update()


# ---------------------------------------------------------------------------
# segmentation


def skip_depths(depth, levels):
    """Evenly spaced 1-based block depths feeding the decoder, deepest last."""
    return [max(1, (k * depth) // levels) for k in range(1, levels + 1)]


def _init_conv(m):
    # He init keeps activation scale through the unnormalized decoder
    if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(m.weight, a=0.01, nonlinearity="leaky_relu")
        nn.init.zeros_(m.bias)


def _conv_block(cin, cout):
    # no feature normalization: per-volume statistics would erase the absolute
    # intensity levels that separate the phantom organ classes
    return nn.Sequential(nn.Conv3d(cin, cout, 3, padding=1), nn.LeakyReLU(0.01, inplace=True))


class _UpProject(nn.Module):
    """Token grid -> feature map ``steps`` times upsampled by 2."""

    def __init__(self, cin, cout, steps):
        super().__init__()
        layers = []
        for i in range(steps):
            layers += [nn.ConvTranspose3d(cin if i == 0 else cout, cout, 2, stride=2),
                       _conv_block(cout, cout)]
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class _UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, 2, stride=2)
        self.conv = nn.Sequential(_conv_block(cout + cskip, cout), _conv_block(cout, cout))

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], 1))


class SegmentationNet(nn.Module):
    """UNETR-style network: ViT encoder over the full patch sequence, hidden
    states from evenly spaced depths reshaped to the patch grid and upsampled
    into a convolutional decoder with skip connections.

    The patch size must be a power of two; ``log2(patch_size)`` resolution
    levels are decoded.
    """

    def __init__(self, enc_cfg: EncoderConfig, num_classes: int, feature_size: int = 8,
                 drop_path: float = 0.0):
        super().__init__()
        P = enc_cfg.patch_size
        levels = int(round(math.log2(P)))
        if P < 2 or 2 ** levels != P:
            raise ValueError(f"patch size {P} must be a power of two >= 2")
        self.enc_cfg = enc_cfg
        self.num_classes = num_classes
        self.levels = levels
        self.depths = skip_depths(enc_cfg.depth, levels)
        E, f = enc_cfg.embed_dim, feature_size

        self.encoder = PatchEncoder(enc_cfg, drop_path=drop_path)
        self.stem = nn.Sequential(_conv_block(enc_cfg.in_chans, f), _conv_block(f, f))
        # skip k (1..levels-1) lands on level k, i.e. 2**(levels-k) upsamplings
        self.skips = nn.ModuleList(
            _UpProject(E, f * 2 ** k, levels - k) for k in range(1, levels)
        )
        ups = []
        cin = E
        for level in range(levels - 1, -1, -1):
            cout = f * 2 ** level
            ups.append(_UpBlock(cin, cout, cout))
            cin = cout
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv3d(f, num_classes, 1)
        for part in (self.stem, self.skips, self.ups):
            part.apply(_init_conv)

    def decoder_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("encoder."):
                yield p

    def forward(self, x):
        """``x`` (B, C, H, W, D) -> logits (B, K, H, W, D)."""
        pc = self.enc_cfg.patch_config
        if tuple(x.shape[2:]) != pc.spatial_shape:
            raise ValueError(f"input {tuple(x.shape[2:])} vs expected {pc.spatial_shape}")
        B = x.shape[0]
        patches = patchify_array(x, pc.patch_size)
        pos = full_positions(B, pc.N, x.device)
        _, hidden = self.encoder(patches, pos, return_hidden=self.depths)
        by_depth = dict(zip(self.encoder_depth_order(), hidden))

        def grid(t):
            return t.transpose(1, 2).reshape(B, -1, *pc.grid_dims)

        feats = [self.stem(x)]
        for k, proj in enumerate(self.skips, start=1):
            feats.append(proj(grid(by_depth[self.depths[k - 1]])))
        y = grid(by_depth[self.depths[-1]])
        for up, skip in zip(self.ups, reversed(feats)):
            y = up(y, skip)
        return self.out(y)

    def encoder_depth_order(self):
        # return_hidden yields each requested depth once, in block order
        return sorted(set(self.depths))

    def load_encoder_state(self, state):
        missing, unexpected = self.encoder.load_state_dict(state, strict=True)
        return missing, unexpected


def segment(net: SegmentationNet, volume_data):
    """Logits (H, W, D, K) for one preprocessed (H, W, D) volume."""
    x = torch.as_tensor(np.asarray(volume_data, dtype=np.float32))[None, None]
    was = net.training
    net.eval()
    with torch.no_grad():
        logits = net(x)[0]
    net.train(was)
    return logits.permute(1, 2, 3, 0).contiguous()
