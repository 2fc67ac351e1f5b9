"""Frozen patch-embedding audio encoder (masked-autoencoder style stand-in)."""

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .layers import EncoderLayer, positional_encoding


@dataclass
class PatchEmbeddings:
    values: torch.Tensor  # (..., n, d) with n = n_t * n_f
    grid: tuple
    patch_size: tuple

    @property
    def n(self):
        return self.values.shape[-2]


def patchify(x, patch_size):
    """Split (..., t, f) into row-major (time, freq) flattened patches.

    Excess frames/bins are cropped, never padded. Returns ``PatchEmbeddings``
    holding the raw (pre-projection) patches of length ``p_t * p_f``.
    """
    x = torch.as_tensor(x)
    p_t, p_f = patch_size
    t, f = x.shape[-2:]
    if p_t > t or p_f > f:
        raise ValueError(f"patch {patch_size} larger than spectrogram ({t}, {f})")
    n_t, n_f = t // p_t, f // p_f
    lead = x.shape[:-2]
    x = x[..., : n_t * p_t, : n_f * p_f]
    x = x.reshape(*lead, n_t, p_t, n_f, p_f).transpose(-3, -2)
    return PatchEmbeddings(x.reshape(*lead, n_t * n_f, p_t * p_f), (n_t, n_f), (p_t, p_f))


def unpatchify(patches, grid=None, patch_size=None):
    if isinstance(patches, PatchEmbeddings):
        grid, patch_size, patches = patches.grid, patches.patch_size, patches.values
    (n_t, n_f), (p_t, p_f) = grid, patch_size
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, n_t, n_f, p_t, p_f).transpose(-3, -2)
    return x.reshape(*lead, n_t * p_t, n_f * p_f)


class PatchEncoder(nn.Module):
    """Linear patch projection + fixed 2-D positional encoding + pre-norm transformer."""

    def __init__(self, d_p=192, depth=4, heads=4, patch_size=(8, 8), seed=0):
        super().__init__()
        self.d_p = d_p
        self.depth = depth
        self.heads = heads
        self.patch_size = tuple(patch_size)
        self.seed = seed
        self.frozen = False
        self.patch_proj = nn.Linear(self.patch_size[0] * self.patch_size[1], d_p)
        self.blocks = nn.ModuleList(EncoderLayer(d_p, heads) for _ in range(depth))
        for i, blk in enumerate(self.blocks):
            blk.attn.layer_index = i
        self.norm = nn.LayerNorm(d_p)
        self.register_buffer("input_mean", torch.zeros(()))
        self.register_buffer("input_std", torch.ones(()))

    def set_input_stats(self, mean, std):
        self.input_mean.fill_(float(mean))
        self.input_std.fill_(max(float(std), 1e-6))

    def grid_for(self, t, f):
        return t // self.patch_size[0], f // self.patch_size[1]

    def normalized_patches(self, x):
        p = patchify(x, self.patch_size)
        vals = (p.values.to(self.input_mean.dtype) - self.input_mean) / self.input_std
        return PatchEmbeddings(vals, p.grid, p.patch_size)

    def encode_patches(self, patches, pe):
        """Transformer over projected patches; ``pe`` rows attach to patch rows."""
        h = self.patch_proj(patches) + pe.to(patches.dtype)
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)

    def forward(self, x):
        p = self.normalized_patches(x)
        pe = positional_encoding(p.grid, self.d_p)
        return PatchEmbeddings(self.encode_patches(p.values, pe), p.grid, p.patch_size)

    def freeze(self):
        self.frozen = True
        for prm in self.parameters():
            prm.requires_grad_(False)
        self.eval()
        return self

    def header(self):
        return {"kind": "encoder", "d_p": self.d_p, "depth": self.depth, "heads": self.heads,
                "patch_size": list(self.patch_size), "frozen": self.frozen, "seed": self.seed}


def build_encoder(cfg_encoder):
    torch.manual_seed(cfg_encoder["seed"])
    return PatchEncoder(cfg_encoder["d_p"], cfg_encoder["depth"], cfg_encoder["heads"],
                        tuple(cfg_encoder["patch_size"]), cfg_encoder["seed"])


@torch.no_grad()
def encode(x, params, batch_size=256):
    """Embed log-mel input (t, f) or (N, t, f) with a frozen encoder."""
    was_training = params.training
    params.eval()
    x = torch.tensor(np.asarray(x), dtype=torch.float32)
    single = x.dim() == 2
    if single:
        x = x[None]
    outs = []
    for start in range(0, x.shape[0], batch_size):
        outs.append(params(x[start:start + batch_size]).values)
    params.train(was_training)
    vals = torch.cat(outs)
    return PatchEmbeddings(vals[0] if single else vals, params.grid_for(*x.shape[-2:]), params.patch_size)


def clip_embedding(e):
    """Mean over patch rows: (..., n, d) -> (..., d)."""
    vals = e.values if isinstance(e, PatchEmbeddings) else torch.as_tensor(e)
    if vals.shape[-2] < 1:
        raise ValueError("need at least one patch")
    return vals.mean(dim=-2)


def pretrain_masked(params, specs, mask_ratio=0.75, steps=1000, lr=1e-3, batch_size=32,
                    seed=0, decoder_width=64, log=None):
    """Masked-patch reconstruction pretraining; returns (frozen params, loss history).

    A random ``mask_ratio`` fraction of patches is hidden per clip; the
    encoder sees only visible patches and a one-layer decoder predicts the
    normalized pixels of hidden ones. MSE is taken over hidden patches.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    specs = torch.tensor(np.asarray(specs), dtype=torch.float32)
    params.set_input_stats(specs.mean(), specs.std())
    patches = params.normalized_patches(specs)
    grid, n, patch_dim = patches.grid, patches.values.shape[1], patches.values.shape[2]
    pe_enc = positional_encoding(grid, params.d_p).float()
    pe_dec = positional_encoding(grid, decoder_width).float()
    n_vis = max(1, int(round(n * (1.0 - mask_ratio))))
    if n_vis >= n:
        raise ValueError("mask_ratio too small to hide any patch")

    torch.manual_seed(seed)
    dec_in = nn.Linear(params.d_p, decoder_width)
    mask_token = nn.Parameter(torch.zeros(decoder_width))
    dec_block = EncoderLayer(decoder_width, 2)
    dec_out = nn.Linear(decoder_width, patch_dim)
    dec_params = [mask_token, *dec_in.parameters(), *dec_block.parameters(), *dec_out.parameters()]
    for prm in params.parameters():
        prm.requires_grad_(True)
    params.train()
    opt = torch.optim.Adam([*params.parameters(), *dec_params], lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(specs), size=batch_size))
        x = patches.values[idx]
        order = torch.from_numpy(np.argsort(rng.random((batch_size, n)), axis=1))
        vis, hid = order[:, :n_vis], order[:, n_vis:]
        gather = lambda t, i: torch.gather(t, 1, i[..., None].expand(-1, -1, t.shape[-1]))
        h = params.patch_proj(gather(x, vis)) + pe_enc[vis]
        for blk in params.blocks:
            h = blk(h)
        h = dec_in(params.norm(h))
        full = mask_token.expand(batch_size, n, -1).clone()
        full = full.scatter(1, vis[..., None].expand(-1, -1, decoder_width), h)
        full = dec_block(full + pe_dec)
        pred = dec_out(full)
        loss = ((gather(pred, hid) - gather(x, hid)) ** 2).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"masked pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log is not None and step % 100 == 0:
            log(f"pretrain step {step} loss {history[-1]:.4f}")
    return params.freeze(), history


def save_encoder(path, params):
    return checkpoint.save(path, params.header(), params.state_dict())


def load_encoder(path):
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "encoder":
        raise checkpoint.CheckpointError(f"{path} is not an encoder checkpoint")
    return encoder_from(header, tensors)


def encoder_from(header, tensors):
    enc = PatchEncoder(header["d_p"], header["depth"], header["heads"],
                       tuple(header["patch_size"]), header.get("seed", 0))
    try:
        enc.load_state_dict(tensors)
    except RuntimeError as exc:
        raise checkpoint.CheckpointError(f"encoder weights do not match header: {exc}") from exc
    return enc.freeze() if header.get("frozen", True) else enc


def state_digest(module):
    """Bitwise fingerprint of every parameter and buffer."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
