"""Dual-mask Siamese transformer autoencoder.

A shared pre-norm ViT encoder runs on the visible patch tokens of each masked
view (class token prepended, positional embeddings from a small MLP on the
patch center coordinates).  A shared shallow ViT decoder fills the masked
positions with a learnable mask token and reconstructs features for every
patch, re-scattered to original patch order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

_LN_EPS = 1e-6


@dataclass
class MaskPair:
    """Two independent boolean masks (True = masked) at the same ratio."""

    mask_a: np.ndarray
    mask_b: np.ndarray
    ratio: float


def mask_count(n: int, r: float) -> int:
    # round-half-to-even keeps the count portable across languages
    return int(np.rint(r * n))


def sample_masks(n: int, r: float, seed: int) -> MaskPair:
    if not 0.0 < r < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {r}")
    m = mask_count(n, r)
    if m < 1 or m > n - 1:
        raise ValueError(f"degenerate mask: {m} of {n} patches masked")
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(2):
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=m, replace=False)] = True
        masks.append(mask)
    return MaskPair(mask_a=masks[0], mask_b=masks[1], ratio=r)


# ----------------------------------------------------------------------
# parameter containers


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor


@dataclass
class ViTStack:
    """Pre-norm transformer blocks plus positional MLP and optional class token."""

    blocks: list[Block]
    heads: int
    dim: int
    pos_w1: Tensor
    pos_b1: Tensor
    pos_w2: Tensor
    pos_b2: Tensor
    cls_token: Tensor | None = None
    final_ln_g: Tensor = field(default=None)
    final_ln_b: Tensor = field(default=None)

    @staticmethod
    def create(depth: int, dim: int, heads: int, rng: np.random.Generator,
               with_cls: bool = False, init_std: float = 0.02) -> "ViTStack":
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")

        def w(shape):
            return Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)

        hidden = 4 * dim  # MLP expansion ratio 4
        blocks = [
            Block(
                ln1_g=ones(dim), ln1_b=zeros(dim),
                wq=w((dim, dim)), bq=zeros(dim),
                wk=w((dim, dim)), bk=zeros(dim),
                wv=w((dim, dim)), bv=zeros(dim),
                wo=w((dim, dim)), bo=zeros(dim),
                ln2_g=ones(dim), ln2_b=zeros(dim),
                w_mlp1=w((dim, hidden)), b_mlp1=zeros(hidden),
                w_mlp2=w((hidden, dim)), b_mlp2=zeros(dim),
            )
            for _ in range(depth)
        ]
        return ViTStack(
            blocks=blocks, heads=heads, dim=dim,
            pos_w1=w((3, dim)), pos_b1=zeros(dim),
            pos_w2=w((dim, dim)), pos_b2=zeros(dim),
            cls_token=w((1, dim)) if with_cls else None,
            final_ln_g=ones(dim), final_ln_b=zeros(dim),
        )

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {
            f"{prefix}.pos_w1": self.pos_w1, f"{prefix}.pos_b1": self.pos_b1,
            f"{prefix}.pos_w2": self.pos_w2, f"{prefix}.pos_b2": self.pos_b2,
            f"{prefix}.final_ln_g": self.final_ln_g,
            f"{prefix}.final_ln_b": self.final_ln_b,
        }
        if self.cls_token is not None:
            params[f"{prefix}.cls_token"] = self.cls_token
        for i, blk in enumerate(self.blocks):
            for name in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                         "wo", "bo", "ln2_g", "ln2_b",
                         "w_mlp1", "b_mlp1", "w_mlp2", "b_mlp2"):
                params[f"{prefix}.block{i}.{name}"] = getattr(blk, name)
        return params


@dataclass
class EncodedView:
    f_cls: Tensor              # 1 x d
    visible_features: Tensor   # (N - m) x d
    visible_indices: np.ndarray


@dataclass
class ReconstructedFeatures:
    features: Tensor           # N x d, original patch order


# ----------------------------------------------------------------------
# forward pieces


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + _LN_EPS) * gamma + beta


def positional_embed(stack: ViTStack, centers: np.ndarray) -> Tensor:
    h = T.relu(Tensor(centers) @ stack.pos_w1 + stack.pos_b1)
    return h @ stack.pos_w2 + stack.pos_b2


def _attention(x: Tensor, blk: Block, heads: int, attn_record: list | None) -> Tensor:
    t, d = x.shape
    hd = d // heads
    q = (x @ blk.wq + blk.bq).reshape((t, heads, hd)).transpose(1, 0, 2)
    k = (x @ blk.wk + blk.bk).reshape((t, heads, hd)).transpose(1, 0, 2)
    v = (x @ blk.wv + blk.bv).reshape((t, heads, hd)).transpose(1, 0, 2)
    logits = T.scale(q @ k.transpose(0, 2, 1), 1.0 / np.sqrt(hd))
    attn = T.softmax(logits)                       # (heads, t, t)
    if attn_record is not None:
        attn_record.append(attn.data.copy())
    out = (attn @ v).transpose(1, 0, 2).reshape((t, d))
    return out @ blk.wo + blk.bo


def run_blocks(x: Tensor, stack: ViTStack, attn_record: list | None = None) -> Tensor:
    for blk in stack.blocks:
        x = x + _attention(layer_norm(x, blk.ln1_g, blk.ln1_b), blk, stack.heads, attn_record)
        h = layer_norm(x, blk.ln2_g, blk.ln2_b)
        x = x + T.relu(h @ blk.w_mlp1 + blk.b_mlp1) @ blk.w_mlp2 + blk.b_mlp2
    return layer_norm(x, stack.final_ln_g, stack.final_ln_b)


def encode(tokens: Tensor, centers: np.ndarray, mask: np.ndarray, vit: ViTStack,
           attn_record: list | None = None) -> EncodedView:
    """Run the encoder over the visible tokens of one masked view."""
    mask = np.asarray(mask, dtype=bool)
    visible = np.flatnonzero(~mask)
    if visible.size == 0:
        raise ValueError("cannot encode a view with every patch masked")
    if vit.cls_token is None:
        raise ValueError("encoder stack requires a class token")
    pos = positional_embed(vit, centers[visible])
    vis_tokens = T.gather_rows(tokens, visible) + pos
    seq = T.concat([vit.cls_token, vis_tokens], axis=0)
    out = run_blocks(seq, vit, attn_record)
    f_cls = T.gather_rows(out, np.array([0]))
    feats = T.gather_rows(out, np.arange(1, visible.size + 1))
    return EncodedView(f_cls=f_cls, visible_features=feats, visible_indices=visible)


def decode(view: EncodedView, centers: np.ndarray, mask: np.ndarray,
           decoder: ViTStack, mask_token: Tensor,
           attn_record: list | None = None) -> ReconstructedFeatures:
    """Fill masked slots with the mask token, decode, and restore patch order."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    masked = np.flatnonzero(mask)
    vis = view.visible_indices
    pos_vis = positional_embed(decoder, centers[vis])
    rows = [view.visible_features + pos_vis]
    order = [vis]
    if masked.size:
        pos_masked = positional_embed(decoder, centers[masked])
        mask_rows = mask_token * Tensor(np.ones((masked.size, 1))) + pos_masked
        rows.append(mask_rows)
        order.append(masked)
    seq = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    out = run_blocks(seq, decoder, attn_record)
    # scatter rows back to original patch index order
    perm = np.concatenate(order)
    inverse = np.empty(n, dtype=np.intp)
    inverse[perm] = np.arange(n)
    return ReconstructedFeatures(features=T.gather_rows(out, inverse))


# ----------------------------------------------------------------------
# checkpoint format: magic, version, then per parameter
# name_len(u32) name rank(u32) extents(u64 each) float64 little-endian data

_MAGIC = b"PSSLCKPT"
_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            t = params[name]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", t.data.ndim))
            for extent in t.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Load values into an existing parameter dict, validating names/shapes."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            raw = fh.read(8 * int(np.prod(shape)) if shape else 8 * 1)
            if name not in params:
                raise ValueError(f"checkpoint parameter {name!r} unknown to this architecture")
            target = params[name]
            if shape != target.data.shape:
                raise ValueError(
                    f"checkpoint parameter {name!r} has shape {shape}, "
                    f"architecture expects {target.data.shape}")
            values = np.frombuffer(raw, dtype="<f8").reshape(shape)
            target.data = values.astype(target.data.dtype).copy()
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
