"""Vision-Transformer encoder used for both teacher and student roles.

The architecture is a standard pre-norm ViT: images are split into
non-overlapping patches, linearly projected, prefixed with a learned CLS
token, summed with learned positional embeddings, and passed through
`layers` transformer blocks (LayerNorm -> multi-head self-attention ->
residual, LayerNorm -> GELU MLP -> residual). A final LayerNorm is applied
before the CLS embedding is read out and fed to the linear classifier head.

Checkpoint file format (little-endian throughout)::

    magic   4 bytes  b"EDKD"
    version u16      currently 1
    config  7 x u32  layers, embed_dim, heads, mlp_dim, patch_size,
                     image_size, num_classes
            u8       cls_token flag
    count   u32      number of tensors
    tensor  u16      name length
            bytes    name (utf-8)
            u8       rank
            u32 x r  dims
            f32 x n  data, row-major

Tensors are written in parameter declaration order.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigurationError, FormatError, ShapeError

CHECKPOINT_MAGIC = b"EDKD"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of one encoder."""

    layers: int
    embed_dim: int
    heads: int
    mlp_dim: int
    patch_size: int
    image_size: int
    num_classes: int
    cls_token: bool = True

    def __post_init__(self) -> None:
        counts = {
            "layers": self.layers,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "mlp_dim": self.mlp_dim,
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})"
            )
        if not self.cls_token:
            raise ConfigurationError("cls_token must be true; CLS readout is the only supported head")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "mlp_dim": self.mlp_dim,
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "cls_token": self.cls_token,
        }


@dataclass
class EncoderOutput:
    """Per-batch CLS embeddings and classification logits."""

    cls_embedding: Tensor  # (B, embed_dim)
    logits: Tensor  # (B, num_classes)


ImageLike = Union[np.ndarray, Tensor]


def patchify(image: ImageLike, patch_size: int) -> ImageLike:
    """Split one H x W x 3 image into flattened patch vectors.

    Patches are emitted in raster order (row-major over the patch grid),
    each flattened row-major within the patch with the channel axis last,
    giving (H/p)*(W/p) vectors of length 3*p*p. Returns the same array
    kind it was given.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {tuple(image.shape)}")
    h, w, c = image.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(
            f"image size {h}x{w} is not divisible by patch_size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    blocks = image.reshape(gh, patch_size, gw, patch_size, c)
    if isinstance(blocks, Tensor):
        blocks = blocks.permute(0, 2, 1, 3, 4)
    else:
        blocks = blocks.transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch_size * patch_size * c)


def _patchify_batch(images: Tensor, patch_size: int) -> Tensor:
    b, h, w, c = images.shape
    gh, gw = h // patch_size, w // patch_size
    blocks = images.reshape(b, gh, patch_size, gw, patch_size, c)
    return blocks.permute(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch_size * patch_size * c)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, heads, N, head_dim)
        attn = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        attn = attn.softmax(dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.out(ctx)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(mlp_dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(self.act(self.fc1(self.norm2(x))))
        return x


class ViTEncoder(nn.Module):
    """Encoder whose forward pass yields the CLS embedding and class logits.

    Forward passes are pure (no dropout, no batch statistics), so identical
    weights and inputs always produce identical outputs. ``forward_calls``
    counts invocations; the trainer uses it to assert that cache-backed
    training never touches a teacher.
    """

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.patch_proj = nn.Linear(3 * config.patch_size**2, config.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        self.pos_embedding = nn.Parameter(torch.zeros(1, config.seq_len, config.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.heads, config.mlp_dim)
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.num_classes)
        self.forward_calls = 0
        self.to(dtype)

    @property
    def param_dtype(self) -> torch.dtype:
        return self.patch_proj.weight.dtype

    def reset_parameters(self, seed: int) -> None:
        """Deterministically reinitialize every parameter from ``seed``.

        Matrices and token/positional embeddings are drawn from a truncated
        normal (std 0.02, clipped at two standard deviations); LayerNorm
        scales start at one and every bias at zero. Parameters are visited
        in declaration order so a fixed seed yields bitwise-identical
        weights.
        """
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if param.ndim >= 2:
                    sample = torch.empty(param.shape, dtype=torch.float32)
                    nn.init.trunc_normal_(
                        sample, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen
                    )
                    param.copy_(sample.to(param.dtype))
                elif name.endswith("weight"):  # LayerNorm scale
                    param.fill_(1.0)
                else:
                    param.zero_()

    def forward(self, images: Tensor) -> EncoderOutput:
        if images.ndim != 4 or images.shape[3] != 3:
            raise ShapeError(f"expected images of shape (B, H, W, 3), got {tuple(images.shape)}")
        b, h, w, _ = images.shape
        if b < 1:
            raise ShapeError("batch must be non-empty")
        if h != self.config.image_size or w != self.config.image_size:
            raise ShapeError(
                f"input is {h}x{w} but the model expects {self.config.image_size}x{self.config.image_size}"
            )
        x = images.to(self.param_dtype)
        tokens = self.patch_proj(_patchify_batch(x, self.config.patch_size))
        cls = self.cls_token.expand(b, -1, -1)
        seq = torch.cat([cls, tokens], dim=1) + self.pos_embedding
        for block in self.blocks:
            seq = block(seq)
        seq = self.final_norm(seq)
        cls_embedding = seq[:, 0]
        logits = self.head(cls_embedding)
        self.forward_calls += 1
        return EncoderOutput(cls_embedding=cls_embedding, logits=logits)


def init_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ViTEncoder:
    """Build an encoder and deterministically initialize it from ``seed``."""
    model = ViTEncoder(config, dtype=dtype)
    model.reset_parameters(seed)
    return model


def param_count(config: ModelConfig) -> int:
    """Exact learnable-parameter count implied by ``config``.

    With D = embed_dim, M = mlp_dim, P = patch_size, S = num_patches + 1 and
    N = num_classes::

        patch projection   3*P^2*D + D
        CLS token          D
        positional         S*D
        per block          qkv 3*(D^2+D), out D^2+D, two LayerNorms 4*D,
                           MLP D*M+M + M*D+D
        final LayerNorm    2*D
        classifier head    D*N + N
    """
    d, m = config.embed_dim, config.mlp_dim
    per_block = 3 * (d * d + d) + (d * d + d) + 4 * d + (d * m + m) + (m * d + d)
    total = (3 * config.patch_size**2 * d + d)  # patch projection
    total += d  # CLS token
    total += config.seq_len * d  # positional embeddings
    total += config.layers * per_block
    total += 2 * d  # final LayerNorm
    total += d * config.num_classes + config.num_classes  # head
    return total


def _digest_config(h, config: ModelConfig) -> None:
    for value in config.to_dict().values():
        h.update(str(value).encode())


def weights_digest(model: ViTEncoder) -> str:
    """SHA-256 over the config and every parameter as little-endian f32.

    Pins cache provenance and verifies that a teacher was never mutated by a
    training run. Hashing the f32 image of each tensor makes the digest equal
    to :func:`checkpoint_digest` of the model's saved checkpoint, so caches
    can be validated against a checkpoint file without instantiating it.
    """
    h = hashlib.sha256()
    _digest_config(h, model.config)
    for name, param in model.named_parameters():
        h.update(name.encode())
        data = param.detach().cpu().to(torch.float32).numpy()
        h.update(np.ascontiguousarray(data).astype("<f4").tobytes())
    return h.hexdigest()


def load_checkpoint_config(path: str) -> ModelConfig:
    """Read only the ModelConfig header of a checkpoint."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        fields = struct.unpack("<7IB", _read_exact(fh, 29, "config"))
    return ModelConfig(*fields[:7], cls_token=bool(fields[7]))


def checkpoint_digest(path: str) -> str:
    """Digest of a checkpoint file, equal to ``weights_digest`` of its model.

    Streams the file; never materializes the model.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        fields = struct.unpack("<7IB", _read_exact(fh, 29, "config"))
        config = ModelConfig(*fields[:7], cls_token=bool(fields[7]))
        h = hashlib.sha256()
        _digest_config(h, config)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "tensor name")
            h.update(name)
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            remaining = 4 * (int(np.prod(dims, dtype=np.int64)) if dims else 1)
            while remaining:
                chunk = fh.read(min(remaining, 1 << 20))
                if not chunk:
                    raise FormatError(f"truncated data for tensor {name.decode()!r}")
                h.update(chunk)
                remaining -= len(chunk)
    return h.hexdigest()


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def save_checkpoint(model: ViTEncoder, path: str) -> None:
    """Write the model to ``path`` in the EDKD container format."""
    cfg = model.config
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(
            struct.pack(
                "<7IB",
                cfg.layers,
                cfg.embed_dim,
                cfg.heads,
                cfg.mlp_dim,
                cfg.patch_size,
                cfg.image_size,
                cfg.num_classes,
                int(cfg.cls_token),
            )
        )
        fh.write(struct.pack("<I", len(params)))
        for name, param in params:
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", param.ndim))
            fh.write(struct.pack(f"<{param.ndim}I", *param.shape))
            data = param.detach().cpu().to(torch.float32).numpy()
            fh.write(np.ascontiguousarray(data).astype("<f4").tobytes())


def load_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> ViTEncoder:
    """Read a checkpoint, validating magic, version, and tensor shapes."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        fields = struct.unpack("<7IB", _read_exact(fh, 29, "config"))
        config = ModelConfig(*fields[:7], cls_token=bool(fields[7]))
        model = ViTEncoder(config, dtype=dtype)
        expected = dict(model.named_parameters())
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        if count != len(expected):
            raise FormatError(f"checkpoint holds {count} tensors, model needs {len(expected)}")
        seen = set()
        with torch.no_grad():
            for _ in range(count):
                (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
                name = _read_exact(fh, name_len, "tensor name").decode()
                if name not in expected:
                    raise FormatError(f"unexpected tensor {name!r} in checkpoint")
                (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
                dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
                param = expected[name]
                if tuple(param.shape) != dims:
                    raise FormatError(
                        f"tensor {name!r} has shape {dims}, expected {tuple(param.shape)}"
                    )
                numel = int(np.prod(dims, dtype=np.int64)) if dims else 1
                raw = _read_exact(fh, 4 * numel, f"data of {name!r}")
                values = np.frombuffer(raw, dtype="<f4").reshape(dims)
                param.copy_(torch.from_numpy(values.copy()).to(dtype))
                seen.add(name)
        if seen != set(expected):
            raise FormatError("checkpoint is missing tensors")
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final tensor")
    return model
