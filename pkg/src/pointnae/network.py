"""Small UNet-style encoder-decoder mapping a grayscale image to a 2-channel
offset field of the same spatial size.

Tensors are torch tensors laid out (batch, channels, height, width); torch
autograd provides the reverse-mode pass.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .annot import AnnotationError, ImageGrid
from .field import VectorField


class ShapeError(ValueError):
    pass


def _check4(x: torch.Tensor, name: str = "input"):
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4D (batch, channels, height, width), got {tuple(x.shape)}")


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Size-preserving cross-correlation with zero padding (k - 1) / 2."""
    _check4(x)
    if kernel.dim() != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ShapeError(f"kernel must be (out, in, k, k) with odd k, got {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, got {x.shape[1]}")
    return F.conv2d(x, kernel, bias, padding=kernel.shape[2] // 2)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def maxpool2(x: torch.Tensor) -> torch.Tensor:
    """2x2 max pooling; gradient goes to the first maximum in row-major order."""
    _check4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {tuple(x.shape[2:])}")
    return F.max_pool2d(x, 2)


def pad_even(x: torch.Tensor) -> torch.Tensor:
    """Reflect-pad one row/column at the bottom/right where a dim is odd."""
    ph, pw = x.shape[2] % 2, x.shape[3] % 2
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x


def upsample2_bilinear(x: torch.Tensor) -> torch.Tensor:
    _check4(x)
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def concat_channels(*xs: torch.Tensor) -> torch.Tensor:
    for t in xs:
        _check4(t)
    if len({(t.shape[0],) + tuple(t.shape[2:]) for t in xs}) != 1:
        raise ShapeError(f"cannot concatenate shapes {[tuple(t.shape) for t in xs]}")
    return torch.cat(xs, dim=1)


@dataclass(frozen=True)
class ModelConfig:
    widths: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    skip: bool = True
    # pixels per unit of the last layer's output
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValueError("need at least one stage with positive width")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def stages(self) -> int:
        return len(self.widths)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


class DenoiseNet(nn.Module):
    """Encoder: per stage two 3x3 conv + ReLU, 2x2 max pool between stages.
    Decoder mirrors it with bilinear upsampling and skip concatenation, then a
    zero-initialised 1x1 conv produces (dx, dy)."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config
        k = config.kernel_size
        self.enc = nn.ModuleList()
        c = 1
        for w in config.widths:
            self.enc.append(nn.ModuleList([nn.Conv2d(c, w, k), nn.Conv2d(w, w, k)]))
            c = w
        self.dec = nn.ModuleList()
        for w in reversed(config.widths[:-1]):
            cin = c + w if config.skip else c
            self.dec.append(nn.ModuleList([nn.Conv2d(cin, w, k), nn.Conv2d(w, w, k)]))
            c = w
        self.head = nn.Conv2d(c, 2, 1)
        self.to(dtype)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("head") or name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                    bound = math.sqrt(6.0 / fan_in)
                    u = torch.rand(p.shape, generator=g, dtype=torch.float64)
                    p.copy_((2 * u - 1) * bound)

    @staticmethod
    def _conv(layer: nn.Conv2d, x):
        return relu(conv2d(x, layer.weight, layer.bias))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Activations feeding the final 1x1 layer."""
        _check4(x)
        min_side = 2 ** self.config.stages
        if x.shape[2] < min_side or x.shape[3] < min_side:
            raise ShapeError(f"input {tuple(x.shape[2:])} smaller than {min_side} pixels per side")
        skips = []
        for i, (a, b) in enumerate(self.enc):
            if i:
                x = maxpool2(pad_even(x))
            x = self._conv(b, self._conv(a, x))
            skips.append(x)
        for (a, b), skip in zip(self.dec, reversed(skips[:-1])):
            x = upsample2_bilinear(x)[:, :, : skip.shape[2], : skip.shape[3]]
            if self.config.skip:
                x = concat_channels(skip, x)
            x = self._conv(b, self._conv(a, x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = conv2d(self.features(x), self.head.weight, self.head.bias)
        if self.config.output_scale != 1.0:
            out = out * self.config.output_scale
        return out


def image_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack equally sized ImageGrids (or 2D arrays) into a (B, 1, H, W) tensor."""
    if isinstance(images, ImageGrid):
        images = [images]
    arrs = [im.pixels if isinstance(im, ImageGrid) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrs)[:, None]).to(dtype)


def forward(model: DenoiseNet, image: ImageGrid) -> VectorField:
    """Predict the offset field for one image (no gradient recording)."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(image_tensor(image, dtype))[0]
    return VectorField(out.to(torch.float32).numpy())


def backward(loss: torch.Tensor, model: DenoiseNet) -> Dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named parameter of ``model``."""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ValueError("loss must be a scalar tensor")
    if loss.grad_fn is None:
        if loss.requires_grad:
            raise ValueError("loss is a leaf tensor; run a forward pass first")
        raise RuntimeError("backward called without a recorded forward pass")
    params = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(params, grads)
    }


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"NAEW"
CKPT_VERSION = 1


def save_checkpoint(model: DenoiseNet) -> bytes:
    """Serialise config and parameters.

    Layout (little-endian): magic, u32 version, u32 config-JSON length,
    config JSON, 32-byte sha256 digest of that JSON, u32 parameter count,
    then per parameter: u32 name length, name, u32 rank, u32 dims, f32 data.
    """
    cfg = model.config.to_json().encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, model.config.digest()]
    params = list(model.named_parameters())
    out.append(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{p.dim()}I", p.dim(), *p.shape))
        out.append(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise AnnotationError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(data: bytes) -> DenoiseNet:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise AnnotationError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise AnnotationError(f"unsupported checkpoint version {version}")
    cfg_bytes = r.take(r.u32())
    if hashlib.sha256(cfg_bytes).digest() != r.take(32):
        raise AnnotationError("checkpoint config digest mismatch")
    try:
        config = ModelConfig.from_json(cfg_bytes.decode("utf-8"))
    except (ValueError, TypeError) as e:
        raise AnnotationError(f"bad checkpoint config: {e}") from None
    model = DenoiseNet(config)
    expected = dict(model.named_parameters())
    n = r.u32()
    if n != len(expected):
        raise AnnotationError(f"checkpoint has {n} parameters, model needs {len(expected)}")
    with torch.no_grad():
        for _ in range(n):
            name = r.take(r.u32()).decode("utf-8")
            rank = r.u32()
            dims = r.u32s(rank)
            if name not in expected or tuple(expected[name].shape) != dims:
                raise AnnotationError(f"unexpected parameter {name} {dims}")
            count = int(np.prod(dims))
            arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
            if not np.all(np.isfinite(arr)):
                raise AnnotationError(f"non-finite values in parameter {name}")
            expected[name].copy_(torch.from_numpy(arr.astype(np.float32)))
    if r.pos != len(data):
        raise AnnotationError("trailing bytes after checkpoint")
    return model
