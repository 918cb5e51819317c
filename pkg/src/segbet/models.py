"""Network definitions at desk scale.

Three roles share one convolutional vocabulary: a U-Net style
encoder-decoder for the segmenter (softmax head) and the gambler (sigmoid
head), and a strided patch discriminator producing a grid of scores.
Normalization is GroupNorm so tiny batches behave; forward passes are
deterministic given parameters and inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigError, NumericalAbort, ShapeMismatchError


@dataclass
class ArchitectureSpec:
    """Sizing of one network; spatial inputs must be divisible by 2**blocks."""

    role: str  # segmenter | gambler | discriminator
    blocks: int = 3
    base_width: int = 8
    in_channels: int = 3
    out_channels: int = 1
    norm: str = "group"  # group | none
    skip: bool = True
    zero_init_head: bool = False

    def __post_init__(self):
        if self.role not in ("segmenter", "gambler", "discriminator"):
            raise ConfigError(f"unknown role {self.role!r}")
        if self.blocks < 1:
            raise ConfigError("block count must be >= 1")
        if self.norm not in ("group", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")

    def width(self, level: int) -> int:
        return self.base_width * (2**level)


def _norm(spec: ArchitectureSpec, channels: int) -> nn.Module:
    if spec.norm == "none":
        return nn.Identity()
    return nn.GroupNorm(1, channels)


def _check_divisible(x: Tensor, blocks: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    if h % (2**blocks) or w % (2**blocks):
        raise ShapeMismatchError(f"spatial size {h}x{w} not divisible by 2^{blocks}")


class EncoderDecoder(nn.Module):
    """Encoder of strided conv blocks, decoder of transposed convs with skips.

    The head is a 1x1 conv followed by softmax (segmenter) or sigmoid
    (gambler). Zero-initializing the head yields exactly uniform softmax
    output or a constant 0.5 sigmoid map.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        b, w0 = spec.blocks, spec.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, w0, 3, padding=1),
            _norm(spec, w0),
            nn.ReLU(inplace=True),
        )
        self.downs = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(spec.width(i), spec.width(i + 1), 3, stride=2, padding=1),
                _norm(spec, spec.width(i + 1)),
                nn.ReLU(inplace=True),
            )
            for i in range(b)
        )
        ups = []
        for i in reversed(range(b)):
            in_ch = spec.width(i + 1)
            if spec.skip and i < b - 1:
                in_ch *= 2  # concatenated encoder feature at this resolution
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(in_ch, spec.width(i), 2, stride=2),
                    _norm(spec, spec.width(i)),
                    nn.ReLU(inplace=True),
                )
            )
        self.ups = nn.ModuleList(ups)
        head_in = w0 * 2 if spec.skip else w0
        self.head = nn.Conv2d(head_in, spec.out_channels, 1)
        if spec.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: Tensor) -> Tensor:
        _check_divisible(x, self.spec.blocks)
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        h = feats[-1]
        for step, up in enumerate(self.ups):
            level = self.spec.blocks - 1 - step
            if self.spec.skip and step > 0:
                h = torch.cat([h, feats[level + 1]], dim=1)
            h = up(h)
        if self.spec.skip:
            h = torch.cat([h, feats[0]], dim=1)
        logits = self.head(h)
        if self.spec.role == "segmenter":
            return torch.softmax(logits, dim=1)
        return torch.sigmoid(logits)


class PatchDiscriminator(nn.Module):
    """Strided conv stack mapping (N, C, H, W) to a grid of patch scores in (0, 1).

    ``forward(..., return_features=True)`` also returns the per-block
    activations, from which ``embed`` extracts a configurable layer as the
    paired-embedding feature.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        layers = []
        ch = spec.in_channels
        for i in range(spec.blocks):
            out = spec.width(i)
            block = [nn.Conv2d(ch, out, 4, stride=2, padding=1)]
            if i > 0:
                block.append(_norm(spec, out))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            layers.append(nn.Sequential(*block))
            ch = out
        self.blocks = nn.ModuleList(layers)
        self.head = nn.Conv2d(ch, 1, 3, padding=1)
        if spec.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: Tensor, return_features: bool = False):
        _check_divisible(x, self.spec.blocks)
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        scores = torch.sigmoid(self.head(h))
        if return_features:
            return scores, feats
        return scores

    def embed(self, x: Tensor, layer: int = -1) -> Tensor:
        """Flattened features of one block, used for the embedding loss."""
        _, feats = self.forward(x, return_features=True)
        return feats[layer].flatten(start_dim=1)


def build_segmenter(spec: ArchitectureSpec, num_classes: int, seed: int | None = None) -> EncoderDecoder:
    """Segmenter emitting a per-pixel softmax over ``num_classes``."""
    spec = ArchitectureSpec(**{**asdict(spec), "role": "segmenter", "out_channels": num_classes})
    if seed is not None:
        torch.manual_seed(seed)
    return EncoderDecoder(spec)


def build_gambler(spec: ArchitectureSpec, seed: int | None = None) -> EncoderDecoder:
    """Gambler taking channel-concatenated (image, prediction), emitting raw bets in [0, 1]."""
    spec = ArchitectureSpec(**{**asdict(spec), "role": "gambler", "out_channels": 1})
    if seed is not None:
        torch.manual_seed(seed)
    return EncoderDecoder(spec)


def build_patch_discriminator(spec: ArchitectureSpec, seed: int | None = None) -> PatchDiscriminator:
    spec = ArchitectureSpec(**{**asdict(spec), "role": "discriminator", "out_channels": 1})
    if seed is not None:
        torch.manual_seed(seed)
    return PatchDiscriminator(spec)


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of all parameters, for freeze-contract checks."""
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(module: nn.Module, spec: ArchitectureSpec, path, meta: dict | None = None) -> None:
    """Write the named-parameter archive plus a JSON sidecar describing it."""
    torch.save(module.state_dict(), path)
    sidecar = {"architecture": asdict(spec), **(meta or {})}
    with open(f"{path}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    with open(f"{path}.json") as fh:
        sidecar = json.load(fh)
    spec = ArchitectureSpec(**sidecar["architecture"])
    if spec.role == "discriminator":
        module = PatchDiscriminator(spec)
    else:
        module = EncoderDecoder(spec)
    module.load_state_dict(torch.load(path, weights_only=True))
    return module, sidecar


def gradient_check(loss_fn, wrt, step: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` is a nullary closure recomputing the scalar loss from the
    tensors in ``wrt`` (parameters and/or inputs, all requiring grad).
    Perturbations are applied in place, so 64-bit tensors are expected.
    Relative error uses denominator max(|analytic|, |numeric|, 1).
    """
    tensors = list(wrt)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericalAbort("non-finite analytic gradient")
    max_err = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, grads):
            flat = tensor.view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                analytic = gflat[i].item()
                err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1.0)
                max_err = max(max_err, err)
    return max_err
