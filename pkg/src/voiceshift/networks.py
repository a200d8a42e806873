"""Trainable networks: text encoder, style encoder, AdaIN mel decoder,
speaker discriminator, mel encoder, and the per-frame phoneme projection.

Everything on the conversion path (decoder, mel encoder) is built from 1-D
convolutions, instance/adaptive normalization, and pointwise nonlinearities
only, so inference cost is linear in the number of frames.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError

SIGMA_FLOOR = 1e-5
LRELU_SLOPE = 0.2


@dataclass
class ModelConfig:
    n_mels: int = 80
    channels: int = 192
    style_dim: int = 64
    decoder_blocks: int = 7
    encoder_blocks: int = 6
    n_speakers: int = 1
    vocab_size: int = 1
    text_layers: int = 3
    kernel_size: int = 5
    mel_bias_init: float = 0.0

    def __post_init__(self):
        for name in ("n_mels", "channels", "style_dim", "decoder_blocks",
                     "encoder_blocks", "n_speakers", "vocab_size",
                     "text_layers", "kernel_size"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset used by tests and toy runs."""
        base = dict(channels=32, style_dim=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class InstanceNorm1d(nn.Module):
    """Per-channel normalization over the frame axis with a floored std.

    Supports an optional validity mask so padded batches normalize over real
    frames only (keeps outputs independent of padding length).
    """

    def __init__(self, channels=None, affine=False, floor=SIGMA_FLOOR):
        super().__init__()
        self.floor = floor
        self.affine = affine
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, mask=None):
        if mask is None:
            mean = x.mean(dim=-1, keepdim=True)
            var = x.var(dim=-1, unbiased=False, keepdim=True)
        else:
            count = mask.sum(dim=-1, keepdim=True).clamp_min(1.0)
            mean = (x * mask).sum(dim=-1, keepdim=True) / count
            var = (((x - mean) * mask) ** 2).sum(dim=-1, keepdim=True) / count
        # clamp before the sqrt: same floor, but no NaN grad at zero variance
        out = (x - mean) / var.clamp_min(self.floor ** 2).sqrt()
        if self.affine:
            out = out * self.weight[:, None] + self.bias[:, None]
        if mask is not None:
            out = out * mask
        return out


class AdaIN1d(nn.Module):
    """Adaptive instance norm: per-channel gain and bias projected from a
    style vector replace the channel statistics. Std is floored so constant
    or length-1 channels stay finite."""

    def __init__(self, style_dim, channels, floor=SIGMA_FLOOR):
        super().__init__()
        self.channels = channels
        self.floor = floor
        self.fc = nn.Linear(style_dim, channels * 2)
        with torch.no_grad():  # start at identity: gain 1, bias 0
            self.fc.bias[:channels] = 1.0
            self.fc.bias[channels:] = 0.0

    def gain_bias(self, s):
        h = self.fc(s)
        return h[..., : self.channels], h[..., self.channels :]

    def forward(self, x, s):
        gain, bias = self.gain_bias(s)
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        std = var.clamp_min(self.floor ** 2).sqrt()
        return gain.unsqueeze(-1) * (x - mean) / std + bias.unsqueeze(-1)


class ResBlock1d(nn.Module):
    """Frame-preserving residual block with instance normalization."""

    def __init__(self, dim_in, dim_out, kernel_size=5):
        super().__init__()
        pad = kernel_size // 2
        self.norm1 = InstanceNorm1d(dim_in, affine=True)
        self.norm2 = InstanceNorm1d(dim_out, affine=True)
        self.conv1 = nn.Conv1d(dim_in, dim_out, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(dim_out, dim_out, kernel_size, padding=pad)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.learned_sc = dim_in != dim_out
        if self.learned_sc:
            self.conv1x1 = nn.Conv1d(dim_in, dim_out, 1, bias=False)

    def _shortcut(self, x):
        return self.conv1x1(x) if self.learned_sc else x

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return (h + self._shortcut(x)) / math.sqrt(2)


class AdainResBlock1d(nn.Module):
    """Residual block whose normalizations are style-adaptive."""

    def __init__(self, dim_in, dim_out, style_dim, kernel_size=5):
        super().__init__()
        pad = kernel_size // 2
        self.norm1 = AdaIN1d(style_dim, dim_in)
        self.norm2 = AdaIN1d(style_dim, dim_out)
        self.conv1 = nn.Conv1d(dim_in, dim_out, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(dim_out, dim_out, kernel_size, padding=pad)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.learned_sc = dim_in != dim_out
        if self.learned_sc:
            self.conv1x1 = nn.Conv1d(dim_in, dim_out, 1, bias=False)

    def _shortcut(self, x):
        return self.conv1x1(x) if self.learned_sc else x

    def forward(self, x, s):
        h = self.conv1(self.act(self.norm1(x, s)))
        h = self.conv2(self.act(self.norm2(h, s)))
        return (h + self._shortcut(x)) / math.sqrt(2)


class TextEncoder(nn.Module):
    """Phoneme ids -> [B, C, M] latent. Convolutional only; padded positions
    are masked out of every norm so batching never changes valid outputs."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.vocab_size = config.vocab_size
        c, k = config.channels, config.kernel_size
        self.embedding = nn.Embedding(config.vocab_size + 1, c,
                                      padding_idx=config.vocab_size)
        self.convs = nn.ModuleList(
            nn.Conv1d(c, c, k, padding=k // 2) for _ in range(config.text_layers)
        )
        self.norms = nn.ModuleList(
            InstanceNorm1d(c, affine=True) for _ in range(config.text_layers)
        )
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    @property
    def pad_id(self):
        return self.vocab_size

    def encode_embedded(self, x, mask=None):
        """Conv stack over an already-embedded [B, C, M] sequence."""
        if mask is None:
            mask = torch.ones(x.shape[0], 1, x.shape[2], dtype=x.dtype)
        for conv, norm in zip(self.convs, self.norms):
            x = self.act(norm(conv(x) * mask, mask=mask)) * mask
        return x

    def forward(self, ids, lengths=None):
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        real = ids != self.pad_id
        if torch.any((ids < 0) | (ids > self.pad_id)):
            raise InvalidInputError("phoneme id outside vocabulary")
        mask = real.unsqueeze(1).to(self.embedding.weight.dtype)
        x = self.embedding(ids).transpose(1, 2) * mask
        return self.encode_embedded(x, mask)


class ResBlock2d(nn.Module):
    """Downsampling residual block for the style/discriminator trunk.

    Pools before the convolutions so they run at the reduced resolution.
    """

    def __init__(self, dim_in, dim_out):
        super().__init__()
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, padding=1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        self.learned_sc = dim_in != dim_out
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, bias=False)

    def _down(self, x):
        return F.avg_pool2d(x, 2, ceil_mode=True)

    def forward(self, x):
        x = self._down(x)
        h = self.conv1(self.act(x))
        h = self.conv2(self.act(h))
        sc = self.conv1x1(x) if self.learned_sc else x
        return (h + sc) / math.sqrt(2)


class _MelTrunk(nn.Module):
    """Shared 2-D conv trunk used by the style encoder and discriminator."""

    def __init__(self, config: ModelConfig, n_blocks=3):
        super().__init__()
        base = max(config.channels // 8, 8)
        cap = config.channels * 2
        self.stem = nn.Conv2d(1, base, 3, padding=1)
        blocks = []
        dim = base
        for _ in range(n_blocks):
            nxt = min(dim * 2, cap)
            blocks.append(ResBlock2d(dim, nxt))
            dim = nxt
        self.blocks = nn.ModuleList(blocks)
        self.out_dim = dim
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, mel):
        # mel: [B, n_mels, T]
        x = self.stem(mel.unsqueeze(1))
        feats = [x]
        for blk in self.blocks:
            x = blk(x)
            feats.append(x)
        pooled = F.adaptive_avg_pool2d(self.act(x), 1).flatten(1)
        return pooled, feats


class StyleEncoder(nn.Module):
    """Reference mel of any length -> fixed-size style code [B, style_dim]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.trunk = _MelTrunk(config)
        self.out = nn.Linear(self.trunk.out_dim, config.style_dim)

    def forward(self, mel):
        pooled, _ = self.trunk(mel)
        return self.out(pooled)


@dataclass
class DiscriminatorOutput:
    logit: torch.Tensor            # [B]
    features: List[torch.Tensor]   # per-layer maps from the shared trunk


class Discriminator(nn.Module):
    """Style-encoder trunk plus one linear projection per training speaker."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_speakers = config.n_speakers
        self.trunk = _MelTrunk(config)
        self.heads = nn.Linear(self.trunk.out_dim, config.n_speakers)

    def forward(self, mel, speaker) -> DiscriminatorOutput:
        if isinstance(speaker, int):
            speaker = torch.full((mel.shape[0],), speaker, dtype=torch.long)
        if torch.any((speaker < 0) | (speaker >= self.n_speakers)):
            raise InvalidInputError("speaker index outside training set")
        pooled, feats = self.trunk(mel)
        logits = self.heads(pooled)
        return DiscriminatorOutput(
            logit=logits.gather(1, speaker.view(-1, 1)).squeeze(1),
            features=feats,
        )


class MelEncoder(nn.Module):
    """Mel -> [B, C, T] content embedding; instance-norm stem strips
    per-channel offsets (global gain invariance) before any mixing."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels
        self.stem_norm = InstanceNorm1d(config.n_mels, affine=False)
        self.stem_conv = nn.Conv1d(config.n_mels, c, 1)
        self.blocks = nn.ModuleList(
            ResBlock1d(c, c, config.kernel_size) for _ in range(config.encoder_blocks)
        )

    def forward(self, mel):
        x = self.stem_conv(self.stem_norm(mel))
        for blk in self.blocks:
            x = blk(x)
        return x


class PhonemeProjection(nn.Module):
    """Per-frame linear map from content channels to phoneme logits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.proj = nn.Conv1d(config.channels, config.vocab_size, 1)

    def forward(self, h):
        return self.proj(h)


class Decoder(nn.Module):
    """Content + style + prosody -> mel. The normalized pitch and energy
    curves are concatenated onto the input of every residual block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels
        self.in_proj = nn.Conv1d(c, c, 1)
        self.blocks = nn.ModuleList(
            AdainResBlock1d(c + 2, c, config.style_dim, config.kernel_size)
            for _ in range(config.decoder_blocks)
        )
        self.out_proj = nn.Conv1d(c, config.n_mels, 1)
        with torch.no_grad():
            self.out_proj.bias.fill_(config.mel_bias_init)

    def forward(self, h, s, pitch, energy):
        if h.shape[-1] != pitch.shape[-1] or h.shape[-1] != energy.shape[-1]:
            raise InvalidInputError("content and prosody curves disagree on frames")
        curves = torch.stack([pitch, energy], dim=1)
        x = self.in_proj(h)
        for blk in self.blocks:
            x = blk(torch.cat([x, curves], dim=1), s)
        return self.out_proj(x)


@dataclass
class ModelBundle:
    config: ModelConfig
    text_encoder: TextEncoder
    style_encoder: StyleEncoder
    decoder: Decoder
    mel_encoder: MelEncoder
    discriminator: Discriminator
    phoneme_projection: PhonemeProjection

    def named_components(self):
        return {
            "text_encoder": self.text_encoder,
            "style_encoder": self.style_encoder,
            "decoder": self.decoder,
            "mel_encoder": self.mel_encoder,
            "discriminator": self.discriminator,
            "phoneme_projection": self.phoneme_projection,
        }

    def eval(self):
        for m in self.named_components().values():
            m.eval()
        return self


def build_models(config: ModelConfig, seed: Optional[int] = None) -> ModelBundle:
    if seed is not None:
        torch.manual_seed(seed)
    return ModelBundle(
        config=config,
        text_encoder=TextEncoder(config),
        style_encoder=StyleEncoder(config),
        decoder=Decoder(config),
        mel_encoder=MelEncoder(config),
        discriminator=Discriminator(config),
        phoneme_projection=PhonemeProjection(config),
    )


RECURRENT_OR_ATTENTION = (
    nn.RNNBase, nn.RNNCellBase, nn.MultiheadAttention, nn.Transformer,
    nn.TransformerEncoder, nn.TransformerDecoder,
    nn.TransformerEncoderLayer, nn.TransformerDecoderLayer,
)

_REALTIME_ALLOWED = {"Conv1d", "InstanceNorm1d", "AdaIN1d", "LeakyReLU"}


def layer_kinds(module: nn.Module):
    """Class names of all leaf submodules, with their parent class names."""
    parents = {"": type(module).__name__}
    kinds = []
    for name, mod in module.named_modules():
        if name:
            parents[name] = type(mod).__name__
        if next(mod.children(), None) is None:
            parent = parents[name.rsplit(".", 1)[0]] if "." in name else parents[""]
            kinds.append((type(mod).__name__, parent))
    return kinds


def realtime_violations(module: nn.Module) -> List[str]:
    """Layer kinds that would break the frames-in/frames-out convolutional
    contract: recurrence, attention, or anything not conv/norm/pointwise.
    Linear layers are allowed only as AdaIN style projections."""
    bad = []
    for _, mod in module.named_modules():
        if isinstance(mod, RECURRENT_OR_ATTENTION):
            bad.append(type(mod).__name__)
    for kind, parent in layer_kinds(module):
        if kind in _REALTIME_ALLOWED:
            continue
        if kind == "Linear" and parent == "AdaIN1d":
            continue
        bad.append(f"{kind} (in {parent})")
    return bad
