"""Training losses as pure functions of network outputs.

L1 terms reduce by mean over elements so the loss weights stay scale-free
across segment lengths. The generator's adversarial term uses the
non-saturating form.
"""

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn.functional as F

from .errors import InvalidInputError


@dataclass
class LossWeights:
    sty: float = 0.2
    cycle: float = 1.0
    adv: float = 1.0
    fm: float = 0.2
    mi: float = 1.0
    latent: float = 0.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise InvalidInputError(f"loss weight {name} must be >= 0")


def _mean_l1(a, b, what):
    a = torch.as_tensor(a, dtype=torch.get_default_dtype()) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.get_default_dtype()) if not torch.is_tensor(b) else b
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shapes {tuple(a.shape)} != {tuple(b.shape)}")
    return (a - b).abs().mean()


def mel_reconstruction_loss(x, x_hat):
    """Mean absolute difference between target and reconstructed mel."""
    return _mean_l1(x, x_hat, "mel reconstruction")


def style_reconstruction_loss(s_ref, s_conv):
    """Mean absolute difference between reference and re-extracted style codes."""
    return _mean_l1(s_ref, s_conv, "style reconstruction")


def encoder_loss(x_teacher, x_student):
    """Distillation L1; the teacher output is detached (constant target)."""
    if torch.is_tensor(x_teacher):
        x_teacher = x_teacher.detach()
    return _mean_l1(x_teacher, x_student, "encoder distillation")


def cycle_consistency_loss(x, x_cyc):
    """Mean absolute difference for the cycle reconstruction."""
    return _mean_l1(x, x_cyc, "cycle consistency")


def latent_loss(h_teacher, h_student):
    """Ablation-only L1 pulling the mel-encoder output onto the aligned text
    representation (turns the encoder into a frame classifier)."""
    if torch.is_tensor(h_teacher):
        h_teacher = h_teacher.detach()
    return _mean_l1(h_teacher, h_student, "latent")


def phoneme_mi_loss(logits, targets):
    """Frame-averaged cross entropy of per-frame phoneme logits.

    ``logits``: [vocab, T] or [B, vocab, T]; ``targets``: matching [T] or
    [B, T] hard labels taken from the monotonic alignment path.
    """
    if not torch.is_tensor(logits):
        logits = torch.as_tensor(logits, dtype=torch.get_default_dtype())
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    if logits.dim() != 3 or logits.shape[0] != targets.shape[0] \
            or logits.shape[2] != targets.shape[1]:
        raise InvalidInputError("logits and targets disagree on batch/frames")
    vocab = logits.shape[1]
    if torch.any((targets < 0) | (targets >= vocab)):
        raise InvalidInputError("phoneme target outside vocabulary")
    return F.cross_entropy(logits, targets)


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.get_default_dtype())


def adversarial_loss_d(real_logit, fake_logit):
    """Discriminator's negative cross-entropy objective (to minimize).

    Equals -E[log D(real)] - E[log(1 - D(fake))] with D = sigmoid(logit);
    a blind D at probability 0.5 on both sides scores 2*ln 2.
    """
    return (F.softplus(-_as_tensor(real_logit)).mean()
            + F.softplus(_as_tensor(fake_logit)).mean())


def adversarial_loss_g(fake_logit):
    """Generator's non-saturating objective: -E[log D(fake)]."""
    return F.softplus(-_as_tensor(fake_logit)).mean()


def feature_matching_loss(real_feats: List, fake_feats: List):
    """Sum over layers of the per-layer mean absolute feature difference."""
    if len(real_feats) != len(fake_feats):
        raise InvalidInputError("feature lists differ in layer count")
    total = None
    for r, f in zip(real_feats, fake_feats):
        term = _mean_l1(r.detach() if torch.is_tensor(r) else r, f, "feature matching")
        total = term if total is None else total + term
    if total is None:
        raise InvalidInputError("feature matching needs at least one layer")
    return total


@dataclass
class DecoderLossParts:
    rec: torch.Tensor
    sty: torch.Tensor
    cycle: torch.Tensor
    adv: torch.Tensor
    fm: torch.Tensor


@dataclass
class EncoderLossParts:
    en: torch.Tensor
    cycle: torch.Tensor
    mi: torch.Tensor
    adv: torch.Tensor
    fm: torch.Tensor
    latent: Optional[torch.Tensor] = None


def total_decoder_loss(parts: DecoderLossParts, w: LossWeights):
    return (parts.rec + w.sty * parts.sty + w.cycle * parts.cycle
            + w.adv * parts.adv + w.fm * parts.fm)


def total_encoder_loss(parts: EncoderLossParts, w: LossWeights):
    total = (parts.en + w.cycle * parts.cycle + w.mi * parts.mi
             + w.adv * parts.adv + w.fm * parts.fm)
    if parts.latent is not None:
        total = total + w.latent * parts.latent
    return total
