"""Phoneme-frame alignment: soft attention, monotonic hardening, content
construction, and the pseudoinverse inversion diagnostic."""

import warnings
from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn

from .errors import AlignmentError, InvalidInputError, NoFeasiblePathError
from .features import MelSpectrogram

PROB_FLOOR = 1e-9
RIDGE_DEFAULT = 1e-4


@dataclass
class PhonemeSequence:
    """Token-id sequence of length M under a fixed vocabulary."""

    ids: np.ndarray
    vocabulary_size: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or len(self.ids) < 1:
            raise InvalidInputError("phoneme sequence must be 1-D and non-empty")
        if np.any(self.ids < 0) or np.any(self.ids >= self.vocabulary_size):
            raise InvalidInputError("phoneme id outside vocabulary")

    def __len__(self):
        return len(self.ids)


@dataclass
class AlignmentMatrix:
    """[M x T] phoneme-to-frame weights; soft columns are stochastic, hard
    columns are one-hot along a monotonic path covering phoneme 0..M-1."""

    weights: np.ndarray
    kind: str  # "soft" | "hard"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise InvalidInputError("alignment must be a 2-D matrix")
        if self.kind not in ("soft", "hard"):
            raise InvalidInputError(f"unknown alignment kind {self.kind!r}")
        if self.kind == "soft":
            if np.any(self.weights < 0):
                raise InvalidInputError("soft alignment has negative entries")
            col = self.weights.sum(axis=0)
            if np.any(np.abs(col - 1.0) > 1e-5):
                raise InvalidInputError("soft alignment columns must sum to 1")
        else:
            if not np.all((self.weights == 0) | (self.weights == 1)):
                raise InvalidInputError("hard alignment entries must be 0/1")
            if np.any(self.weights.sum(axis=0) != 1):
                raise InvalidInputError("hard alignment needs exactly one 1 per column")
            path = self.weights.argmax(axis=0)
            if np.any(np.diff(path) < 0):
                raise InvalidInputError("hard alignment path must be non-decreasing")
            if path[0] != 0 or path[-1] != self.weights.shape[0] - 1:
                raise InvalidInputError("hard alignment must span phoneme 0..M-1")

    @property
    def shape(self):
        return self.weights.shape

    def path(self) -> np.ndarray:
        """Per-frame phoneme index (argmax for soft alignments)."""
        return self.weights.argmax(axis=0)


@dataclass
class ContentEmbedding:
    """Per-frame linguistic representation, shape [C x T]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError("content embedding must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("content embedding has non-finite entries")

    @property
    def n_frames(self):
        return self.values.shape[1]


@runtime_checkable
class TextAligner(Protocol):
    """Pluggable soft aligner; a pretrained attention ASR model fits here."""

    def align(self, x: MelSpectrogram, t: PhonemeSequence) -> AlignmentMatrix: ...


class UniformAligner:
    """Zero-training fallback: splits frames evenly across phonemes."""

    def align(self, x: MelSpectrogram, t: PhonemeSequence) -> AlignmentMatrix:
        m, n = len(t), x.n_frames
        weights = np.zeros((m, n))
        bounds = (np.arange(m + 1) * n) // m
        for i in range(m):
            lo, hi = bounds[i], max(bounds[i + 1], bounds[i] + 1)
            weights[i, lo:hi] = 1.0
        weights /= weights.sum(axis=0, keepdims=True)
        return AlignmentMatrix(weights=weights, kind="soft")


class NeuralAligner(nn.Module):
    """Small attention aligner: learned phoneme keys against conv frame
    queries, with a fixed diagonal bias that breaks ties between repeated
    tokens. Intended to be trained once on a labelled corpus, then frozen."""

    def __init__(self, vocab_size, n_mels=80, dim=48, diagonal_weight=4.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.diagonal_weight = diagonal_weight
        self.embedding = nn.Embedding(vocab_size, dim)
        self.frame_net = nn.Sequential(
            nn.Conv1d(n_mels, dim, kernel_size=5, padding=2),
            nn.LeakyReLU(0.2),
            nn.Conv1d(dim, dim, kernel_size=5, padding=2),
        )
        self.scale = dim ** 0.5

    def forward(self, mel, ids):
        # mel: [n_mels, T] tensor, ids: [M] tensor -> scores [M, T]
        queries = self.frame_net(mel.unsqueeze(0)).squeeze(0)  # [dim, T]
        keys = self.embedding(ids)  # [M, dim]
        scores = keys @ queries / self.scale
        m, n = scores.shape
        pos_m = torch.linspace(0, 1, m) if m > 1 else torch.zeros(1)
        pos_t = torch.linspace(0, 1, n) if n > 1 else torch.zeros(1)
        bias = -self.diagonal_weight * (pos_m[:, None] - pos_t[None, :]) ** 2
        return scores + bias

    @torch.no_grad()
    def align(self, x: MelSpectrogram, t: PhonemeSequence) -> AlignmentMatrix:
        self.eval()
        mel = torch.as_tensor(x.values, dtype=torch.float32)
        ids = torch.as_tensor(t.ids)
        probs = torch.softmax(self.forward(mel, ids), dim=0).double().numpy()
        probs = probs / probs.sum(axis=0, keepdims=True)
        return AlignmentMatrix(weights=probs, kind="soft")


def train_toy_aligner(samples, vocab_size, n_mels=80, dim=48, epochs=40,
                      lr=5e-3, seed=0) -> NeuralAligner:
    """Supervised pretraining on (mel values, phoneme ids, per-frame position
    labels) triples, e.g. the synthetic corpus sidecar. Returns a frozen
    aligner in eval mode."""
    torch.manual_seed(seed)
    aligner = NeuralAligner(vocab_size=vocab_size, n_mels=n_mels, dim=dim)
    opt = torch.optim.Adam(aligner.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    aligner.train()
    for _ in range(epochs):
        for mel_values, ids, labels in samples:
            mel = torch.as_tensor(np.asarray(mel_values), dtype=torch.float32)
            ids_t = torch.as_tensor(np.asarray(ids, dtype=np.int64))
            labels_t = torch.as_tensor(np.asarray(labels, dtype=np.int64))
            scores = aligner(mel, ids_t)  # [M, T]
            loss = loss_fn(scores.T, labels_t)
            opt.zero_grad()
            loss.backward()
            opt.step()
    aligner.eval()
    for p in aligner.parameters():
        p.requires_grad_(False)
    return aligner


def soft_align(x: MelSpectrogram, t: PhonemeSequence,
               aligner: TextAligner) -> AlignmentMatrix:
    """Column-stochastic soft alignment from the pluggable aligner."""
    if len(t) > x.n_frames:
        warnings.warn(
            f"more phonemes ({len(t)}) than frames ({x.n_frames}); "
            "monotonic hardening will fail",
            RuntimeWarning,
        )
    try:
        out = aligner.align(x, t)
    except (InvalidInputError, AlignmentError):
        raise
    except Exception as exc:
        raise AlignmentError(f"aligner failed: {exc}") from exc
    if out.kind != "soft" or out.shape != (len(t), x.n_frames):
        raise AlignmentError(
            f"aligner returned {out.kind} alignment of shape {out.shape}, "
            f"expected soft ({len(t)}, {x.n_frames})"
        )
    return out


def monotonic_path(a: AlignmentMatrix) -> AlignmentMatrix:
    """Best monotonic hard alignment under sum of log probabilities.

    Transitions are stay/advance-by-one; the path starts at phoneme 0 and
    ends at phoneme M-1. Probabilities are floored at 1e-9 before the log.
    """
    if a.kind != "soft":
        raise InvalidInputError("monotonic_path expects a soft alignment")
    m, n = a.shape
    if m > n:
        raise NoFeasiblePathError(f"cannot align {m} phonemes to {n} frames")
    logw = np.log(np.maximum(a.weights, PROB_FLOOR))
    q = np.full((m, n), -np.inf)
    q[0, 0] = logw[0, 0]
    for t in range(1, n):
        stay = q[:, t - 1]
        advance = np.concatenate(([-np.inf], q[:-1, t - 1]))
        q[:, t] = logw[:, t] + np.maximum(stay, advance)
    path = np.empty(n, dtype=np.int64)
    path[-1] = m - 1
    for t in range(n - 1, 0, -1):
        i = path[t]
        if i > 0 and q[i - 1, t - 1] > q[i, t - 1]:
            path[t - 1] = i - 1
        else:
            path[t - 1] = i
    hard = np.zeros((m, n))
    hard[path, np.arange(n)] = 1.0
    return AlignmentMatrix(weights=hard, kind="hard")


def mix_alignment(soft: AlignmentMatrix, hard: AlignmentMatrix,
                  p_mono: float, rng: np.random.Generator) -> AlignmentMatrix:
    """Return ``hard`` with probability ``p_mono``, else ``soft``.

    Always consumes exactly one draw from ``rng``.
    """
    if soft.shape != hard.shape:
        raise InvalidInputError("soft and hard alignments differ in shape")
    if not (0.0 <= p_mono <= 1.0):
        raise InvalidInputError("p_mono must be a probability")
    return hard if rng.random() < p_mono else soft


def align_content(h_text, d: AlignmentMatrix) -> ContentEmbedding:
    """Aligned latent content: the [C x M] text embedding times the
    [M x T] alignment."""
    ht = np.asarray(getattr(h_text, "values", h_text), dtype=np.float64)
    if ht.ndim != 2 or ht.shape[1] != d.shape[0]:
        raise InvalidInputError(
            f"text embedding {ht.shape} incompatible with alignment {d.shape}"
        )
    return ContentEmbedding(values=ht @ d.weights)


def invert_alignment(h, h_text, ridge: float = RIDGE_DEFAULT,
                     heatmap_path=None, matrix_path=None) -> np.ndarray:
    """Recover an [M x T] alignment estimate via the ridge pseudoinverse of
    the text embedding; optionally render a heatmap and dump the matrix.

    Diagnostic only: when the text embedding is rank-deficient a warning is
    emitted and the regularized solution is returned regardless.
    """
    hv = np.asarray(getattr(h, "values", h), dtype=np.float64)
    ht = np.asarray(getattr(h_text, "values", h_text), dtype=np.float64)
    if hv.ndim != 2 or ht.ndim != 2 or hv.shape[0] != ht.shape[0]:
        raise InvalidInputError("content and text embedding channel counts differ")
    m = ht.shape[1]
    if np.linalg.matrix_rank(ht) < m:
        warnings.warn(
            "text embedding is column-rank-deficient; inversion is only "
            "ridge-regularized",
            RuntimeWarning,
        )
    gram = ht.T @ ht + ridge * np.eye(m)
    recovered = np.linalg.solve(gram, ht.T @ hv)
    if matrix_path is not None:
        np.savetxt(matrix_path, recovered, fmt="%.6e", delimiter=" ")
    if heatmap_path is not None:
        save_alignment_heatmap(recovered, heatmap_path)
    return recovered


def save_alignment_heatmap(matrix, path, label="alignment weight") -> None:
    """Render an [M x T] matrix as an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(np.asarray(matrix), aspect="auto", origin="lower",
                   interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("phoneme position")
    fig.colorbar(im, ax=ax, label=label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
