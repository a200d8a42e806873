"""Synthetic desk-scale corpus.

"Speakers" are distinct spectral envelopes and F0 registers; "phonemes" are
distinct formant templates, one character per segment. Every utterance ships
with ground-truth per-frame segment labels (written to ``alignments.tsv``)
so the aligner and the evaluation probes can be trained without real data.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .features import MelConfig, Waveform, save_waveform

ALIGNMENTS_FILE = "alignments.tsv"

TOY_ALPHABET = "abcdefgh"


@dataclass
class ToyCorpusSpec:
    n_speakers: int = 3
    utts_per_speaker: int = 10
    min_segments: int = 4
    max_segments: int = 7
    min_segment_sec: float = 0.08
    max_segment_sec: float = 0.16
    sample_rate: int = 24000
    noise_level: float = 0.003
    seed: int = 0


def _phoneme_formants(k: int) -> tuple:
    f1 = 300.0 + 80.0 * k
    f2 = 2400.0 - 180.0 * k
    return f1, f2


def _speaker_voice(s: int) -> dict:
    return {
        "f0": 110.0 * (1.35 ** (s % 5)) * (1.0 + 0.03 * (s // 5)),
        "tilt": -0.25 + 0.18 * (s % 4),
        "bump_hz": 3200.0 + 600.0 * (s % 4),
        "bump_gain": 0.3 + 0.1 * (s % 3),
    }


def _segment_amplitudes(harm_hz: np.ndarray, phoneme: int, voice: dict) -> np.ndarray:
    f1, f2 = _phoneme_formants(phoneme)
    # formant widths well below the inter-phoneme spacing keep templates apart
    amp = (np.exp(-((harm_hz - f1) / 60.0) ** 2)
           + 0.7 * np.exp(-((harm_hz - f2) / 90.0) ** 2)
           + 0.03)
    amp = amp * (np.maximum(harm_hz, 100.0) / 500.0) ** voice["tilt"]
    amp = amp * (1.0 + voice["bump_gain"]
                 * np.exp(-((harm_hz - voice["bump_hz"]) / 400.0) ** 2))
    return amp


def synthesize_utterance(transcript: str, speaker: int, rng: np.random.Generator,
                         spec: ToyCorpusSpec, segment_lengths: List[int]) -> np.ndarray:
    """Additive-harmonic rendering of one transcript; phase is continuous
    across segment boundaries."""
    sr = spec.sample_rate
    voice = _speaker_voice(speaker)
    total = sum(segment_lengths)
    t_axis = np.arange(total) / sr
    base = voice["f0"] * (1.0 + 0.08 * (rng.random() - 0.5))
    # gentle declination plus vibrato keeps F0 trackable but non-constant
    f0 = base * (1.04 - 0.08 * t_axis / t_axis[-1]) \
        * (1.0 + 0.01 * np.sin(2 * np.pi * 3.0 * t_axis))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros(total)
    n_harm = int(6000.0 // base)
    bounds = np.cumsum([0] + segment_lengths)
    for seg, ch in enumerate(transcript):
        lo, hi = bounds[seg], bounds[seg + 1]
        phoneme = TOY_ALPHABET.index(ch)
        harm_hz = np.arange(1, n_harm + 1) * base
        amps = _segment_amplitudes(harm_hz, phoneme, voice)
        keep = harm_hz < sr / 2 - 200
        ks = np.arange(1, n_harm + 1)[keep]
        piece = (amps[keep][:, None] * np.sin(ks[:, None] * phase[lo:hi])).sum(axis=0)
        out[lo:hi] = piece
    out += spec.noise_level * rng.standard_normal(total)
    peak = np.max(np.abs(out))
    return 0.6 * out / peak if peak > 0 else out


def frame_labels_for(segment_lengths: List[int], hop: int) -> np.ndarray:
    """Per-frame segment index under center padding: frame t covers the
    sample at t*hop."""
    total = sum(segment_lengths)
    n_frames = 1 + total // hop
    bounds = np.cumsum(segment_lengths)
    centers = np.arange(n_frames) * hop
    return np.minimum(np.searchsorted(bounds, centers, side="right"),
                      len(segment_lengths) - 1).astype(np.int64)


def generate_toy_corpus(root, spec: ToyCorpusSpec = ToyCorpusSpec(),
                        mel_config: MelConfig = MelConfig()) -> Dict[str, np.ndarray]:
    """Write wav/txt pairs plus the ground-truth frame-label sidecar.

    Returns the utt_id -> frame-label mapping that was written.
    """
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    labels: Dict[str, np.ndarray] = {}
    for s in range(spec.n_speakers):
        spk = f"spk{s:02d}"
        (root / spk).mkdir(parents=True, exist_ok=True)
        for u in range(spec.utts_per_speaker):
            n_seg = int(rng.integers(spec.min_segments, spec.max_segments + 1))
            chars = []
            for _ in range(n_seg):
                choices = [c for c in TOY_ALPHABET if not chars or c != chars[-1]]
                chars.append(choices[int(rng.integers(0, len(choices)))])
            transcript = "".join(chars)
            seg_lengths = [int(rng.uniform(spec.min_segment_sec, spec.max_segment_sec) * sr)
                           for _ in range(n_seg)]
            samples = synthesize_utterance(transcript, s, rng, spec, seg_lengths)
            name = f"utt{u:03d}"
            save_waveform(root / spk / f"{name}.wav", Waveform(samples, sr))
            (root / spk / f"{name}.txt").write_text(transcript + "\n")
            labels[f"{spk}/{name}"] = frame_labels_for(seg_lengths, mel_config.hop)
    with open(root / ALIGNMENTS_FILE, "w") as fh:
        for utt_id in sorted(labels):
            fh.write(utt_id + "\t" + " ".join(map(str, labels[utt_id])) + "\n")
    return labels


def load_frame_labels(corpus_root) -> Dict[str, np.ndarray]:
    """Read the ground-truth segment labels written by the generator."""
    path = Path(corpus_root) / ALIGNMENTS_FILE
    out: Dict[str, np.ndarray] = {}
    for line in path.read_text().splitlines():
        utt_id, _, rest = line.partition("\t")
        out[utt_id] = np.array([int(v) for v in rest.split()], dtype=np.int64)
    return out
