import numpy as np
import pytest
import torch

from voiceshift.alignment import train_toy_aligner
from voiceshift.data import build_manifest
from voiceshift.features import MelConfig, compute_mel, load_waveform
from voiceshift.toy import ToyCorpusSpec, generate_toy_corpus, load_frame_labels


@pytest.fixture(scope="session")
def mel_config():
    return MelConfig()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_corpus")
    generate_toy_corpus(root, ToyCorpusSpec(n_speakers=3, utts_per_speaker=10, seed=1))
    return root


@pytest.fixture(scope="session")
def toy_manifest(toy_corpus):
    return build_manifest(toy_corpus, seed=7)


@pytest.fixture(scope="session")
def toy_labels(toy_corpus):
    return load_frame_labels(toy_corpus)


@pytest.fixture(scope="session")
def toy_mels(toy_manifest, mel_config):
    """utt_id -> MelSpectrogram for the whole toy corpus."""
    out = {}
    for rec in toy_manifest.records:
        w = load_waveform(f"{toy_manifest.root}/{rec.audio_path}",
                          mel_config.sample_rate)
        out[rec.utt_id] = compute_mel(w, mel_config)
    return out


@pytest.fixture(scope="session")
def toy_aligner(toy_manifest, toy_mels, toy_labels):
    samples = [
        (toy_mels[rec.utt_id].values, rec.phonemes.ids, toy_labels[rec.utt_id])
        for rec in toy_manifest.train_records()
    ]
    return train_toy_aligner(samples, vocab_size=len(toy_manifest.vocab), seed=3)
