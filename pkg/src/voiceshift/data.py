"""Corpus ingestion, speaker splits, phonemization, reference sampling, and
batch segmentation.

Corpus layout: ``<root>/<speaker>/<utterance>.wav`` with a sibling ``.txt``
transcript. Manifests are line-oriented text files and are byte-identical
for identical (corpus, seed) pairs.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .alignment import PhonemeSequence
from .errors import InvalidInputError

log = logging.getLogger(__name__)

MANIFEST_HEADER = "#voiceshift-manifest v1"

# Published VCTK-style split: 89 of 109 speakers train, the rest are held
# out as unseen test speakers. Other corpus sizes keep the same ratio.
TRAIN_SPEAKER_RATIO = 89 / 109


@runtime_checkable
class GraphemeToPhoneme(Protocol):
    """Pluggable text-to-phoneme front end."""

    @property
    def vocabulary(self) -> List[str]: ...

    def tokens(self, text: str) -> List[str]: ...


class CharacterG2P:
    """Trivial front end mapping each character to one token. Used by the
    synthetic corpus, where transcripts are strings over a small alphabet."""

    def __init__(self, alphabet: Sequence[str]):
        self._vocab = sorted(dict.fromkeys(alphabet))
        if any((len(tok) != 1 or tok.isspace() or tok == "|") for tok in self._vocab):
            raise InvalidInputError("character tokens must be single printable chars")
        self._index = {tok: i for i, tok in enumerate(self._vocab)}

    @property
    def vocabulary(self) -> List[str]:
        return list(self._vocab)

    def tokens(self, text: str) -> List[str]:
        unknown = set(text) - set(self._index)
        if unknown:
            raise InvalidInputError(f"characters outside alphabet: {sorted(unknown)}")
        return list(text)


def phonemize(text: str, g2p: GraphemeToPhoneme,
              cache: Optional[dict] = None) -> PhonemeSequence:
    """Convert text to a PhonemeSequence; results are cached by text."""
    if not text:
        raise InvalidInputError("cannot phonemize empty text")
    if cache is not None and text in cache:
        return cache[text]
    index = {tok: i for i, tok in enumerate(g2p.vocabulary)}
    ids = np.array([index[tok] for tok in g2p.tokens(text)], dtype=np.int64)
    seq = PhonemeSequence(ids=ids, vocabulary_size=len(index))
    if cache is not None:
        cache[text] = seq
    return seq


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    audio_path: str  # relative to the corpus root
    raw_text: str
    phonemes: PhonemeSequence


@dataclass
class SpeakerSplit:
    train_speakers: List[str]
    test_speakers: List[str]
    val_utts: List[str]

    def __post_init__(self):
        if set(self.train_speakers) & set(self.test_speakers):
            raise InvalidInputError("train and test speaker sets overlap")


@dataclass
class Manifest:
    root: str
    seed: int
    vocab: List[str]
    records: List[UtteranceRecord]
    split: SpeakerSplit

    def by_speaker(self) -> Dict[str, List[UtteranceRecord]]:
        out: Dict[str, List[UtteranceRecord]] = {}
        for rec in self.records:
            out.setdefault(rec.speaker_id, []).append(rec)
        return out

    def train_records(self) -> List[UtteranceRecord]:
        val = set(self.split.val_utts)
        train = set(self.split.train_speakers)
        return [r for r in self.records
                if r.speaker_id in train and r.utt_id not in val]

    def val_records(self) -> List[UtteranceRecord]:
        val = set(self.split.val_utts)
        return [r for r in self.records if r.utt_id in val]

    def test_records(self) -> List[UtteranceRecord]:
        test = set(self.split.test_speakers)
        return [r for r in self.records if r.speaker_id in test]


def build_manifest(corpus_root, seed: int,
                   g2p: Optional[GraphemeToPhoneme] = None,
                   train_ratio: float = TRAIN_SPEAKER_RATIO,
                   val_fraction: float = 0.1) -> Manifest:
    """Scan a corpus, phonemize transcripts, and draw the speaker split.

    Records missing audio or text are skipped with a warning; an empty
    corpus is fatal. The split is deterministic in (corpus, seed).
    """
    root = Path(corpus_root)
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    texts: Dict[str, str] = {}
    pending = []  # (utt_id, speaker, relpath, text)
    for spk in speakers:
        for wav in sorted((root / spk).glob("*.wav")):
            txt = wav.with_suffix(".txt")
            if not txt.exists():
                log.warning("skipping %s: no transcript", wav)
                continue
            text = txt.read_text().strip()
            if not text:
                log.warning("skipping %s: empty transcript", wav)
                continue
            utt_id = f"{spk}/{wav.stem}"
            pending.append((utt_id, spk, f"{spk}/{wav.name}", text))
            texts[utt_id] = text
    if not pending:
        raise InvalidInputError(f"no usable utterances under {root}")
    if g2p is None:
        g2p = CharacterG2P(sorted({ch for t in texts.values() for ch in t}))

    cache: dict = {}
    records = []
    for utt_id, spk, rel, text in pending:
        try:
            seq = phonemize(text, g2p, cache)
        except InvalidInputError as exc:
            log.warning("skipping %s: %s", utt_id, exc)
            continue
        records.append(UtteranceRecord(utt_id, spk, rel, text, seq))
    if not records:
        raise InvalidInputError("phonemization left no usable utterances")

    present = sorted({r.speaker_id for r in records})
    rng = np.random.default_rng(seed)
    order = [present[i] for i in rng.permutation(len(present))]
    n_train = int(round(len(present) * train_ratio))
    if len(present) > 1:
        n_train = min(max(n_train, 1), len(present) - 1)
    train_speakers = sorted(order[:n_train])
    test_speakers = sorted(order[n_train:])

    val_utts = []
    by_spk: Dict[str, List[str]] = {}
    for r in records:
        by_spk.setdefault(r.speaker_id, []).append(r.utt_id)
    for spk in train_speakers:
        utts = sorted(by_spk[spk])
        k = int(round(val_fraction * len(utts)))
        picked = rng.permutation(len(utts))[:k]
        val_utts.extend(utts[i] for i in sorted(picked))

    split = SpeakerSplit(train_speakers, test_speakers, sorted(val_utts))
    log.info("manifest: %d records, %d train / %d test speakers, %d val utts",
             len(records), len(train_speakers), len(test_speakers), len(val_utts))
    return Manifest(root=str(root), seed=seed, vocab=g2p.vocabulary,
                    records=records, split=split)


def write_manifest(manifest: Manifest, path) -> None:
    lines = [MANIFEST_HEADER,
             f"#seed {manifest.seed}",
             "#vocab " + " ".join(manifest.vocab),
             "#train_speakers " + " ".join(manifest.split.train_speakers),
             "#test_speakers " + " ".join(manifest.split.test_speakers),
             "#val_utts " + " ".join(manifest.split.val_utts)]
    for r in manifest.records:
        ids = " ".join(str(i) for i in r.phonemes.ids)
        lines.append(f"{r.utt_id}|{r.speaker_id}|{r.audio_path}|{ids}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, root: Optional[str] = None) -> Manifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise InvalidInputError(f"{path} is not a manifest file")
    header: Dict[str, str] = {}
    records = []
    vocab: List[str] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            header[key] = value
            continue
        parts = line.split("|")
        if len(parts) != 4:
            raise InvalidInputError(f"malformed manifest line: {line!r}")
        vocab = header["vocab"].split(" ") if header.get("vocab") else []
        utt_id, spk, rel, ids = parts
        seq = PhonemeSequence(
            ids=np.array([int(i) for i in ids.split()], dtype=np.int64),
            vocabulary_size=len(vocab),
        )
        records.append(UtteranceRecord(utt_id, spk, rel, "", seq))
    split = SpeakerSplit(
        train_speakers=header.get("train_speakers", "").split() or [],
        test_speakers=header.get("test_speakers", "").split() or [],
        val_utts=header.get("val_utts", "").split() or [],
    )
    vocab = header["vocab"].split(" ") if header.get("vocab") else []
    if root is None:
        root = str(path.parent)
    return Manifest(root=root, seed=int(header.get("seed", "0")), vocab=vocab,
                    records=records, split=split)


@dataclass
class BatchItem:
    """One utterance's cropped view plus its sampled reference."""

    mel: np.ndarray              # [n_mels, T]
    pitch: np.ndarray            # [T] normalized
    energy: np.ndarray           # [T] normalized
    phonemes: np.ndarray         # [M]
    alignment: np.ndarray        # [M, T]
    speaker: int
    reference_mel: np.ndarray    # [n_mels, T_ref]
    reference_speaker: int = -1
    frame_labels: Optional[np.ndarray] = None  # [T] aligned phoneme ids


@dataclass
class Batch:
    mels: np.ndarray             # [B, n_mels, L]
    pitches: np.ndarray          # [B, L]
    energies: np.ndarray         # [B, L]
    phonemes: np.ndarray         # [B, M_max], padded with pad_id
    phoneme_lengths: np.ndarray  # [B]
    alignments: np.ndarray       # [B, M_max, L], zero rows beyond length
    speakers: np.ndarray         # [B]
    reference_mels: np.ndarray   # [B, n_mels, L]
    reference_speakers: np.ndarray  # [B]
    frame_labels: Optional[np.ndarray]  # [B, L]
    pad_id: int


def segment_batch(items: List[BatchItem], rng: np.random.Generator,
                  pad_id: int) -> Batch:
    """Crop every item to the shortest frame count in the batch.

    The crop offset is drawn uniformly per item; pitch, energy, alignment
    columns, and frame labels are cropped with their mel so per-frame
    correspondence is preserved. References are cropped independently.
    """
    if not items:
        raise InvalidInputError("cannot batch zero items")
    n_frames = [it.mel.shape[1] for it in items]
    n_ref = [it.reference_mel.shape[1] for it in items]
    if min(min(n_frames), min(n_ref)) < 1:
        raise InvalidInputError("every item needs at least one frame")
    length = min(min(n_frames), min(n_ref))
    m_max = max(len(it.phonemes) for it in items)
    b = len(items)
    n_mels = items[0].mel.shape[0]

    mels = np.zeros((b, n_mels, length))
    pitches = np.zeros((b, length))
    energies = np.zeros((b, length))
    phonemes = np.full((b, m_max), pad_id, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    aligns = np.zeros((b, m_max, length))
    speakers = np.zeros(b, dtype=np.int64)
    ref_speakers = np.zeros(b, dtype=np.int64)
    refs = np.zeros((b, n_mels, length))
    has_labels = all(it.frame_labels is not None for it in items)
    labels = np.zeros((b, length), dtype=np.int64) if has_labels else None

    for i, it in enumerate(items):
        off = int(rng.integers(0, it.mel.shape[1] - length + 1))
        sl = slice(off, off + length)
        mels[i] = it.mel[:, sl]
        pitches[i] = it.pitch[sl]
        energies[i] = it.energy[sl]
        m = len(it.phonemes)
        phonemes[i, :m] = it.phonemes
        lengths[i] = m
        aligns[i, :m] = it.alignment[:, sl]
        speakers[i] = it.speaker
        ref_speakers[i] = it.reference_speaker
        if has_labels:
            labels[i] = it.frame_labels[sl]
        roff = int(rng.integers(0, it.reference_mel.shape[1] - length + 1))
        refs[i] = it.reference_mel[:, roff : roff + length]

    return Batch(mels=mels, pitches=pitches, energies=energies,
                 phonemes=phonemes, phoneme_lengths=lengths,
                 alignments=aligns, speakers=speakers, reference_mels=refs,
                 reference_speakers=ref_speakers, frame_labels=labels,
                 pad_id=pad_id)


def sample_reference(speaker: str, manifest: Manifest,
                     rng: np.random.Generator,
                     exclude_utt: Optional[str] = None) -> UtteranceRecord:
    """Uniformly sample one of the speaker's utterances, avoiding the source
    utterance when the speaker has more than one."""
    utts = manifest.by_speaker().get(speaker)
    if not utts:
        raise InvalidInputError(f"unknown speaker {speaker!r}")
    pool = [r for r in utts if r.utt_id != exclude_utt] or utts
    return pool[int(rng.integers(0, len(pool)))]
