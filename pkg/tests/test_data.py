import numpy as np
import pytest

from voiceshift.data import (Batch, BatchItem, CharacterG2P, build_manifest,
                             load_manifest, phonemize, sample_reference,
                             segment_batch, write_manifest)
from voiceshift.errors import InvalidInputError
from voiceshift.toy import ToyCorpusSpec, generate_toy_corpus


class TestPhonemize:
    def test_char_g2p_length_matches_text(self):
        g2p = CharacterG2P("abc")
        seq = phonemize("cabba", g2p)
        assert len(seq) == 5
        assert seq.vocabulary_size == 3
        assert list(seq.ids) == [2, 0, 1, 1, 0]  # sorted alphabet indices

    def test_empty_text_rejected(self):
        with pytest.raises(InvalidInputError):
            phonemize("", CharacterG2P("ab"))

    def test_cache_hit_returns_same_object(self):
        g2p = CharacterG2P("ab")
        cache = {}
        first = phonemize("abba", g2p, cache)
        second = phonemize("abba", g2p, cache)
        assert first is second

    def test_unknown_character_rejected(self):
        with pytest.raises(InvalidInputError):
            phonemize("xyz", CharacterG2P("ab"))


class TestBuildManifest:
    def test_toy_split_counts(self, toy_manifest):
        assert len(toy_manifest.split.train_speakers) == 2
        assert len(toy_manifest.split.test_speakers) == 1
        assert len(toy_manifest.records) == 30

    def test_same_seed_same_bytes(self, toy_corpus, tmp_path):
        a = build_manifest(toy_corpus, seed=99)
        b = build_manifest(toy_corpus, seed=99)
        pa, pb = tmp_path / "a.txt", tmp_path / "b.txt"
        write_manifest(a, pa)
        write_manifest(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_different_seed_changes_split(self, toy_corpus):
        splits = {tuple(build_manifest(toy_corpus, seed=s).split.train_speakers)
                  for s in range(8)}
        assert len(splits) > 1

    def test_ratio_preserved_for_four_speakers(self, tmp_path):
        root = tmp_path / "four"
        generate_toy_corpus(root, ToyCorpusSpec(n_speakers=4, utts_per_speaker=2,
                                                min_segments=3, max_segments=4,
                                                seed=5))
        m = build_manifest(root, seed=1)
        assert len(m.split.train_speakers) == 3
        assert len(m.split.test_speakers) == 1

    def test_published_split_at_109_speakers(self, tmp_path):
        # manifest building never reads audio bytes, so empty stand-ins do
        root = tmp_path / "vctk_like"
        for i in range(109):
            spk = root / f"p{i:03d}"
            spk.mkdir(parents=True)
            (spk / "utt0.wav").write_bytes(b"")
            (spk / "utt0.txt").write_text("ab")
        m = build_manifest(root, seed=3)
        assert len(m.split.train_speakers) == 89
        assert len(m.split.test_speakers) == 20

    def test_missing_transcript_skipped(self, tmp_path):
        root = tmp_path / "gappy"
        spk = root / "s0"
        spk.mkdir(parents=True)
        (spk / "a.wav").write_bytes(b"")
        (spk / "a.txt").write_text("ab")
        (spk / "b.wav").write_bytes(b"")  # no transcript
        m = build_manifest(root, seed=0)
        assert [r.utt_id for r in m.records] == ["s0/a"]

    def test_empty_corpus_fatal(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        with pytest.raises(InvalidInputError):
            build_manifest(root, seed=0)

    def test_val_partition_covers_train_utts_once(self, toy_manifest):
        train = toy_manifest.train_records()
        val = toy_manifest.val_records()
        train_ids = {r.utt_id for r in train}
        val_ids = {r.utt_id for r in val}
        assert not (train_ids & val_ids)
        per_train_speaker = [r for r in toy_manifest.records
                             if r.speaker_id in toy_manifest.split.train_speakers]
        assert len(train) + len(val) == len(per_train_speaker)

    def test_no_test_speaker_in_training_records(self, toy_manifest):
        train_speakers = {r.speaker_id for r in toy_manifest.train_records()}
        assert not (train_speakers & set(toy_manifest.split.test_speakers))

    def test_roundtrip_through_file(self, toy_manifest, tmp_path):
        path = tmp_path / "manifest.txt"
        write_manifest(toy_manifest, path)
        loaded = load_manifest(path, root=toy_manifest.root)
        assert loaded.vocab == toy_manifest.vocab
        assert loaded.split.train_speakers == toy_manifest.split.train_speakers
        assert loaded.split.val_utts == toy_manifest.split.val_utts
        assert [r.utt_id for r in loaded.records] == \
            [r.utt_id for r in toy_manifest.records]
        assert all(
            np.array_equal(a.phonemes.ids, b.phonemes.ids)
            for a, b in zip(loaded.records, toy_manifest.records)
        )


def indexed_item(n_frames, m=4, speaker=0, ref_frames=None):
    """Every per-frame channel encodes its own frame index, so cropping
    correspondence can be checked exactly."""
    idx = np.arange(n_frames, dtype=float)
    mel = np.tile(idx, (8, 1))
    alignment = np.tile(idx, (m, 1))
    ref = np.tile(np.arange(ref_frames or n_frames, dtype=float), (8, 1))
    return BatchItem(mel=mel, pitch=idx.copy(), energy=idx.copy(),
                     phonemes=np.arange(m), alignment=alignment,
                     speaker=speaker, reference_mel=ref,
                     frame_labels=idx.astype(np.int64))


class TestSegmentBatch:
    def test_crops_to_shortest(self):
        rng = np.random.default_rng(0)
        batch = segment_batch([indexed_item(10), indexed_item(7),
                               indexed_item(12)], rng, pad_id=99)
        assert batch.mels.shape[2] == 7
        assert batch.pitches.shape == (3, 7)

    def test_single_item_unchanged(self):
        rng = np.random.default_rng(1)
        batch = segment_batch([indexed_item(9)], rng, pad_id=99)
        assert batch.mels.shape[2] == 9
        assert np.array_equal(batch.mels[0, 0], np.arange(9, dtype=float))

    def test_cropping_preserves_frame_correspondence(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            batch = segment_batch([indexed_item(15), indexed_item(8)],
                                  rng, pad_id=99)
            for i in range(2):
                frames = batch.mels[i, 0]
                assert np.array_equal(batch.pitches[i], frames)
                assert np.array_equal(batch.energies[i], frames)
                assert np.array_equal(batch.frame_labels[i], frames.astype(int))
                assert np.array_equal(batch.alignments[i, 0], frames)
                # offsets are contiguous windows
                assert np.all(np.diff(frames) == 1)

    def test_phoneme_padding(self):
        rng = np.random.default_rng(3)
        items = [indexed_item(6, m=3), indexed_item(6, m=5)]
        batch = segment_batch(items, rng, pad_id=42)
        assert batch.phonemes.shape == (2, 5)
        assert np.all(batch.phonemes[0, 3:] == 42)
        assert np.all(batch.alignments[0, 3:] == 0)
        assert list(batch.phoneme_lengths) == [3, 5]

    def test_empty_batch_rejected(self):
        with pytest.raises(InvalidInputError):
            segment_batch([], np.random.default_rng(0), pad_id=0)

    def test_reference_bounds_batch_length(self):
        rng = np.random.default_rng(4)
        batch = segment_batch([indexed_item(10, ref_frames=4)], rng, pad_id=0)
        assert batch.mels.shape[2] == 4


class TestSampleReference:
    def test_single_utterance_speaker(self, toy_manifest):
        spk = toy_manifest.split.test_speakers[0]
        only = toy_manifest.by_speaker()[spk][0]
        rng = np.random.default_rng(0)
        got = sample_reference(spk, toy_manifest, rng, exclude_utt=None)
        assert got.speaker_id == spk
        assert got.utt_id in {r.utt_id for r in toy_manifest.by_speaker()[spk]}
        del only

    def test_uniform_over_utterances(self, toy_manifest):
        spk = toy_manifest.split.train_speakers[0]
        utts = [r.utt_id for r in toy_manifest.by_speaker()[spk]][:4]
        # restrict to a 4-utterance view for the frequency check
        view = type(toy_manifest)(
            root=toy_manifest.root, seed=0, vocab=toy_manifest.vocab,
            records=[r for r in toy_manifest.records if r.utt_id in utts],
            split=toy_manifest.split,
        )
        rng = np.random.default_rng(5)
        counts = {u: 0 for u in utts}
        n = 10000
        for _ in range(n):
            counts[sample_reference(spk, view, rng).utt_id] += 1
        for u in utts:
            assert abs(counts[u] / n - 0.25) <= 0.02

    def test_never_other_speaker(self, toy_manifest):
        rng = np.random.default_rng(6)
        spk = toy_manifest.split.train_speakers[1]
        for _ in range(200):
            assert sample_reference(spk, toy_manifest, rng).speaker_id == spk

    def test_excludes_source_when_possible(self, toy_manifest):
        rng = np.random.default_rng(7)
        spk = toy_manifest.split.train_speakers[0]
        source = toy_manifest.by_speaker()[spk][0].utt_id
        for _ in range(100):
            assert sample_reference(spk, toy_manifest, rng,
                                    exclude_utt=source).utt_id != source

    def test_unknown_speaker(self, toy_manifest):
        with pytest.raises(InvalidInputError):
            sample_reference("ghost", toy_manifest, np.random.default_rng(0))
