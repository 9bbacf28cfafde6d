from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdistill.ctc import collapse
from crossdistill.data import (
    GenConfig,
    PhonemeVocab,
    Prototypes,
    check_sample,
    generate_dataset,
    generate_splits,
    load_dataset,
    nearest_prototype_accuracy,
    save_dataset,
    split_corpus,
)
from crossdistill.exceptions import ConfigError, DatasetParseError, IncompatibleVocabError

FIXTURE = Path(__file__).parent / "fixtures" / "golden.jsonl"
GOLDEN_CFG = GenConfig(vocab_size=4, sentence_len=(2, 3), frames_per_phoneme=(1, 2),
                       gap_frames=(0, 1), teacher_dim=3, student_dims=(2, 2, 1))


class TestVocab:
    def test_blank_is_zero(self):
        v = PhonemeVocab(["a", "b", "c"])
        assert v.n_classes == 4
        assert v.symbol(0) == "<blank>"
        assert v.id("a") == 1 and v.symbol(3) == "c"

    def test_unique_symbols(self):
        with pytest.raises(ConfigError):
            PhonemeVocab(["a", "a"])

    def test_needs_two(self):
        with pytest.raises(ConfigError):
            PhonemeVocab(["a"])

    def test_hash_depends_on_order(self):
        assert PhonemeVocab(["a", "b"]).hash() != PhonemeVocab(["b", "a"]).hash()


class TestGenConfig:
    def test_frame_bounds(self):
        assert GenConfig().frame_bounds() == (6, 54)

    @pytest.mark.parametrize("kw", [
        {"sentence_len": (5, 3)}, {"gap_frames": (-1, 2)}, {"teacher_noise": -0.1},
        {"vocab_size": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            GenConfig(**kw)

    def test_vocab_too_large(self):
        with pytest.raises(ConfigError):
            generate_dataset(GenConfig(vocab_size=25), 0, n=1)

    def test_unknown_split(self):
        with pytest.raises(ConfigError):
            generate_dataset(GenConfig(), 0, split="dev", n=1)


class TestGenerate:
    def test_invariants(self):
        cfg = GenConfig()
        lo, hi = cfg.frame_bounds()
        for s in generate_dataset(cfg, 0, n=300):
            check_sample(s, cfg.vocab().n_classes)
            assert lo <= s.n_frames <= hi
            assert 3 <= len(s.y) <= 8
            assert [x.shape[1] for x in s.x_s] == [8, 8, 4] and s.x_t.shape[1] == 16

    def test_no_consecutive_repeats(self):
        for s in generate_dataset(GenConfig(vocab_size=2), 0, n=50):
            assert all(a != b for a, b in zip(s.y, s.y[1:]))

    def test_noiseless_views_are_prototypes(self):
        cfg = GenConfig(teacher_noise=0.0, student_noise=0.0)
        samples = generate_dataset(cfg, 1, n=20)
        protos = Prototypes(cfg)
        assert nearest_prototype_accuracy(samples, protos, "teacher") == 1.0
        assert nearest_prototype_accuracy(samples, protos, "student") == 1.0

    def test_teacher_view_is_easier(self):
        cfg = GenConfig()
        samples = generate_dataset(cfg, 0, n=60)
        assert sum(s.n_frames for s in samples) >= 1000
        protos = Prototypes(cfg)
        assert nearest_prototype_accuracy(samples, protos, "teacher") > \
            nearest_prototype_accuracy(samples, protos, "student")

    def test_deterministic(self):
        a = generate_dataset(GenConfig(), 5, n=10)
        b = generate_dataset(GenConfig(), 5, n=10)
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_seed_matters(self):
        a = generate_dataset(GenConfig(), 5, n=3)
        b = generate_dataset(GenConfig(), 6, n=3)
        assert not any(x.equals(y) for x, y in zip(a, b))

    def test_splits_are_disjoint(self):
        cfg = GenConfig(n_teacher=5, n_train=5, n_val=5, n_test=5)
        splits = generate_splits(cfg, 0)
        seen = [s.x_t.tobytes() for part in splits.values() for s in part]
        assert len(set(seen)) == len(seen) == 20

    def test_prefix_stable(self):
        short = generate_dataset(GenConfig(), 3, n=4)
        long = generate_dataset(GenConfig(), 3, n=9)
        assert all(x.equals(y) for x, y in zip(short, long))

    def test_split_corpus(self):
        tr, va, te = split_corpus(list(range(100)))
        assert (len(tr), len(va), len(te)) == (80, 10, 10)
        assert tr + va + te == list(range(100))


class TestSerialisation:
    def test_round_trip(self, tmp_path):
        cfg = GenConfig()
        samples = generate_dataset(cfg, 11, n=100)
        path = tmp_path / "d.jsonl"
        save_dataset(samples, path, cfg.vocab())
        back = load_dataset(path, cfg.vocab())
        assert len(back) == 100
        assert all(a.equals(b) for a, b in zip(samples, back))

    def test_truncated_line_cites_line_number(self, tmp_path):
        cfg = GenConfig()
        path = tmp_path / "d.jsonl"
        save_dataset(generate_dataset(cfg, 0, n=4), path, cfg.vocab())
        lines = path.read_text().splitlines(keepends=True)
        lines[2] = lines[2][: len(lines[2]) // 2] + "\n"
        path.write_text("".join(lines))
        with pytest.raises(DatasetParseError, match="line 3") as info:
            load_dataset(path)
        assert info.value.lineno == 3

    def test_missing_field(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(DatasetParseError, match="line 1"):
            load_dataset(path)

    def test_frame_count_mismatch(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"id":"x","vocab":"v","frames":2,"x_t":[[0.0]],'
                        '"x_s":[[[0.0]],[[0.0]],[[0.0]]],"frame_labels":[1],"y":[1]}\n')
        with pytest.raises(DatasetParseError, match="frame count"):
            load_dataset(path)

    def test_vocab_mismatch(self, tmp_path):
        cfg = GenConfig()
        path = tmp_path / "d.jsonl"
        save_dataset(generate_dataset(cfg, 0, n=2), path, cfg.vocab())
        with pytest.raises(IncompatibleVocabError):
            load_dataset(path, PhonemeVocab.default(11))

    def test_golden_fixture_loads(self):
        samples = load_dataset(FIXTURE, GOLDEN_CFG.vocab())
        assert [s.id for s in samples] == ["test-00000", "test-00001", "test-00002"]
        for s in samples:
            check_sample(s, GOLDEN_CFG.vocab().n_classes)

    def test_golden_fixture_bytes(self, tmp_path):
        path = tmp_path / "g.jsonl"
        save_dataset(generate_dataset(GOLDEN_CFG, 2024, split="test", n=3), path,
                     GOLDEN_CFG.vocab())
        assert path.read_bytes() == FIXTURE.read_bytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), vocab=st.integers(2, 20),
       lo=st.integers(1, 4), span=st.integers(0, 4))
def test_collapse_invariant_holds_for_any_config(seed, vocab, lo, span):
    cfg = GenConfig(vocab_size=vocab, sentence_len=(lo, lo + span), gap_frames=(0, span))
    for s in generate_dataset(cfg, seed, n=5):
        assert collapse(s.frame_labels) == s.y
        assert s.frame_labels.max() <= vocab
