import json

import pytest

from camgen.data import (CLS, RESERVED, GenerationExample, MalformedRecordError,
                         Vocabulary, ingest, read_corpus, source_tokens,
                         target_tokens, tokenize, write_corpus)
from camgen.synthetic import (SyntheticSpec, TRANSITIONS, TRANSITION_TOKENS,
                              CUE_LEXICONS, generate_synthetic, reorder_perturb)


class TestVocabulary:
    def test_reserved_ids_lowest_and_distinct(self):
        vocab = Vocabulary(["alpha", "beta"])
        ids = [vocab.pad_id, vocab.unk_id, vocab.bos_id, vocab.eos_id,
               vocab.cls_id, vocab.sep_id]
        assert ids == sorted(set(ids))
        assert max(ids) == len(RESERVED) - 1

    def test_bijection(self):
        vocab = Vocabulary(["alpha", "beta", "alpha"])
        tokens = ["alpha", "beta"]
        assert vocab.decode(vocab.encode(tokens)) == tokens
        assert len(set(vocab.stoi.values())) == len(vocab.itos)

    def test_unknown_fallback(self):
        vocab = Vocabulary(["alpha"])
        assert vocab.encode(["missing"]) == [vocab.unk_id]

    def test_round_trip_identity_on_known_text(self):
        spec = SyntheticSpec(num_examples=20, num_test_examples=5, seed=1)
        train, _ = generate_synthetic(spec)
        vocab = Vocabulary.build(train)
        for ex in train[:5]:
            assert vocab.decode(vocab.encode(ex.target)) == ex.target

    def test_save_load(self, tmp_path):
        vocab = Vocabulary(["alpha", "beta"])
        vocab.save(tmp_path / "v.json")
        loaded = Vocabulary.load(tmp_path / "v.json")
        assert loaded.itos == vocab.itos


class TestIngest:
    def _record(self, n_refs=5, words=200):
        text = " ".join(f"tok{i}" for i in range(words))
        return {"refs": [text] * n_refs,
                "related_work": "First sentence here. Second sentence follows. "
                                "Third one ends."}

    def test_budget_five_refs(self):
        ex = ingest(self._record(5))
        assert all(len(r) == 88 for r in ex.references)

    def test_budget_three_refs(self):
        ex = ingest(self._record(3))
        assert all(len(r) == 146 for r in ex.references)

    def test_short_reference_kept_whole(self):
        rec = self._record(5)
        rec["refs"][0] = "just four tokens here"
        ex = ingest(rec)
        assert ex.references[0] == ["just", "four", "tokens", "here"]

    def test_sentence_markers_inserted(self):
        ex = ingest(self._record(2))
        assert ex.target.count(CLS) == 3
        assert ex.target[0] == CLS

    def test_sentence_cap(self):
        rec = self._record(2)
        rec["related_work"] = ". ".join(f"sentence {i}" for i in range(10)) + "."
        ex = ingest(rec, max_sentences=6)
        assert ex.target.count(CLS) == 6

    def test_empty_target_rejected(self):
        rec = self._record(2)
        rec["related_work"] = "   "
        with pytest.raises(MalformedRecordError):
            ingest(rec)

    def test_no_refs_rejected(self):
        with pytest.raises(MalformedRecordError):
            ingest({"refs": [], "related_work": "text."})

    def test_source_length_bound(self):
        for n in (1, 2, 5):
            ex = ingest(self._record(n))
            budget = 440 // n
            bound = n * budget + (n - 1) + 2
            assert len(source_tokens(ex)) <= bound


class TestCorpusIO:
    def test_round_trip(self, tmp_path):
        spec = SyntheticSpec(num_examples=12, num_test_examples=3, seed=2)
        train, _ = generate_synthetic(spec)
        path = tmp_path / "c.jsonl"
        write_corpus(train, path)
        back = read_corpus(path)
        assert len(back) == len(train)
        for a, b in zip(train, back):
            assert a.references == b.references
            assert a.target == b.target
            assert a.metadata == b.metadata

    def test_header_line_versioned(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_corpus([], path)
        header = json.loads(path.read_text().splitlines()[0])
        assert header["format"] == "camgen-corpus" and header["version"] == 1

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"format": "other"}\n')
        with pytest.raises(MalformedRecordError):
            read_corpus(path)


class TestSynthetic:
    def test_deterministic_given_seed(self):
        spec = SyntheticSpec(num_examples=30, num_test_examples=10, seed=7)
        a_train, a_test = generate_synthetic(spec)
        b_train, b_test = generate_synthetic(spec)
        for a, b in zip(a_train + a_test, b_train + b_test):
            assert a.references == b.references and a.target == b.target

    def test_full_confound_is_position_determined(self):
        spec = SyntheticSpec(num_examples=50, num_test_examples=5,
                             confound_strength=1.0, seed=3)
        train, _ = generate_synthetic(spec)
        for ex in train:
            for pos, rel in enumerate(ex.metadata["relations"]):
                assert rel == list(TRANSITIONS)[pos % spec.num_relations]

    def test_transition_matches_relation(self):
        spec = SyntheticSpec(num_examples=20, num_test_examples=20, seed=4)
        train, test = generate_synthetic(spec)
        for ex in train + test:
            for sent, rel in zip(ex.target_sentences(), ex.metadata["relations"]):
                assert sent[0] == TRANSITIONS[rel]

    def test_cue_present_in_matching_reference(self):
        spec = SyntheticSpec(num_examples=20, num_test_examples=5, seed=5)
        train, _ = generate_synthetic(spec)
        cues = CUE_LEXICONS["default"]
        for ex in train:
            for ref, rel in zip(ex.references, ex.metadata["relations"]):
                assert cues[rel] in ref

    def test_test_split_decorrelated(self):
        spec = SyntheticSpec(num_examples=5, num_test_examples=800,
                             num_refs=4, seed=6)
        _, test = generate_synthetic(spec)
        # empirical correlation between sentence index and relation label
        import numpy as np
        pairs = [(pos, list(TRANSITIONS).index(rel))
                 for ex in test for pos, rel in enumerate(ex.metadata["relations"])]
        pos_arr, rel_arr = np.array(pairs).T
        assert len(pairs) >= 2000
        corr = np.corrcoef(pos_arr, rel_arr)[0, 1]
        assert abs(corr) < 0.05

    def test_train_confound_rate(self):
        spec = SyntheticSpec(num_examples=1000, num_test_examples=5,
                             confound_strength=0.9, seed=8)
        train, _ = generate_synthetic(spec)
        relations = list(TRANSITIONS)[: spec.num_relations]
        hits = total = 0
        for ex in train:
            for pos, rel in enumerate(ex.metadata["relations"]):
                total += 1
                hits += rel == relations[pos % spec.num_relations]
        rate = hits / total
        # rho + (1-rho)/R random agreement
        expected = 0.9 + 0.1 / spec.num_relations
        assert abs(rate - expected) < 0.03

    def test_disjoint_lexicons(self):
        default = set(CUE_LEXICONS["default"].values())
        alt = set(CUE_LEXICONS["alt"].values())
        assert not default & alt

    def test_spec_file_round_trip(self, tmp_path):
        spec = SyntheticSpec(num_examples=11, confound_strength=0.25, lexicon="alt",
                             seed=9)
        spec.save(tmp_path / "s.cfg")
        assert SyntheticSpec.load(tmp_path / "s.cfg") == spec

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec(confound_strength=1.5)
        with pytest.raises(ValueError):
            SyntheticSpec(num_relations=2)


class TestReorderPerturb:
    def _example(self, n=3):
        refs = [[f"ref{i}a", f"ref{i}b"] for i in range(n)]
        sentences = [[TRANSITIONS["contrast"], f"s{i}"] for i in range(n)]
        return GenerationExample.from_sentences(
            refs, sentences, {"alignment": list(range(n)), "relations":
                              ["contrast"] * n})

    def test_two_refs_swapped(self):
        ex = self._example(2)
        out = reorder_perturb(ex, seed=0)
        assert out.references == [ex.references[1], ex.references[0]]

    def test_non_identity_permutation(self):
        ex = self._example(4)
        for seed in range(10):
            out = reorder_perturb(ex, seed)
            assert out.references != ex.references

    def test_transitions_removed(self):
        ex = self._example(3)
        out = reorder_perturb(ex, seed=1)
        assert not TRANSITION_TOKENS & set(out.target)

    def test_alignment_tracks_permutation(self):
        ex = self._example(4)
        out = reorder_perturb(ex, seed=2)
        perm = out.metadata["permutation"]
        assert out.metadata["alignment"] == perm
        for new_pos, old_pos in enumerate(perm):
            assert out.references[new_pos] == ex.references[old_pos]
            # sentence follows its reference (transitions stripped)
            original = [t for t in ex.target_sentences()[old_pos]
                        if t not in TRANSITION_TOKENS]
            assert out.target_sentences()[new_pos] == original

    def test_single_reference_warning(self):
        ex = GenerationExample.from_sentences([["only"]], [["however", "x"]])
        out = reorder_perturb(ex, seed=0)
        assert out.target == ex.target
        assert "reorder_warning" in out.metadata

    def test_inverse_restores_reference_order(self):
        ex = self._example(4)
        out = reorder_perturb(ex, seed=3)
        perm = out.metadata["permutation"]
        inverse = [perm.index(i) for i in range(len(perm))]
        restored = [out.references[p] for p in inverse]
        assert restored == ex.references


def test_tokenize_lowercases_and_splits():
    assert tokenize("Alpha  BETA\tgamma") == ["alpha", "beta", "gamma"]


def test_target_tokens_wrapped():
    ex = GenerationExample.from_sentences([["r"]], [["however", "x"]])
    toks = target_tokens(ex)
    assert toks[0] == "<bos>" and toks[-1] == "<eos>"
