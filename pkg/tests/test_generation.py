import itertools
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from promptmix.backends import DecodeParams
from promptmix.data import SeedExample
from promptmix.errors import ValidationError
from promptmix.generation import (GenConfig, SynthesizedExample, denoise, rarity_weight, read_corpus,
                                  score_rarity, score_similarity, split_generations, synthesize,
                                  weighted_sample_without_replacement, write_corpus)
from promptmix.mixing import init_mixer
from promptmix.prompts import initialize_bank

MESSY = [
    ("1. a\n2. b", ["a", "b"]),
    ("", []),
    ("1) book a room\n2) book a room\n3) find a suite", ["book a room", "find a suite"]),
    ("- play jazz\n• play rock\n* play pop", ["play jazz", "play rock", "play pop"]),
    ("   1.   spaced out   \n\n\n2.tight", ["spaced out", "tight"]),
    ("no markers here\nsecond line", ["no markers here", "second line"]),
    ("1.\n2. \n3. only this", ["only this"]),
    ("10. ten items\n11. eleven", ["ten items", "eleven"]),
    ("1. 2. nested number", ["2. nested number"]),
    ("same\nsame\nSame", ["same", "Same"]),
]


def candidate(cid, attrs, utt="x", seed_id="s0"):
    return SynthesizedExample(cid, utt, tuple(attrs), (), "d", {"seed_id": seed_id})


@pytest.mark.parametrize("raw,expected", MESSY)
def test_split_generations(raw, expected):
    assert split_generations(raw) == expected


def test_candidates_per_seed():
    assert GenConfig().candidates_per_seed == 5
    assert GenConfig(n_per_seed=10, overgen_factor=1.1).candidates_per_seed == 11
    assert GenConfig(n_per_seed=3, overgen_factor=1.0).candidates_per_seed == 3
    with pytest.raises(ValidationError):
        GenConfig(overgen_factor=0.9)


class TestRarity:
    def test_hand_values(self):
        freqs = {"a": 4, "b": 1}
        got = [c.weight_rarity for c in score_rarity([candidate("1", "a"), candidate("2", "b"),
                                                       candidate("3", "ab")], freqs)]
        assert got == [0.25, 1.0, 0.625]

    def test_uniform_frequencies(self):
        freqs = {"a": 3, "b": 3, "c": 3}
        assert {rarity_weight(s, freqs) for s in ("a", "bc", "abc")} == {1.0}

    def test_zero_count_gets_max_weight(self):
        assert rarity_weight(("z",), {"a": 2, "z": 0}) == 1.0

    @settings(max_examples=200)
    @given(st.dictionaries(st.sampled_from("abcde"), st.integers(1, 50), min_size=1),
           st.data())
    def test_lowering_frequency_never_hurts_single_attribute_candidates(self, freqs, data):
        a = data.draw(st.sampled_from(sorted(freqs)))
        lowered = dict(freqs, **{a: data.draw(st.integers(1, freqs[a]))})
        assert rarity_weight((a,), lowered) >= rarity_weight((a,), freqs)

    @settings(max_examples=200)
    @given(st.dictionaries(st.sampled_from("abcde"), st.integers(1, 50), min_size=2), st.data())
    def test_lowering_frequency_above_floor_never_hurts(self, freqs, data):
        a = data.draw(st.sampled_from(sorted(freqs)))
        floor = min(freqs.values())
        assume(freqs[a] >= floor)
        lowered = dict(freqs, **{a: data.draw(st.integers(floor, freqs[a]))})
        attrs = data.draw(st.sets(st.sampled_from(sorted(freqs)), min_size=1)) | {a}
        assert rarity_weight(tuple(attrs), lowered) >= rarity_weight(tuple(attrs), freqs) - 1e-15

    def test_lowering_the_rarest_attribute_can_hurt_a_mixed_candidate(self):
        # the rarest count is the numerator for every attribute, so pushing it
        # lower shrinks the ratio of the other attributes in the same set
        before = rarity_weight(("a", "b"), {"a": 2, "b": 4})
        after = rarity_weight(("a", "b"), {"a": 1, "b": 4})
        assert (before, after) == (0.75, 0.625)


def test_similarity():
    assert score_similarity("book a room", "book a room") == 1.0
    assert score_similarity("book a room", "play jazz") == 0.0
    assert score_similarity("book a room", "book a table") == pytest.approx(2 / 3)


class TestSampling:
    def test_exact_inclusion_probabilities(self):
        weights = np.array([3.0, 2.0, 1.0, 0.5])
        k = 2
        exact = np.zeros(4)
        for order in itertools.permutations(range(4), k):
            p, left = 1.0, weights.sum()
            for i in order:
                p *= weights[i] / left
                left -= weights[i]
            exact[list(order)] += p
        rng = np.random.default_rng(0)
        trials = 20000
        counts = np.zeros(4)
        for _ in range(trials):
            counts[weighted_sample_without_replacement(weights, k, rng)] += 1
        assert np.allclose(counts / trials, exact, atol=0.015)

    def test_heavy_item_kept(self):
        kept = sum(weighted_sample_without_replacement([1.0, 1e-9], 1, np.random.default_rng(s)) == [0]
                   for s in range(1000))
        assert kept >= 990

    def test_all_zero_falls_back_to_uniform(self, caplog):
        got = weighted_sample_without_replacement([0, 0, 0], 2, np.random.default_rng(0))
        assert len(got) == 2 and len(set(got)) == 2
        assert "uniform" in caplog.text

    @given(st.lists(st.floats(0, 5), min_size=1, max_size=12), st.integers(0, 15), st.integers(0, 99))
    def test_size_law(self, weights, k, s):
        got = weighted_sample_without_replacement(weights, k, np.random.default_rng(s))
        assert len(got) == min(k, len(weights)) == len(set(got))
        assert all(0 <= i < len(weights) for i in got)


class TestDenoise:
    def _fixture(self):
        seeds = [SeedExample("s0", "play some music", ("a",)), SeedExample("s1", "weather today", ("b",))]
        cands = [candidate(f"c{i}", "a", "play music now", "s0") for i in range(6)]
        cands += [candidate(f"d{i}", "b", "weather tomorrow", "s1") for i in range(6)]
        return seeds, cands

    @pytest.mark.parametrize("target", [0, 1, 5, 12, 20])
    def test_count(self, target):
        seeds, cands = self._fixture()
        assert len(denoise(cands, seeds, target, np.random.default_rng(0))) == min(target, len(cands))

    def test_weights_attached_and_in_range(self):
        seeds, cands = self._fixture()
        for c in denoise(cands, seeds, 12):
            assert 0 < c.weight_rarity <= 1 and 0 < c.weight_similarity <= 1

    def test_similarity_floor(self):
        seeds = [SeedExample("s0", "alpha", ("a",))]
        out = denoise([candidate("c", "a", "beta", "s0")], seeds, 1, similarity_floor=0.05)
        assert out[0].weight_similarity == 0.05

    def test_deterministic(self):
        seeds, cands = self._fixture()
        a = denoise(cands, seeds, 5, np.random.default_rng(3))
        b = denoise(cands, seeds, 5, np.random.default_rng(3))
        assert a == b


class TestSynthesize:
    @pytest.fixture
    def setup(self, schema, backend):
        bank = initialize_bank(schema.ontology, backend.embed_tokens)
        return bank, init_mixer("attention", bank.embed_dim)

    def test_labels_copied_and_quota(self, setup, seeds, backend):
        bank, mixer = setup
        out = synthesize(bank, mixer, seeds, backend, GenConfig())
        per_seed = Counter(c.provenance["seed_id"] for c in out)
        assert all(n == 5 for n in per_seed.values()) and len(per_seed) == len(seeds)
        by_id = {s.id: s for s in seeds}
        for c in out:
            src = by_id[c.provenance["seed_id"]]
            assert c.attributes == src.attributes and c.slots == src.slots and c.domain == src.domain
            assert c.provenance["strategy"] == "attention"

    def test_deterministic(self, setup, seeds, backend):
        bank, mixer = setup
        assert synthesize(bank, mixer, seeds, backend, GenConfig()) == synthesize(bank, mixer, seeds, backend,
                                                                                  GenConfig())

    def test_exclude_seed_flag(self, setup, seeds, backend):
        bank, mixer = setup
        out = synthesize(bank, mixer, seeds, backend, GenConfig(exclude_seed_exemplars=True))
        assert all(c.provenance["seed_id"] not in c.provenance["exemplar_ids"] for c in out)

    def test_quota_shortfall_warns(self, setup, seeds, backend, caplog):
        bank, mixer = setup
        cfg = GenConfig(n_per_seed=40, max_calls_per_seed=1, decode=DecodeParams(num_return_sequences=1))
        out = synthesize(bank, mixer, seeds[:1], backend, cfg)
        assert 0 < len(out) < 48 and "yielded" in caplog.text


def test_corpus_jsonl_schema(tmp_path):
    ex = SynthesizedExample("s0~syn0", "play it", ("music",), (("artist", "queen"),), "assistant",
                            {"seed_id": "s0", "exemplar_ids": ["s1"], "decode_seed": 7, "strategy": "attention"},
                            0.5, 0.25)
    path = tmp_path / "c.jsonl"
    write_corpus(path, [ex])
    line = path.read_text(encoding="utf-8")
    assert line == (
        '{"attributes": ["music"], "domain": "assistant", "id": "s0~syn0", "provenance": '
        '{"decode_seed": 7, "exemplar_ids": ["s1"], "seed_id": "s0", "strategy": "attention"}, '
        '"slots": [["artist", "queen"]], "utterance": "play it", "weight_rarity": 0.5, '
        '"weight_similarity": 0.25}\n')
    assert read_corpus(path) == [ex]
    json.loads(line)


def test_bad_corpus_line(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"id": 1}\n')
    with pytest.raises(ValidationError, match="c.jsonl:1"):
        read_corpus(path)
