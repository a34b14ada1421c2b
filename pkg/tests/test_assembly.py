from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmix.assembly import (Components, assemble, build_suffix, mix_for, retrieve_exemplars,
                                serialize_metadata)
from promptmix.data import SeedExample
from promptmix.errors import AssemblyError, RetrievalError
from promptmix.mixing import STRATEGIES, init_mixer, mixed_rows
from promptmix.prompts import initialize_bank

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def bank(schema, backend):
    return initialize_bank(schema.ontology, backend.embed_tokens)


class TestRetrieval:
    def test_pool_of_two(self, seeds):
        pool = [seeds[1], seeds[2]]
        got = retrieve_exemplars(seeds[0], pool, k=2, rng=np.random.default_rng(0))
        assert set(got.ids) == {"e1", "e2"}

    def test_top_candidates_by_overlap(self):
        seed = SeedExample("s", "u", ("a", "b"))
        pool = [SeedExample("p0", "u", ("c",)), SeedExample("p1", "u", ("a",)),
                SeedExample("p2", "u", ("a", "b"))]
        got = retrieve_exemplars(seed, pool, k=2, top=2, rng=np.random.default_rng(0))
        assert got.candidate_pool_ids == ("p2", "p1")
        assert set(got.ids) == {"p1", "p2"}

    def test_ties_broken_by_id(self):
        seed = SeedExample("s", "u", ("a",))
        pool = [SeedExample(i, "u", ("a",)) for i in ("z", "m", "b")]
        got = retrieve_exemplars(seed, pool, k=1, top=2, rng=np.random.default_rng(0))
        assert got.candidate_pool_ids == ("b", "m")

    def test_deterministic(self, seeds):
        a = retrieve_exemplars(seeds[3], seeds, rng=np.random.default_rng(9))
        b = retrieve_exemplars(seeds[3], seeds, rng=np.random.default_rng(9))
        assert a == b

    def test_empty_pool(self, seeds):
        with pytest.raises(RetrievalError):
            retrieve_exemplars(seeds[0], [seeds[0]], rng=np.random.default_rng(0))

    @settings(max_examples=60)
    @given(st.integers(0, 9), st.integers(1, 4), st.integers(1, 10), st.integers(0, 1000))
    def test_seed_never_returned_and_subset_of_shortlist(self, i, k, top, s):
        from conftest import seed_examples

        pool = seed_examples()
        got = retrieve_exemplars(pool[i], pool, k=k, top=top, rng=np.random.default_rng(s))
        assert pool[i].id not in got.ids
        assert set(got.ids) <= set(got.candidate_pool_ids)
        assert len(got.exemplars) == min(k, len(got.candidate_pool_ids))
        assert len(set(got.ids)) == len(got.ids)


class TestSuffix:
    def test_metadata_without_slots(self):
        assert serialize_metadata(SeedExample("1", "u", ("a",), domain="hotels")) == "domain: hotels"

    def test_metadata_slots_sorted(self):
        slots = (("time", "7"), ("artist", "queen"), ("genre", "rock"))
        text = serialize_metadata(SeedExample("1", "u", ("a",), slots, "assistant"))
        expected = "; ".join(f"{t}={v}" for t, v in sorted(slots))
        assert text == f"domain: assistant | slots: {expected}"

    def test_golden_suffix(self, seeds):
        assert build_suffix(seeds[0], [seeds[5], seeds[9]]) == (GOLDEN / "suffix.txt").read_text()

    def test_zero_exemplars(self, seeds, bank):
        mixer = init_mixer("pooling", bank.embed_dim)
        out = assemble(seeds[0], bank, mix_for(seeds[0], bank, mixer), [], mode="generate")
        assert out.text_suffix == serialize_metadata(seeds[0])
        assert out.target is None


class TestAssemble:
    def test_tune_target(self, seeds, bank):
        mixer = init_mixer("attention", bank.embed_dim)
        out = assemble(seeds[3], bank, mix_for(seeds[3], bank, mixer), [seeds[0]], mode="tune")
        assert out.target == seeds[3].utterance

    def test_block_layout(self, seeds, bank):
        mixer = init_mixer("concat", bank.embed_dim)
        mixed = mix_for(seeds[3], bank, mixer)
        out = assemble(seeds[3], bank, mixed, [], mode="tune")
        assert np.array_equal(out.soft_block[:100], bank.prefix.matrix)
        assert np.array_equal(out.soft_block[100:], mixed.matrix)

    def test_missing_prompt_named(self, bank):
        seed = SeedExample("x", "u", ("music", "flights"))
        with pytest.raises(AssemblyError, match="flights"):
            mix_for(seed, bank, init_mixer("pooling", bank.embed_dim))

    def test_bad_mode(self, seeds, bank):
        mixed = mix_for(seeds[0], bank, init_mixer("pooling", bank.embed_dim))
        with pytest.raises(ValueError):
            assemble(seeds[0], bank, mixed, [], mode="train")

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_row_count_law(self, seeds, bank, strategy):
        mixer = init_mixer(strategy, bank.embed_dim, seed=1)
        for seed in seeds:
            out = assemble(seed, bank, mix_for(seed, bank, mixer), [], mode="tune")
            assert out.soft_block.shape == (100 + mixed_rows(strategy, len(seed.attributes)), bank.embed_dim)

    def test_deterministic(self, seeds, bank):
        mixer = init_mixer("bottleneck", bank.embed_dim)
        a = assemble(seeds[4], bank, mix_for(seeds[4], bank, mixer), [seeds[2]])
        b = assemble(seeds[4], bank, mix_for(seeds[4], bank, mixer), [seeds[2]])
        assert np.array_equal(a.soft_block, b.soft_block) and a.text_suffix == b.text_suffix

    def test_components_remove_exactly_one_part(self, seeds, bank):
        mixer = init_mixer("pooling", bank.embed_dim)
        mixed = mix_for(seeds[0], bank, mixer)
        full = assemble(seeds[0], bank, mixed, [seeds[5]])
        no_prefix = assemble(seeds[0], bank, mixed, [seeds[5]], components=Components(instruction=False))
        no_prompt = assemble(seeds[0], bank, mixed, [seeds[5]], components=Components(attribute_prompt=False))
        no_meta = assemble(seeds[0], bank, mixed, [seeds[5]], components=Components(metadata=False))
        no_ex = assemble(seeds[0], bank, mixed, [seeds[5]], components=Components(exemplars=False))
        assert np.array_equal(no_prefix.soft_block, mixed.matrix)
        assert np.array_equal(no_prompt.soft_block, bank.prefix.matrix)
        assert no_meta.text_suffix == "1. play a tune"
        assert no_ex.text_suffix == serialize_metadata(seeds[0])
        for out in (no_prefix, no_prompt):
            assert out.text_suffix == full.text_suffix
        for out in (no_meta, no_ex):
            assert np.array_equal(out.soft_block, full.soft_block)
