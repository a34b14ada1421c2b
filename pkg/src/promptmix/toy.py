"""A small constructed task for smoke runs and the downstream-benefit check.

Three assistant intents (music, volume, weather) form the target domain;
hotel intents form the source domain.  The target few-shot split only ever
uses the first cue word of each intent, while the test split draws from all
of them.  A teacher that knows the synonyms can fill that gap, a student
trained on the few-shot data alone cannot.
"""
from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from .fileio import atomic_write_json, atomic_write_text

TARGET_DOMAIN = "assistant"
SOURCE_DOMAIN = "hotels"

CUES = {
    "music": ("play", "song", "music", "tune"),
    "volume": ("volume", "louder", "loudness", "blast"),
    "weather": ("weather", "forecast", "rain", "sunny"),
}
SOURCE_CUES = {
    "hotel": ("room", "hotel", "suite", "stay"),
    "booking": ("book", "reserve", "booking", "schedule"),
}
DESCRIPTIONS = {
    "music": "play a song or some music or a tune",
    "volume": "volume up or louder or more loudness or blast",
    "weather": "weather or forecast or rain or sunny",
    "hotel": "a hotel room or suite for a stay",
    "booking": "book or reserve or schedule a booking",
}
OPENERS = ("please", "can you", "i want to", "now", "")
FILLERS = ("the", "some", "my", "")


def schema_dict() -> dict:
    ontology = []
    for name, domain in [("music", TARGET_DOMAIN), ("volume", TARGET_DOMAIN), ("weather", TARGET_DOMAIN),
                         ("hotel", SOURCE_DOMAIN), ("booking", SOURCE_DOMAIN)]:
        ontology.append({"id": name, "name": name, "description": DESCRIPTIONS[name], "domain": domain})
    return {
        "task_kind": "multi-intent",
        "ontology": ontology,
        "source_domains": [SOURCE_DOMAIN],
        "target_domain": TARGET_DOMAIN,
        "filler_words": [],
    }


def _utterance(cue_words, rng) -> str:
    words = [OPENERS[int(rng.integers(len(OPENERS)))]]
    for pos, cue in enumerate(cue_words):
        if pos:
            words.append("and")
        words.append(FILLERS[int(rng.integers(len(FILLERS)))])
        words.append(cue)
    return " ".join(w for w in words if w)


def _record(ex_id, utterance, attributes, domain, split) -> dict:
    return {"id": ex_id, "utterance": utterance, "attributes": sorted(attributes), "slots": [],
            "domain": domain, "split": split}


def _label_sets(names):
    return [set(c) for r in (1, 2) for c in itertools.combinations(names, r)]


def build_records(seed: int = 0, per_set_train: int = 2, n_dev: int = 6, n_test: int = 60):
    """Records for the four splits; only the first cue of each intent appears in train/dev."""
    rng = np.random.default_rng(seed)
    names = sorted(CUES)
    records = {"source": [], "train": [], "dev": [], "test": []}

    for i, attrs in enumerate(_label_sets(sorted(SOURCE_CUES)) * 3):
        cues = [SOURCE_CUES[a][int(rng.integers(4))] for a in sorted(attrs)]
        records["source"].append(_record(f"src{i:03d}", _utterance(cues, rng), attrs, SOURCE_DOMAIN, "source"))

    sets = _label_sets(names)
    for i, attrs in enumerate(sets * per_set_train):
        cues = [CUES[a][0] for a in rng.permutation(sorted(attrs))]
        records["train"].append(_record(f"tr{i:03d}", _utterance(cues, rng), attrs, TARGET_DOMAIN, "target-train"))
    for i in range(n_dev):
        attrs = sets[int(rng.integers(len(sets)))]
        cues = [CUES[a][0] for a in rng.permutation(sorted(attrs))]
        records["dev"].append(_record(f"dv{i:03d}", _utterance(cues, rng), attrs, TARGET_DOMAIN, "target-dev"))
    for i in range(n_test):
        attrs = sets[int(rng.integers(len(sets)))]
        cues = [CUES[a][int(rng.integers(4))] for a in rng.permutation(sorted(attrs))]
        records["test"].append(_record(f"te{i:03d}", _utterance(cues, rng), attrs, TARGET_DOMAIN, "target-test"))
    return records


SMOKE_CONFIG = """\
seed = {seed}
run_dir = "run"

[data]
schema = "schema.json"
train = "train.jsonl"
source = "source.jsonl"
dev = "dev.jsonl"
test = "test.jsonl"

[teacher]
kind = "mock"

[mixer]
strategy = "bottleneck"

[tune]
max_steps = {max_steps}
effective_batch = 6
micro_batch = 3
grad_accum_steps = 2
"""


def write_toy(directory, seed: int = 0, max_steps: int = 20) -> Path:
    """Write schema, splits and a smoke config into ``directory``; return the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_json(directory / "schema.json", schema_dict())
    for split, rows in build_records(seed).items():
        atomic_write_text(directory / f"{split}.jsonl",
                          "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    config = directory / "config.toml"
    atomic_write_text(config, SMOKE_CONFIG.format(seed=seed, max_steps=max_steps))
    return config
