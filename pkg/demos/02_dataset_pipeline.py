"""
From raw VQA records to tuning-ready splits
===========================================

The pipeline filters entity-annotated question/answer records down to
the cases where a vision bottleneck is actually measurable, then samples
entities across the rank spectrum and splits per entity. The two LLM
filters normally talk to a live endpoint; here a scripted stand-in plays
the language model so the demo runs offline.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from visprior import (
    SamplingStrategy,
    dedup_entity_answer,
    filter_format_dependent,
    filter_llm_known,
    filter_min_questions,
    ingest_vqa,
    judge_rules,
    make_perception_data,
    sample_entities,
    split_dataset,
)
from visprior.ranking import RankResult, RankTable

# --- a small raw dataset, line-delimited JSON ------------------------------
records = []
for e in range(8):
    for q in range(5):
        records.append(
            {
                "question": f"When was hall {q} of museum {e} opened?",
                "answer": f"{1880 + 10 * e + q}",
                "entity_name": f"Museum {e}",
                "image": f"img/{e}/{q}.jpg",
            }
        )
# two records that later steps should remove:
records.append({"question": "Alternative phrasing?", "answer": "1880",
                "entity_name": "Museum 0", "image": "img/0/alt.jpg"})   # duplicate answer
records.append({"question": "Is water wet?", "answer": "yes",
                "entity_name": "Museum 1", "image": "img/1/x.jpg"})     # format-dependent

workdir = Path(tempfile.mkdtemp())
raw_path = workdir / "raw.jsonl"
raw_path.write_text("".join(json.dumps(r) + "\n" for r in records))

dataset = ingest_vqa(raw_path)
print("ingested:", len(dataset.items), "items,", len(dataset.entity_ids()), "entities")


# --- LLM-known filter: keep questions the language model can answer from
#     "This is {entity name}." alone. The stand-in model knows museums 0..5.
class StandInModel:
    def complete(self, prompt: str) -> str:
        for e in range(6):
            if f"This is Museum {e}." in prompt:
                question = prompt.splitlines()[1]
                for rec in records:
                    if rec["question"] == question and rec["entity_name"] == f"Museum {e}":
                        return rec["answer"]
        if "Is water wet?" in prompt:
            return "yes"
        return "I don't know"


model = StandInModel()
dataset = filter_llm_known(dataset, model, judge_rules)
print("after llm-known filter:", len(dataset.items), "items")

# --- format-dependency filter: drop questions answerable with no context ----
dataset = filter_format_dependent(dataset, model, judge_rules)
print("after format filter:   ", len(dataset.items), "items")

# --- dedup + minimum questions per entity ------------------------------------
dataset = filter_min_questions(dedup_entity_answer(dataset), k=3)
print("after dedup/min-questions:", len(dataset.items), "items")

# --- rank-stratified entity sampling ------------------------------------------
# (ranks usually come from `rank_all` on a real store; synthetic here)
rng = np.random.default_rng(1)
table = RankTable(
    results={
        eid: RankResult(eid, [1], float(rng.integers(1, 2000)))
        for eid in dataset.entity_ids()
    },
    catalog_size=2000,
    tie_policy="pessimistic",
)
picked = sample_entities(table, SamplingStrategy("geometric", per_bin=2), seed=0)
print("sampled entities:", picked)

# --- split and derive the two tuning sets ---------------------------------------
train, test = split_dataset(dataset, train_fraction=0.78, seed=0)
perception = make_perception_data(train)
print(f"split: {len(train.items)} train / {len(test.items)} test")
print("perception item:", perception.items[0].question, "->", perception.items[0].answer_candidates[0])

print("\nprovenance of the test split:")
for step in test.provenance:
    print(f"  {step.step}: {step.count_before} -> {step.count_after}")
