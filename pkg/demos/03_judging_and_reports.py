"""
Grading free-form answers and reading the accuracy reports
==========================================================

Model answers are free text, so correctness is decided by a judge. The
LLM judge sends a strict evaluation prompt (reply must be exactly "true"
or "false") to a chat endpoint; the rule judge reproduces the same
criteria offline. Per-entity accuracies are macro-averaged and can be
binned by prior rank to expose where performance falls off a cliff.
"""

import numpy as np

from visprior import (
    accuracy_report,
    binned_accuracy,
    detect_threshold,
    judge_rules,
    render_judge_prompt,
)
from visprior.pipeline import VqaItem
from visprior.ranking import RankResult, RankTable

# --- the judge prompt -------------------------------------------------------
prompt = render_judge_prompt(
    question="How many people can this stadium host?",
    wikipedia_title="Mercedes-Benz Stadium",
    answer=["71,000", "75,000"],
    prediction="73,000",
)
print("prompt head:", prompt.splitlines()[0][:72], "...")
print("prompt tail:", repr(prompt[-60:]))

# --- rule judge on tricky cases -----------------------------------------------
cases = [
    ("Sonoran Desert", "Sonoran"),            # partial but specific -> true
    ("71,000 | 75,000", "73,000"),            # within 10% of a candidate -> true
    ("1960", "1962"),                         # years match exactly or not at all
    ("Gothic Revival", "It is Gothic Revival architecture."),
]
for answer, predicted in cases:
    item = VqaItem(
        item_id="demo",
        entity_id="demo-entity",
        entity_name="Demo Entity",
        question="q?",
        answer_candidates=tuple(a.strip() for a in answer.split("|")),
        image_ref="img.jpg",
    )
    verdict = judge_rules(item, predicted)
    print(f"  answer {answer!r:24} prediction {predicted!r:40} -> {verdict.raw_reply}")

# --- per-entity accuracy, macro average ------------------------------------------
rng = np.random.default_rng(3)
items, verdicts, ranks = [], [], {}
for e in range(30):
    entity = f"Entity {e}"
    entity_id = f"entity-{e}"
    rank_e = float(10 ** rng.uniform(0.5, 3.7))  # spread over (3, 5000)
    ranks[entity_id] = rank_e
    # accuracy degrades sharply for entities the encoder does not know
    p_correct = 0.8 if rank_e <= 3000 else 0.1
    for q in range(6):
        item_id = f"{entity_id}-q{q}"
        items.append(
            VqaItem(item_id, entity_id, entity, f"question {q}?", ("target",), "img.jpg")
        )
        predicted = "target" if rng.uniform() < p_correct else "something else"
        verdicts.append(judge_rules(items[-1], predicted))

report = accuracy_report(items, verdicts)
print(f"\nmacro accuracy over {len(report.per_entity)} entities: {report.acc_macro:.3f}")

# --- binned by prior rank + threshold detection -------------------------------------
table = RankTable(
    results={k: RankResult(k, [int(v)], v) for k, v in ranks.items()},
    catalog_size=5000,
    tie_policy="pessimistic",
)
edges = [0, 500, 1000, 1500, 2000, 2500, 3000]
report = binned_accuracy(report, table, edges)
for b in report.binned:
    hi = "inf" if b.hi is None else f"{b.hi:g}"
    acc = "-" if b.acc_macro_in_bin is None else f"{b.acc_macro_in_bin:.3f}"
    print(f"  ({b.lo:g}, {hi}]: {b.entity_count:2d} entities, macro {acc}")

threshold = detect_threshold(report)
print("detected threshold:", threshold)
