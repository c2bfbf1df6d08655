"""Entity-annotated VQA dataset construction.

The pipeline turns raw question/answer records into tuning-ready splits:

    ingest -> llm-known filter -> format-dependency filter -> dedup
           -> min-questions -> entity sampling -> train/test split

Each step appends a provenance entry (name plus item counts before/after)
so the final dataset documents exactly how it was produced. The two LLM
filters talk to a text-completion client: the first keeps questions the
language model can already answer when told "This is {entity name}."
instead of shown the image; the second removes questions the model
answers correctly from the bare question alone (format shortcuts).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Protocol

import numpy as np

from .errors import DataError, RemoteServiceError
from .ranking import RankTable, geometric_edges
from .store import slugify

if TYPE_CHECKING:
    from .evaluation import JudgeVerdict

log = logging.getLogger(__name__)

PERCEPTION_QUESTION = "What is this image about?"

LLM_KNOWN_PROMPT = "This is {name}.\n{question}"


class LlmClient(Protocol):
    """Anything that can answer a free-form text prompt."""

    def complete(self, prompt: str) -> str: ...


@dataclass(frozen=True)
class VqaItem:
    item_id: str
    entity_id: str
    entity_name: str
    question: str
    answer_candidates: tuple[str, ...]
    image_ref: str
    split: str = "unassigned"

    def __post_init__(self) -> None:
        if not self.answer_candidates:
            raise DataError(f"item {self.item_id!r} has no answer candidates")

    @property
    def answer_text(self) -> str:
        return " | ".join(self.answer_candidates)


@dataclass
class ProvenanceStep:
    step: str
    count_before: int
    count_after: int
    detail: dict = field(default_factory=dict)


@dataclass
class VqaDataset:
    items: list[VqaItem]
    provenance: list[ProvenanceStep] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for item in self.items:
            if item.item_id in seen:
                raise DataError(f"duplicate item_id {item.item_id!r}")
            seen.add(item.item_id)

    def __len__(self) -> int:
        return len(self.items)

    def entity_ids(self) -> list[str]:
        """Distinct entity ids in first-appearance order."""
        out: list[str] = []
        seen: set[str] = set()
        for item in self.items:
            if item.entity_id not in seen:
                seen.add(item.entity_id)
                out.append(item.entity_id)
        return out

    def by_entity(self) -> dict[str, list[VqaItem]]:
        groups: dict[str, list[VqaItem]] = {}
        for item in self.items:
            groups.setdefault(item.entity_id, []).append(item)
        return groups

    def derive(self, items: list[VqaItem], step: ProvenanceStep) -> "VqaDataset":
        return VqaDataset(items=items, provenance=[*self.provenance, step])


def split_answer_field(answer: str) -> tuple[str, ...]:
    candidates = tuple(part.strip() for part in answer.split("|") if part.strip())
    if not candidates:
        raise DataError(f"answer field {answer!r} yields no candidates")
    return candidates


def ingest_vqa(path: str | Path) -> VqaDataset:
    """Read line-delimited JSON records {question, answer, entity_name, image}.

    Entity ids are slugified names; answers split on '|'. Unknown fields are
    ignored; a malformed line is an error naming the line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    items: list[VqaItem] = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                item = VqaItem(
                    item_id=f"item-{line_no:06d}",
                    entity_id=slugify(record["entity_name"]),
                    entity_name=str(record["entity_name"]),
                    question=str(record["question"]),
                    answer_candidates=split_answer_field(str(record["answer"])),
                    image_ref=str(record["image"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, DataError) as exc:
                raise DataError(f"{path}:{line_no}: malformed record: {exc}") from exc
            items.append(item)
    step = ProvenanceStep("ingest", 0, len(items), {"source": str(path)})
    return VqaDataset(items=items, provenance=[step])


def _judge_items(
    items: list[VqaItem],
    prompts: list[str],
    llm_client: LlmClient,
    judge: Callable[[VqaItem, str], "JudgeVerdict"],
    retries: int,
    jobs: int,
) -> list[bool | None]:
    """Per-item verdicts; None marks an unresolved item (all retries failed)."""

    def query(index: int) -> bool | None:
        last: Exception | None = None
        for _ in range(max(1, retries)):
            try:
                reply = llm_client.complete(prompts[index])
                return bool(judge(items[index], reply).verdict)
            except RemoteServiceError as exc:
                last = exc
        log.warning(
            "item %s unresolved after %d attempts: %s",
            items[index].item_id,
            retries,
            last,
        )
        return None

    if jobs <= 1:
        return [query(i) for i in range(len(items))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(query, range(len(items))))


def filter_llm_known(
    dataset: VqaDataset,
    llm_client: LlmClient,
    judge: Callable[[VqaItem, str], "JudgeVerdict"],
    retries: int = 3,
    jobs: int = 1,
) -> VqaDataset:
    """Keep only items the model answers correctly from the entity name alone.

    Each question is posed as "This is {entity name}.\\n{question}" with no
    image. Items whose verdict cannot be resolved are excluded (we never
    claim the model knows what we could not verify) and counted in the
    provenance detail.
    """
    prompts = [
        LLM_KNOWN_PROMPT.format(name=item.entity_name, question=item.question)
        for item in dataset.items
    ]
    verdicts = _judge_items(dataset.items, prompts, llm_client, judge, retries, jobs)
    kept = [item for item, v in zip(dataset.items, verdicts) if v is True]
    unresolved = sum(1 for v in verdicts if v is None)
    step = ProvenanceStep(
        "filter_llm_known",
        len(dataset.items),
        len(kept),
        {"unresolved_excluded": unresolved},
    )
    return dataset.derive(kept, step)


def filter_format_dependent(
    dataset: VqaDataset,
    llm_client: LlmClient,
    judge: Callable[[VqaItem, str], "JudgeVerdict"],
    retries: int = 3,
    jobs: int = 1,
) -> VqaDataset:
    """Remove items answerable from the bare question (no image, no entity).

    A correct answer here means the question format leaks the answer, so the
    item is dropped. Unresolved items are excluded as well.
    """
    prompts = [item.question for item in dataset.items]
    verdicts = _judge_items(dataset.items, prompts, llm_client, judge, retries, jobs)
    kept = [item for item, v in zip(dataset.items, verdicts) if v is False]
    unresolved = sum(1 for v in verdicts if v is None)
    step = ProvenanceStep(
        "filter_format_dependent",
        len(dataset.items),
        len(kept),
        {"unresolved_excluded": unresolved},
    )
    return dataset.derive(kept, step)


def normalize_answer(text: str) -> str:
    return " ".join(text.strip().lower().split())


def dedup_key(item: VqaItem) -> tuple[str, frozenset[str]]:
    return item.entity_id, frozenset(normalize_answer(a) for a in item.answer_candidates)


def dedup_entity_answer(dataset: VqaDataset) -> VqaDataset:
    """First item wins per (entity, normalized answer-candidate set) key."""
    seen: set[tuple[str, frozenset[str]]] = set()
    kept: list[VqaItem] = []
    for item in dataset.items:
        key = dedup_key(item)
        if key in seen:
            continue
        seen.add(key)
        kept.append(item)
    step = ProvenanceStep("dedup_entity_answer", len(dataset.items), len(kept))
    return dataset.derive(kept, step)


def filter_min_questions(dataset: VqaDataset, k: int = 3) -> VqaDataset:
    """Drop entities with fewer than k items."""
    if k < 1:
        raise DataError(f"min-questions k must be >= 1, got {k}")
    counts: dict[str, int] = {}
    for item in dataset.items:
        counts[item.entity_id] = counts.get(item.entity_id, 0) + 1
    kept = [item for item in dataset.items if counts[item.entity_id] >= k]
    step = ProvenanceStep("filter_min_questions", len(dataset.items), len(kept), {"k": k})
    return dataset.derive(kept, step)


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str  # "uniform" | "geometric"
    per_bin: int = 10
    width: int = 1000  # uniform only

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "geometric"):
            raise DataError(f"unknown sampling kind {self.kind!r}")
        if self.per_bin < 1:
            raise DataError(f"per_bin must be >= 1, got {self.per_bin}")
        if self.kind == "uniform" and self.width < 1:
            raise DataError(f"uniform width must be >= 1, got {self.width}")


def _strategy_edges(strategy: SamplingStrategy, max_rank: float) -> list[float]:
    if strategy.kind == "geometric":
        return geometric_edges(10)  # (0,2],(2,4],...,(512,1024], then >1024
    n_bins = max(1, math.ceil(max_rank / strategy.width))
    return [float(i * strategy.width) for i in range(n_bins + 1)]


def sample_entities(
    table: RankTable, strategy: SamplingStrategy, seed: int
) -> list[str]:
    """Rank-stratified entity sample, ``per_bin`` per interval.

    Uniform: fixed-width intervals (i*w, (i+1)*w]. Geometric: doubling
    intervals (0,2], (2,4], ... (512,1024] and a final (1024, inf) bin.
    Bins with fewer than per_bin entities contribute all of them.
    """
    if not table.results:
        raise DataError("cannot sample from an empty rank table")
    max_rank = max(r.rank_e for r in table.results.values())
    edges = _strategy_edges(strategy, max_rank)

    # Assign entities to intervals; the interval after the last edge is
    # open-ended (only reachable for the geometric scheme, whose edges do
    # not grow with the data).
    bins: list[list[str]] = [[] for _ in range(len(edges))]
    for entity_id in sorted(table.results):
        rank_e = table.results[entity_id].rank_e
        for i in range(len(edges) - 1):
            if edges[i] < rank_e <= edges[i + 1]:
                bins[i].append(entity_id)
                break
        else:
            bins[-1].append(entity_id)

    rng = np.random.default_rng(seed)
    sampled: list[str] = []
    for i, members in enumerate(bins):
        if not members:
            log.info("sampling bin %d is empty", i)
            continue
        take = min(strategy.per_bin, len(members))
        picked = rng.choice(len(members), size=take, replace=False)
        sampled.extend(members[j] for j in sorted(picked))
    return sampled


def restrict_to_entities(dataset: VqaDataset, entity_ids) -> VqaDataset:
    wanted = set(entity_ids)
    kept = [item for item in dataset.items if item.entity_id in wanted]
    step = ProvenanceStep(
        "restrict_to_entities", len(dataset.items), len(kept), {"entities": len(wanted)}
    )
    return dataset.derive(kept, step)


def _entity_rng(seed: int, entity_id: str) -> np.random.Generator:
    digest = hashlib.sha256(entity_id.encode()).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")])
    )


def split_dataset(
    dataset: VqaDataset, train_fraction: float = 0.78, seed: int = 0
) -> tuple[VqaDataset, VqaDataset]:
    """Per-entity train/test split with identical entity sets on both sides.

    Each entity's items are shuffled with a seed derived from the entity id,
    then the first floor(n * fraction) go to train, clamped so both sides
    get at least one item. An entity with a single item cannot be split and
    is an error.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_items: list[VqaItem] = []
    test_items: list[VqaItem] = []
    for entity_id, group in dataset.by_entity().items():
        if len(group) < 2:
            raise DataError(
                f"entity {entity_id!r} has {len(group)} item(s); need >= 2 to split"
            )
        # Shuffle a canonical ordering so membership does not depend on the
        # incoming item order, only on the seed and the item identities.
        group = sorted(group, key=lambda it: it.item_id)
        order = _entity_rng(seed, entity_id).permutation(len(group))
        n_train = min(max(math.floor(len(group) * train_fraction), 1), len(group) - 1)
        for pos, idx in enumerate(order):
            item = group[idx]
            if pos < n_train:
                train_items.append(replace(item, split="train"))
            else:
                test_items.append(replace(item, split="test"))
    before = len(dataset.items)
    train = dataset.derive(
        train_items,
        ProvenanceStep("split_train", before, len(train_items), {"fraction": train_fraction, "seed": seed}),
    )
    test = dataset.derive(
        test_items,
        ProvenanceStep("split_test", before, len(test_items), {"fraction": train_fraction, "seed": seed}),
    )
    return train, test


def make_perception_data(dataset: VqaDataset) -> VqaDataset:
    """Recast items as perception probes: one per (entity, image).

    The question becomes "What is this image about?" and the sole answer is
    the entity display name; duplicate (entity, image) pairs collapse to the
    first item.
    """
    seen: set[tuple[str, str]] = set()
    out: list[VqaItem] = []
    for item in dataset.items:
        key = (item.entity_id, item.image_ref)
        if key in seen:
            continue
        seen.add(key)
        out.append(
            replace(
                item,
                question=PERCEPTION_QUESTION,
                answer_candidates=(item.entity_name,),
            )
        )
    step = ProvenanceStep("make_perception_data", len(dataset.items), len(out))
    return dataset.derive(out, step)


def save_dataset(dataset: VqaDataset, path: str | Path) -> None:
    """Items as line-delimited JSON with every field, one object per line."""
    path = Path(path)
    with path.open("w") as fh:
        for item in dataset.items:
            fh.write(
                json.dumps(
                    {
                        "item_id": item.item_id,
                        "entity_id": item.entity_id,
                        "entity_name": item.entity_name,
                        "question": item.question,
                        "answer_candidates": list(item.answer_candidates),
                        "image_ref": item.image_ref,
                        "split": item.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_dataset(path: str | Path) -> VqaDataset:
    """Inverse of save_dataset."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    items: list[VqaItem] = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(
                    VqaItem(
                        item_id=rec["item_id"],
                        entity_id=rec["entity_id"],
                        entity_name=rec["entity_name"],
                        question=rec["question"],
                        answer_candidates=tuple(rec["answer_candidates"]),
                        image_ref=rec["image_ref"],
                        split=rec.get("split", "unassigned"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, DataError) as exc:
                raise DataError(f"{path}:{line_no}: malformed record: {exc}") from exc
    return VqaDataset(items=items, provenance=[ProvenanceStep("load", 0, len(items), {"source": str(path)})])


def write_ingest_jsonl(dataset: VqaDataset, path: str | Path) -> None:
    """Raw-record form {question, answer, entity_name, image}, re-ingestable."""
    path = Path(path)
    with path.open("w") as fh:
        for item in dataset.items:
            fh.write(
                json.dumps(
                    {
                        "question": item.question,
                        "answer": item.answer_text,
                        "entity_name": item.entity_name,
                        "image": item.image_ref,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def provenance_to_json(dataset: VqaDataset) -> list[dict]:
    return [
        {
            "step": s.step,
            "count_before": s.count_before,
            "count_after": s.count_after,
            "detail": s.detail,
        }
        for s in dataset.provenance
    ]
