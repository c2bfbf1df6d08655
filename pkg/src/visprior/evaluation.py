"""Answer grading and accuracy aggregation.

Two interchangeable judges decide whether a model's free-form answer is
correct: an LLM judge that sends a fixed evaluation prompt to a
chat-completion endpoint and must reply with exactly "true" or "false",
and a deterministic offline rule judge calibrated to the same criteria
(exact match, token containment, a 10% numeric tolerance, and exact
matching for bare four-digit years).

From per-item verdicts we build per-entity accuracy (correct fraction),
its unweighted macro average, and accuracy binned by rank interval with a
largest-relative-drop threshold detector.
"""

from __future__ import annotations

import json
import math
import os
import re
import unicodedata
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import requests

from .errors import DataError, RemoteServiceError
from .pipeline import LlmClient, VqaItem
from .ranking import RankTable

FEW_SHOT_EXAMPLES = """Examples:
Question: Along with the mojave desert, in what desert is this plant found?
Wikipedia_title: Acmispon rigidus
Answer: Sonoran Desert
Prediction: Sonoran
Evaluation: true

Question: How many people can this stadium host?
Wikipedia_title: Mercedes-Benz Stadium
Answer: 71,000 | 75,000
Prediction: 73,000
Evaluation: true

Question: When was this novel first published?
Wikipedia_title: To Kill a Mockingbird
Answer: 1960
Prediction: 1962
Evaluation: false"""

JUDGE_PROMPT_TEMPLATE = """You are an expert evaluator tasked with assessing the correctness of model predictions. Your job is to determine if a given prediction is correct based on the provided information. Follow these strict guidelines:

1. You will be given four pieces of information:
   - Question: The original question asked
   - Wikipedia_title: The title of the Wikipedia article that corresponds to the knowledge base for the question
   - Answer: The correct answer(s) to the question, possibly including multiple candidates separated by "|"
   - Prediction: The model's prediction to be evaluated

2. Understand that the question is specifically about the entity described in the Wikipedia_title.

3. Compare the prediction to the answer(s), taking into account the context of the question and the Wikipedia_title.

4. Apply these strict criteria:
   - The prediction must be accurate and specific.
   - If there are multiple candidate answers separated by "|", the prediction must match at least one of them to be considered true.
   - For numerical answers, the prediction must be within 10% of at least one correct answer to be considered true.
   - For categorical or descriptive answers, the prediction must match the key concepts or categories in at least one of the provided answers.
   - Partial or vague answers that don't fully capture the specificity of any correct answer should be considered false.
   - Pay close attention to units, specificity, and context provided in the question, Wikipedia_title, and answer(s).

5. Your response must be exactly one word:
   - Output "true" if the prediction meets all the criteria for correctness.
   - Output "false" if the prediction fails to meet any of the criteria.

6. Do not provide any explanations or additional comments.

{few_shot_examples}

Remember, your task is to evaluate the correctness of the prediction based on all the information provided. Be strict in your assessment, but consider all given correct answers. Respond only with "true" or "false".

Question: {question}
Wikipedia_title: {wikipedia_title}
Answer: {answer}
Prediction: {prediction}
Evaluation: """


@dataclass(frozen=True)
class Prediction:
    item_id: str
    text: str


@dataclass(frozen=True)
class JudgeVerdict:
    item_id: str
    verdict: bool
    judge_kind: str  # "llm" | "rules"
    raw_reply: str


@dataclass
class EntityAccuracy:
    n_items: int
    n_correct: int
    acc_e: float


@dataclass
class BinAccuracy:
    lo: float
    hi: float | None
    entity_count: int
    acc_macro_in_bin: float | None


@dataclass
class AccuracyReport:
    per_entity: dict[str, EntityAccuracy]
    acc_macro: float
    binned: list[BinAccuracy] | None = None


def render_judge_prompt(
    question: str,
    wikipedia_title: str,
    answer: str | Sequence[str],
    prediction: str,
) -> str:
    """The evaluation prompt, byte-stable for identical inputs.

    ``answer`` may be a single string or a candidate sequence joined with
    " | ".
    """
    if not isinstance(answer, str):
        answer = " | ".join(answer)
    for label, value in (
        ("question", question),
        ("wikipedia_title", wikipedia_title),
        ("answer", answer),
        ("prediction", prediction),
    ):
        if not value:
            raise DataError(f"judge prompt field {label!r} is empty")
    return JUDGE_PROMPT_TEMPLATE.format(
        few_shot_examples=FEW_SHOT_EXAMPLES,
        question=question,
        wikipedia_title=wikipedia_title,
        answer=answer,
        prediction=prediction,
    )


class ChatCompletionClient:
    """Minimal chat-completion HTTP client.

    POSTs {"model", "messages", "temperature"} and reads
    choices[0].message.content. The API key comes from an environment
    variable so it never lands in configs or manifests.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "VISPRIOR_API_KEY",
        temperature: float = 0.0,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self._api_key = os.environ.get(api_key_env, "")

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        try:
            resp = requests.post(
                self.endpoint, json=payload, headers=headers, timeout=self.timeout
            )
            resp.raise_for_status()
            body = resp.json()
            return str(body["choices"][0]["message"]["content"])
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            raise RemoteServiceError(f"chat endpoint failure: {exc}") from exc


def judge_llm(
    client: LlmClient,
    item: VqaItem,
    prediction: Prediction | str,
    retries: int = 3,
) -> JudgeVerdict:
    """Grade one prediction with the LLM judge.

    The reply is trimmed and lowercased; anything other than "true"/"false"
    is retried and finally raised, carrying the item id.
    """
    text = prediction.text if isinstance(prediction, Prediction) else prediction
    prompt = render_judge_prompt(
        item.question, item.entity_name, item.answer_candidates, text
    )
    last_problem = "no attempts made"
    for _ in range(max(1, retries)):
        try:
            reply = client.complete(prompt)
        except RemoteServiceError as exc:
            last_problem = str(exc)
            continue
        normalized = reply.strip().lower()
        if normalized in ("true", "false"):
            return JudgeVerdict(
                item_id=item.item_id,
                verdict=normalized == "true",
                judge_kind="llm",
                raw_reply=reply,
            )
        last_problem = f"non-conforming reply {reply!r}"
    raise RemoteServiceError(
        f"judge failed for item {item.item_id!r} after {retries} attempts: "
        f"{last_problem}"
    )


_PUNCT_RE = re.compile(r"[^\w.\s]", re.UNICODE)
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d)")
_NON_DECIMAL_DOT_RE = re.compile(r"(?<!\d)\.|\.(?!\d)")
_YEAR_RE = re.compile(r"^\d{4}$")


def normalize_for_match(text: str) -> str:
    """NFC, lowercase, thousands separators stripped, punctuation to
    spaces (keeping '.' only as a decimal point), whitespace collapsed."""
    text = unicodedata.normalize("NFC", text).lower()
    text = _THOUSANDS_RE.sub("", text)
    text = _NON_DECIMAL_DOT_RE.sub(" ", text)
    text = _PUNCT_RE.sub(" ", text)
    text = text.replace("_", " ")
    return " ".join(text.split())


def _as_number(normalized: str) -> float | None:
    try:
        return float(normalized)
    except ValueError:
        return None


def _is_bare_year(normalized: str) -> bool:
    return bool(_YEAR_RE.match(normalized)) and 1000 <= int(normalized) <= 2100


def _contains_sequence(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    return any(
        haystack[i : i + len(needle)] == needle
        for i in range(len(haystack) - len(needle) + 1)
    )


def _has_content(tokens: list[str]) -> bool:
    return any(any(c.isalnum() for c in tok) for tok in tokens)


def judge_rules(item: VqaItem, prediction: Prediction | str) -> JudgeVerdict:
    """Deterministic offline judge.

    True iff some answer candidate matches the prediction by (a) normalized
    exact match, (b) contiguous token containment in either direction with
    the shorter side carrying at least one content token, or (c) a numeric
    comparison: within 10% of the candidate, except that bare four-digit
    years (1000-2100) must match exactly.
    """
    text = prediction.text if isinstance(prediction, Prediction) else prediction
    pred_norm = normalize_for_match(text)
    pred_tokens = pred_norm.split()
    pred_number = _as_number(pred_norm)

    verdict = False
    for candidate in item.answer_candidates:
        cand_norm = normalize_for_match(candidate)
        if pred_norm and pred_norm == cand_norm:
            verdict = True
            break
        cand_tokens = cand_norm.split()
        shorter = min((pred_tokens, cand_tokens), key=len)
        if _has_content(shorter) and (
            _contains_sequence(pred_tokens, cand_tokens)
            or _contains_sequence(cand_tokens, pred_tokens)
        ):
            verdict = True
            break
        cand_number = _as_number(cand_norm)
        if pred_number is not None and cand_number is not None:
            if _is_bare_year(cand_norm):
                ok = pred_number == cand_number
            else:
                ok = abs(pred_number - cand_number) <= 0.10 * abs(cand_number)
            if ok:
                verdict = True
                break
    return JudgeVerdict(
        item_id=item.item_id,
        verdict=verdict,
        judge_kind="rules",
        raw_reply="true" if verdict else "false",
    )


def make_judge(
    kind: str,
    client: LlmClient | None = None,
    retries: int = 3,
) -> Callable[[VqaItem, str], JudgeVerdict]:
    """Judge callable for the pipeline filters and the evaluator."""
    if kind == "rules":
        return judge_rules
    if kind == "llm":
        if client is None:
            raise DataError("llm judge requires a configured client")
        return lambda item, text: judge_llm(client, item, text, retries=retries)
    raise DataError(f"unknown judge kind {kind!r}")


def acc_entity(verdicts: Sequence[JudgeVerdict | bool]) -> float:
    """Fraction of true verdicts for one entity."""
    if not verdicts:
        raise DataError("acc_entity needs at least one verdict")
    flags = [v.verdict if isinstance(v, JudgeVerdict) else bool(v) for v in verdicts]
    return sum(flags) / len(flags)


def acc_macro(per_entity_accuracies: Sequence[float]) -> float:
    """Unweighted mean of per-entity accuracies."""
    if not per_entity_accuracies:
        raise DataError("acc_macro needs at least one entity")
    return sum(per_entity_accuracies) / len(per_entity_accuracies)


def accuracy_report(
    items: Sequence[VqaItem], verdicts: Sequence[JudgeVerdict]
) -> AccuracyReport:
    """Assemble per-entity and macro accuracy from item-level verdicts."""
    by_id = {item.item_id: item for item in items}
    grouped: dict[str, list[JudgeVerdict]] = {}
    for verdict in verdicts:
        item = by_id.get(verdict.item_id)
        if item is None:
            raise DataError(f"verdict references unknown item {verdict.item_id!r}")
        grouped.setdefault(item.entity_id, []).append(verdict)
    per_entity = {
        entity_id: EntityAccuracy(
            n_items=len(vs),
            n_correct=sum(1 for v in vs if v.verdict),
            acc_e=acc_entity(vs),
        )
        for entity_id, vs in sorted(grouped.items())
    }
    return AccuracyReport(
        per_entity=per_entity,
        acc_macro=acc_macro([e.acc_e for e in per_entity.values()]),
    )


def binned_accuracy(
    report: AccuracyReport, rank_table: RankTable, edges
) -> AccuracyReport:
    """Per-interval macro accuracy over entities grouped by their rank_e."""
    edges = [float(e) for e in edges]
    if not edges:
        raise DataError("empty edge list")
    intervals: list[tuple[float, float | None]] = [
        (a, b) for a, b in zip(edges, edges[1:])
    ]
    intervals.append((edges[-1], None))

    members: list[list[float]] = [[] for _ in intervals]
    for entity_id, acc in report.per_entity.items():
        result = rank_table.results.get(entity_id)
        if result is None:
            raise DataError(f"entity {entity_id!r} missing from rank table")
        rank_e = result.rank_e
        for i, (lo, hi) in enumerate(intervals):
            if rank_e > lo and (hi is None or rank_e <= hi):
                members[i].append(acc.acc_e)
                break
        else:
            raise DataError(
                f"rank_e {rank_e} of {entity_id!r} below first edge {edges[0]}"
            )

    binned = [
        BinAccuracy(
            lo=lo,
            hi=hi,
            entity_count=len(accs),
            acc_macro_in_bin=acc_macro(accs) if accs else None,
        )
        for (lo, hi), accs in zip(intervals, members)
    ]
    return replace(report, binned=binned)


def detect_threshold(
    binned: AccuracyReport | Sequence[BinAccuracy],
    min_relative_drop: float = 0.5,
) -> float | None:
    """Rank boundary before the steepest relative accuracy drop.

    Scans consecutive non-empty bins; returns the edge between the pair
    with the largest relative drop when that drop exceeds
    ``min_relative_drop``, else None.
    """
    bins = binned.binned if isinstance(binned, AccuracyReport) else list(binned)
    if bins is None:
        raise DataError("report has no binned section")
    occupied = [b for b in bins if b.entity_count > 0]
    if len(occupied) < 2:
        raise DataError("threshold detection needs at least two non-empty bins")
    best_drop = -math.inf
    best_boundary: float | None = None
    for prev, nxt in zip(occupied, occupied[1:]):
        if prev.acc_macro_in_bin is None or nxt.acc_macro_in_bin is None:
            continue
        if prev.acc_macro_in_bin <= 0:
            continue
        drop = (prev.acc_macro_in_bin - nxt.acc_macro_in_bin) / prev.acc_macro_in_bin
        if drop > best_drop:
            best_drop = drop
            best_boundary = prev.hi
    if best_drop > min_relative_drop:
        return best_boundary
    return None


def write_accuracy_csv(report: AccuracyReport, path: str | Path) -> None:
    """CSV columns: entity_id, N_e, correct, acc_e."""
    import csv

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entity_id", "N_e", "correct", "acc_e"])
        for entity_id, acc in sorted(report.per_entity.items()):
            writer.writerow([entity_id, acc.n_items, acc.n_correct, str(acc.acc_e)])


def report_to_json(report: AccuracyReport) -> dict:
    payload: dict = {
        "per_entity": {
            entity_id: {
                "n_items": acc.n_items,
                "n_correct": acc.n_correct,
                "acc_e": acc.acc_e,
            }
            for entity_id, acc in sorted(report.per_entity.items())
        },
        "acc_macro": report.acc_macro,
    }
    if report.binned is not None:
        payload["binned"] = [
            {
                "lo": b.lo,
                "hi": b.hi,
                "entity_count": b.entity_count,
                "acc_macro_in_bin": b.acc_macro_in_bin,
            }
            for b in report.binned
        ]
    return payload


def report_from_json(payload: dict) -> AccuracyReport:
    per_entity = {
        entity_id: EntityAccuracy(
            n_items=int(rec["n_items"]),
            n_correct=int(rec["n_correct"]),
            acc_e=float(rec["acc_e"]),
        )
        for entity_id, rec in payload["per_entity"].items()
    }
    binned = None
    if "binned" in payload:
        binned = [
            BinAccuracy(
                lo=float(b["lo"]),
                hi=None if b["hi"] is None else float(b["hi"]),
                entity_count=int(b["entity_count"]),
                acc_macro_in_bin=(
                    None
                    if b["acc_macro_in_bin"] is None
                    else float(b["acc_macro_in_bin"])
                ),
            )
            for b in payload["binned"]
        ]
    return AccuracyReport(
        per_entity=per_entity,
        acc_macro=float(payload["acc_macro"]),
        binned=binned,
    )


def load_accuracy_report(path: str | Path) -> AccuracyReport:
    try:
        return report_from_json(json.loads(Path(path).read_text()))
    except (KeyError, ValueError) as exc:
        raise DataError(f"cannot parse accuracy report {path}: {exc}") from exc


def load_predictions(path: str | Path) -> list[Prediction]:
    """Line-delimited JSON {item_id, text}."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file not found: {path}")
    out: list[Prediction] = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Prediction(item_id=rec["item_id"], text=str(rec["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: malformed prediction: {exc}") from exc
    return out
