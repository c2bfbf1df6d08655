"""Prior-knowledge ranking of catalog entities.

For each image of an entity we score it against every candidate entity
text (cosine on unit vectors), sort the scores descending, and record the
position of the entity's own text. The per-entity mean of those positions
is ``rank_e``: 1 is optimal, larger means the encoder knows the entity
less well. Any strictly increasing rescoring (temperature, logit bias)
leaves these positions unchanged, which is why plain cosine is canonical
here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import DataError
from .store import EmbeddingMatrix, EmbeddingStore

TiePolicy = Literal["pessimistic", "optimistic"]

DEFAULT_PROMPT_TEMPLATE = "a photo of {name}"

# Rank interval scheme used for the headline binned reports.
DEFAULT_EDGES = (0, 500, 1000, 1500, 2000, 2500, 3000)


@dataclass
class SimilarityRow:
    """Scores of one image against every catalog text (s_j per entity j)."""

    scores: np.ndarray
    target_index: int

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.scores)):
            raise DataError("similarity row contains non-finite scores")
        if not 0 <= self.target_index < self.scores.size:
            raise DataError(
                f"target_index {self.target_index} outside catalog of "
                f"{self.scores.size}"
            )


@dataclass
class RankResult:
    entity_id: str
    per_image_ranks: list[int]
    rank_e: float


@dataclass
class RankTable:
    results: dict[str, RankResult]
    catalog_size: int
    tie_policy: TiePolicy


@dataclass
class RankBin:
    lo: float
    hi: float | None  # None in the final open-ended bin
    entity_ids: list[str]


@dataclass
class RankBinning:
    edges: list[float]
    bins: list[RankBin]


def similarity_row(
    image_row: np.ndarray,
    text_matrix: EmbeddingMatrix | np.ndarray,
    target_index: int,
) -> SimilarityRow:
    """Cosine scores of one unit image vector against all unit text rows."""
    texts = text_matrix.data if isinstance(text_matrix, EmbeddingMatrix) else text_matrix
    image_row = np.asarray(image_row, dtype=np.float64).ravel()
    if image_row.shape[0] != texts.shape[1]:
        raise DataError(
            f"image dim {image_row.shape[0]} != text dim {texts.shape[1]}"
        )
    scores = texts.astype(np.float64) @ image_row
    return SimilarityRow(scores=scores, target_index=target_index)


def rank_of_target(row: SimilarityRow, tie_policy: TiePolicy = "pessimistic") -> int:
    """Position of the target's score in the descending-ordered scores.

    Pessimistic: ties count against the target
    (rank = 1 + #{j != target : s_j >= s_target}); optimistic counts only
    strictly larger scores.
    """
    target = row.scores[row.target_index]
    if tie_policy == "pessimistic":
        # The target itself satisfies >=, supplying the "1 +".
        return int(np.count_nonzero(row.scores >= target))
    if tie_policy == "optimistic":
        return int(np.count_nonzero(row.scores > target)) + 1
    raise DataError(f"unknown tie policy {tie_policy!r}")


def rank_entity(
    store: EmbeddingStore,
    entity_id: str,
    tie_policy: TiePolicy = "pessimistic",
) -> RankResult:
    """Per-image ranks for one entity and their arithmetic mean."""
    target_index = store.catalog.index_of(entity_id)
    image_rows = store.image_rows(entity_id)
    if image_rows.shape[0] == 0:
        raise DataError(f"entity {entity_id!r} has no image rows")
    texts = store.text_embeddings.data.astype(np.float64)
    scores = image_rows.astype(np.float64) @ texts.T  # (m, n)
    target_scores = scores[:, target_index]
    if tie_policy == "pessimistic":
        ranks = (scores >= target_scores[:, None]).sum(axis=1)
    elif tie_policy == "optimistic":
        ranks = (scores > target_scores[:, None]).sum(axis=1) + 1
    else:
        raise DataError(f"unknown tie policy {tie_policy!r}")
    per_image = [int(r) for r in ranks]
    return RankResult(
        entity_id=entity_id,
        per_image_ranks=per_image,
        rank_e=float(np.mean(per_image)),
    )


def rank_all(
    store: EmbeddingStore, tie_policy: TiePolicy = "pessimistic"
) -> RankTable:
    """RankResult for every catalog entity that has at least one image."""
    results: dict[str, RankResult] = {}
    for ent in store.catalog.entities:
        if not store.image_index.get(ent.entity_id):
            continue
        try:
            results[ent.entity_id] = rank_entity(store, ent.entity_id, tie_policy)
        except DataError as exc:
            raise DataError(f"ranking {ent.entity_id!r}: {exc}") from exc
    return RankTable(
        results=results,
        catalog_size=len(store.catalog),
        tie_policy=tie_policy,
    )


def bin_ranks(table: RankTable, edges) -> RankBinning:
    """Partition ranked entities into (lo, hi] intervals plus a final open bin.

    ``edges`` must be strictly ascending with first edge >= 0; an entity
    whose rank_e lies at or below the first edge cannot be placed and is an
    error.
    """
    edges = [float(e) for e in edges]
    if not edges:
        raise DataError("empty edge list")
    if edges[0] < 0:
        raise DataError(f"first edge must be >= 0, got {edges[0]}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise DataError(f"edges must be strictly ascending: {edges}")

    bins = [RankBin(lo=a, hi=b, entity_ids=[]) for a, b in zip(edges, edges[1:])]
    bins.append(RankBin(lo=edges[-1], hi=None, entity_ids=[]))

    for entity_id in sorted(table.results):
        rank_e = table.results[entity_id].rank_e
        if rank_e <= edges[0]:
            raise DataError(
                f"rank_e {rank_e} of {entity_id!r} is at or below the first "
                f"edge {edges[0]}; no bin contains it"
            )
        placed = False
        for b in bins:
            if rank_e > b.lo and (b.hi is None or rank_e <= b.hi):
                b.entity_ids.append(entity_id)
                placed = True
                break
        assert placed  # guaranteed by the edge checks above
    return RankBinning(edges=edges, bins=bins)


def geometric_edges(max_power: int = 10) -> list[float]:
    """Doubling-width rank intervals: (0,2], (2,4], (4,8], ... (512,1024]."""
    return [0.0] + [float(2**k) for k in range(1, max_power + 1)]


def write_rank_csv(table: RankTable, store: EmbeddingStore, path: str | Path) -> None:
    """CSV columns: entity_id, name, m, rank_e, per-image ranks joined by ';'."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entity_id", "name", "m", "rank_e", "per_image_ranks"])
        for ent in store.catalog.entities:
            result = table.results.get(ent.entity_id)
            if result is None:
                continue
            writer.writerow(
                [
                    result.entity_id,
                    ent.name,
                    len(result.per_image_ranks),
                    str(result.rank_e),
                    ";".join(str(r) for r in result.per_image_ranks),
                ]
            )


def rank_table_to_json(table: RankTable) -> dict:
    return {
        "catalog_size": table.catalog_size,
        "tie_policy": table.tie_policy,
        "results": {
            entity_id: {
                "per_image_ranks": r.per_image_ranks,
                "rank_e": r.rank_e,
            }
            for entity_id, r in sorted(table.results.items())
        },
    }


def rank_table_from_json(payload: dict) -> RankTable:
    results = {
        entity_id: RankResult(
            entity_id=entity_id,
            per_image_ranks=[int(x) for x in rec["per_image_ranks"]],
            rank_e=float(rec["rank_e"]),
        )
        for entity_id, rec in payload["results"].items()
    }
    return RankTable(
        results=results,
        catalog_size=int(payload["catalog_size"]),
        tie_policy=payload.get("tie_policy", "pessimistic"),
    )


def load_rank_table(path: str | Path) -> RankTable:
    try:
        return rank_table_from_json(json.loads(Path(path).read_text()))
    except (KeyError, ValueError) as exc:
        raise DataError(f"cannot parse rank table {path}: {exc}") from exc


def binning_to_json(binning: RankBinning) -> dict:
    return {
        "edges": binning.edges,
        "bins": [
            {"lo": b.lo, "hi": b.hi, "entity_ids": b.entity_ids}
            for b in binning.bins
        ],
    }
