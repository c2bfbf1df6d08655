"""Contrastive adapter training over frozen embeddings.

Entities the encoder ranks poorly are remediated without touching the
encoder itself: a linear map + bias on each side (image and text) is
trained on (image, entity name) pairs with a symmetric InfoNCE loss and a
learnable temperature. Adapters start at identity, so step 0 reproduces
the unadapted embeddings exactly, and every gradient is computed
analytically in closed form (verified against central finite differences
in the tests).

The forward pass for a batch of B pairs with images x_i and texts t_j:

    u_i = normalize(W_img x_i + b_img)
    v_j = normalize(W_txt t_j + b_txt)
    L_ij = (u_i . v_j) / exp(log_temperature)
    loss = 1/2 * (mean_i CE(L_i., i) + mean_j CE(L_.j, j))
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .pipeline import VqaDataset, provenance_to_json, write_ingest_jsonl
from .ranking import rank_all
from .store import EmbeddingStore, save_store, with_embeddings

LOG_TEMP_MIN = math.log(1e-3)
LOG_TEMP_MAX = math.log(100.0)

_PARAM_FIELDS = ("w_img", "b_img", "w_txt", "b_txt", "log_temperature")


@dataclass(frozen=True)
class ContrastivePair:
    image_embedding: np.ndarray
    text_embedding: np.ndarray
    entity_id: str


@dataclass
class AdapterParams:
    """Linear adapters for both towers plus a log-parameterized temperature."""

    w_img: np.ndarray
    b_img: np.ndarray
    w_txt: np.ndarray
    b_txt: np.ndarray
    log_temperature: float

    @classmethod
    def identity(cls, dim: int, temperature: float = 0.07) -> "AdapterParams":
        if temperature <= 0:
            raise DataError(f"temperature must be positive, got {temperature}")
        return cls(
            w_img=np.eye(dim, dtype=np.float64),
            b_img=np.zeros(dim, dtype=np.float64),
            w_txt=np.eye(dim, dtype=np.float64),
            b_txt=np.zeros(dim, dtype=np.float64),
            log_temperature=math.log(temperature),
        )

    @classmethod
    def zeros_like(cls, other: "AdapterParams") -> "AdapterParams":
        return cls(
            w_img=np.zeros_like(other.w_img),
            b_img=np.zeros_like(other.b_img),
            w_txt=np.zeros_like(other.w_txt),
            b_txt=np.zeros_like(other.b_txt),
            log_temperature=0.0,
        )

    @property
    def dim(self) -> int:
        return self.w_img.shape[0]

    @property
    def temperature(self) -> float:
        return math.exp(min(max(self.log_temperature, LOG_TEMP_MIN), LOG_TEMP_MAX))

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            w_img=self.w_img.copy(),
            b_img=self.b_img.copy(),
            w_txt=self.w_txt.copy(),
            b_txt=self.b_txt.copy(),
            log_temperature=self.log_temperature,
        )

    def validate(self) -> None:
        for name in ("w_img", "b_img", "w_txt", "b_txt"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite values in adapter field {name}")
        if not math.isfinite(self.log_temperature):
            raise DataError("non-finite log_temperature")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    initial_temperature: float = 0.07
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "sgd"
    freeze_text: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise DataError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise DataError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.initial_temperature <= 0:
            raise DataError(
                f"initial_temperature must be > 0, got {self.initial_temperature}"
            )
        if self.optimizer not in ("adam", "sgd"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    loss_curve: list[float]
    rank_before: dict[str, float] | None
    rank_after: dict[str, float] | None
    wall_time: float


@dataclass
class RemediationReport:
    per_entity: dict[str, dict[str, float]]  # entity_id -> {before, after, delta}
    mean_delta: float
    fraction_improved: float


def build_pairs(
    perception_dataset: VqaDataset, store: EmbeddingStore
) -> list[ContrastivePair]:
    """One pair per (entity image row, entity text row) of dataset entities."""
    pairs: list[ContrastivePair] = []
    for entity_id in perception_dataset.entity_ids():
        idx = store.catalog.index_of(entity_id)  # raises for missing entities
        rows = store.image_index.get(entity_id, [])
        if not rows:
            raise DataError(f"entity {entity_id!r} has no image rows in the store")
        text = store.text_embeddings.data[idx].astype(np.float64)
        for r in rows:
            pairs.append(
                ContrastivePair(
                    image_embedding=store.image_embeddings.data[r].astype(np.float64),
                    text_embedding=text,
                    entity_id=entity_id,
                )
            )
    return pairs


def _normalize_with_cache(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms < 1e-8):
        bad = int(np.argmin(norms))
        raise DataError(
            f"post-adapter vector {bad} is degenerate (norm {norms[bad]:.3e})"
        )
    return raw / norms[:, None], norms


def contrastive_loss_and_grads(
    batch: Sequence[ContrastivePair], params: AdapterParams
) -> tuple[float, AdapterParams]:
    """Symmetric InfoNCE loss and its exact gradients for one batch.

    Batch entities must be pairwise distinct (the diagonal is the target).
    A single-pair batch is legal and has loss and gradients exactly zero.
    """
    if not batch:
        raise DataError("empty batch")
    ids = [p.entity_id for p in batch]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate entities in batch: {sorted(ids)}")

    x = np.stack([p.image_embedding for p in batch]).astype(np.float64)
    t = np.stack([p.text_embedding for p in batch]).astype(np.float64)
    if x.shape[1] != params.dim or t.shape[1] != params.dim:
        raise DataError(
            f"pair dim {x.shape[1]}/{t.shape[1]} != adapter dim {params.dim}"
        )
    b = x.shape[0]

    a_img = x @ params.w_img.T + params.b_img
    a_txt = t @ params.w_txt.T + params.b_txt
    u, img_norms = _normalize_with_cache(a_img)
    v, txt_norms = _normalize_with_cache(a_txt)

    tau = params.temperature
    s = u @ v.T
    logits = s / tau

    # Row- and column-wise cross entropy with the diagonal as target.
    row_max = logits.max(axis=1, keepdims=True)
    row_lse = row_max[:, 0] + np.log(np.exp(logits - row_max).sum(axis=1))
    col_max = logits.max(axis=0, keepdims=True)
    col_lse = col_max[0, :] + np.log(np.exp(logits - col_max).sum(axis=0))
    diag = np.diag(logits)
    loss = 0.5 * (float(np.mean(row_lse - diag)) + float(np.mean(col_lse - diag)))

    p_row = np.exp(logits - row_lse[:, None])
    p_col = np.exp(logits - col_lse[None, :])
    eye = np.eye(b)
    g_logits = ((p_row - eye) + (p_col - eye)) / (2.0 * b)

    # Temperature gradient is zero when the clamp is active.
    clamped = not (LOG_TEMP_MIN < params.log_temperature < LOG_TEMP_MAX)
    g_log_tau = 0.0 if clamped else float(-(g_logits * logits).sum())

    g_s = g_logits / tau
    g_u = g_s @ v
    g_v = g_s.T @ u
    g_a_img = (g_u - (g_u * u).sum(axis=1, keepdims=True) * u) / img_norms[:, None]
    g_a_txt = (g_v - (g_v * v).sum(axis=1, keepdims=True) * v) / txt_norms[:, None]

    grads = AdapterParams(
        w_img=g_a_img.T @ x,
        b_img=g_a_img.sum(axis=0),
        w_txt=g_a_txt.T @ t,
        b_txt=g_a_txt.sum(axis=0),
        log_temperature=g_log_tau,
    )
    return loss, grads


class _Optimizer:
    """Adam or plain SGD over the adapter's parameter arrays."""

    def __init__(self, config: TrainConfig, params: AdapterParams):
        self.config = config
        self.step_count = 0
        if config.optimizer == "adam":
            self.m = AdapterParams.zeros_like(params)
            self.v = AdapterParams.zeros_like(params)

    def step(self, params: AdapterParams, grads: AdapterParams) -> None:
        cfg = self.config
        self.step_count += 1
        for name in _PARAM_FIELDS:
            g = getattr(grads, name)
            p = getattr(params, name)
            if cfg.optimizer == "adam":
                beta1, beta2, eps = 0.9, 0.999, 1e-8
                m = beta1 * getattr(self.m, name) + (1 - beta1) * g
                v = beta2 * getattr(self.v, name) + (1 - beta2) * np.square(g)
                setattr(self.m, name, m)
                setattr(self.v, name, v)
                m_hat = m / (1 - beta1**self.step_count)
                v_hat = v / (1 - beta2**self.step_count)
                update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            else:
                update = cfg.learning_rate * g
            new = p - update
            if cfg.weight_decay and name != "log_temperature":
                new = new - cfg.learning_rate * cfg.weight_decay * p
            setattr(params, name, new)
        params.log_temperature = float(
            min(max(params.log_temperature, LOG_TEMP_MIN), LOG_TEMP_MAX)
        )


def _dedup_batch(batch: list[ContrastivePair]) -> list[ContrastivePair]:
    seen: set[str] = set()
    out: list[ContrastivePair] = []
    for pair in batch:
        if pair.entity_id in seen:
            continue
        seen.add(pair.entity_id)
        out.append(pair)
    return out


def _rank_excerpt(store: EmbeddingStore, entity_ids: set[str]) -> dict[str, float]:
    table = rank_all(store)
    return {
        entity_id: result.rank_e
        for entity_id, result in sorted(table.results.items())
        if entity_id in entity_ids
    }


def train_adapter(
    pairs: Sequence[ContrastivePair],
    config: TrainConfig,
    store: EmbeddingStore | None = None,
) -> tuple[AdapterParams, TrainReport]:
    """Seeded adapter training; bit-deterministic for a fixed config.

    Adapters start at identity so step 0 matches the unadapted encoder.
    Batches are drawn from a seeded shuffle each epoch; within a batch,
    repeated entities keep only their first pair (the diagonal target must
    be unambiguous) and batches left with fewer than two entities are
    skipped. Passing the source store adds before/after rank excerpts for
    the trained entities to the report.
    """
    pairs = list(pairs)
    entity_ids = {p.entity_id for p in pairs}
    if len(entity_ids) < 2:
        raise DataError(
            f"training needs >= 2 distinct entities, got {len(entity_ids)}"
        )
    dim = pairs[0].image_embedding.shape[0]
    params = AdapterParams.identity(dim, config.initial_temperature)
    optimizer = _Optimizer(config, params)
    rng = np.random.default_rng(config.seed)

    started = time.perf_counter()
    rank_before = _rank_excerpt(store, entity_ids) if store is not None else None

    loss_curve: list[float] = []
    step_index = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            batch = _dedup_batch([pairs[i] for i in order[start : start + config.batch_size]])
            if len(batch) < 2:
                continue
            loss, grads = contrastive_loss_and_grads(batch, params)
            if not math.isfinite(loss):
                raise DataError(f"non-finite loss at step {step_index}")
            if config.freeze_text:
                grads.w_txt = np.zeros_like(grads.w_txt)
                grads.b_txt = np.zeros_like(grads.b_txt)
            optimizer.step(params, grads)
            loss_curve.append(loss)
            step_index += 1

    rank_after = None
    if store is not None:
        rank_after = _rank_excerpt(apply_adapter(store, params), entity_ids)

    report = TrainReport(
        loss_curve=loss_curve,
        rank_before=rank_before,
        rank_after=rank_after,
        wall_time=time.perf_counter() - started,
    )
    params.validate()
    return params, report


def apply_adapter(store: EmbeddingStore, params: AdapterParams) -> EmbeddingStore:
    """Store with adapted, re-normalized embeddings; label suffixed "+vispre"."""
    if store.dim != params.dim:
        raise DataError(f"store dim {store.dim} != adapter dim {params.dim}")
    params.validate()

    def adapt(matrix: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
        raw = matrix.astype(np.float64) @ w.T + bias
        unit, _ = _normalize_with_cache(raw) if raw.size else (raw, None)
        return unit.astype(np.float32)

    return with_embeddings(
        store,
        image=adapt(store.image_embeddings.data, params.w_img, params.b_img),
        text=adapt(store.text_embeddings.data, params.w_txt, params.b_txt),
        encoder_label=store.encoder_label + "+vispre",
    )


def evaluate_remediation(
    store_before: EmbeddingStore,
    store_after: EmbeddingStore,
    entity_ids: Sequence[str] | None = None,
) -> RemediationReport:
    """Side-by-side rank_e before/after for a set of entities."""
    before_ids = [e.entity_id for e in store_before.catalog.entities]
    after_ids = [e.entity_id for e in store_after.catalog.entities]
    if before_ids != after_ids:
        raise DataError("stores have different catalogs")
    table_before = rank_all(store_before)
    table_after = rank_all(store_after)
    if entity_ids is None:
        entity_ids = sorted(table_before.results)
    per_entity: dict[str, dict[str, float]] = {}
    for entity_id in entity_ids:
        if entity_id not in table_before.results:
            raise DataError(f"entity {entity_id!r} has no rank (no images?)")
        before = table_before.results[entity_id].rank_e
        after = table_after.results[entity_id].rank_e
        per_entity[entity_id] = {
            "before": before,
            "after": after,
            "delta": after - before,
        }
    deltas = [rec["delta"] for rec in per_entity.values()]
    return RemediationReport(
        per_entity=per_entity,
        mean_delta=float(np.mean(deltas)) if deltas else 0.0,
        fraction_improved=(
            sum(1 for d in deltas if d < 0) / len(deltas) if deltas else 0.0
        ),
    )


def save_adapter(params: AdapterParams, out_dir: str | Path) -> Path:
    """Raw-tensor-plus-manifest layout, like embedding stores."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in ("w_img", "b_img", "w_txt", "b_txt"):
        arr = np.asarray(getattr(params, name), dtype="<f4")
        path = out_dir / f"{name}.f32"
        arr.tofile(path)
        tensors[name] = {"path": path.name, "shape": list(arr.shape)}
    manifest = {
        "format_version": "1",
        "dim": params.dim,
        "tensors": tensors,
        "log_temperature": params.log_temperature,
    }
    manifest_path = out_dir / "adapter.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_adapter(manifest_path: str | Path) -> AdapterParams:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "adapter.json"
    if not manifest_path.exists():
        raise DataError(f"adapter manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    arrays = {}
    for name in ("w_img", "b_img", "w_txt", "b_txt"):
        spec = manifest["tensors"][name]
        raw = np.fromfile(base / spec["path"], dtype="<f4")
        expected = int(np.prod(spec["shape"]))
        if raw.size != expected:
            raise DataError(
                f"adapter tensor {name} holds {raw.size} values, expected {expected}"
            )
        arrays[name] = raw.reshape(spec["shape"]).astype(np.float64)
    params = AdapterParams(log_temperature=float(manifest["log_temperature"]), **arrays)
    params.validate()
    return params


def export_stage2_bundle(
    store_after: EmbeddingStore,
    knowledge_dataset: VqaDataset,
    path: str | Path,
    seed: int | None = None,
    config: TrainConfig | None = None,
) -> Path:
    """Inputs for an external end-to-end tuning stage, in one directory.

    Contents: the remediated store, the knowledge items (original
    questions, re-ingestable line-delimited JSON) and a bundle manifest
    recording seed, training config and the dataset's provenance log.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    store_manifest = save_store(store_after, path / "store")
    knowledge_path = path / "knowledge.jsonl"
    write_ingest_jsonl(knowledge_dataset, knowledge_path)
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": seed,
        "train_config": None if config is None else vars(config),
        "store_manifest": str(store_manifest.relative_to(path)),
        "knowledge_items": knowledge_path.name,
        "knowledge_count": len(knowledge_dataset.items),
        "provenance": provenance_to_json(knowledge_dataset),
        "encoder_label": store_after.encoder_label,
    }
    bundle_path = path / "bundle.json"
    bundle_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return bundle_path
