"""Entity catalogs and their image/text embedding matrices on disk.

A store is a JSON manifest plus two raw tensor files (row-major
little-endian float32, no header). The manifest schema:

    {
      "format_version": "1",
      "dim": 512,
      "encoder_label": "...",
      "image_tensor": {"path": "images.f32", "rows": 123},
      "text_tensor": {"path": "texts.f32", "rows": 45},
      "normalized": false,
      "entities": [{"entity_id": "...", "name": "...", "images": [0, 1]}]
    }

Embeddings are stored exactly as the encoder produced them; unit
normalization happens at load time so the files stay a faithful encoder
record. A loaded store is immutable and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = "1"

# Tolerances for "is this row already a unit vector".
UNIT_NORM_TOL = 1e-5

_SLUG_RE = re.compile(r"[^a-z0-9]+")


def slugify(name: str) -> str:
    """Lowercase-hyphen identifier for an entity display name."""
    slug = _SLUG_RE.sub("-", name.strip().lower()).strip("-")
    if not slug:
        raise DataError(f"cannot derive an entity_id from name {name!r}")
    return slug


@dataclass(frozen=True)
class Entity:
    entity_id: str
    name: str
    prompt_template_override: str | None = None


@dataclass(frozen=True)
class EntityCatalog:
    """Ordered entity list; text-embedding row j belongs to entities[j]."""

    entities: tuple[Entity, ...]

    def __post_init__(self) -> None:
        index: dict[str, int] = {}
        for i, ent in enumerate(self.entities):
            if not ent.entity_id:
                raise DataError(f"entity with empty entity_id (name={ent.name!r})")
            if ent.entity_id in index:
                raise DataError(f"duplicate entity_id {ent.entity_id!r}")
            index[ent.entity_id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.entities)

    def index_of(self, entity_id: str) -> int:
        try:
            return self._index[entity_id]  # type: ignore[attr-defined]
        except KeyError:
            raise DataError(f"unknown entity_id {entity_id!r}") from None

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._index  # type: ignore[attr-defined]

    def name_of(self, entity_id: str) -> str:
        return self.entities[self.index_of(entity_id)].name


@dataclass
class EmbeddingMatrix:
    """A (rows, dim) float32 matrix with a unit-norm flag."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            bad = int(np.argwhere(~np.isfinite(self.data))[0, 0])
            raise DataError(f"non-finite value in embedding row {bad}")
        if self.normalized and self.rows:
            norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0)
            if off.max(initial=0.0) > UNIT_NORM_TOL:
                bad = int(np.argmax(off))
                raise DataError(
                    f"row {bad} flagged normalized but has norm {norms[bad]:.8f}"
                )


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide every row by its Euclidean norm; idempotent within 1e-7.

    Raises on a zero-norm row, naming it.
    """
    data = matrix.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DataError(f"cannot normalize zero-norm row {int(zero[0])}")
    out = (data / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(out, normalized=True)


@dataclass
class EmbeddingStore:
    """Catalog + embeddings + image index, fully validated.

    ``image_embeddings`` / ``text_embeddings`` hold unit rows (the form all
    downstream math consumes). ``raw_image`` / ``raw_text`` keep the tensors
    exactly as read so that saving reproduces the original payload
    bit-for-bit; for stores built in memory they alias the unit matrices.
    """

    catalog: EntityCatalog
    image_embeddings: EmbeddingMatrix
    text_embeddings: EmbeddingMatrix
    image_index: dict[str, list[int]]
    encoder_label: str = "unknown"
    metadata: dict = field(default_factory=dict)
    raw_image: EmbeddingMatrix | None = None
    raw_text: EmbeddingMatrix | None = None
    raw_normalized_flag: bool = True

    def __post_init__(self) -> None:
        if self.raw_image is None:
            self.raw_image = self.image_embeddings
        if self.raw_text is None:
            self.raw_text = self.text_embeddings
        validate_store(self)

    @property
    def dim(self) -> int:
        return self.text_embeddings.dim

    def image_rows(self, entity_id: str) -> np.ndarray:
        """Unit image embeddings for one entity, in index order."""
        self.catalog.index_of(entity_id)  # raises for unknown ids
        rows = self.image_index.get(entity_id, [])
        return self.image_embeddings.data[rows]


def validate_store(store: EmbeddingStore) -> None:
    """Check every structural invariant, raising DataError on the first break."""
    catalog = store.catalog
    img, txt = store.image_embeddings, store.text_embeddings
    img.validate()
    txt.validate()
    if txt.rows != len(catalog):
        raise DataError(
            f"text embeddings have {txt.rows} rows for {len(catalog)} entities"
        )
    if img.rows and txt.rows and img.dim != txt.dim:
        raise DataError(f"image dim {img.dim} != text dim {txt.dim}")
    if not img.normalized or not txt.normalized:
        raise DataError("store matrices must be unit-normalized in memory")
    for entity_id, rows in store.image_index.items():
        if entity_id not in catalog:
            raise DataError(f"image index references unknown entity {entity_id!r}")
        for r in rows:
            if not 0 <= r < img.rows:
                raise DataError(
                    f"image index for {entity_id!r} references row {r} "
                    f"outside [0, {img.rows})"
                )


def _read_tensor(path: Path, rows: int, dim: int, label: str) -> np.ndarray:
    if not path.exists():
        raise DataError(f"{label} tensor file missing: {path}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != rows * dim:
        raise DataError(
            f"{label} tensor {path} holds {raw.size} values, "
            f"expected rows×dim = {rows}×{dim} = {rows * dim}"
        )
    return raw.reshape(rows, dim)


def load_store(manifest_path: str | Path) -> EmbeddingStore:
    """Load and validate a store; rows are unit-normalized in memory.

    Errors name the offending file, entity or row.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"unsupported format_version {manifest.get('format_version')!r} "
            f"in {manifest_path}"
        )
    for key in ("dim", "image_tensor", "text_tensor", "normalized", "entities"):
        if key not in manifest:
            raise DataError(f"manifest {manifest_path} missing field {key!r}")

    dim = int(manifest["dim"])
    base = manifest_path.parent
    img_spec, txt_spec = manifest["image_tensor"], manifest["text_tensor"]
    raw_img = _read_tensor(base / img_spec["path"], int(img_spec["rows"]), dim, "image")
    raw_txt = _read_tensor(base / txt_spec["path"], int(txt_spec["rows"]), dim, "text")

    entities = []
    image_index: dict[str, list[int]] = {}
    for ent in manifest["entities"]:
        entity = Entity(
            entity_id=ent["entity_id"],
            name=ent["name"],
            prompt_template_override=ent.get("prompt_template_override"),
        )
        entities.append(entity)
        image_index[entity.entity_id] = [int(r) for r in ent.get("images", [])]
    catalog = EntityCatalog(tuple(entities))

    declared_normalized = bool(manifest["normalized"])
    raw_image = EmbeddingMatrix(raw_img, normalized=declared_normalized)
    raw_text = EmbeddingMatrix(raw_txt, normalized=declared_normalized)
    raw_image.validate()
    raw_text.validate()
    if declared_normalized:
        unit_image, unit_text = raw_image, raw_text
    else:
        unit_image = normalize_rows(raw_image)
        unit_text = normalize_rows(raw_text)

    metadata = {
        k: v
        for k, v in manifest.items()
        if k
        not in {
            "format_version",
            "dim",
            "encoder_label",
            "image_tensor",
            "text_tensor",
            "normalized",
            "entities",
        }
    }
    return EmbeddingStore(
        catalog=catalog,
        image_embeddings=unit_image,
        text_embeddings=unit_text,
        image_index=image_index,
        encoder_label=str(manifest.get("encoder_label", "unknown")),
        metadata=metadata,
        raw_image=raw_image,
        raw_text=raw_text,
        raw_normalized_flag=declared_normalized,
    )


def save_store(store: EmbeddingStore, out_dir: str | Path) -> Path:
    """Write manifest + tensor files; returns the manifest path.

    The raw tensors are written untouched, so save(load(p)) reproduces the
    tensor payloads bit-identically.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path, txt_path = out_dir / "images.f32", out_dir / "texts.f32"
    raw_image = store.raw_image if store.raw_image is not None else store.image_embeddings
    raw_text = store.raw_text if store.raw_text is not None else store.text_embeddings
    raw_image.data.astype("<f4").tofile(img_path)
    raw_text.data.astype("<f4").tofile(txt_path)

    entities = []
    for ent in store.catalog.entities:
        record: dict = {
            "entity_id": ent.entity_id,
            "name": ent.name,
            "images": list(store.image_index.get(ent.entity_id, [])),
        }
        if ent.prompt_template_override is not None:
            record["prompt_template_override"] = ent.prompt_template_override
        entities.append(record)

    manifest = {
        "format_version": FORMAT_VERSION,
        "dim": store.dim,
        "encoder_label": store.encoder_label,
        "image_tensor": {"path": img_path.name, "rows": raw_image.rows},
        "text_tensor": {"path": txt_path.name, "rows": raw_text.rows},
        "normalized": store.raw_normalized_flag,
        "entities": entities,
        **store.metadata,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    return manifest_path


def make_store(
    names_and_images: list[tuple[str, np.ndarray]],
    text_embeddings: np.ndarray,
    encoder_label: str = "synthetic",
) -> EmbeddingStore:
    """Build an in-memory store from per-entity image blocks.

    ``names_and_images`` pairs a display name with an (m_e, dim) array;
    ``text_embeddings`` is (n_entities, dim), one row per pair, same order.
    Inputs need not be unit vectors.
    """
    if len(names_and_images) != text_embeddings.shape[0]:
        raise DataError(
            f"{len(names_and_images)} entities but "
            f"{text_embeddings.shape[0]} text rows"
        )
    entities = []
    image_index: dict[str, list[int]] = {}
    blocks = []
    next_row = 0
    for name, images in names_and_images:
        entity_id = slugify(name)
        entities.append(Entity(entity_id=entity_id, name=name))
        images = np.atleast_2d(np.asarray(images, dtype=np.float32))
        image_index[entity_id] = list(range(next_row, next_row + images.shape[0]))
        next_row += images.shape[0]
        blocks.append(images)
    image_data = (
        np.concatenate(blocks, axis=0)
        if blocks
        else np.zeros((0, text_embeddings.shape[1]), dtype=np.float32)
    )
    return EmbeddingStore(
        catalog=EntityCatalog(tuple(entities)),
        image_embeddings=normalize_rows(EmbeddingMatrix(image_data)),
        text_embeddings=normalize_rows(EmbeddingMatrix(text_embeddings)),
        image_index=image_index,
        encoder_label=encoder_label,
    )


def row_norm_fsum(row: np.ndarray) -> float:
    """Euclidean norm via compensated summation; independent check path."""
    return math.sqrt(math.fsum(float(x) * float(x) for x in row))


def with_embeddings(
    store: EmbeddingStore,
    image: np.ndarray,
    text: np.ndarray,
    encoder_label: str | None = None,
) -> EmbeddingStore:
    """New store sharing catalog/index but with replaced (unit) embeddings."""
    unit_img = EmbeddingMatrix(image, normalized=True)
    unit_txt = EmbeddingMatrix(text, normalized=True)
    return replace(
        store,
        image_embeddings=unit_img,
        text_embeddings=unit_txt,
        raw_image=unit_img,
        raw_text=unit_txt,
        raw_normalized_flag=True,
        encoder_label=encoder_label if encoder_label is not None else store.encoder_label,
        metadata=dict(store.metadata),
    )
