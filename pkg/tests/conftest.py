from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from visprior.store import (
    EmbeddingMatrix,
    EmbeddingStore,
    Entity,
    EntityCatalog,
    make_store,
    normalize_rows,
)


def build_random_store(
    rng: np.random.Generator,
    n_entities: int,
    max_images: int = 5,
    dim: int = 8,
) -> EmbeddingStore:
    """Random unit-vector store; every entity gets 1..max_images images."""
    names_and_images = []
    for i in range(n_entities):
        m = int(rng.integers(1, max_images + 1))
        names_and_images.append((f"entity {i}", rng.normal(size=(m, dim))))
    texts = rng.normal(size=(n_entities, dim))
    return make_store(names_and_images, texts)


def build_identity_store(n: int = 3) -> EmbeddingStore:
    """Each entity has one image equal to its own orthonormal text row."""
    eye = np.eye(n, dtype=np.float32)
    return make_store([(f"entity {i}", eye[i : i + 1]) for i in range(n)], eye)


@pytest.fixture
def tiny_store() -> EmbeddingStore:
    return build_identity_store(3)


def write_raw_records(path: Path, records: list[dict]) -> Path:
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


class ScriptedLlm:
    """LLM stand-in answering from a prompt -> reply mapping or a default."""

    def __init__(self, replies: dict[str, str] | None = None, default: str = "I don't know"):
        self.replies = replies or {}
        self.default = default
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        return self.replies.get(prompt, self.default)


class FlakyLlm:
    """Fails n times per prompt before succeeding with the given reply."""

    def __init__(self, reply: str, failures: int):
        from visprior.errors import RemoteServiceError

        self.reply = reply
        self.failures = failures
        self.calls = 0
        self._error = RemoteServiceError

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if self.calls <= self.failures:
            raise self._error("transport down")
        return self.reply
