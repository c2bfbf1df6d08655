"""
Ranking how well an encoder already knows each entity
=====================================================

A dual-tower encoder maps images and entity texts into one space. For an
entity the encoder "knows", an image of it sits closer to its own text
than to every other candidate text, so the own-text similarity ranks
first. This demo builds a synthetic store with three tiers of entities
(well known, fuzzy, unknown) and walks the rank metric over it.
"""

import numpy as np

from visprior import bin_ranks, rank_all, rank_entity, similarity_row
from visprior.store import make_store

rng = np.random.default_rng(0)
dim = 32

# --- build a store with three knowledge tiers -----------------------------
# texts: one unit vector per entity
n = 60
texts = rng.normal(size=(n, dim))
texts /= np.linalg.norm(texts, axis=1, keepdims=True)

names_and_images = []
for i in range(n):
    if i < 20:          # well known: images sit right on the entity text
        center, noise = texts[i], 0.05
    elif i < 40:        # fuzzy: images drift toward a random direction
        center, noise = 0.6 * texts[i] + 0.8 * rng.normal(size=dim) / np.sqrt(dim), 0.2
    else:               # unknown: images are unrelated to the text
        center, noise = rng.normal(size=dim) / np.sqrt(dim), 0.2
    images = center + noise * rng.normal(size=(3, dim))
    names_and_images.append((f"entity {i:02d}", images))

store = make_store(names_and_images, texts, encoder_label="demo-encoder")

# --- one image, one score row ---------------------------------------------
row = similarity_row(store.image_embeddings.data[0], store.text_embeddings, target_index=0)
print("scores for image 0 against all", len(row.scores), "candidate texts")
print("own-text score:", round(float(row.scores[0]), 3),
      " best other:", round(float(np.delete(row.scores, 0).max()), 3))

# --- per-entity rank: mean over the entity's images ------------------------
print("\nper-entity view")
for entity_id in ("entity-00", "entity-25", "entity-55"):
    result = rank_entity(store, entity_id)
    print(f"  {entity_id}: per-image ranks {result.per_image_ranks} -> rank_e {result.rank_e:.2f}")

# --- the whole catalog at once ----------------------------------------------
table = rank_all(store)
ranks = np.array([r.rank_e for r in table.results.values()])
print("\ncatalog of", len(ranks), "entities")
print("  rank_e = 1 (fully known):", int((ranks == 1).sum()))
print("  mean rank_e:", round(float(ranks.mean()), 2))

# --- binned view, the shape the reports use ----------------------------------
binning = bin_ranks(table, edges=[0, 5, 10, 20, 40])
for b in binning.bins:
    hi = "inf" if b.hi is None else f"{b.hi:g}"
    print(f"  ({b.lo:g}, {hi}]: {len(b.entity_ids)} entities")
