from __future__ import annotations

import json
import math

import numpy as np
import pytest

from visprior.errors import DataError
from visprior.pipeline import VqaDataset, VqaItem, ingest_vqa
from visprior.ranking import rank_all
from visprior.remediation import (
    AdapterParams,
    ContrastivePair,
    TrainConfig,
    apply_adapter,
    build_pairs,
    contrastive_loss_and_grads,
    evaluate_remediation,
    export_stage2_bundle,
    load_adapter,
    save_adapter,
    train_adapter,
)
from visprior.store import load_store, make_store, validate_store

from conftest import build_identity_store, build_random_store


# --- fixtures ---------------------------------------------------------------

def unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def random_pairs(rng: np.random.Generator, n: int, dim: int) -> list[ContrastivePair]:
    return [
        ContrastivePair(
            image_embedding=unit(rng.normal(size=dim)),
            text_embedding=unit(rng.normal(size=dim)),
            entity_id=f"e{i}",
        )
        for i in range(n)
    ]


def random_params(rng: np.random.Generator, dim: int) -> AdapterParams:
    return AdapterParams(
        w_img=np.eye(dim) + 0.3 * rng.normal(size=(dim, dim)),
        b_img=0.2 * rng.normal(size=dim),
        w_txt=np.eye(dim) + 0.3 * rng.normal(size=(dim, dim)),
        b_txt=0.2 * rng.normal(size=dim),
        log_temperature=float(rng.uniform(math.log(0.05), math.log(2.0))),
    )


def separable_store(seed: int = 0, n: int = 32, dim: int = 16, m: int = 2, noise: float = 0.05):
    """Entities whose image clusters map onto their texts under a known
    rotation; linearly solvable by construction."""
    rng = np.random.default_rng(seed)
    rotation, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    texts = rng.normal(size=(n, dim))
    texts /= np.linalg.norm(texts, axis=1, keepdims=True)
    blocks = []
    for i in range(n):
        base = rotation.T @ texts[i]
        blocks.append((f"entity {i}", base[None, :] + noise * rng.normal(size=(m, dim))))
    return make_store(blocks, texts)


def perception_dataset_for(store) -> VqaDataset:
    items = [
        VqaItem(
            item_id=f"p-{ent.entity_id}",
            entity_id=ent.entity_id,
            entity_name=ent.name,
            question="What is this image about?",
            answer_candidates=(ent.name,),
            image_ref=f"img/{ent.entity_id}.jpg",
        )
        for ent in store.catalog.entities
    ]
    return VqaDataset(items=items)


SEPARABLE_CONFIG = TrainConfig(learning_rate=0.02, epochs=100, batch_size=32, seed=7)


# --- finite-difference oracle --------------------------------------------------

def finite_difference_grads(
    batch: list[ContrastivePair], params: AdapterParams, h: float = 1e-4
) -> AdapterParams:
    """Central differences over every parameter component."""

    def loss_at(p: AdapterParams) -> float:
        return contrastive_loss_and_grads(batch, p)[0]

    fd = AdapterParams.zeros_like(params)
    for name in ("w_img", "b_img", "w_txt", "b_txt"):
        arr = getattr(params, name)
        out = getattr(fd, name)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            plus = loss_at(params)
            arr[idx] = orig - h
            minus = loss_at(params)
            arr[idx] = orig
            out[idx] = (plus - minus) / (2.0 * h)
            it.iternext()
    orig = params.log_temperature
    params.log_temperature = orig + h
    plus = loss_at(params)
    params.log_temperature = orig - h
    minus = loss_at(params)
    params.log_temperature = orig
    fd.log_temperature = (plus - minus) / (2.0 * h)
    return fd


def assert_grads_close(analytic: AdapterParams, fd: AdapterParams, rtol=1e-4, floor=1e-8):
    for name in ("w_img", "b_img", "w_txt", "b_txt"):
        a = np.asarray(getattr(analytic, name), dtype=float)
        b = np.asarray(getattr(fd, name), dtype=float)
        tol = np.maximum(floor, rtol * np.maximum(np.abs(a), np.abs(b)))
        worst = np.max(np.abs(a - b) - tol)
        assert worst <= 0, f"{name}: worst excess {worst:.3e}"
    a, b = analytic.log_temperature, fd.log_temperature
    assert abs(a - b) <= max(floor, rtol * max(abs(a), abs(b)))


# --- build pairs -----------------------------------------------------------------

class TestBuildPairs:
    def test_one_pair_per_entity_image(self):
        store = make_store(
            [("a", np.eye(3)[:2]), ("b", np.eye(3)[2:3])], np.eye(3)[[0, 2]]
        )
        ds = perception_dataset_for(store)
        pairs = build_pairs(ds, store)
        assert len(pairs) == 3
        a_pairs = [p for p in pairs if p.entity_id == "a"]
        assert len(a_pairs) == 2
        np.testing.assert_array_equal(a_pairs[0].text_embedding, a_pairs[1].text_embedding)

    def test_empty_dataset_empty_pairs(self, tiny_store):
        assert build_pairs(VqaDataset(items=[]), tiny_store) == []

    def test_pair_count_equals_image_rows(self):
        rng = np.random.default_rng(90)
        store = build_random_store(rng, 90, max_images=4, dim=8)
        ds = perception_dataset_for(store)
        expected = sum(len(rows) for rows in store.image_index.values())
        assert len(build_pairs(ds, store)) == expected

    def test_missing_entity_is_error(self, tiny_store):
        ds = VqaDataset(
            items=[
                VqaItem("x", "ghost", "Ghost", "What is this image about?", ("Ghost",), "i.jpg")
            ]
        )
        with pytest.raises(DataError, match="ghost"):
            build_pairs(ds, tiny_store)


# --- loss fixtures ------------------------------------------------------------------

class TestContrastiveLoss:
    def test_single_pair_loss_is_exactly_zero(self):
        rng = np.random.default_rng(0)
        batch = random_pairs(rng, 1, 6)
        loss, grads = contrastive_loss_and_grads(batch, AdapterParams.identity(6))
        assert loss == 0.0
        for name in ("w_img", "b_img", "w_txt", "b_txt"):
            assert np.all(getattr(grads, name) == 0.0)
        assert grads.log_temperature == 0.0

    def test_two_orthonormal_matched_pairs_identity_temperature_one(self):
        # independent oracle for the 2x2 softmax cross entropy with logits
        # [[1,0],[0,1]]: per direction, loss = log(1 + e^(-1))
        expected = math.log(1.0 + math.exp(-1.0))
        batch = [
            ContrastivePair(np.array([1.0, 0.0]), np.array([1.0, 0.0]), "a"),
            ContrastivePair(np.array([0.0, 1.0]), np.array([0.0, 1.0]), "b"),
        ]
        params = AdapterParams.identity(2, temperature=1.0)
        loss, _ = contrastive_loss_and_grads(batch, params)
        assert loss == pytest.approx(expected, abs=1e-6)

    def test_duplicate_entities_rejected(self):
        batch = [
            ContrastivePair(np.array([1.0, 0.0]), np.array([1.0, 0.0]), "same"),
            ContrastivePair(np.array([0.0, 1.0]), np.array([0.0, 1.0]), "same"),
        ]
        with pytest.raises(DataError, match="duplicate"):
            contrastive_loss_and_grads(batch, AdapterParams.identity(2))

    def test_degenerate_post_adapter_vector_rejected(self):
        batch = [
            ContrastivePair(np.array([1.0, 0.0]), np.array([1.0, 0.0]), "a"),
            ContrastivePair(np.array([0.0, 1.0]), np.array([0.0, 1.0]), "b"),
        ]
        params = AdapterParams.identity(2)
        params.w_img = np.zeros((2, 2))
        with pytest.raises(DataError, match="degenerate"):
            contrastive_loss_and_grads(batch, params)

    def test_loss_symmetric_under_side_swap(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            batch = random_pairs(rng, 5, 7)
            params = random_params(rng, 7)
            swapped_batch = [
                ContrastivePair(p.text_embedding, p.image_embedding, p.entity_id)
                for p in batch
            ]
            swapped_params = AdapterParams(
                w_img=params.w_txt,
                b_img=params.b_txt,
                w_txt=params.w_img,
                b_txt=params.b_img,
                log_temperature=params.log_temperature,
            )
            loss, _ = contrastive_loss_and_grads(batch, params)
            loss_swapped, _ = contrastive_loss_and_grads(swapped_batch, swapped_params)
            assert loss == pytest.approx(loss_swapped, rel=1e-12)

    def test_gradients_match_central_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            dim = int(rng.integers(3, 9))
            b = int(rng.integers(2, 6))
            batch = random_pairs(rng, b, dim)
            params = random_params(rng, dim)
            _, analytic = contrastive_loss_and_grads(batch, params)
            fd = finite_difference_grads(batch, params)
            assert_grads_close(analytic, fd)

    def test_temperature_gradient_zero_when_clamped(self):
        rng = np.random.default_rng(3)
        batch = random_pairs(rng, 3, 4)
        params = random_params(rng, 4)
        params.log_temperature = math.log(1e-3)  # at the clamp boundary
        _, grads = contrastive_loss_and_grads(batch, params)
        assert grads.log_temperature == 0.0


# --- training -----------------------------------------------------------------------

class TestTrainAdapter:
    def test_zero_learning_rate_is_a_no_op(self):
        store = separable_store()
        pairs = build_pairs(perception_dataset_for(store), store)
        config = TrainConfig(learning_rate=0.0, epochs=1, batch_size=32, seed=0)
        params, report = train_adapter(pairs, config, store=store)
        np.testing.assert_array_equal(params.w_img, np.eye(16))
        np.testing.assert_array_equal(params.b_img, np.zeros(16))
        assert params.log_temperature == math.log(config.initial_temperature)
        assert report.rank_after == report.rank_before

    def test_zero_epochs_invalid(self):
        with pytest.raises(DataError, match="epochs"):
            TrainConfig(epochs=0)

    def test_batch_size_one_invalid(self):
        with pytest.raises(DataError, match="batch_size"):
            TrainConfig(batch_size=1)

    def test_needs_two_distinct_entities(self):
        rng = np.random.default_rng(0)
        pair = random_pairs(rng, 1, 4)[0]
        with pytest.raises(DataError, match="2 distinct"):
            train_adapter([pair, pair], TrainConfig())

    def test_separable_fixture_reaches_rank_one(self):
        store = separable_store()
        pairs = build_pairs(perception_dataset_for(store), store)
        params, report = train_adapter(pairs, SEPARABLE_CONFIG, store=store)
        assert len(report.loss_curve) <= 200
        after = list(report.rank_after.values())
        assert np.mean([r == 1.0 for r in after]) >= 0.90
        assert np.mean(after) < np.mean(list(report.rank_before.values()))

    def test_loss_curve_finite_and_decreasing_epoch_means(self):
        store = separable_store()
        pairs = build_pairs(perception_dataset_for(store), store)
        _, report = train_adapter(pairs, SEPARABLE_CONFIG, store=store)
        curve = np.asarray(report.loss_curve)
        assert np.all(np.isfinite(curve))
        steps_per_epoch = len(curve) // SEPARABLE_CONFIG.epochs
        first = curve[:steps_per_epoch].mean()
        last = curve[-steps_per_epoch:].mean()
        assert last <= first

    def test_deterministic_for_fixed_seed(self):
        store = separable_store()
        pairs = build_pairs(perception_dataset_for(store), store)
        config = TrainConfig(learning_rate=0.05, epochs=5, batch_size=16, seed=3)
        p1, r1 = train_adapter(pairs, config)
        p2, r2 = train_adapter(pairs, config)
        np.testing.assert_array_equal(p1.w_img, p2.w_img)
        np.testing.assert_array_equal(p1.w_txt, p2.w_txt)
        assert p1.log_temperature == p2.log_temperature
        assert r1.loss_curve == r2.loss_curve

    def test_freeze_text_keeps_text_side_at_identity(self):
        store = separable_store()
        pairs = build_pairs(perception_dataset_for(store), store)
        config = TrainConfig(learning_rate=0.05, epochs=3, batch_size=16, seed=1, freeze_text=True)
        params, _ = train_adapter(pairs, config)
        np.testing.assert_array_equal(params.w_txt, np.eye(16))
        np.testing.assert_array_equal(params.b_txt, np.zeros(16))
        assert not np.array_equal(params.w_img, np.eye(16))

    def test_sgd_also_learns(self):
        store = separable_store()
        pairs = build_pairs(perception_dataset_for(store), store)
        config = TrainConfig(learning_rate=0.5, epochs=60, batch_size=32, seed=2, optimizer="sgd")
        params, report = train_adapter(pairs, config, store=store)
        assert np.mean(list(report.rank_after.values())) < np.mean(
            list(report.rank_before.values())
        )


# --- apply / evaluate -----------------------------------------------------------------

class TestApplyAdapter:
    def test_identity_params_reproduce_store(self, tiny_store):
        out = apply_adapter(tiny_store, AdapterParams.identity(3))
        assert np.max(np.abs(out.image_embeddings.data - tiny_store.image_embeddings.data)) <= 1e-6
        assert np.max(np.abs(out.text_embeddings.data - tiny_store.text_embeddings.data)) <= 1e-6
        assert out.encoder_label == tiny_store.encoder_label + "+vispre"

    def test_identity_keeps_ranks_at_step_zero(self):
        rng = np.random.default_rng(8)
        store = build_random_store(rng, 20, max_images=3, dim=8)
        out = apply_adapter(store, AdapterParams.identity(8))
        before = rank_all(store)
        after = rank_all(out)
        for entity_id in before.results:
            assert before.results[entity_id].per_image_ranks == after.results[entity_id].per_image_ranks

    def test_trained_params_remediate_ranks(self):
        store = separable_store()
        pairs = build_pairs(perception_dataset_for(store), store)
        params, _ = train_adapter(pairs, SEPARABLE_CONFIG)
        table = rank_all(apply_adapter(store, params))
        frac_one = np.mean([r.rank_e == 1.0 for r in table.results.values()])
        assert frac_one >= 0.90

    def test_output_store_validates(self):
        rng = np.random.default_rng(4)
        store = build_random_store(rng, 6, max_images=2, dim=5)
        params = random_params(rng, 5)
        out = apply_adapter(store, params)
        validate_store(out)
        norms = np.linalg.norm(out.image_embeddings.data.astype(np.float64), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-5)

    def test_dim_mismatch(self, tiny_store):
        with pytest.raises(DataError, match="dim"):
            apply_adapter(tiny_store, AdapterParams.identity(5))


class TestEvaluateRemediation:
    def test_identical_stores_all_deltas_zero(self, tiny_store):
        report = evaluate_remediation(tiny_store, tiny_store)
        assert all(rec["delta"] == 0.0 for rec in report.per_entity.values())
        assert report.mean_delta == 0.0
        assert report.fraction_improved == 0.0

    def test_rank_516_to_10_reports_delta(self):
        n = 600
        rng = np.random.default_rng(516)
        texts = np.eye(n, dtype=np.float32)
        # target's own text gets a smaller weight than exactly 515 others
        before_img = np.full(n, 1e-4)
        better = rng.choice([j for j in range(n) if j != 0], size=515, replace=False)
        before_img[better] = 0.04
        before_img[0] = 0.03
        after_img = np.full(n, 1e-4)
        nine = rng.choice([j for j in range(n) if j != 0], size=9, replace=False)
        after_img[nine] = 0.9
        after_img[0] = 0.5
        names = [(f"entity {i}", np.eye(n)[i : i + 1]) for i in range(n)]
        names[0] = ("entity 0", before_img[None, :])
        store_before = make_store(names, texts)
        names[0] = ("entity 0", after_img[None, :])
        store_after = make_store(names, texts)
        report = evaluate_remediation(store_before, store_after, ["entity-0"])
        rec = report.per_entity["entity-0"]
        assert rec["before"] == 516.0
        assert rec["after"] == 10.0
        assert rec["delta"] == -506.0

    def test_fraction_improved_in_unit_interval(self):
        rng = np.random.default_rng(5)
        store = build_random_store(rng, 10, max_images=2, dim=6)
        other = apply_adapter(store, random_params(rng, 6))
        report = evaluate_remediation(store, other)
        assert 0.0 <= report.fraction_improved <= 1.0

    def test_catalog_mismatch_rejected(self, tiny_store):
        other = build_identity_store(4)
        with pytest.raises(DataError, match="catalog"):
            evaluate_remediation(tiny_store, other)


# --- serialization ------------------------------------------------------------------------

class TestAdapterSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        params = random_params(rng, 6)
        manifest = save_adapter(params, tmp_path / "adapter")
        loaded = load_adapter(manifest)
        # float32 storage keeps ~1e-7 relative precision
        np.testing.assert_allclose(loaded.w_img, params.w_img, rtol=1e-6, atol=1e-6)
        assert loaded.log_temperature == params.log_temperature


class TestStage2Bundle:
    def test_bundle_reloads_without_loss(self, tmp_path):
        store = separable_store(n=8)
        raw = [
            {
                "question": f"When was landmark {i} built?",
                "answer": f"{1900 + i}",
                "entity_name": f"entity {i}",
                "image": f"img/{i}.jpg",
            }
            for i in range(8)
        ]
        src = tmp_path / "knowledge_src.jsonl"
        with src.open("w") as fh:
            for rec in raw:
                fh.write(json.dumps(rec) + "\n")
        knowledge = ingest_vqa(src)
        config = TrainConfig(seed=5)
        bundle = export_stage2_bundle(store, knowledge, tmp_path / "stage2", seed=5, config=config)
        manifest = json.loads(bundle.read_text())

        reloaded_store = load_store(tmp_path / "stage2" / manifest["store_manifest"])
        assert reloaded_store.text_embeddings.rows == 8
        reloaded_items = ingest_vqa(tmp_path / "stage2" / manifest["knowledge_items"])
        assert [i.question for i in reloaded_items.items] == [r["question"] for r in raw]
        assert manifest["seed"] == 5
        assert manifest["train_config"]["seed"] == 5
        assert manifest["provenance"][0]["step"] == "ingest"

    def test_knowledge_items_keep_original_questions(self, tmp_path):
        store = separable_store(n=4)
        items = [
            VqaItem(
                item_id=f"k{i}",
                entity_id=f"entity-{i}",
                entity_name=f"entity {i}",
                question=f"What year did event {i} happen?",
                answer_candidates=(str(1950 + i),),
                image_ref=f"img/{i}.jpg",
            )
            for i in range(4)
        ]
        export_stage2_bundle(store, VqaDataset(items=items), tmp_path / "b")
        lines = (tmp_path / "b" / "knowledge.jsonl").read_text().strip().splitlines()
        questions = [json.loads(line)["question"] for line in lines]
        assert questions == [f"What year did event {i} happen?" for i in range(4)]
        assert all("What is this image about?" not in q for q in questions)
