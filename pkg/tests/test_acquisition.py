import numpy as np
import pytest

from conftest import real, synth
from pas.acquisition import (AcquisitionConfig, CaptionSet, generate_all_captions, generate_captions,
                             load_caption_sets, merge_pools, retrieve_all, retrieve_for_concept,
                             save_caption_sets, synthesize_all, synthesize_for_captions)
from pas.concepts import GENERATED, Concept, DomainSpec, concept_id
from pas.errors import IntegrityError, StageError, TransportError
from pas.gateway import FailingProvider, FunctionChat, HashEmbedder, MockImageGen, OfflineChat
from pas.index import build_store
from pas.records import REAL, SYNTHETIC, ImageRecord, load_records, save_records

DOMAIN = DomainSpec("food", "dishes")


def concept(text):
    key = text.casefold()
    return Concept(concept_id(key), text, key, GENERATED, None, 0, "accepted")


def test_config_violations():
    assert AcquisitionConfig().violations() == []
    assert len(AcquisitionConfig(per_concept_real=0, n_cap=0, n_synth=0).violations()) == 3
    d = AcquisitionConfig()
    assert (d.per_concept_real, d.n_cap, d.n_synth) == (500, 5, 35)


def test_record_invariants():
    with pytest.raises(ValueError):
        ImageRecord("s1", "u", SYNTHETIC, "c", None)
    with pytest.raises(ValueError):
        ImageRecord("r1", "u", REAL, "c", None, None)
    with pytest.raises(ValueError):
        ImageRecord("r1", "u", REAL, "c", None, 1.5)


# -- retrieval -------------------------------------------------------------------------

def test_planted_images_rank_first(rng):
    emb = HashEmbedder(16)
    t = emb.vector("Paella")
    vecs = rng.standard_normal((10, 16))
    planted = [2, 5, 7]
    vecs[planted] = t * np.array([[1.0], [2.0], [3.0]])
    ids = [f"mock://img/{i}" for i in range(10)]
    out = retrieve_for_concept(concept("Paella"), emb, build_store(ids, vecs, "clip"),
                               AcquisitionConfig(per_concept_real=3))
    assert {r.uri for r in out} == {ids[i] for i in planted}
    assert all(r.retrieval_similarity == pytest.approx(1.0) for r in out)


def test_similarities_non_increasing_per_concept(rng):
    emb = HashEmbedder(8)
    store = build_store([f"u{i}" for i in range(200)], rng.standard_normal((200, 8)))
    out = retrieve_for_concept(concept("Ramen"), emb, store, AcquisitionConfig(per_concept_real=50))
    sims = [r.retrieval_similarity for r in out]
    assert sims == sorted(sims, reverse=True) and len(out) == 50


def test_cross_concept_collapse_prefers_higher_similarity():
    a, b = concept("Alpha"), concept("Beta")
    emb = HashEmbedder(4, overrides={"Alpha": np.array([1.0, 0, 0, 0]), "Beta": np.array([0.6, 0.8, 0, 0])})
    store = build_store(["img"], [[1.0, 0.0, 0.0, 0.0]])
    (rec,) = retrieve_all([a, b], emb, store, AcquisitionConfig(per_concept_real=1))
    assert rec.concept_id == a.id


def test_cross_concept_collapse_tie_goes_to_lower_id():
    a, b = concept("Alpha"), concept("Beta")
    same = np.array([1.0, 0.0])
    emb = HashEmbedder(2, overrides={"Alpha": same, "Beta": same})
    (rec,) = retrieve_all([a, b], emb, build_store(["img"], [[1.0, 0.0]]), AcquisitionConfig(per_concept_real=1))
    assert rec.concept_id == min(a.id, b.id)


def test_retrieval_empty_store_and_failing_embedder(caplog):
    with pytest.raises(StageError):
        retrieve_all([concept("x")], HashEmbedder(2), build_store([], np.zeros((0, 2))), AcquisitionConfig())
    store = build_store(["img"], [[1.0, 0.0]])
    assert retrieve_all([concept("x")], FailingProvider("text_embed"), store, AcquisitionConfig()) == []
    assert "skipped" in caplog.text


# -- captions ----------------------------------------------------------------------------

def test_scripted_captions_equal_script():
    script = iter(["A paella on a table.", "Paella at sunset.", "A pan of paella."])
    chat = FunctionChat(lambda req: next(script))
    cs = generate_captions(concept("Paella"), chat, AcquisitionConfig(n_cap=3), DOMAIN)
    assert cs.captions == ("A paella on a table.", "Paella at sunset.", "A pan of paella.")
    assert len(set(cs.seeds)) == 3
    assert "Paella" in chat.requests[0].prompt and "dishes" in chat.requests[0].prompt


def test_duplicate_caption_resampled_once_then_kept():
    chat = FunctionChat(lambda req: "Same caption.")
    cs = generate_captions(concept("Paella"), chat, AcquisitionConfig(n_cap=3))
    assert cs.captions == ("Same caption.",) * 3
    assert chat.calls == 1 + 2 * 2


def test_empty_captions_dropped():
    chat = FunctionChat(lambda req: "")
    with pytest.raises(StageError):
        generate_captions(concept("Paella"), chat, AcquisitionConfig(n_cap=2))


def test_caption_failure_skips_concept(caplog):
    def fn(req):
        if "Bad" in req.prompt:
            raise TransportError("down")
        return "fine caption"

    sets = generate_all_captions([concept("Good"), concept("Bad")], FunctionChat(fn), AcquisitionConfig(n_cap=1))
    assert [s.concept_key for s in sets] == ["good"]


def test_caption_sets_round_trip(tmp_path):
    sets = generate_all_captions([concept("Paella"), concept("Sushi")], OfflineChat("c"), AcquisitionConfig(n_cap=2))
    save_caption_sets(tmp_path / "c.jsonl", sets)
    assert load_caption_sets(tmp_path / "c.jsonl") == sets


# -- synthesis ------------------------------------------------------------------------------

def test_synthesis_counts_and_stable_ids():
    cs = CaptionSet("c1", "paella", ("A paella.",), (1,))
    a = synthesize_for_captions(cs, MockImageGen(), AcquisitionConfig(n_synth=3))
    b = synthesize_for_captions(cs, MockImageGen(), AcquisitionConfig(n_synth=3))
    assert len(a) == 3 and [r.id for r in a] == [r.id for r in b]
    assert all(r.caption == "A paella." and r.source == SYNTHETIC for r in a)


def test_synthesis_ten_concepts_two_captions_four_images():
    concepts = [concept(f"Dish {i}") for i in range(10)]
    sets = generate_all_captions(concepts, OfflineChat("c"), AcquisitionConfig(n_cap=2))
    recs = synthesize_all(sets, MockImageGen(), AcquisitionConfig(n_synth=4))
    assert len(recs) == 80 and len({r.id for r in recs}) == 80
    by_concept = {s.concept_id: set(s.captions) for s in sets}
    assert all(r.caption in by_concept[r.concept_id] for r in recs)


def test_synthesis_partial_and_total_failure(caplog):
    cs = CaptionSet("c1", "paella", ("one", "two"), (1, 2))
    partial = synthesize_for_captions(cs, MockImageGen(fail=lambda p, s, i: i == 0), AcquisitionConfig(n_synth=3))
    assert len(partial) == 4
    assert synthesize_for_captions(cs, MockImageGen(fail=lambda *a: True), AcquisitionConfig(n_synth=3)) == []
    assert "no synthetic images" in caplog.text


def test_synthesis_parallelism_independent():
    sets = generate_all_captions([concept(f"D{i}") for i in range(12)], OfflineChat("c"), AcquisitionConfig(n_cap=2))
    a = synthesize_all(sets, MockImageGen(), AcquisitionConfig(n_synth=2, workers=1))
    b = synthesize_all(sets, MockImageGen(), AcquisitionConfig(n_synth=2, workers=6))
    assert a == b


# -- merge -------------------------------------------------------------------------------------

def test_merge_orders_real_first():
    r = [real("u2"), real("u1")]
    s = [synth("p", i) for i in range(3)]
    out = merge_pools(r, s)
    assert len(out) == 5 and [x.source for x in out] == [REAL, REAL, SYNTHETIC, SYNTHETIC, SYNTHETIC]
    assert [x.id for x in out[:2]] == sorted(x.id for x in r)


def test_merge_empty_real_is_identity():
    s = sorted((synth("p", i) for i in range(3)), key=lambda x: x.id)
    assert merge_pools([], s) == s


def test_merge_collision():
    a = real("u1")
    clash = ImageRecord(a.id, "other", SYNTHETIC, "c", "cap")
    with pytest.raises(IntegrityError):
        merge_pools([a], [clash])


def test_records_round_trip(tmp_path):
    recs = [real("u1", sim=0.25), synth("p", 0)]
    save_records(tmp_path / "r.jsonl", recs)
    assert load_records(tmp_path / "r.jsonl") == recs
