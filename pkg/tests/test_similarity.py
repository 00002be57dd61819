import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gcr import features as F
from gcr import tensor as T
from gcr.objectives import Episode
from gcr.similarity import (DegenerateEncoderError, GoalSet, cosine, dump_embeddings, encode, encode_batch,
                            from_tensors, init_model, load_model, potential, potential_from_similarity,
                            read_embeddings, save_model, similarity, to_tensors)

SHAPE = (6, 8, 8)
observations = hnp.arrays(np.float64, SHAPE, elements=st.floats(0.0, 1.0))


@pytest.fixture(scope="module")
def model():
    return init_model(SHAPE, hidden=(32, 16), embedding_dim=8, seed=0)


@pytest.mark.parametrize("features", F.FEATURE_KINDS)
def test_encode_length_and_determinism(features):
    m = init_model(SHAPE, hidden=(16,), embedding_dim=5, seed=1, features=features)
    x = np.random.default_rng(0).random(SHAPE)
    e1, e2 = encode(m, x), encode(m, x)
    assert e1.shape == (5,)
    np.testing.assert_array_equal(e1, e2)
    assert np.all(np.isfinite(e1))


def test_zero_parameters_give_finite_output(model):
    m = model.copy()
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    e = encode(m, np.random.default_rng(0).random(SHAPE))
    np.testing.assert_array_equal(e, np.zeros(8))
    # a zero embedding has no direction, so similarity is refused
    with pytest.raises(DegenerateEncoderError):
        similarity(m, np.zeros(SHAPE), np.ones(SHAPE))


def test_distinct_observations_give_distinct_embeddings(model):
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = rng.random(SHAPE), rng.random(SHAPE)
        assert not np.allclose(encode(model, a), encode(model, b))


def test_shape_mismatch(model):
    with pytest.raises(T.ShapeError):
        encode(model, np.zeros((6, 4, 4)))


def test_cosine_examples():
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert cosine(np.array([2.0, 1.0]), np.array([2.0, 1.0])) == 1.0


@pytest.mark.parametrize("s, phi", [(1.0, 1.0), (-1.0, 0.0), (0.0, 0.5)])
def test_potential_rescaling(s, phi):
    assert potential_from_similarity(s) == phi


def test_similarity_symmetric_on_random_pairs(model):
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = rng.random(SHAPE), rng.random(SHAPE)
        assert abs(similarity(model, a, b) - similarity(model, b, a)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(observations, observations)
def test_potential_in_unit_interval(model, a, b):
    assert 0.0 <= potential(model, a, b) <= 1.0


@settings(max_examples=40, deadline=None)
@given(observations)
def test_potential_of_goal_with_itself_is_exactly_one(model, g):
    assert potential(model, g, g) == 1.0


def test_goal_set_averages_over_goals(model):
    rng = np.random.default_rng(3)
    goals = rng.random((3, *SHAPE))
    frames = rng.random((4, *SHAPE))
    gs = GoalSet(model, goals)
    expect = [np.mean([potential(model, f, g) for g in goals]) for f in frames]
    np.testing.assert_allclose(gs.potentials(frames), expect, rtol=1e-12)


def test_model_roundtrip(tmp_path, model):
    for kind in F.FEATURE_KINDS:
        m = init_model(SHAPE, hidden=(7, 5), embedding_dim=3, seed=4, features=kind)
        back = from_tensors(to_tensors(m))
        assert (back.input_shape, back.hidden, back.embedding_dim, back.features) == \
            (m.input_shape, m.hidden, m.embedding_dim, m.features)
    save_model(tmp_path / "m.gcrt", model)
    back = load_model(tmp_path / "m.gcrt")
    x = np.random.default_rng(1).random(SHAPE)
    assert encode(back, x).tobytes() == encode(model, x).tobytes()


def test_embedding_dump_roundtrips_bit_exactly(tmp_path, model):
    rng = np.random.default_rng(6)
    eps = [Episode(rng.random((4, *SHAPE)), True, "A", episode_id="a"),
           Episode(rng.random((3, *SHAPE)), False, "B", episode_id="b")]
    path = tmp_path / "emb.csv"
    dump_embeddings(path, model, eps)
    keys, emb = read_embeddings(path)
    assert keys[0] == ("a", 0, "A") and keys[-1] == ("b", 2, "B")
    expect = np.concatenate([encode_batch(model, ep.frames) for ep in eps])
    assert emb.tobytes() == expect.tobytes()
    with open(path) as f:
        assert f.readline().strip().split(",")[:4] == ["episode_id", "frame_index", "embodiment_tag", "e_0"]
