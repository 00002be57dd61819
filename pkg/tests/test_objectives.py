from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcr import tensor as T
from gcr.objectives import (Episode, GcrHyperparams, NegativeBuffer, RewardTrainer, TrainingDiverged,
                            build_cross_embodiment_sampler, goal_tail_indices, ic_loss,
                            loss_and_grads, loss_value, negative_count, sample_batch, sc_loss,
                            update_negative_buffer, vip_loss)
from gcr.similarity import encode_batch, init_model

SHAPE = (6, 4, 4)


def random_episode(rng, n, success=True, embodiment="A", eid=""):
    return Episode(rng.random((n, *SHAPE)), success, embodiment, episode_id=eid)


def make_batch(seed, n_eps=4, batch_size=6, n_neg=5, hp=None):
    rng = np.random.default_rng(seed)
    hp = hp or GcrHyperparams(batch_size=batch_size, num_negatives=max(n_neg, 1))
    eps = [random_episode(rng, int(rng.integers(4, 9)), eid=f"e{i}") for i in range(n_eps)]
    buf = NegativeBuffer(64)
    if n_neg:
        buf.extend(rng.random((10, *SHAPE)))
    return sample_batch(eps, buf, hp, rng), hp


def reference_loss(model, batch, hp, kind):
    """Plain numpy evaluation of the objective, independent of the autodiff graph."""
    def cos(a, b):
        ea, eb = encode_batch(model, a), encode_batch(model, b)
        return np.sum(ea * eb, -1) / np.sqrt(np.sum(ea * ea, -1) * np.sum(eb * eb, -1))

    k, g = hp.value_scale, hp.gamma
    loss = (1 - g) * k * np.mean(-cos(batch.init_obs, batch.goals))
    r = k * cos(batch.obs, batch.pair_goals) - batch.delta - g * k * cos(batch.next_obs, batch.pair_goals)
    loss += np.log(np.mean(np.exp(r)))
    if kind == "vip":
        return loss
    pos = cos(batch.goals, batch.pos_goals) if len(batch.pos_goals) else None
    eg = encode_batch(model, batch.goals)
    en = encode_batch(model, batch.neg_goals) if len(batch.neg_goals) else None
    neg = None
    if en is not None:
        neg = (eg @ en.T) / np.sqrt(np.sum(eg * eg, 1)[:, None] * np.sum(en * en, 1)[None, :])
    if kind == "sc":
        if pos is not None:
            loss -= hp.omega1 * pos.mean()
        if neg is not None:
            loss += hp.omega2 * neg.mean()
        return loss
    per = np.log(np.mean(np.exp(hp.omega2 * neg), axis=1))
    if pos is not None:
        per = per - hp.omega1 * pos
    return loss + per.mean()


@pytest.mark.parametrize("kind", ["vip", "sc", "ic"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objective_matches_numpy_reference(kind, seed):
    batch, hp = make_batch(seed)
    model = init_model(SHAPE, (12,), 6, seed=seed)
    assert loss_value(model, batch, hp, kind) == pytest.approx(reference_loss(model, batch, hp, kind), rel=1e-12)


def test_unscaled_objective_matches_reference():
    batch, hp = make_batch(3)
    hp = replace(hp, value_scale=1.0)
    model = init_model(SHAPE, (12,), 6, seed=3)
    for kind in ("vip", "sc", "ic"):
        assert loss_value(model, batch, hp, kind) == pytest.approx(reference_loss(model, batch, hp, kind),
                                                                   rel=1e-12)


def test_frozen_loss_values():
    # computed once with reference_loss above and frozen
    batch, hp = make_batch(11)
    model = init_model(SHAPE, (12,), 6, seed=11)
    got = [loss_value(model, batch, hp, k) for k in ("vip", "sc", "ic")]
    np.testing.assert_allclose(got, [0.9964847810415143, 0.9955053744463016, 0.9955177436298598], rtol=1e-10)


def test_gradients_match_finite_differences():
    batch, hp = make_batch(4, batch_size=3, n_neg=3)
    model = init_model(SHAPE, (5,), 3, seed=4)
    for kind in ("vip", "sc", "ic"):
        _, grads, _ = loss_and_grads(model, batch, hp, kind)
        rng = np.random.default_rng(0)
        for name in ("enc.0.w", "enc.1.b"):
            p = model.params[name]
            for _ in range(4):
                idx = tuple(int(rng.integers(0, s)) for s in p.shape)
                old = p[idx]
                p[idx] = old + 1e-5
                up = loss_value(model, batch, hp, kind)
                p[idx] = old - 1e-5
                down = loss_value(model, batch, hp, kind)
                p[idx] = old
                num = (up - down) / 2e-5
                assert grads[name][idx] == pytest.approx(num, rel=1e-4, abs=1e-7)


def test_named_loss_wrappers():
    batch, hp = make_batch(5)
    model = init_model(SHAPE, (8,), 4, seed=5)
    for fn, kind in ((vip_loss, "vip"), (sc_loss, "sc"), (ic_loss, "ic")):
        value, grads = fn(model, batch, hp)
        assert value == loss_value(model, batch, hp, kind)
        assert set(grads) == set(model.params)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ic_upper_bounds_sc(seed):
    batch, hp = make_batch(seed, n_eps=3, batch_size=4, n_neg=4)
    model = init_model(SHAPE, (8,), 4, seed=seed)
    assert loss_value(model, batch, hp, "ic") >= loss_value(model, batch, hp, "sc") - 1e-9


def test_vip_ignores_contrastive_sets():
    batch, hp = make_batch(6)
    model = init_model(SHAPE, (8,), 4, seed=6)
    stripped = replace(batch, pos_goals=batch.pos_goals[:0], neg_goals=batch.neg_goals[:0])
    assert loss_value(model, batch, hp, "vip") == loss_value(model, stripped, hp, "vip")


def test_sc_without_negatives_drops_the_push_term():
    batch, hp = make_batch(7, n_neg=0)
    assert len(batch.neg_goals) == 0
    model = init_model(SHAPE, (8,), 4, seed=7)
    with_pos = loss_value(model, batch, hp, "sc")
    assert with_pos == pytest.approx(reference_loss(model, batch, hp, "sc"), rel=1e-12)
    with pytest.raises(ValueError):
        loss_value(model, batch, hp, "ic")


def test_nan_input_raises():
    batch, hp = make_batch(8)
    batch.obs[0, 0, 0, 0] = np.nan
    model = init_model(SHAPE, (8,), 4, seed=8)
    with pytest.raises(T.NonFiniteError):
        loss_value(model, batch, hp, "sc")


# --- batch construction ----------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_batch_invariants(seed, relabel):
    rng = np.random.default_rng(seed)
    eps = [random_episode(rng, int(rng.integers(3, 8)), eid=str(i)) for i in range(3)]
    hp = GcrHyperparams(batch_size=8, relabel_prob=relabel, goal_tail=2)
    b = sample_batch(eps, None, hp, rng)
    assert b.size == 8 and len(b.neg_goals) == 0
    for k in range(b.size):
        ep = eps[b.episode_idx[k]]
        t = b.frame_idx[k]
        np.testing.assert_array_equal(b.obs[k], ep.frames[t])
        np.testing.assert_array_equal(b.next_obs[k], ep.frames[t + 1])
        np.testing.assert_array_equal(b.init_obs[k], ep.frames[0])
        assert any(np.array_equal(b.goals[k], ep.frames[i]) for i in goal_tail_indices(len(ep), 2))
        same = b.pair_goal_episode[k] == b.episode_idx[k]
        # the goal indicator only fires for goal-tail frames paired with their own episode's goal
        assert (b.delta[k] == 0.0) == (same and t in goal_tail_indices(len(ep), 2))
        if not relabel:
            assert same
        # positives always come from another successful episode
        others = [e for j, e in enumerate(eps) if j != b.episode_idx[k]]
        assert any(np.array_equal(b.pos_goals[k], f) for e in others for f in e.frames[-2:])


def test_single_success_has_no_positives():
    rng = np.random.default_rng(0)
    b = sample_batch([random_episode(rng, 5)], None, GcrHyperparams(batch_size=4), rng)
    assert len(b.pos_goals) == 0


def test_requires_a_success():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_batch([random_episode(rng, 5, success=False)], None, GcrHyperparams(), rng)


@pytest.mark.parametrize("n, frac, k", [(20, 0.25, 5), (10, 0.25, 3), (3, 0.25, 1), (4, 1.0, 4)])
def test_negative_count(n, frac, k):
    assert negative_count(n, frac) == k


def test_negative_buffer_takes_failed_tails_fifo():
    rng = np.random.default_rng(1)
    hp = GcrHyperparams(neg_fraction=0.25)
    buf = NegativeBuffer(capacity=6)
    ok = random_episode(rng, 8, success=True, eid="ok")
    update_negative_buffer(buf, ok, hp)
    assert len(buf) == 0
    fails = [random_episode(rng, 8, success=False, eid=f"f{i}") for i in range(4)]
    for ep in fails:
        update_negative_buffer(buf, ep, hp)
    assert len(buf) == 6
    assert buf.origins() == ["f1", "f1", "f2", "f2", "f3", "f3"]
    np.testing.assert_array_equal(buf.frames()[-2:], fails[-1].frames[-2:])


def test_cross_embodiment_sampler_balances_mass():
    rng = np.random.default_rng(2)
    target = [random_episode(rng, 4, eid=f"t{i}") for i in range(3)]
    other = [random_episode(rng, 4, embodiment="B", eid=f"o{i}") for i in range(12)]
    s = build_cross_embodiment_sampler(target, other)
    assert s.probs[:3].sum() == pytest.approx(0.5)
    assert all(ep.embodiment == "A" for ep in s.goal_episodes)
    draws = np.array([s.draw_index(rng) for _ in range(4000)])
    assert abs(np.mean(draws < 3) - 0.5) < 0.03


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        GcrHyperparams(gamma=1.0)
    with pytest.raises(ValueError):
        GcrHyperparams(omega1=-1)
    with pytest.raises(ValueError):
        GcrHyperparams(neg_fraction=0.0)
    with pytest.raises(ValueError):
        GcrHyperparams(value_scale=0.0)


# --- training loop ---------------------------------------------------------------------------------


def test_trainer_reduces_loss_and_checkpoints_are_snapshots():
    rng = np.random.default_rng(3)
    eps = [random_episode(rng, 6, eid=str(i)) for i in range(4)]
    model = init_model(SHAPE, (16,), 4, seed=0)
    tr = RewardTrainer(model, eps, GcrHyperparams(batch_size=8, learning_rate=3e-3), kind="sc", seed=0)
    first = np.mean([loss_value(tr.model, sample_batch(eps, None, tr.hp, np.random.default_rng(i)), tr.hp, "sc")
                     for i in range(5)])
    for _ in range(150):
        tr.step()
    snap = tr.checkpoint()
    assert tr.version == 1
    after = np.mean([loss_value(tr.model, sample_batch(eps, None, tr.hp, np.random.default_rng(i)), tr.hp, "sc")
                     for i in range(5)])
    assert after < first
    tr.step()
    assert not np.array_equal(snap.params["enc.0.w"], tr.model.params["enc.0.w"])
    # the caller's model is never mutated
    assert np.array_equal(model.params["enc.0.w"], init_model(SHAPE, (16,), 4, seed=0).params["enc.0.w"])


def test_trainer_rolls_back_then_gives_up(monkeypatch):
    rng = np.random.default_rng(4)
    eps = [random_episode(rng, 6, eid=str(i)) for i in range(2)]
    tr = RewardTrainer(init_model(SHAPE, (8,), 4, seed=1), eps, GcrHyperparams(batch_size=4), seed=0)
    tr.step()
    good = tr.checkpoint()
    tr.step()
    import gcr.objectives as O

    def boom(*a, **k):
        raise T.NonFiniteError("injected")

    monkeypatch.setattr(O, "loss_and_grads", boom)
    assert np.isnan(tr.step())
    assert tr.opt.learning_rate == pytest.approx(GcrHyperparams().learning_rate / 2)
    np.testing.assert_array_equal(tr.model.params["enc.0.w"], good.params["enc.0.w"])
    with pytest.raises(TrainingDiverged):
        tr.step()
