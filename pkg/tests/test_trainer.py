import numpy as np
import pytest

import oracles
from conftest import micro_config
from protocase import network as N
from protocase import trainer as T
from protocase.checkpoint import from_bytes, to_bytes
from protocase.errors import ConfigError, DataError, NumericError, StageOrderError
from protocase.losses import LossConfig


def _schedule(**kw):
    base = dict(warmup_epochs=1, a1_epochs_per_cycle=1, a3_steps_per_cycle=20, max_cycles=2, batch_size=6,
                fine_per_batch=1, b_steps=200, seed=11)
    base.update(kw)
    return T.TrainSchedule(**base)


def _config(**kw):
    return T.TrainConfig(micro_config(), LossConfig(), _schedule(**kw))


@pytest.fixture
def state():
    return N.init_model(micro_config(), np.random.default_rng(2))


@pytest.fixture(scope="module")
def data(micro_train):
    return T.TrainData.from_samples(micro_train)


def _snapshot(st):
    return {k: v.copy() for k, v in st.params.items()}


def _changed(before, st):
    return {k for k in before if not np.array_equal(before[k], st.params[k])}


def test_schedule_validation():
    with pytest.raises(ConfigError):
        T.TrainSchedule(warmup_epochs=-1)
    with pytest.raises(ConfigError):
        T.TrainSchedule(lr_joint=0.0)
    with pytest.raises(ConfigError):
        T.TrainSchedule(optimizer="rmsprop")
    cfg = T.TrainConfig()
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_batches_cover_data_and_mix_fine(data, rng):
    sch = _schedule()
    batches = T.epoch_batches(data, sch, rng)
    coarse = np.concatenate([b for b, _ in batches])
    assert set(np.flatnonzero(~data.has_fine)) <= set(coarse.tolist())
    for b, member in batches:
        assert data.has_fine[b].sum() == 1 and member.all()


def test_a1_touches_only_extractor_and_prototypes(state, data, rng):
    before = _snapshot(state)
    T.stage_a1(state, data, LossConfig(), _schedule(), rng)
    changed = _changed(before, state)
    assert "h1" not in changed and not any(k.startswith("h2") for k in changed)
    assert "prototypes" in changed and set(state.conv_param_names()) & changed


def test_warmup_freezes_base_layers(state, data, rng):
    before = _snapshot(state)
    T.stage_a1(state, data, LossConfig(), _schedule(), rng, warmup=True)
    changed = _changed(before, state)
    base = set(state.conv_param_names()) - set(state.conv_param_names(addon=True))
    assert base and not (base & changed)
    assert set(state.conv_param_names(addon=True)) & changed


def test_warmup_cached_features_match_full_graph(state, data):
    a, b = state.copy(), state.copy()
    idx = np.arange(6)
    batch = data.batch(idx)
    cached = T.base_features(a, data.images[idx])
    ra = T.sgd_step(a, batch, LossConfig(), 0.01, warmup=True, cached=cached)
    rb = T.sgd_step(b, batch, LossConfig(), 0.01, warmup=True)
    np.testing.assert_allclose(ra, rb, rtol=1e-12)
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], rtol=1e-10, atol=1e-14)


def test_a1_reduces_objective(data):
    st = N.init_model(micro_config(), np.random.default_rng(4))
    sch = _schedule(batch_size=6, fine_per_batch=1)
    start = T.mean_objective(st, data, LossConfig())
    T.stage_a1(st, data, LossConfig(), sch, np.random.default_rng(0), epochs=3)
    assert T.mean_objective(st, data, LossConfig()) < start


def test_nonfinite_loss_aborts_with_diagnostic(state, data, rng):
    state.params["prototypes"][0, 0] = np.nan
    with pytest.raises(NumericError) as exc:
        T.stage_a1(state, data, LossConfig(), _schedule(), rng)
    diag = exc.value.diagnostic
    assert diag["batch_ids"] and "prototypes" in diag["nonfinite_params"]


def test_projection_fixed_point_and_sources(state, data):
    before = _snapshot(state)
    T.stage_a2_project(state, data)
    assert _changed(before, state) == {"prototypes"}
    feats = T.forward_features(state, data.images)
    for j in state.active_indices:
        sid, r, c = state.proto_sources[j]
        i = data.ids.index(sid)
        assert data.labels[i] == state.proto_types[j]
        np.testing.assert_array_equal(state.params["prototypes"][j], feats[i, :, r, c])
        rows = data.labels == state.proto_types[j]
        d = ((feats[rows] - state.params["prototypes"][j][None, :, None, None]) ** 2).sum(axis=1)
        assert d.min() == 0.0


def test_projection_idempotent(state, data):
    T.stage_a2_project(state, data)
    once = _snapshot(state)
    T.stage_a2_project(state, data)
    assert not _changed(once, state)


def test_projection_matches_exhaustive_oracle(state, micro_train):
    three = T.TrainData.from_samples([next(s for s in micro_train if s.margin_index == t) for t in range(3)])
    feats = T.forward_features(state, three.images).tolist()
    protos = state.params["prototypes"].copy()
    T.stage_a2_project(state, three)
    w = len(feats[0][0][0])
    for j in state.active_indices:
        best = None
        for i, f in enumerate(feats):
            if three.labels[i] != state.proto_types[j]:
                continue
            for l, d in enumerate(oracles._patch_dists(f, protos[j].tolist())):
                if best is None or d < best[0]:
                    best = (d, i, l)
        assert state.proto_sources[j] == (three.ids[best[1]], best[2] // w, best[2] % w)


def test_projection_missing_type_is_error(state, micro_train):
    only = [s for s in micro_train if s.margin_index != 2]
    with pytest.raises(DataError, match="spiculated"):
        T.stage_a2_project(state, only)


def test_a3_changes_only_h1_and_is_monotone(state, data):
    T.stage_a2_project(state, data)
    state.params["h1"] += np.random.default_rng(0).normal(0, 0.3, state.params["h1"].shape)
    before = _snapshot(state)
    trace = T.stage_a3(state, data, _schedule(a3_steps_per_cycle=50))
    assert _changed(before, state) == {"h1"}
    assert all(b < a for a, b in zip(trace, trace[1:]))
    assert T.margin_ce(state, data) == pytest.approx(trace[-1], rel=1e-12)


def test_a3_first_entry_starts_from_plus_minus_one(state, data):
    state.params["h1"][:] = 7.0
    trace = T.stage_a3(state, data, _schedule(a3_steps_per_cycle=0), first_entry=True)
    np.testing.assert_array_equal(state.params["h1"], N.h1_initial(state.proto_types))
    assert len(trace) == 1


def test_stage_b_isolation_and_firewall(state, data):
    before = _snapshot(state)
    T.stage_b(state, data, _schedule())
    assert _changed(before, state) <= {"h2.weight", "h2.shift", "h2.scale"}
    assert state.stage_b_done
    for op in (lambda: T.stage_a1(state, data, LossConfig(), _schedule(), np.random.default_rng(0)),
               lambda: T.stage_a2_project(state, data),
               lambda: T.stage_a3(state, data, _schedule())):
        with pytest.raises(StageOrderError):
            op()


def test_stage_b_single_class_rejected(state, micro_train):
    same = [s for s in micro_train if s.malignancy_label == 0]
    with pytest.raises(DataError, match="one class"):
        T.stage_b(state, same)


def test_stage_b_separable_fixture(state, data):
    x, y = oracles.separable_fixture(n=len(data), seed=1)
    d = T.TrainData(data.samples, data.images, data.labels, y, data.masks, data.has_fine, data.ids)
    T.stage_b(state, d, T.TrainSchedule(weight_clip=5.0, b_steps=3000), logits=x)
    assert np.all(np.abs(state.params["h2.weight"]) <= 5.0)
    _, p = N.malignancy(state, x)
    assert np.all(p[y == 1] >= 0.99)


def test_stage_b_sign_pattern_on_planted_rates(state):
    rng = np.random.default_rng(0)
    types = rng.integers(0, 3, 600)
    rates = np.array([0.05, 0.4, 0.9])
    y = (rng.random(600) < rates[types]).astype(int)
    x = np.eye(3)[types] * 6.0 - 2.0 + rng.normal(0, 0.5, (600, 3))
    fake = T.TrainData([], np.zeros((600, 1, 1, 1)), types, y, np.zeros((600, 1, 1)), np.zeros(600, bool),
                       tuple(str(i) for i in range(600)))
    T.stage_b(state, fake, logits=x)
    w = state.params["h2.weight"]
    assert w[2] > 0 > w[0]


def _run(samples, stop_after=None, resume=None, **kw):
    return T.train(_config(**kw), samples, resume=resume, stop_after=stop_after)


def test_train_is_deterministic_and_resumable(micro_train):
    full = _run(micro_train)
    assert full.done
    again = _run(micro_train)
    assert to_bytes(full.checkpoint) == to_bytes(again.checkpoint)
    part = _run(micro_train, stop_after=3)
    assert not part.done
    resumed = from_bytes(to_bytes(part.checkpoint))
    rest = _run(micro_train, resume=resumed)
    assert rest.done
    assert to_bytes(rest.checkpoint) == to_bytes(full.checkpoint)


def test_train_trace_and_projected_final_state(micro_train):
    res = _run(micro_train)
    stages = [r[1] for r in res.history]
    assert stages[0] == "warmup" and stages[-1] == "B" and stages[-3:-1] == ["A2", "A3"]
    assert all(src is not None for src in res.state.proto_sources)
    text = T.format_trace(res.history)
    assert text.startswith(T.TRACE_HEADER + "\n") and len(text.splitlines()) == len(res.history) + 1


def test_train_fails_on_nonfinite(micro_train):
    bad = [s for s in micro_train]
    from protocase.data import Sample
    bad[0] = Sample(bad[0].id, np.full_like(bad[0].image, np.nan), bad[0].margin_label, bad[0].malignancy_label,
                    bad[0].lesion_mask, bad[0].fine_mask)
    with pytest.raises(NumericError):
        _run(bad)


def _projected(state, sources):
    st = state.copy()
    st.proto_sources = list(sources)
    return st


def test_prune_noop(state):
    st = _projected(state, [(f"s{j}", 0, 0) for j in range(6)])
    new, rep = T.prune(st)
    assert not rep.removed and np.array_equal(new.proto_active, st.proto_active)


def test_prune_duplicate_keeps_one_and_logits(state, rng):
    st = _projected(state, [("a", 1, 1), ("a", 1, 1), ("b", 0, 0), ("c", 0, 0), ("d", 0, 0), ("e", 0, 0)])
    st.params["prototypes"][1] = st.params["prototypes"][0]
    new, rep = T.prune(st, ("duplicate_source",))
    assert [r[:1] for r in rep.removed] == [(1,)]
    assert new.proto_active.sum() == 5 and new.proto_active[0]
    img = rng.uniform(size=(16, 16))
    np.testing.assert_allclose(N.forward(new, img).margin_logits, N.forward(st, img).margin_logits, atol=1e-12)
    assert st.proto_active.all()


def test_prune_wrong_sign_and_empty_type(state):
    st = _projected(state, [(f"s{j}", 0, 0) for j in range(6)])
    st.params["h1"][1, 0] = 1.0        # tie with own-type weight: not strictly largest
    new, rep = T.prune(st, ("wrong_sign",))
    assert rep.removed == [(0, "circumscribed", "wrong_sign")]
    assert rep.after["circumscribed"] == 1
    st.params["h1"][1, 1] = 2.0
    with pytest.raises(ConfigError, match="circumscribed"):
        T.prune(st, ("wrong_sign",))


def test_prune_requires_projection_and_known_criteria(state):
    with pytest.raises(ConfigError):
        T.prune(state)
    with pytest.raises(ConfigError):
        T.prune(_projected(state, [("a", 0, 0)] * 6), ("bogus",))


def test_prune_fifteen_to_eleven():
    st = N.init_model(N.ModelConfig(), np.random.default_rng(0))
    st.proto_sources = [(f"s{j}", 0, 0) for j in range(15)]
    h1 = st.params["h1"]
    st.proto_sources[1] = st.proto_sources[0]            # circumscribed duplicate
    h1[0, 5], h1[0, 6] = 2.0, 2.0                       # two indistinct lean circumscribed
    h1[0, 10] = 1.5                                     # one spiculated leans circumscribed
    new, rep = T.prune(st)
    assert rep.before == {"circumscribed": 5, "indistinct": 5, "spiculated": 5}
    assert rep.after == {"circumscribed": 4, "indistinct": 3, "spiculated": 4}
    assert "index,type,reason" in rep.lines()


def test_full_objective_gradient_check(data):
    st = T.gradcheck_point(micro_config(), seed=3)
    rep = T.objective_grad_check(st, T.gradcheck_batch(data), LossConfig())
    assert rep.passed, rep.lines()
    assert set(rep.checked) == set(st.conv_param_names()) | {"prototypes", "h1"}


def test_step_ladder_still_catches_wrong_gradient():
    from protocase import autodiff as ad
    a = ad.Tensor(np.array([0.3, -1.2, 2.0]))

    def bad():
        return ad.sum_(ad.mul(ad.Tensor(a.data.copy() * 0 + a.data), a))   # treats one factor as constant

    rep = ad.grad_check(bad, {"a": a}, epsilon=T.FD_STEPS)
    assert not rep.passed
