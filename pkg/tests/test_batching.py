import numpy as np
import pytest

from dubcl.batching import BatchPlan, TitleIndex, easy_negative_probability, sample_batch
from dubcl.featurize import AugmentConfig

AUG = AugmentConfig()
MEL_SHAPE = (48, 186)


def synthetic_index(rng, n_titles=16, shots_per_title=12, multilingual_every=4):
    entries = []
    shot_id = 0
    for t in range(n_titles):
        shots = []
        for _ in range(shots_per_title):
            shots.append((shot_id, float(rng.uniform(3.0, 12.0))))
            shot_id += 1
        langs = ("L0", "L1", "L2") if t % multilingual_every == 0 else ("L0",)
        entries.append({"title_id": t, "shots": shots, "languages": langs})
    return TitleIndex(entries)


def test_group_structure():
    rng = np.random.default_rng(0)
    index = synthetic_index(rng)
    plan = sample_batch(index, b=32, g=4, rng=rng, dub_augment=True,
                        aug_cfg=AUG, mel_shape=MEL_SHAPE)
    assert len(plan.quadruplets) == 32
    assert len(plan.group_slices) == 4
    assert plan.validate()
    titles = {q.title_id for q in plan.quadruplets}
    assert len(titles) == 4
    for start, stop in plan.group_slices:
        group = plan.quadruplets[start:stop]
        assert len(group) == 8
        assert len({q.title_id for q in group}) == 1
        assert len({q.shot_id for q in group}) == 8


def test_every_instance_has_hard_negative_companions():
    rng = np.random.default_rng(1)
    index = synthetic_index(rng)
    plan = sample_batch(index, 24, 3, rng, True, AUG, MEL_SHAPE)
    for q in plan.quadruplets:
        companions = [
            o for o in plan.quadruplets
            if o.title_id == q.title_id and o.shot_id != q.shot_id
        ]
        assert len(companions) == 7


def test_dub_flag_semantics():
    rng = np.random.default_rng(2)
    index = synthetic_index(rng)
    plan_off = sample_batch(index, 32, 4, np.random.default_rng(5), False, AUG, MEL_SHAPE)
    assert all(q.lang_p == q.lang_s for q in plan_off.quadruplets)

    lang_by_title = {e["title_id"]: e["languages"] for e in index.entries}
    saw_multilingual = False
    for trial in range(20):
        plan_on = sample_batch(
            index, 32, 4, np.random.default_rng(100 + trial), True, AUG, MEL_SHAPE
        )
        for q in plan_on.quadruplets:
            if len(lang_by_title[q.title_id]) > 1:
                saw_multilingual = True
                assert q.lang_p != q.lang_s
            else:
                assert q.lang_p == q.lang_s
    assert saw_multilingual


def test_determinism_given_rng_state():
    rng = np.random.default_rng(3)
    index = synthetic_index(rng)
    a = sample_batch(index, 16, 4, np.random.default_rng(77), True, AUG, MEL_SHAPE)
    b = sample_batch(index, 16, 4, np.random.default_rng(77), True, AUG, MEL_SHAPE)
    assert a == b


def test_insufficient_titles_error_names_constraint():
    rng = np.random.default_rng(4)
    index = synthetic_index(rng, n_titles=3)
    with pytest.raises(ValueError, match="titles"):
        sample_batch(index, 32, 4, rng, False, AUG, MEL_SHAPE)
    small = synthetic_index(rng, n_titles=8, shots_per_title=2)
    with pytest.raises(ValueError, match="eligible shots"):
        sample_batch(small, 32, 4, rng, False, AUG, MEL_SHAPE)


def test_indivisible_batch_rejected():
    rng = np.random.default_rng(5)
    index = synthetic_index(rng)
    with pytest.raises(ValueError, match="divisible"):
        sample_batch(index, 30, 4, rng, False, AUG, MEL_SHAPE)


def test_language_subset_restriction():
    rng = np.random.default_rng(6)
    entries = []
    sid = 0
    for t in range(12):
        shots = [(sid + i, 5.0) for i in range(10)]
        sid += 10
        langs = (("L0", "L1"), ("L1",), ("L2", "L0"))[t % 3]
        entries.append({"title_id": t, "shots": shots, "languages": langs})
    index = TitleIndex(entries)

    only_l0 = index.restrict(language_subset={"L0"})
    assert all(e["languages"][0] == "L0" for e in only_l0.entries)
    assert only_l0.n_titles == 4

    multi = index.restrict(require_multilingual=True)
    assert all(len(e["languages"]) > 1 for e in multi.entries)
    assert multi.n_titles == 8


def test_window_and_mask_draw_ranges():
    rng = np.random.default_rng(7)
    index = synthetic_index(rng)
    plan = sample_batch(index, 32, 4, rng, True, AUG, MEL_SHAPE)
    durations = {sid: d for e in index.entries for sid, d in e["shots"]}
    for q in plan.quadruplets:
        slack = durations[q.shot_id] - AUG.snippet_len_s
        assert 0.0 <= q.t_p <= slack
        assert 0.0 <= q.t_s <= slack
        for target, oy, ox in (q.video_p, q.video_s):
            assert AUG.scale_range[0] <= target <= AUG.scale_range[1]
            assert 0 <= oy <= target - AUG.crop[0]
            assert 0 <= ox <= target - AUG.crop[1]
        for spans in (q.mask_p, q.mask_s):
            assert spans.t_start + spans.t_width <= MEL_SHAPE[1]
            assert spans.f_start + spans.f_width <= MEL_SHAPE[0]


def test_collision_probability_closed_forms():
    single = TitleIndex([{"title_id": 0, "shots": [(0, 5.0), (1, 5.0)], "languages": ("L0",)}])
    assert easy_negative_probability(single, 2) == pytest.approx(1.0)

    entries = [
        {"title_id": t, "shots": [(t * 10 + i, 5.0) for i in range(5)], "languages": ("L0",)}
        for t in range(8)
    ]
    equal = TitleIndex(entries)
    assert easy_negative_probability(equal, 2) == pytest.approx(1.0 / 8.0, abs=1e-12)


def test_collision_probability_matches_monte_carlo():
    rng = np.random.default_rng(8)
    entries = []
    sid = 0
    for t in range(10):
        n = int(rng.integers(3, 12))
        entries.append(
            {"title_id": t, "shots": [(sid + i, 5.0) for i in range(n)], "languages": ("L0",)}
        )
        sid += n
    index = TitleIndex(entries)
    b = 4
    exact = easy_negative_probability(index, b)

    masses = index.title_mass()
    p = masses / masses.sum()
    n_trials = 100_000
    draws = rng.choice(len(p), size=(n_trials, b), p=p)
    hits = sum(1 for row in draws if len(set(row.tolist())) < b)
    mc = hits / n_trials
    sigma = np.sqrt(exact * (1 - exact) / n_trials)
    assert abs(mc - exact) < 3 * sigma + 1e-9


def test_plan_validate_catches_duplicates():
    rng = np.random.default_rng(9)
    index = synthetic_index(rng)
    plan = sample_batch(index, 16, 4, rng, False, AUG, MEL_SHAPE)
    q = plan.quadruplets[0]
    broken = BatchPlan(
        quadruplets=plan.quadruplets[:-1] + (q,),
        group_slices=plan.group_slices,
        rng_seed=None,
    )
    with pytest.raises(AssertionError):
        broken.validate()
