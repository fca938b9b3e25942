"""Wild-set composition oracles: hand-worked image statistics, a brute-force
selection reference, and frozen noise-flag expectations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agescreen.bench import (
    ALL_CRITERIA,
    NoiseFlag,
    NoiseRules,
    SelectionCriteria,
    build_eval_groups,
    compose_wild,
    expression_intensity,
    flag_label_noise,
    flags_csv,
    image_stats,
    laplacian_variance,
    load_image,
    mean_saturation,
    percentile_select,
    pose_norm,
    read_stats_csv,
    to_grayscale,
)
from agescreen.data import Metadata, Sample


def test_grayscale_uses_bt601_weights():
    red = np.zeros((1, 1, 3)); red[0, 0, 0] = 255
    green = np.zeros((1, 1, 3)); green[0, 0, 1] = 255
    blue = np.zeros((1, 1, 3)); blue[0, 0, 2] = 255
    assert to_grayscale(red)[0, 0] == pytest.approx(76.245)
    assert to_grayscale(green)[0, 0] == pytest.approx(149.685)
    assert to_grayscale(blue)[0, 0] == pytest.approx(29.07)


def test_constant_image_has_zero_contrast_and_sharpness():
    gray = np.full((5, 7), 128.0)
    stats = image_stats(gray)
    assert stats.brightness == 128.0
    assert stats.contrast == 0.0
    assert stats.sharpness == 0.0
    assert stats.saturation == 0.0

    color = np.zeros((5, 7, 3))
    color[..., 0], color[..., 1], color[..., 2] = 64.0, 128.0, 200.0
    stats = image_stats(color)
    assert stats.contrast == pytest.approx(0.0, abs=1e-9)
    assert stats.sharpness == pytest.approx(0.0, abs=1e-9)
    assert stats.saturation == pytest.approx((200 - 64) / 200)


def test_saturation_hand_worked_pixels():
    px = np.array([
        [[255, 0, 0], [255, 255, 255]],
        [[0, 0, 0], [200, 100, 100]],
    ], dtype=np.uint8)
    # per-pixel: 1.0, 0.0, 0.0 (black by convention), 0.5
    assert mean_saturation(px) == pytest.approx((1.0 + 0.0 + 0.0 + 0.5) / 4)


def test_sharpness_matches_loop_reference():
    rng = np.random.default_rng(0)
    gray = rng.uniform(0, 255, size=(8, 10))
    values = []
    for i in range(1, 7):
        for j in range(1, 9):
            values.append(
                gray[i - 1, j] + gray[i + 1, j] + gray[i, j - 1] + gray[i, j + 1]
                - 4 * gray[i, j]
            )
    expected = np.var(values)
    assert laplacian_variance(gray) == pytest.approx(expected, rel=1e-12)


def test_sharpness_needs_a_3x3_interior():
    with pytest.raises(ValueError):
        laplacian_variance(np.zeros((2, 5)))


def test_brightness_is_gray_mean():
    rng = np.random.default_rng(1)
    px = rng.integers(0, 256, size=(6, 6, 3)).astype(np.uint8)
    assert image_stats(px).brightness == pytest.approx(to_grayscale(px).mean())


def test_image_decode_round_trip(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(2)
    px = rng.integers(0, 256, size=(9, 11, 3)).astype(np.uint8)
    path = tmp_path / "img.png"
    Image.fromarray(px).save(path)
    decoded = load_image(path)
    assert np.array_equal(decoded, px)
    assert image_stats(decoded) == image_stats(px)


def test_percentile_select_floor_counts():
    values = [(f"v{i}", float(i)) for i in range(1, 101)]
    assert percentile_select(values, 8.0, "lowest") == [f"v{i}" for i in range(1, 9)]
    assert percentile_select(values, 8.0, "highest") == [f"v{i}" for i in range(100, 92, -1)]
    # floor(25 * 0.10) = 2
    assert len(percentile_select(values[:25], 10.0, "lowest")) == 2
    assert percentile_select(values[:5], 1.0, "lowest") == []


def test_percentile_select_stable_ties():
    values = [("a", 1.0), ("b", 1.0), ("c", 1.0), ("d", 1.0)]
    assert percentile_select(values, 50.0, "lowest") == ["a", "b"]
    assert percentile_select(values, 50.0, "highest") == ["a", "b"]


def test_percentile_select_validation():
    with pytest.raises(ValueError):
        percentile_select([("a", 1.0)], 150.0, "lowest")
    with pytest.raises(ValueError):
        percentile_select([("a", 1.0)], 10.0, "middle")


@given(st.floats(-90, 90), st.floats(-90, 90), st.floats(-90, 90))
@settings(max_examples=100, deadline=None)
def test_pose_norm_symmetric_and_nonnegative(p, y, r):
    n = pose_norm(p, y, r)
    assert n >= 0.0
    assert n == pytest.approx(pose_norm(y, r, p), rel=1e-12)
    assert n == pytest.approx(pose_norm(-p, -y, -r), rel=1e-12)


def test_expression_intensity_is_euclidean():
    assert expression_intensity(0.3, 0.4) == pytest.approx(0.5)
    assert expression_intensity(0.0, 0.0) == 0.0


def _sample(i, source, split="test", meta=None, **extra):
    return Sample(
        id=f"{source}-{i:03d}", age=20 + (i % 30), source=source, split=split,
        embedding_index=i, meta=meta, **({"extra": extra} if extra else {}),
    )


def _meta_from_seeded(rng):
    return Metadata(
        pitch=float(rng.uniform(-60, 60)),
        yaw=float(rng.uniform(-60, 60)),
        roll=float(rng.uniform(-30, 30)),
        brightness=float(rng.uniform(20, 230)),
        contrast=float(rng.uniform(5, 90)),
        saturation=float(rng.uniform(0, 1)),
        sharpness=float(rng.uniform(1, 500)),
        arousal=float(rng.uniform(-1, 1)),
        valence=float(rng.uniform(-1, 1)),
    )


def build_corpus(n_alpha=60, n_beta=25, n_gamma=15, n_missing=5):
    rng = np.random.default_rng(9)
    samples = []
    for i in range(n_alpha):
        samples.append(_sample(i, "alpha", meta=_meta_from_seeded(rng)))
    for i in range(n_beta):
        samples.append(_sample(i, "beta", meta=_meta_from_seeded(rng)))
    for i in range(n_gamma):
        samples.append(_sample(i, "gamma", meta=_meta_from_seeded(rng)))
    for i in range(n_missing):
        samples.append(_sample(100 + i, "beta", meta=None))
    return samples


def brute_force_compose(samples, criteria):
    """Independent loop-based reference for the percentile and threshold rules."""
    expected = {}
    designated = set(criteria.designated_sources)

    def cut(stat, pct, lowest):
        pools = []
        for src in criteria.designated_sources:
            pool = [s for s in samples if s.source == src]
            if pool:
                pools.append((pool, pct / 2))
        rest = [s for s in samples if s.source not in designated]
        if rest:
            pools.append((rest, pct))
        picked = []
        for pool, p in pools:
            eligible = [s for s in pool if s.meta is not None and s.meta.get(stat) is not None]
            k = int(len(eligible) * p / 100)
            key = (lambda s: s.meta.get(stat)) if lowest else (lambda s: -s.meta.get(stat))
            ranked = sorted(eligible, key=key)
            picked += [s.id for s in ranked[:k]]
        return set(picked)

    expected["low_contrast"] = cut("contrast", criteria.low_contrast_pct, True)
    expected["low_sharpness"] = cut("sharpness", criteria.low_sharpness_pct, True)
    expected["low_brightness"] = cut("brightness", criteria.low_brightness_pct, True)
    expected["low_saturation"] = cut("saturation", criteria.low_saturation_pct, True)
    expected["high_saturation"] = cut("saturation", criteria.high_saturation_pct, False)
    expected["strong_pose"] = {
        s.id for s in samples if s.meta is not None and s.meta.pitch is not None
        and (s.meta.pitch ** 2 + s.meta.yaw ** 2 + s.meta.roll ** 2) ** 0.5 > criteria.pose_threshold
    }
    expected["strong_expression"] = {
        s.id for s in samples if s.meta is not None and s.meta.arousal is not None
        and (s.meta.arousal ** 2 + s.meta.valence ** 2) ** 0.5 > criteria.expression_threshold
    }
    return expected


def test_compose_wild_matches_brute_force():
    samples = build_corpus()
    criteria = SelectionCriteria(designated_sources=("alpha",))
    selection = compose_wild(samples, criteria)
    expected = brute_force_compose(samples, criteria)
    for criterion in ALL_CRITERIA:
        assert set(selection.per_criterion[criterion]) == expected[criterion], criterion
    assert set(selection.union) == set().union(*expected.values())
    # five samples carry no metadata at all
    assert selection.missing["low_contrast"] == 5
    assert selection.missing["strong_pose"] == 5


def test_compose_wild_is_deterministic():
    samples = build_corpus()
    criteria = SelectionCriteria(designated_sources=("alpha",))
    a = compose_wild(samples, criteria)
    b = compose_wild(samples, criteria)
    assert a.per_criterion == b.per_criterion
    assert a.union == b.union


def test_designated_pool_percentage_is_halved():
    # 100 alpha (designated) + 50 beta, every stat present
    samples = build_corpus(n_alpha=100, n_beta=50, n_gamma=0, n_missing=0)
    criteria = SelectionCriteria(designated_sources=("alpha",))
    selection = compose_wild(samples, criteria)
    per_source = {"alpha": 0, "beta": 0}
    for sid in selection.per_criterion["low_contrast"]:
        per_source[sid.split("-")[0]] += 1
    # alpha cut at 4% of 100, beta at 8% of 50
    assert per_source == {"alpha": 4, "beta": 4}


def test_breakdown_csv_shape():
    samples = build_corpus()
    selection = compose_wild(samples, SelectionCriteria(designated_sources=("alpha",)))
    text = selection.breakdown_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "criterion,alpha,beta,gamma,total"
    assert len(lines) == 1 + len(ALL_CRITERIA) + 1
    assert lines[-1].startswith("union,")
    union_total = int(lines[-1].split(",")[-1])
    assert union_total == len(selection.union)


def test_stats_overlay_fills_missing_metadata():
    bare = [_sample(i, "solo", meta=None) for i in range(10)]
    overlay = {s.id: {"contrast": float(i)} for i, s in enumerate(bare)}
    selection = compose_wild(bare, SelectionCriteria(low_contrast_pct=20.0), stats=overlay)
    assert set(selection.per_criterion["low_contrast"]) == {"solo-000", "solo-001"}
    assert selection.missing["low_contrast"] == 0


def test_expression_category_override():
    metas = [Metadata(arousal=0.3, valence=0.0), Metadata(arousal=0.3, valence=0.0)]
    samples = [
        Sample(id="plain", age=30, source="x", split="test", embedding_index=0, meta=metas[0]),
        Sample(id="tagged", age=30, source="x", split="test", embedding_index=1,
               meta=metas[1], extra={"expression": "surprise"}),
    ]
    criteria = SelectionCriteria(expression_overrides={"surprise": 0.2})
    chosen = compose_wild(samples, criteria).per_criterion["strong_expression"]
    # intensity 0.3 clears only the overridden 0.2 cutoff
    assert chosen == ("tagged",)


def test_expression_quota_admits_strongest_runners_up():
    samples = []
    for i, a in enumerate([0.1, 0.2, 0.3, 0.4, 0.5]):
        samples.append(Sample(id=f"e{i}", age=30, source="x", split="test",
                              embedding_index=i, meta=Metadata(arousal=a, valence=0.0)))
    criteria = SelectionCriteria(expression_threshold=0.9, expression_quota=3)
    chosen = compose_wild(samples, criteria).per_criterion["strong_expression"]
    assert set(chosen) == {"e4", "e3", "e2"}


def test_criteria_dict_round_trip_and_unknown_keys():
    criteria = SelectionCriteria(designated_sources=("a",), expression_quota=40)
    assert SelectionCriteria.from_dict(criteria.to_dict()) == criteria
    with pytest.raises(ValueError, match="unknown"):
        SelectionCriteria.from_dict({"low_contrast_percent": 8})


def test_build_eval_groups_by_source_and_percentile():
    samples = build_corpus(n_alpha=10, n_beta=10, n_gamma=0, n_missing=0)
    groups = build_eval_groups(samples, [{"by": "source"},
                                         {"name": "dark-20", "stat": "brightness",
                                          "mode": "lowest", "pct": 20}])
    names = [g[0] for g in groups]
    assert names == ["overall", "source=alpha", "source=beta", "dark-20"]
    assert groups[0][1] is None
    dark = groups[3][1]
    assert len(dark) == 4  # floor(20 * 0.2)
    ranked = sorted(samples, key=lambda s: s.meta.brightness)
    assert dark == frozenset(s.id for s in ranked[:4])


def test_build_eval_groups_derived_stats():
    samples = build_corpus(n_alpha=10, n_beta=0, n_gamma=0, n_missing=0)
    groups = build_eval_groups(samples, [
        {"name": "posey", "stat": "pose_norm", "mode": "highest", "pct": 30},
        {"name": "intense", "stat": "expression_intensity", "mode": "highest", "pct": 30},
    ])
    posey = dict(groups)["posey"]
    ranked = sorted(
        samples,
        key=lambda s: -pose_norm(s.meta.pitch, s.meta.yaw, s.meta.roll),
    )
    assert posey == frozenset(s.id for s in ranked[:3])
    assert len(dict(groups)["intense"]) == 3


def test_build_eval_groups_validation():
    samples = build_corpus(n_alpha=2, n_beta=0, n_gamma=0, n_missing=0)
    with pytest.raises(ValueError):
        build_eval_groups(samples, [{"by": "split"}])
    with pytest.raises(ValueError):
        build_eval_groups(samples, [{"name": "x", "stat": "brightness"}])


def noise_rows():
    rows = []
    # 400 adults with ascending scores; lowest 0.5% = 2 flagged
    for i in range(400):
        rows.append((f"adult{i:03d}", 30, 30.0, 0.001 * (i + 1)))
    # 100 minors with ascending scores; highest 2% = 2 flagged
    for i in range(100):
        rows.append((f"minor{i:03d}", 10, 10.0, 0.001 * (i + 1)))
    return rows


def test_quantile_noise_rules_flag_the_extremes():
    flags = flag_label_noise(noise_rows())
    tagged = {(f.id, f.rule) for f in flags}
    assert ("adult000", "adult_low_score") in tagged
    assert ("adult001", "adult_low_score") in tagged
    assert ("minor099", "minor_high_score") in tagged
    assert ("minor098", "minor_high_score") in tagged
    assert len(tagged) == 4


def test_error_noise_rules():
    rows = [
        ("deep-under", 60, 20.0, 0.9),   # error -40, estimate below the cap
        ("capped", 60, 30.0, 0.9),       # error -30 but estimate 30 >= 24
        ("over-minor", 10, 19.5, 0.5),   # minor overshot by 9.5
        ("over-adult", 20, 40.0, 0.1),   # adults are not checked for overshoot
        ("fine", 25, 26.0, 0.8),
    ]
    flags = flag_label_noise(rows, NoiseRules(adult_low_pct=0.0, minor_high_pct=0.0))
    tagged = {(f.id, f.rule) for f in flags}
    assert tagged == {
        ("deep-under", "underestimated"),
        ("over-minor", "overestimated_minor"),
    }


def test_one_sample_can_trip_two_rules():
    rows = [("both", 10, 20.0, 0.99)] + [(f"m{i}", 10, 10.0, 0.001) for i in range(99)]
    flags = flag_label_noise(rows)
    rules_for_both = {f.rule for f in flags if f.id == "both"}
    assert rules_for_both == {"minor_high_score", "overestimated_minor"}


def test_flags_csv_format():
    text = flags_csv([NoiseFlag("a", "underestimated"), NoiseFlag("b", "minor_high_score")])
    assert text == "id,rule\na,underestimated\nb,minor_high_score\n"


def test_read_stats_csv(tmp_path):
    path = tmp_path / "stats.csv"
    path.write_text("id,brightness,sharpness\nx,12.5,\ny,200,3.25\n")
    stats = read_stats_csv(path)
    assert stats == {"x": {"brightness": 12.5}, "y": {"brightness": 200.0, "sharpness": 3.25}}
    bad = tmp_path / "bad.csv"
    bad.write_text("name,brightness\nx,1\n")
    with pytest.raises(ValueError, match="id"):
        read_stats_csv(bad)
