"""Synthetic domain family: geometry oracles, determinism, and transfer.

The headline property: a source trained on a 90-degree-rotated domain is
useless as a direct classifier on the target (its class means coincide
with the wrong classes), yet aligning to its representations still lifts
target accuracy well above the supervised baseline.
"""

import numpy as np
import pytest

from modelpipe.reuse import (
    BENCHMARK_SPEC,
    SynthSpec,
    accuracy,
    benchmark_config,
    domain_means,
    make_synthetic_domains,
    sample_domain,
    train_target,
)

SMALL = SynthSpec(
    source_rotations=(0.0,),
    source_shifts=((0.0, 0.0),),
    source_samples=400,
    source_holdout=400,
    source_epochs=30,
    target_samples=200,
    target_holdout=600,
)
ROTATED = SynthSpec(
    source_rotations=(90.0,),
    source_shifts=((0.0, 0.0),),
    source_samples=400,
    source_holdout=400,
    source_epochs=30,
    target_samples=200,
    target_holdout=600,
)


# --- geometry oracles --------------------------------------------------------------


def test_unrotated_means_sit_on_the_axes():
    means = domain_means(SMALL, 0.0, (0.0, 0.0))
    want_xy = np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0], [0.0, -2.0]])
    np.testing.assert_allclose(means[:, :2], want_xy, atol=1e-12)
    assert np.all(means[:, 2:] == 0.0)


def test_quarter_rotation_advances_each_class_one_slot():
    base = domain_means(SMALL, 0.0, (0.0, 0.0))
    turned = domain_means(SMALL, 90.0, (0.0, 0.0))
    np.testing.assert_allclose(turned, np.roll(base, -1, axis=0), atol=1e-12)


def test_shift_translates_only_the_circle_plane():
    base = domain_means(SMALL, 35.0, (0.0, 0.0))
    moved = domain_means(SMALL, 35.0, (0.5, -0.3))
    np.testing.assert_allclose(moved[:, 0], base[:, 0] + 0.5, atol=1e-12)
    np.testing.assert_allclose(moved[:, 1], base[:, 1] - 0.3, atol=1e-12)
    np.testing.assert_array_equal(moved[:, 2:], base[:, 2:])


def test_samples_cluster_at_their_class_mean():
    spec = SynthSpec(cluster_std=1e-9, source_rotations=(0.0,), source_shifts=((0.0, 0.0),))
    means = domain_means(spec, 0.0, (0.0, 0.0))
    x, y = sample_domain(means, spec, 64, np.random.default_rng(0))
    assert y.min() >= 0 and y.max() < spec.class_count
    np.testing.assert_allclose(x, means[y], atol=1e-6)


# --- determinism -------------------------------------------------------------------


def test_benchmark_generation_is_seed_deterministic():
    a = make_synthetic_domains(SMALL, 3)
    b = make_synthetic_domains(SMALL, 3)
    assert a.target_data.labeled_x.tobytes() == b.target_data.labeled_x.tobytes()
    assert a.target_data.holdout_x.tobytes() == b.target_data.holdout_x.tobytes()
    assert a.sources.models[0].parameter_bytes() == b.sources.models[0].parameter_bytes()
    assert a.source_accuracy == b.source_accuracy
    c = make_synthetic_domains(SMALL, 4)
    assert c.target_data.labeled_x.tobytes() != a.target_data.labeled_x.tobytes()


def test_dataset_split_sizes_follow_the_spec_fields():
    bench = make_synthetic_domains(SMALL, 0)
    target = bench.target_data
    assert target.n_labeled == round(SMALL.target_samples * SMALL.labeled_fraction)
    assert target.n_labeled + target.n_unlabeled == SMALL.target_samples
    assert target.holdout_x.shape == (SMALL.target_holdout, SMALL.feature_dim)
    assert bench.sources.rep_layers == (len(SMALL.source_hidden),)


def test_recorded_source_accuracy_matches_recomputation():
    bench = make_synthetic_domains(SMALL, 1)
    data = bench.source_data[0]
    got = accuracy(bench.sources.models[0], data.holdout_x, data.holdout_y)
    assert bench.source_accuracy == (got,)
    assert got > 0.8  # sources are trained to competence on their own domain


# --- transfer behavior -------------------------------------------------------------


def test_aligned_source_classifies_the_target_directly():
    for seed in range(3):
        bench = make_synthetic_domains(SMALL, seed)
        direct = accuracy(
            bench.sources.models[0], bench.target_data.holdout_x, bench.target_data.holdout_y
        )
        assert direct >= 0.8


def test_rotated_source_is_useless_directly_but_reuse_still_helps():
    gaps = []
    for seed in range(4):
        bench = make_synthetic_domains(ROTATED, seed)
        direct = accuracy(
            bench.sources.models[0], bench.target_data.holdout_x, bench.target_data.holdout_y
        )
        assert direct <= 0.35  # below the 0.25 chance line in practice
        baseline = train_target(
            None, bench.target_data, benchmark_config(0.0, seed, spec=ROTATED, epochs=120)
        )
        reused = train_target(
            bench.sources, bench.target_data,
            benchmark_config(5.0, seed, spec=ROTATED, epochs=120),
        )
        gaps.append(reused.trace[-1].holdout - baseline.trace[-1].holdout)
    assert float(np.mean(gaps)) > 0.10


# --- published configuration -------------------------------------------------------


def test_bundled_benchmark_shape_is_pinned():
    assert BENCHMARK_SPEC.class_count == 4
    assert BENCHMARK_SPEC.feature_dim == 12
    assert BENCHMARK_SPEC.cluster_std == 0.9
    assert BENCHMARK_SPEC.num_sources == 3
    assert BENCHMARK_SPEC.source_hidden == (16, 8)
    assert BENCHMARK_SPEC.labeled_fraction == 0.10


def test_benchmark_config_defaults():
    config = benchmark_config()
    assert config.gamma == 5.0
    assert config.epochs == 200
    assert config.step_size == 2e-3
    assert config.hidden_widths == BENCHMARK_SPEC.source_hidden
    assert config.alpha is None


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(source_rotations=(10.0, 20.0), source_shifts=((0.0, 0.0),))
    with pytest.raises(ValueError):
        SynthSpec(labeled_fraction=0.0)
    with pytest.raises(ValueError):
        SynthSpec(class_count=1)
