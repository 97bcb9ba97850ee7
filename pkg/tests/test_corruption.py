"""Corruption tests: missingness injection, threshold noise, label flips."""

import math

import numpy as np
import pytest

from anemia_pathways.catalog import DEFAULT_CATALOG, DiagnosisClass
from anemia_pathways.corruption import (
    ANEMIC_CLASSES,
    CorruptionConfig,
    default_corruption_config,
    inject_missingness,
    inject_noise,
)

IDX = DEFAULT_CATALOG.index_of


def test_missingness_zero_level_is_identity(full_dataset):
    out = inject_missingness(full_dataset, 0.0, seed=1)
    assert np.array_equal(out.values, full_dataset.values, equal_nan=True)
    assert np.array_equal(out.labels, full_dataset.labels)


def test_missingness_counts_and_exemptions(full_dataset):
    out = inject_missingness(full_dataset, 0.3, seed=1)
    for feature in DEFAULT_CATALOG.names:
        col = IDX(feature)
        before = int(np.sum(~np.isnan(full_dataset.values[:, col])))
        after = int(np.sum(~np.isnan(out.values[:, col])))
        if feature in ("hemoglobin", "gender"):
            assert after == before == len(full_dataset)
        else:
            assert before - after == math.floor(0.3 * before)
    assert np.array_equal(out.labels, full_dataset.labels)


def test_missingness_only_hides_never_alters(full_dataset):
    out = inject_missingness(full_dataset, 0.5, seed=2)
    both = ~np.isnan(out.values) & ~np.isnan(full_dataset.values)
    assert np.array_equal(out.values[both], full_dataset.values[both])
    # Nothing that was missing became present.
    assert not np.any(np.isnan(full_dataset.values) & ~np.isnan(out.values))


def test_missingness_full_level_leaves_screen_features(full_dataset):
    out = inject_missingness(full_dataset, 1.0, seed=3)
    observed = ~np.isnan(out.values)
    for feature in DEFAULT_CATALOG.names:
        col = IDX(feature)
        if feature in ("hemoglobin", "gender"):
            assert observed[:, col].all()
        else:
            assert not observed[:, col].any()


def test_missingness_determinism_and_range(full_dataset):
    a = inject_missingness(full_dataset, 0.2, seed=5)
    b = inject_missingness(full_dataset, 0.2, seed=5)
    assert np.array_equal(a.values, b.values, equal_nan=True)
    with pytest.raises(ValueError):
        inject_missingness(full_dataset, 1.5, seed=5)


def test_noise_zero_level_flips_labels_only(full_dataset):
    out = inject_noise(full_dataset, 0.0, seed=4)
    assert np.array_equal(out.values, full_dataset.values, equal_nan=True)
    anemic = np.isin(full_dataset.labels, [c.value for c in ANEMIC_CLASSES])
    flipped = out.labels != full_dataset.labels
    assert flipped.sum() == math.floor(0.10 * anemic.sum())
    assert np.all(out.labels[flipped] == DiagnosisClass.NO_ANEMIA.value)
    assert np.all(anemic[flipped])


def test_noise_resamples_branch_features_at_thresholds(full_dataset):
    out = inject_noise(full_dataset, 0.2, seed=6)
    hemo = full_dataset.labels == DiagnosisClass.HEMOLYTIC.value
    n = int(hemo.sum())

    retic = IDX("reticulocyte_count")
    before = full_dataset.values[hemo, retic]
    after = out.values[hemo, retic]
    assert not np.any(np.isnan(before))
    changed = after != before
    assert changed.sum() == math.floor(0.2 * n)
    resampled = after[changed]
    assert abs(float(np.mean(resampled)) - 2.0) < 0.03
    assert abs(float(np.std(resampled)) - 0.2) < 0.03

    mcv = IDX("mcv")
    mb, ma = full_dataset.values[hemo, mcv], out.values[hemo, mcv]
    mchanged = ma != mb
    assert mchanged.sum() == 2 * math.floor(0.1 * n)
    near80 = np.abs(ma[mchanged] - 80.0) < 10.0
    near100 = np.abs(ma[mchanged] - 100.0) < 10.0
    assert int(near80.sum()) == math.floor(0.1 * n)
    assert int(near100.sum()) == math.floor(0.1 * n)

    hgb = IDX("hemoglobin")
    hb, ha = full_dataset.values[hemo, hgb], out.values[hemo, hgb]
    hchanged = ha != hb
    assert hchanged.sum() == math.floor(0.2 * n)
    gender = full_dataset.values[hemo, IDX("gender")][hchanged]
    centers = np.where(gender == 1.0, 13.0, 12.0)
    assert np.all(np.abs(ha[hchanged] - centers) < 2.0)


def test_noise_leaves_exempt_classes_untouched(full_dataset):
    out = inject_noise(full_dataset, 0.4, seed=7)
    for cls in (DiagnosisClass.NO_ANEMIA, DiagnosisClass.INCONCLUSIVE):
        rows = full_dataset.labels == cls.value
        assert np.array_equal(
            out.values[rows], full_dataset.values[rows], equal_nan=True)


def test_noise_label_flip_happens_at_every_level(full_dataset):
    anemic = int(np.isin(full_dataset.labels,
                         [c.value for c in ANEMIC_CLASSES]).sum())
    for level in (0.0, 0.3):
        out = inject_noise(full_dataset, level, seed=8)
        assert (out.labels != full_dataset.labels).sum() == math.floor(0.10 * anemic)


def test_noise_never_implants_missing_values(full_dataset):
    hidden = inject_missingness(full_dataset, 0.4, seed=9)
    out = inject_noise(hidden, 0.5, seed=9)
    assert not np.any(np.isnan(hidden.values) & ~np.isnan(out.values))
    # Counts follow the present population, not the row count.
    ida = hidden.labels == DiagnosisClass.IRON_DEFICIENCY.value
    tibc = IDX("tibc")
    present = ida & ~np.isnan(hidden.values[:, tibc])
    changed = (~np.isnan(out.values[:, tibc]) & ~np.isnan(hidden.values[:, tibc])
               & (out.values[:, tibc] != hidden.values[:, tibc]) & ida)
    assert changed.sum() == math.floor(0.5 * present.sum())


def test_noise_requires_sigma_for_every_branch_threshold(full_dataset):
    config = default_corruption_config()
    del config.noise_sigmas[("tibc", 450.0)]
    with pytest.raises(ValueError, match="tibc"):
        inject_noise(full_dataset, 0.2, config=config, seed=10)


def test_noise_determinism(full_dataset):
    a = inject_noise(full_dataset, 0.25, seed=11)
    b = inject_noise(full_dataset, 0.25, seed=11)
    assert np.array_equal(a.values, b.values, equal_nan=True)
    assert np.array_equal(a.labels, b.labels)


def test_noise_values_stay_nonnegative(full_dataset):
    out = inject_noise(full_dataset, 1.0, seed=12)
    observed = out.values[~np.isnan(out.values)]
    assert np.all(observed >= 0.0)


def test_corruption_config_parses_packaged_defaults():
    config = default_corruption_config()
    assert config.sigma_for("mcv", 80.0) == 2.0
    assert config.sigma_for("reticulocyte_count", 2.0) == 0.2
    assert config.sigma_for("hemoglobin", 13.0) == pytest.approx(0.325)
    assert config.label_flip_fraction == 0.10
    with pytest.raises(ValueError):
        config.sigma_for("glucose", 1.0)
