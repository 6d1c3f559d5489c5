"""
Tests for the post-hoc analyses: ranking histogram, purity, latent export,
subspace-iteration PCA, refined components and latent separation.
"""

import logging
import math

import numpy as np
import pandas as pd
import pytest

from cvaerec.models.cvae import ConditionedVAE
from cvaerec.schemas.run_config import AnalysisConfig
from cvaerec.services.analysis_service import (
    AnalysisService,
    LatentTable,
    RankHistogram,
    analysis_cases,
    component_report,
    export_latents,
    latent_separation,
    pca,
    ranking_distribution,
    refine_pca,
    sample_users,
    topk_purity,
)
from cvaerec.utils.ndmath import RngStream

logger = logging.getLogger(__name__)


class RandomScorer:
    def __init__(self, seed):
        self.gen = np.random.default_rng(seed)

    def score_batch(self, foldin, conditions, positions=None):
        return self.gen.random(foldin.shape)


def _clustered_table(n_per=40, d=4, seed=0):
    """Three categories with well separated latent centroids plus unconditioned rows"""
    gen = np.random.default_rng(seed)
    centers = np.array([[5.0, 0, 0, 0], [0, 3.5, 0, 0], [0, 0, 2.0, 0], [0, 0, 0, 0]])[:, :d]
    conditions = np.repeat([-1, 0, 1, 2], n_per)
    spread = np.array([0.3, 0.3, 0.2, 0.1])[:d]
    mu = centers[[3, 0, 1, 2]].repeat(n_per, axis=0) + spread * gen.standard_normal((4 * n_per, d))
    users = np.tile(np.arange(n_per), 4)
    return LatentTable(users, conditions, mu, ["A", "B", "C"])


def test_pca_axis_aligned_example():
    x = np.column_stack([
        math.sqrt(3) * np.array([1, -1, 1, -1]),
        math.sqrt(3) / 2 * np.array([1, 1, -1, -1]),
    ])
    result = pca(x, 2)
    assert np.allclose(result.explained_variance, [4.0, 1.0])
    assert np.allclose(result.components, np.eye(2))


def test_pca_matches_eigendecomposition():
    gen = np.random.default_rng(4)
    x = gen.standard_normal((30, 5)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5])
    result = pca(x, 3)
    cov = np.cov(x, rowvar=False)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1][:3]
    assert np.allclose(result.explained_variance, values[order], rtol=1e-8)
    for axis, reference in zip(result.components, vectors[:, order].T):
        assert abs(abs(axis @ reference) - 1.0) < 1e-6


def test_pca_properties():
    """Orthonormal axes, non-increasing variance, uncorrelated projections, sign convention"""
    gen = np.random.default_rng(9)
    rotation, _ = np.linalg.qr(gen.standard_normal((4, 4)))
    x = (gen.standard_normal((50, 4)) * np.array([4.0, 2.0, 1.0, 0.5])) @ rotation.T
    result = pca(x, 4)
    assert np.allclose(result.components @ result.components.T, np.eye(4), atol=1e-8)
    assert np.all(np.diff(result.explained_variance) <= 1e-12)
    proj_cov = np.cov(result.projections, rowvar=False)
    assert np.allclose(proj_cov - np.diag(np.diag(proj_cov)), 0.0, atol=1e-6)
    for axis in result.components:
        assert axis[np.argmax(np.abs(axis))] > 0
    reconstructed = result.projections @ result.components + result.mean
    assert np.allclose(reconstructed, x, atol=1e-6)


def test_pca_top_axis_orthogonal_to_first_basis_vector():
    """The largest-variance axis is found even when an early iterate is already another eigenvector"""
    a = math.sqrt(3) / 2 * np.array([1.0, -1.0, 1.0, -1.0])
    b = math.sqrt(3) / 2 * np.array([1.0, 1.0, -1.0, -1.0])
    w = np.array([1.0, 1.5]) / math.hypot(1.0, 1.5)
    u = np.array([-w[1], w[0]])
    x = 2.0 * np.outer(a, u) + np.outer(b, w)
    result = pca(x, 2)
    assert np.allclose(result.explained_variance, [4.0, 1.0])
    assert abs(abs(result.components[0] @ u) - 1.0) < 1e-8

    # an axis-aligned covariance leaves every basis column fixed; order still follows variance
    gen = np.random.default_rng(2)
    x = gen.standard_normal((40, 3))
    x = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)
    x = np.linalg.qr(x)[0] * math.sqrt(39) * np.array([1.0, 2.0, 3.0])
    top = pca(x, 1)
    assert top.explained_variance[0] == pytest.approx(9.0)
    assert abs(top.components[0, 2]) == pytest.approx(1.0)


def test_pca_rank_deficient(caplog):
    direction = np.array([1.0, 2.0, -2.0]) / 3.0
    x = np.outer(np.arange(10.0), direction)
    with caplog.at_level(logging.WARNING):
        result = pca(x, 3)
    assert result.q == 1
    assert "non-zero principal variance" in caplog.text
    assert abs(abs(result.components[0] @ direction) - 1.0) < 1e-8


def test_pca_rejects_bad_requests():
    with pytest.raises(ValueError):
        pca(np.ones((5, 2)), 3)
    with pytest.raises(ValueError):
        pca(np.ones((1, 2)), 1)


def test_histogram_purity_identity():
    histogram = RankHistogram(np.array([3, 2, 1]), 3, 3)
    assert histogram.purity(2) == pytest.approx(5 / 6)
    assert histogram.purity() == pytest.approx(6 / 9)
    assert histogram.frame()["rank"].tolist() == [1, 2, 3]
    with pytest.raises(ValueError):
        histogram.purity(4)


def test_analysis_cases_cover_history(small_bundle):
    users = small_bundle.train_users[:5]
    cases = analysis_cases(small_bundle.train, users, small_bundle.conditions)
    for user, category in cases:
        history = small_bundle.train[user].indices
        assert small_bundle.conditions.membership[history, category].any()
    assert [u for u, _ in cases] == sorted(u for u, _ in cases)


def test_random_scorer_purity_is_prevalence(small_bundle):
    """Random rankings fill the top-k with category items at the rate they occur among candidates"""
    rows, users, ic = small_bundle.train, small_bundle.train_users, small_bundle.conditions
    cases = analysis_cases(rows, users, ic)
    expected = []
    for user, category in cases:
        allowed = np.ones(ic.m, dtype=bool)
        allowed[rows[user].indices] = False
        expected.append(ic.membership[allowed, category].mean())
    value = topk_purity(RandomScorer(1), rows, users, ic, k=20)
    logger.info(f"Random purity {value:.4f}, candidate prevalence {np.mean(expected):.4f}")
    assert value == pytest.approx(float(np.mean(expected)), abs=0.02)


def test_filtered_purity_is_one(small_bundle):
    value = topk_purity(RandomScorer(2), small_bundle.train, small_bundle.train_users, small_bundle.conditions,
                        k=10, filtered=True)
    assert value == 1.0


def test_histogram_consistent_with_purity(small_bundle):
    args = (small_bundle.train, small_bundle.train_users[:20], small_bundle.conditions)
    histogram = ranking_distribution(RandomScorer(3), *args, max_rank=15)
    assert histogram.purity(15) == pytest.approx(histogram.bins.sum() / (15 * histogram.n_cases))
    assert np.all(histogram.bins <= histogram.n_cases)


def test_export_latents_layout_and_determinism(small_bundle):
    model = ConditionedVAE.create(small_bundle.m, small_bundle.s, 16, 6, RngStream(1, "init"))
    users = sample_users(small_bundle.train_users, 7, seed=5)
    assert np.array_equal(users, sample_users(small_bundle.train_users, 7, seed=5))
    table = export_latents(model, small_bundle.train, users, small_bundle.conditions.category_names, batch_size=4)
    assert len(table.users) == 7 * (small_bundle.s + 1)
    assert table.conditions[:small_bundle.s + 1].tolist() == [-1] + list(range(small_bundle.s))
    assert table.labels()[0] == "(none)"
    again = export_latents(model, small_bundle.train, users, small_bundle.conditions.category_names)
    assert np.allclose(table.mu, again.mu)
    frame = table.frame()
    assert list(frame.columns[-6:]) == [f"z{j}" for j in range(1, 7)]


def test_component_report_centroids():
    table = _clustered_table()
    result = pca(table, 3)
    report = component_report(result, table, [(1, 2)])
    assert len(report) == 4
    row = report[report["condition"] == "B"].iloc[0]
    selected = table.conditions == 1
    assert row["x"] == pytest.approx(result.projections[selected, 0].mean())
    assert row["y"] == pytest.approx(result.projections[selected, 1].mean())
    assert row["n_rows"] == selected.sum()


def test_component_report_ignores_row_order():
    table = _clustered_table()
    order = np.random.default_rng(3).permutation(len(table.users))
    shuffled = LatentTable(table.users[order], table.conditions[order], table.mu[order], table.category_names)
    a = component_report(pca(table, 3), table, [(1, 3)])
    b = component_report(pca(shuffled, 3), shuffled, [(1, 3)])
    pd.testing.assert_frame_equal(a, b, rtol=1e-6)


def test_refine_pca_numbering_and_recompute():
    """Dropping the leading axis keeps later numbering; recomputing reproduces the kept axes"""
    table = _clustered_table(d=4)
    kept = refine_pca(table, 4, neutral_labels=["C"], drop_leading=1, recompute=False)
    recomputed = refine_pca(table, 4, neutral_labels=["C"], drop_leading=1, recompute=True)
    assert kept.numbers == [2, 3, 4]
    assert recomputed.numbers == [2, 3, 4]
    assert np.allclose(kept.explained_variance, recomputed.explained_variance, rtol=1e-6)
    for a, b in zip(kept.components, recomputed.components):
        assert abs(abs(a @ b) - 1.0) < 1e-5
    assert len(kept.rows) == int(np.sum(table.conditions != 2))
    with pytest.raises(ValueError):
        kept.column(1)
    with pytest.raises(ValueError):
        refine_pca(table, 2, drop_leading=2)


def test_latent_separation():
    score = latent_separation(_clustered_table())
    assert score.n_categories == 3
    assert score.ratio > 1.0
    single = LatentTable(np.arange(3), np.array([-1, 0, 0]), np.zeros((3, 2)), ["A"])
    with pytest.raises(ValueError):
        latent_separation(single)


def test_analysis_service_writes_files(tmp_path, small_bundle):
    model = ConditionedVAE.create(small_bundle.m, small_bundle.s, 16, 8, RngStream(2, "init"))
    config = AnalysisConfig(max_rank=20, purity_k=10, n_latent_users=30, pca_components=5)
    service = AnalysisService(model, small_bundle.train, small_bundle.train_users, small_bundle.conditions,
                              config, str(tmp_path), seed=7)
    histogram = service.ranking()
    assert histogram.n_cases > 0
    assert 0.0 <= service.purity() <= 1.0
    reports = service.pca()
    assert set(reports) == {"2-5", "3-5"}
    for name in ("ranking_distribution.csv", "purity.csv", "latents.csv", "latent_separation.csv",
                 "pca_components.csv", "component_report_2_5.csv", "component_report_3_5.csv"):
        assert (tmp_path / name).exists(), name
    components = pd.read_csv(tmp_path / "pca_components.csv")
    assert components["component"].tolist() == [2, 3, 4, 5]
    latents = pd.read_csv(tmp_path / "latents.csv")
    assert len(latents) == 30 * (small_bundle.s + 1)
