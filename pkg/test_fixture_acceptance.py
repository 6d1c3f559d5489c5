"""
Desk-scale acceptance runs on the seeded synthetic fixture (about 1,000 users,
200 items, 5 categories). Each run trains full models, so the module is marked
slow:

    pytest -m slow test_fixture_acceptance.py
"""

import logging

import numpy as np
import pytest

from cvaerec.models.checkpoint import load_checkpoint
from cvaerec.schemas.run_config import EvalProtocol, load_run_config
from cvaerec.services.analysis_service import export_latents, latent_separation, sample_users, topk_purity
from cvaerec.services.data_service import DataService, read_split
from cvaerec.services.evaluation_service import evaluate, recommend
from cvaerec.services.fixture_service import FixtureSpec, write_fixture
from cvaerec.services.training_service import TrainingService

logger = logging.getLogger(__name__)

pytestmark = pytest.mark.slow


def _pipeline(root):
    """fixture -> preprocess -> two-phase C-VAE training -> baseline training"""
    paths = write_fixture(str(root / "data"), FixtureSpec())
    config = load_run_config(str(paths["config"]))
    DataService(config.dataset, config.split).preprocess(str(root / "split"))
    bundle = read_split(str(root / "split"))
    cvae = TrainingService(bundle, config, str(root / "train")).two_phase_train("both")
    baseline = TrainingService(bundle, config, str(root / "baseline"), unconditioned=True).two_phase_train("both")
    return config, bundle, cvae, baseline


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    config, bundle, cvae, baseline = _pipeline(root)
    return {
        "root": root,
        "config": config,
        "bundle": bundle,
        "cvae": cvae,
        "baseline": baseline,
        "model": load_checkpoint(str(cvae.checkpoint_path), bundle.m, bundle.s).to_model(),
        "baseline_model": load_checkpoint(str(baseline.checkpoint_path), bundle.m, 0).to_model(),
    }


def test_conditioned_purity(trained):
    bundle = trained["bundle"]
    value = topk_purity(trained["model"], bundle.train, bundle.train_users, bundle.conditions, k=20)
    logger.info(f"Top-20 purity on the fixture: {value:.4f}")
    assert value >= 0.95


def test_conditioned_quality_close_to_filtered_baseline(trained):
    bundle = trained["bundle"]
    protocol = EvalProtocol(kind="conditioned", ks_recall=[20], ks_ndcg=[20])
    cvae = evaluate(trained["model"], bundle.test, bundle.conditions, protocol)
    baseline = evaluate(trained["baseline_model"], bundle.test, bundle.conditions, protocol,
                        filtered=True, method="Mult-VAE")
    ndcg = {s.method: s.mean for s in cvae.summaries + baseline.summaries if s.metric == "ndcg"}
    logger.info(f"Conditioned nDCG@20: {ndcg}")
    assert ndcg["C-VAE"] >= 0.9 * ndcg["Mult-VAE"]


def test_latent_separation(trained):
    bundle = trained["bundle"]
    users = sample_users(bundle.train_users, 300, seed=trained["config"].seed)
    table = export_latents(trained["model"], bundle.train, users, bundle.conditions.category_names)
    score = latent_separation(table)
    logger.info(f"Latent separation ratio {score.ratio:.3f}")
    assert score.ratio > 1.0


def test_phase_two_does_not_regress(trained):
    phase1, phase2 = trained["cvae"].phases
    assert phase2.summary.best_score >= phase1.summary.best_score - 0.01
    assert phase2.summary.cap == phase1.summary.best_beta


def test_conditioned_recommendations_stay_in_category(trained):
    bundle = trained["bundle"]
    condition = bundle.conditions.index_of("Charlie")
    user = int(bundle.train_users[0])
    history = [bundle.item_ids[i] for i in bundle.train[user].indices]
    top = recommend(trained["model"], history, bundle.item_ids, condition, n=10)
    index = {item: i for i, item in enumerate(bundle.item_ids)}
    assert all(bundle.conditions.membership[index[item], condition] for item, _ in top)


def test_full_runs_are_bitwise_identical(trained, tmp_path):
    _, _, cvae, _ = _pipeline(tmp_path)
    first = trained["cvae"].checkpoint_path.read_bytes()
    assert cvae.checkpoint_path.read_bytes() == first
    protocol = EvalProtocol(kind="total", ks_recall=[20], ks_ndcg=[100])
    bundle = trained["bundle"]
    again = load_checkpoint(str(cvae.checkpoint_path)).to_model()
    a = evaluate(trained["model"], bundle.test, bundle.conditions, protocol)
    b = evaluate(again, bundle.test, bundle.conditions, protocol)
    assert [s.model_dump() for s in a.summaries] == [s.model_dump() for s in b.summaries]
    assert np.array_equal(a.cases.to_numpy(), b.cases.to_numpy())
