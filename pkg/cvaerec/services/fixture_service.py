"""
Seeded synthetic dataset with block-structured preferences.

Items are split into equal blocks, one category per block; every
``overlap_every``-th item also belongs to the next block. Users fall into
clusters, each cluster preferring one block. A user rates a handful of items of
the preferred block, a few of one secondary block and a couple of random items
(ratings 3-5), plus some low ratings (1-2) that the rating threshold removes.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from cvaerec.utils.ndmath import RngStream

logger = logging.getLogger(__name__)

BLOCK_LABELS = ["Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel", "India", "Juliett"]


@dataclass
class FixtureSpec:
    n_users: int = 1000
    n_clusters: int = 5
    n_items: int = 200
    n_blocks: int = 5
    overlap_every: int = 10
    primary: Tuple[int, int] = (12, 20)
    secondary: Tuple[int, int] = (4, 8)
    noise: Tuple[int, int] = (1, 3)
    negatives: Tuple[int, int] = (2, 4)
    seed: int = 2024

    def __post_init__(self):
        if self.n_items % self.n_blocks:
            raise ValueError(f"{self.n_items} items do not split into {self.n_blocks} equal blocks")
        if self.n_blocks > len(BLOCK_LABELS):
            raise ValueError(f"at most {len(BLOCK_LABELS)} blocks are supported")
        if self.primary[1] > self.block_size:
            raise ValueError("primary picks exceed the block size")

    @property
    def block_size(self) -> int:
        return self.n_items // self.n_blocks


@dataclass
class FixtureData:
    ratings: pd.DataFrame
    categories: pd.DataFrame
    truth: Dict[str, Any]


def item_blocks(spec: FixtureSpec) -> List[List[int]]:
    """Blocks each item belongs to"""
    blocks = []
    for item in range(spec.n_items):
        home = item // spec.block_size
        own = [home]
        if item % spec.overlap_every == 0:
            own.append((home + 1) % spec.n_blocks)
        blocks.append(own)
    return blocks


def _pick(rng: RngStream, pool: np.ndarray, bounds: Tuple[int, int], taken: set) -> np.ndarray:
    free = np.array([i for i in pool if i not in taken], dtype=np.int64)
    count = min(int(rng.integers(bounds[0], bounds[1] + 1)), len(free))
    chosen = rng.choice(free, size=count, replace=False) if count else np.zeros(0, dtype=np.int64)
    taken.update(int(i) for i in chosen)
    return np.sort(chosen)


def generate_fixture(spec: FixtureSpec) -> FixtureData:
    rng = RngStream(spec.seed, "fixture")
    blocks = item_blocks(spec)
    all_items = np.arange(spec.n_items)
    home_items = [all_items[all_items // spec.block_size == b] for b in range(spec.n_blocks)]

    rows = []
    clusters = np.arange(spec.n_users) % spec.n_clusters
    stamp = 1_000_000_000
    for user in range(spec.n_users):
        preferred = int(clusters[user]) % spec.n_blocks
        others = [b for b in range(spec.n_blocks) if b != preferred]
        secondary = others[int(rng.integers(0, len(others)))]
        taken: set = set()
        positive = [
            _pick(rng, home_items[preferred], spec.primary, taken),
            _pick(rng, home_items[secondary], spec.secondary, taken),
            _pick(rng, all_items, spec.noise, taken),
        ]
        negative = _pick(rng, all_items, spec.negatives, taken)
        for item in np.concatenate(positive):
            stamp += 1
            rows.append((f"u{user + 1:04d}", f"i{item + 1:03d}", int(rng.integers(3, 6)), stamp))
        for item in negative:
            stamp += 1
            rows.append((f"u{user + 1:04d}", f"i{item + 1:03d}", int(rng.integers(1, 3)), stamp))

    ratings = pd.DataFrame(rows, columns=["user_id", "item_id", "rating", "timestamp"])
    categories = pd.DataFrame({
        "item_id": [f"i{i + 1:03d}" for i in range(spec.n_items)],
        "title": [f"Item {i + 1}" for i in range(spec.n_items)],
        "categories": ["|".join(BLOCK_LABELS[b] for b in sorted(own)) for own in blocks],
    })

    positives = ratings[ratings["rating"] >= 3]
    labels = BLOCK_LABELS[:spec.n_blocks]
    truth = {
        "n_users": int(positives["user_id"].nunique()),
        "n_items": int(positives["item_id"].nunique()),
        "n_categories": spec.n_blocks,
        "n_interactions": int(len(positives)),
        "n_ratings": int(len(ratings)),
        "category_names": labels,
        "items_per_category": {
            label: int(sum(1 for own in blocks if b in own)) for b, label in enumerate(labels)
        },
        "user_cluster": {f"u{u + 1:04d}": int(c) for u, c in enumerate(clusters)},
        "spec": asdict(spec),
    }
    logger.info(
        f"Fixture: {truth['n_users']:,} users, {truth['n_items']} items, {spec.n_blocks} categories, "
        f"{truth['n_interactions']:,} positive of {truth['n_ratings']:,} ratings"
    )
    return FixtureData(ratings, categories, truth)


def write_fixture(out_dir: str, spec: FixtureSpec, preset: str = "fixture") -> Dict[str, Path]:
    """Write ratings.csv, categories.csv, fixture_truth.json and a matching config.json"""
    out = Path(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    data = generate_fixture(spec)
    paths = {
        "ratings": out / "ratings.csv",
        "categories": out / "categories.csv",
        "truth": out / "fixture_truth.json",
        "config": out / "config.json",
    }
    data.ratings.to_csv(paths["ratings"], index=False, lineterminator="\n")
    data.categories.to_csv(paths["categories"], index=False, lineterminator="\n")
    paths["truth"].write_text(json.dumps(data.truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    config = {
        "preset": preset,
        "seed": spec.seed,
        "artifact_dir": str(out / "artifacts"),
        "dataset": {
            "name": "fixture",
            "ratings_path": str(paths["ratings"]),
            "categories_path": str(paths["categories"]),
        },
    }
    paths["config"].write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Fixture written to {out}")
    return paths
