"""Ready-made experiments on the synthetic marketplace.

Each runner builds its world from a seed, simulates logs, fits every
predictor on the train split and scores the eval split, so results are
reproducible from ``(seed, settings)`` alone.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .attribution import AttributionConfig, TrainingExample, attribute, positive_rate, split_dataset
from .baselines import FcrTable, NecessityTable, build_journeys, compute_fcr, necessity_scores
from .core import BookingEvent, SearchEvent
from .evaluation import (
    ABReport,
    AblationReport,
    Comparison,
    compare_predictors,
    engagement_only_policy,
    feature_ablation,
    model_scorer,
    ranking_policy,
    simulated_ab,
    table_scorer,
)
from .model import ModelConfig, ModelParams, train
from .ranking import RankingConfig
from .synthgen import MarketplaceWorld, SimConfig, conversion_ordered_presentation, generate_world, simulate_logs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentSettings:
    k: int = 32
    num_segments: int = 5
    num_users: int = 100_000
    searches_per_user_mean: float = 3.0
    sim_days: int = 28
    train_frac: float = 0.8
    fcr_window_days: int = 7
    min_support: int = 20
    model: ModelConfig = field(default_factory=lambda: ModelConfig(epochs=6, weight_decay=0.1))
    # presentation-biased world
    bias_strength: float = 1.0
    ab_users: int = 60_000
    # location-dominant world
    location_strength: float = 2.5
    segment_strength: float = 0.4

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d


@dataclass
class Dataset:
    world: MarketplaceWorld
    searches: list[SearchEvent]
    bookings: list[BookingEvent]
    train: list[TrainingExample]
    eval: list[TrainingExample]


def default_world(seed: int, s: ExperimentSettings) -> MarketplaceWorld:
    return generate_world(s.k, s.num_segments, seed)


def biased_world(seed: int, s: ExperimentSettings) -> MarketplaceWorld:
    return generate_world(s.k, s.num_segments, seed, presentation_bias_strength=s.bias_strength)


def location_world(seed: int, s: ExperimentSettings) -> MarketplaceWorld:
    return generate_world(s.k, s.num_segments, seed, location_strength=s.location_strength,
                          segment_strength=s.segment_strength)


def simulate_dataset(world: MarketplaceWorld, s: ExperimentSettings, seed: int,
                     presentation_order: Sequence[int] | None = None, num_users: int | None = None) -> Dataset:
    cfg = SimConfig(
        num_users=num_users or s.num_users,
        searches_per_user_mean=s.searches_per_user_mean,
        seed=seed,
        sim_days=s.sim_days,
        presentation_order=None if presentation_order is None else tuple(presentation_order),
    )
    searches, bookings = simulate_logs(world, cfg)
    examples = attribute(searches, bookings, AttributionConfig())
    tr, ev = split_dataset(examples, s.train_frac, seed)
    return Dataset(world, searches, bookings, tr, ev)


def fit_baselines(data: Dataset, s: ExperimentSettings) -> tuple[FcrTable, NecessityTable]:
    fcr = compute_fcr(data.train, s.fcr_window_days, s.min_support, k=s.k)
    train_users = {e.user_id for e in data.train}
    journeys = build_journeys(data.train, [b for b in data.bookings if b.user_id in train_users])
    nec = necessity_scores(journeys, data.world.listing_attrs, prevalence=positive_rate(data.train))
    return fcr, nec


@dataclass
class SeedResult:
    seed: int
    comparison: Comparison
    seconds: float

    def to_json(self) -> dict:
        return {"seed": self.seed, **self.comparison.to_json(), "seconds": round(self.seconds, 2)}


def run_comparison(seed: int, s: ExperimentSettings = ExperimentSettings()) -> tuple[SeedResult, ModelParams]:
    t0 = time.perf_counter()
    data = simulate_dataset(default_world(seed, s), s, seed)
    fcr, nec = fit_baselines(data, s)
    params, _ = train(data.train, (), replace(s.model, seed=seed), k=s.k)
    comp = compare_predictors(data.eval, {
        "necessity": table_scorer(nec),
        "fcr": table_scorer(fcr),
        "ml": model_scorer(params),
    })
    logger.info("seed %d: %s", seed, comp.pr_auc)
    return SeedResult(seed, comp, time.perf_counter() - t0), params


ORDER = ("ml", "fcr", "necessity")


@dataclass
class SweepReport:
    results: list[SeedResult]

    def wins(self) -> dict[str, int]:
        """Seeds on which each adjacent pair of the expected order holds."""
        out = {}
        for hi, lo in zip(ORDER, ORDER[1:]):
            out[f"{hi}>{lo}"] = sum(r.comparison.pr_auc[hi] > r.comparison.pr_auc[lo] for r in self.results)
        return out

    def mean(self) -> dict[str, float]:
        return {name: float(np.mean([r.comparison.pr_auc[name] for r in self.results])) for name in ORDER}

    def ordering_holds(self, min_wins: int) -> bool:
        return all(v >= min_wins for v in self.wins().values())

    def to_json(self) -> dict:
        return {
            "per_seed": [r.to_json() for r in self.results],
            "mean_pr_auc_booking": self.mean(),
            "wins": self.wins(),
            "seeds": len(self.results),
        }


def seed_sweep(seeds: Sequence[int], s: ExperimentSettings = ExperimentSettings()) -> SweepReport:
    return SweepReport([run_comparison(seed, s)[0] for seed in seeds])


def run_ablation(seed: int, s: ExperimentSettings = ExperimentSettings(), groups=None) -> AblationReport:
    data = simulate_dataset(location_world(seed, s), s, seed)
    return feature_ablation(data.train, data.eval, groups, replace(s.model, seed=seed), k=s.k)


@dataclass
class ABSuite:
    """Both ranking arms share seeds, users and random draws with the baseline."""

    exponent_2: ABReport
    exponent_half: ABReport

    def to_json(self) -> dict:
        return {
            "baseline": "engagement_only",
            "exponent_2.0": self.exponent_2.to_json(),
            "exponent_0.5": self.exponent_half.to_json(),
        }


def train_on_biased_logs(seed: int, s: ExperimentSettings) -> tuple[MarketplaceWorld, ModelParams]:
    world = biased_world(seed, s)
    data = simulate_dataset(world, s, seed, presentation_order=conversion_ordered_presentation(world))
    params, _ = train(data.train, (), replace(s.model, seed=seed), k=s.k)
    return world, params


def run_ab(seed: int, s: ExperimentSettings = ExperimentSettings(),
           world: MarketplaceWorld | None = None, params: ModelParams | None = None) -> ABSuite:
    """Ranking policies against the engagement-only policy on the biased world.

    The model is trained on logs whose filter panel shows the least
    converting filters first, so observed engagement is inflated exactly
    where conversion is weakest.
    """
    if world is None or params is None:
        world, params = train_on_biased_logs(seed, s)
    base = engagement_only_policy(params)
    n2 = ranking_policy(params, RankingConfig(conversion_weight_exponent=2.0))
    n05 = ranking_policy(params, RankingConfig(conversion_weight_exponent=0.5))
    return ABSuite(simulated_ab(world, base, n2, s.ab_users, seed),
                   simulated_ab(world, base, n05, s.ab_users, seed))
