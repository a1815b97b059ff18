"""Offline metrics, baseline comparison, ablations and simulated A/B tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


def pr_auc(scores, labels) -> float:
    """Area under the precision-recall curve, step-wise, ties grouped.

    Thresholds are the distinct scores; at each threshold every example
    scoring at or above it is predicted positive.  The area is
    ``sum((R_i - R_{i-1}) * P_i)`` with no interpolation between points.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(float)
    tp = np.cumsum(y)
    # last index of each group of tied scores
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = tp[last]
    predicted = last + 1.0
    precision = tp / predicted
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


# ---------------------------------------------------------------------------
# Predictor comparison

BookingScorer = Callable[[Sequence], np.ndarray]
"""Maps eval examples to one booking score per (example, filter token) row."""


@dataclass(frozen=True)
class TokenRows:
    """One row per applied filter of each example, or a no-filter row."""

    destinations: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    search_index: np.ndarray


def token_rows(examples: Sequence, k: int) -> TokenRows:
    dest, tok, lab, src = [], [], [], []
    for i, ex in enumerate(examples):
        applied = [f for f, b in enumerate(ex.filters) if b] or [k]
        for t in applied:
            dest.append(ex.query.location_id)
            tok.append(t)
            lab.append(ex.booking_label)
            src.append(i)
    return TokenRows(np.array(dest, dtype=np.int64), np.array(tok, dtype=np.int64),
                     np.array(lab, dtype=np.int64), np.array(src, dtype=np.int64))


def table_scorer(table) -> BookingScorer:
    """Scorer for a lookup table with ``score_rows`` (FCR or necessity)."""

    def score(examples):
        k = len(examples[0].filters)
        rows = token_rows(examples, k)
        return table.score_rows(rows.destinations.tolist(), rows.tokens.tolist())

    return score


def model_scorer(params) -> BookingScorer:
    from .model import build_rows, predict_rows

    def score(examples):
        return predict_rows(params, build_rows(examples, params.schema))[1]

    return score


@dataclass
class Comparison:
    pr_auc: dict[str, float]
    prevalence: float
    relative_to: str
    relative_gain: dict[str, float]
    rows: int

    def to_json(self) -> dict:
        return {
            "pr_auc_booking": self.pr_auc,
            "prevalence": self.prevalence,
            "relative_to": self.relative_to,
            "relative_gain": self.relative_gain,
            "rows": self.rows,
        }


def compare_predictors(eval_set: Sequence, predictors: dict[str, BookingScorer],
                       reference: str | None = None) -> Comparison:
    """Booking PR-AUC of each predictor on the same eval rows.

    Relative gains are against ``reference`` (default: the first predictor).
    """
    if not eval_set:
        raise ValueError("empty eval set")
    if not predictors:
        raise ValueError("no predictors")
    rows = token_rows(eval_set, len(eval_set[0].filters))
    scores = {}
    for name, fn in predictors.items():
        s = np.asarray(fn(eval_set), dtype=float)
        if s.shape != rows.labels.shape:
            raise ValueError(f"predictor {name!r} returned {s.shape[0]} scores for {len(rows.labels)} rows")
        scores[name] = pr_auc(s, rows.labels)
    reference = reference or next(iter(predictors))
    base = scores[reference]
    gains = {name: (v / base - 1.0) if base > 0 else float("nan") for name, v in scores.items()}
    return Comparison(scores, float(rows.labels.mean()), reference, gains, len(rows.labels))


# ---------------------------------------------------------------------------
# Feature ablation


@dataclass
class AblationRow:
    removed: str | None
    num_inputs: int
    pr_auc_engagement: float
    pr_auc_booking: float
    final_train_loss: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    @property
    def full(self) -> AblationRow:
        return next(r for r in self.rows if r.removed is None)

    def booking_drop(self) -> dict[str, float]:
        """Relative booking PR-AUC drop per removed group (positive = worse)."""
        full = self.full.pr_auc_booking
        return {r.removed: 1.0 - r.pr_auc_booking / full for r in self.rows if r.removed is not None}

    def engagement_drop(self) -> dict[str, float]:
        full = self.full.pr_auc_engagement
        return {r.removed: 1.0 - r.pr_auc_engagement / full for r in self.rows if r.removed is not None}

    def most_important(self) -> str:
        drops = self.booking_drop()
        return max(sorted(drops), key=lambda g: drops[g])

    def to_json(self) -> dict:
        return {
            "rows": [r.to_json() for r in self.rows],
            "booking_drop": self.booking_drop(),
            "engagement_drop": self.engagement_drop(),
            "most_important": self.most_important(),
        }


def feature_ablation(train_set: Sequence, eval_set: Sequence, feature_groups: Sequence[str] | None = None,
                     config=None, k: int | None = None) -> AblationReport:
    """Retrain once with every input and once per removed feature group."""
    from .features import FEATURE_GROUPS, fit_schema
    from .model import ModelConfig, train

    config = config or ModelConfig()
    groups = list(FEATURE_GROUPS) if feature_groups is None else list(feature_groups)
    k = k if k is not None else len(train_set[0].filters)
    out = []
    for removed in [None, *groups]:
        schema = fit_schema(train_set, k, exclude_groups=() if removed is None else (removed,))
        params, hist = train(train_set, eval_set, config, schema=schema)
        logger.info("ablation %s: booking %.4f", removed, hist.eval_pr_auc_booking[-1])
        out.append(AblationRow(
            removed,
            len(schema.input_names),
            hist.eval_pr_auc_engagement[-1],
            hist.eval_pr_auc_booking[-1],
            hist.train_loss[-1],
        ))
    return AblationReport(out)


# ---------------------------------------------------------------------------
# Simulated A/B

Policy = Callable[[object, np.ndarray], Sequence[int]]
"""(query, facet_counts) -> recommended filter ids, best first."""


def ranking_policy(params, cfg=None) -> Policy:
    """Recommend by engagement x conversion^exponent."""
    from .ranking import RankingConfig, recommend

    cfg = cfg or RankingConfig()

    def policy(query, facets):
        return [r.filter_id for r in recommend(params, query, facets, cfg)]

    return policy


def engagement_only_policy(params, cfg=None) -> Policy:
    """Recommend by predicted engagement alone, same inventory rule."""
    from .ranking import RankingConfig, candidate_probs, rank_candidates

    cfg = cfg or RankingConfig()

    def policy(query, facets):
        p_e, p_b = candidate_probs(params, query)
        return [r.filter_id for r in rank_candidates(p_e, p_e, p_b, facets, cfg)]

    return policy


def static_policy(filter_ids: Sequence[int], min_inventory: int = 18) -> Policy:
    """Always the same list, minus filters with too little inventory."""
    ids = list(filter_ids)

    def policy(query, facets):
        return [f for f in ids if facets[f] >= min_inventory]

    return policy


@dataclass
class ArmStats:
    users: int
    bookings: int
    filter_accepts: int
    filtered_bookings: int
    low_inventory: int

    @property
    def booking_rate(self) -> float:
        return self.bookings / self.users if self.users else 0.0

    def to_json(self) -> dict:
        return {
            **self.__dict__,
            "booking_rate": self.booking_rate,
            # share of searches where a recommended filter was applied
            "searches_using_filters": self.filter_accepts / self.users if self.users else 0.0,
            # share of bookings made from a recommendation-filtered result set
            "booked_listing_in_filtered_results": self.filtered_bookings / self.bookings if self.bookings else 0.0,
            # share of searches whose applied filter left fewer than min_inventory listings
            "searches_low_inventory": self.low_inventory / self.users if self.users else 0.0,
        }


@dataclass
class ABReport:
    arm_a: ArmStats
    arm_b: ArmStats
    lift: float
    ci_low: float
    ci_high: float
    seed: int
    resamples: int
    design: str = "paired"

    @property
    def significant(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0

    def to_json(self) -> dict:
        return {
            "arm_a": self.arm_a.to_json(),
            "arm_b": self.arm_b.to_json(),
            "relative_booking_lift": self.lift,
            "ci95": [self.ci_low, self.ci_high],
            "significant": self.significant,
            "seed": self.seed,
            "design": self.design,
            "bootstrap_resamples": self.resamples,
        }


def _relative_lift(rate_a, rate_b):
    return np.where(rate_a > 0, rate_b / np.where(rate_a > 0, rate_a, 1.0) - 1.0, 0.0)


DESIGNS = ("paired", "randomized")


def _replay(world, query, facets, ranked, u_accept, u_book) -> tuple[int | None, bool]:
    """One search under one policy: (accepted filter or None, booked)."""
    from .synthgen import DEVICES

    loc = query.location_id
    seg = world.segment_index(query)
    p_true = world.engagement_prob(seg, loc)
    accepted = None
    for r, f in enumerate(ranked[: len(u_accept)], start=1):
        if u_accept[r - 1] < p_true[f] / r:
            accepted = f
            break
    p_book = (world.base_booking_prob[seg] + world.location_base[loc]
              + world.device_base[DEVICES.index(query.device_type)])
    if accepted is not None:
        p_book += world.conversion_lift[seg, accepted] + world.location_lift[loc, accepted]
    return accepted, bool(u_book < min(max(float(p_book), 0.0), 1.0))


def simulated_ab(world, policy_a: Policy, policy_b: Policy, num_users: int, seed: int = 0, *,
                 design: str = "paired", resamples: int = 1000, min_inventory: int = 18,
                 start_date=None, sim_days: int = 28) -> ABReport:
    """Replay fresh simulated users against two recommendation policies.

    A user issues one unfiltered search, looks down the recommended list
    and applies the filter at position r with probability
    ``true_engagement / r``, stopping at the first one applied.  They then
    book with the world's truncated booking probability for the resulting
    filter state.

    ``design="paired"`` replays every user under both policies with the
    same random draws; the bootstrap resamples users.  ``"randomized"``
    assigns each user to one arm by coin flip, like a live test; the
    bootstrap resamples each arm independently.  Lift is
    ``rate_b / rate_a - 1`` with a 95% percentile interval.
    """
    from datetime import date, timedelta

    from .synthgen import sample_query

    if design not in DESIGNS:
        raise ValueError(f"design must be one of {DESIGNS}")
    if num_users < 2:
        raise ValueError("need at least two users")
    start = start_date or date(2025, 2, 1)
    stats = {a: ArmStats(0, 0, 0, 0, 0) for a in ("a", "b")}
    pair_cells = np.zeros(4, dtype=np.int64)  # index 2*booked_a + booked_b
    facets_by_loc = {loc: world.facet_counts(loc, np.zeros(world.k, dtype=int)) for loc in range(world.num_locations)}
    for uid in range(num_users):
        rng = np.random.default_rng([seed, 0xAB, uid])
        coin = rng.random()
        segment = world.segments[int(rng.integers(len(world.segments)))]
        day = start + timedelta(days=int(rng.integers(sim_days)))
        query = sample_query(world, segment, day, rng)
        u_accept = rng.random(64)
        u_book = rng.random()
        facets = facets_by_loc[query.location_id]
        arms = ("a", "b") if design == "paired" else (("b",) if coin < 0.5 else ("a",))
        booked = {}
        for arm in arms:
            ranked = (policy_b if arm == "b" else policy_a)(query, facets)
            accepted, booked[arm] = _replay(world, query, facets, ranked, u_accept, u_book)
            st = stats[arm]
            st.users += 1
            st.bookings += booked[arm]
            if accepted is not None:
                st.filter_accepts += 1
                st.filtered_bookings += booked[arm]
                st.low_inventory += int(facets[accepted] < min_inventory)
        if design == "paired":
            pair_cells[2 * booked["a"] + booked["b"]] += 1
    a, b = stats["a"], stats["b"]
    lift = float(_relative_lift(np.float64(a.booking_rate), np.float64(b.booking_rate)))
    boot = np.random.default_rng([seed, 0xB007])
    if design == "paired":
        cells = boot.multinomial(num_users, pair_cells / num_users, size=resamples)
        ra = (cells[:, 2] + cells[:, 3]) / num_users
        rb = (cells[:, 1] + cells[:, 3]) / num_users
    else:
        ra = boot.binomial(a.users, a.booking_rate, size=resamples) / max(a.users, 1)
        rb = boot.binomial(b.users, b.booking_rate, size=resamples) / max(b.users, 1)
    lo, hi = np.percentile(_relative_lift(ra, rb), [2.5, 97.5])
    return ABReport(a, b, lift, float(lo), float(hi), seed, resamples, design)
