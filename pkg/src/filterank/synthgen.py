"""Synthetic marketplace with planted filter utilities.

A ``MarketplaceWorld`` holds the latent truth: per query segment and
location, how likely each filter is to be applied and how much applying it
moves the booking probability.  ``simulate_logs`` replays users against the
world and emits search and booking logs in the shapes defined in ``core``.

Booking probability is additive in lifts (truncated to [0, 1]) so the
conversion gain of any filter vector has a closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import core
from .core import BookingEvent, FilterCatalog, Query, SearchEvent

# Priority order matters: a query belongs to the first segment whose rule matches.
SEGMENT_RULES = {
    "long_stay": lambda q: q.num_nights >= 28,
    "group_trip": lambda q: q.num_adults >= 4,
    "short_lead": lambda q: q.lead_time_days <= 3,
    "long_lead": lambda q: q.lead_time_days >= 60,
    "family": lambda q: q.num_children >= 1,
}
SPECIAL_SEGMENTS = tuple(SEGMENT_RULES)
FALLBACK_SEGMENT = "standard"

PLATFORMS = ("web", "ios", "android")
DEVICES = ("desktop", "phone", "tablet")
_PLATFORM_WEIGHTS = (0.45, 0.35, 0.20)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class MarketplaceWorld:
    catalog: FilterCatalog
    segments: tuple[str, ...]
    engagement_logits: np.ndarray  # (segments, k)
    conversion_lift: np.ndarray  # (segments, k)
    base_booking_prob: np.ndarray  # (segments,)
    presentation_bias_strength: float
    location_base: np.ndarray  # (locations,)
    location_lift: np.ndarray  # (locations, k)
    location_engagement: np.ndarray  # (locations, k)
    device_base: np.ndarray  # (len(DEVICES),)
    location_weights: np.ndarray  # (locations,)
    listing_location: np.ndarray  # (listings,)
    listing_attrs: np.ndarray  # (listings, k) bool
    listing_quality: np.ndarray  # (listings,)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.presentation_bias_strength < 0:
            raise ValueError("presentation_bias_strength must be >= 0")
        cells = self.cell_booking_bases()
        lifted = cells[:, :, None] + self.conversion_lift[None, :, :] + self.location_lift[:, None, :]
        if cells.min() < 0 or cells.max() > 1 or lifted.min() < -1e-12 or lifted.max() > 1:
            raise ValueError("base booking probability plus lift must stay in [0, 1]")

    @property
    def k(self) -> int:
        return self.catalog.k

    @property
    def num_locations(self) -> int:
        return len(self.location_base)

    def cell_booking_bases(self) -> np.ndarray:
        """Booking probability with no filter, shape (locations, segments)."""
        return self.base_booking_prob[None, :] + self.location_base[:, None]

    def segment_index(self, query: Query) -> int:
        for name in self.segments:
            rule = SEGMENT_RULES.get(name)
            if rule is not None and rule(query):
                return self.segments.index(name)
        return len(self.segments) - 1

    def engagement_prob(self, segment: int, location: int | None = None) -> np.ndarray:
        """True (unbiased) per-filter apply propensity."""
        logits = self.engagement_logits[segment]
        if location is not None:
            logits = logits + self.location_engagement[location]
        return sigmoid(logits)

    def lift(self, segment: int, location: int | None = None) -> np.ndarray:
        lift = self.conversion_lift[segment]
        if location is not None:
            lift = lift + self.location_lift[location]
        return lift

    def base(self, segment: int, location: int | None = None, device: str | None = None) -> float:
        b = float(self.base_booking_prob[segment])
        if location is not None:
            b += float(self.location_base[location])
        if device is not None:
            b += float(self.device_base[DEVICES.index(device)])
        return b

    def booking_prob(self, query: Query, filters) -> float:
        seg = self.segment_index(query)
        lift = self.lift(seg, query.location_id)
        p = self.base(seg, query.location_id, query.device_type) + float(
            np.dot(lift, np.asarray(filters, dtype=float))
        )
        return min(max(p, 0.0), 1.0)

    def inventory_model(self) -> np.ndarray:
        """Expected result count per (location, filter) when that filter alone is applied."""
        out = np.zeros((self.num_locations, self.k))
        for loc in range(self.num_locations):
            out[loc] = self.listing_attrs[self.listing_location == loc].sum(axis=0)
        return out

    def listings_in(self, location: int) -> np.ndarray:
        """Listing ids of a location, best quality first."""
        ids = np.flatnonzero(self.listing_location == location)
        return ids[np.argsort(-self.listing_quality[ids], kind="stable")]

    def facet_counts(self, location: int, filters) -> np.ndarray:
        ids = np.flatnonzero(self.listing_location == location)
        attrs = self.listing_attrs[ids]
        applied = np.asarray(filters, dtype=bool)
        base_mask = attrs[:, applied].all(axis=1) if applied.any() else np.ones(len(ids), bool)
        return (attrs & base_mask[:, None]).sum(axis=0)

    def to_json(self) -> dict:
        return {
            "catalog": self.catalog.to_json(),
            "segments": list(self.segments),
            "engagement_logits": self.engagement_logits.tolist(),
            "conversion_lift": self.conversion_lift.tolist(),
            "base_booking_prob": self.base_booking_prob.tolist(),
            "presentation_bias_strength": self.presentation_bias_strength,
            "location_base": self.location_base.tolist(),
            "location_lift": self.location_lift.tolist(),
            "location_engagement": self.location_engagement.tolist(),
            "device_base": self.device_base.tolist(),
            "location_weights": self.location_weights.tolist(),
            "listing_location": self.listing_location.tolist(),
            "listing_attrs": self.listing_attrs.astype(int).tolist(),
            "listing_quality": self.listing_quality.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MarketplaceWorld":
        arr = lambda key, dtype=float: np.asarray(d[key], dtype=dtype)  # noqa: E731
        return cls(
            catalog=FilterCatalog.from_json(d["catalog"]),
            segments=tuple(d["segments"]),
            engagement_logits=arr("engagement_logits"),
            conversion_lift=arr("conversion_lift"),
            base_booking_prob=arr("base_booking_prob"),
            presentation_bias_strength=float(d["presentation_bias_strength"]),
            location_base=arr("location_base"),
            location_lift=arr("location_lift"),
            location_engagement=arr("location_engagement"),
            device_base=arr("device_base"),
            location_weights=arr("location_weights"),
            listing_location=arr("listing_location", int),
            listing_attrs=arr("listing_attrs", bool),
            listing_quality=arr("listing_quality"),
            seed=int(d.get("seed", 0)),
        )


def generate_world(
    k: int = 32,
    num_segments: int = 5,
    seed: int = 0,
    *,
    num_locations: int = 8,
    presentation_bias_strength: float = 0.0,
    segment_strength: float = 1.0,
    location_strength: float = 1.0,
    listings_per_location: tuple[int, int] = (80, 220),
) -> MarketplaceWorld:
    """Draw a world with planted engagement and conversion structure.

    ``segment_strength`` scales how much trip type (stay length, party
    size, lead time) moves base booking rates and filter lifts;
    ``location_strength`` does the same for the destination.
    """
    if k < 4:
        raise ValueError("k must be >= 4")
    if not 2 <= num_segments <= len(SPECIAL_SEGMENTS) + 1:
        raise ValueError(f"num_segments must be in [2, {len(SPECIAL_SEGMENTS) + 1}]")
    if num_locations < 1:
        raise ValueError("num_locations must be >= 1")
    rng = np.random.default_rng(seed)
    catalog = core.default_catalog(k)
    segments = SPECIAL_SEGMENTS[: num_segments - 1] + (FALLBACK_SEGMENT,)
    S, L = num_segments, num_locations

    base = 0.038 + segment_strength * rng.uniform(-0.03, 0.03, size=S)
    # background lifts on a shuffled grid so neighbouring ranks stay separable
    grid = np.linspace(-0.03, 0.03, k)
    jitter = 0.25 * (grid[1] - grid[0])
    lift = segment_strength * np.stack([rng.permutation(grid) + rng.uniform(-jitter, jitter, k) for _ in range(S)])
    for s in range(S):
        stars = rng.choice(k, size=3, replace=False)
        lift[s, stars] = segment_strength * rng.uniform(0.04, 0.10, size=3)
    lift = np.clip(lift, -0.04, 0.10)
    for s in range(S):
        if lift[s].max() <= 0:
            lift[s, int(np.argmax(lift[s]))] = 0.01
        if lift[s].min() >= 0:
            lift[s, int(np.argmin(lift[s]))] = -0.005
    # conversion-relevant filters are somewhat more likely to be used
    engagement = -3.2 + rng.normal(0.0, 0.6, size=(S, k)) + 8.0 * lift

    loc_base = location_strength * rng.uniform(-0.02, 0.03, size=L)
    loc_base = np.maximum(loc_base, 0.005 - base.min())
    loc_lift = location_strength * rng.normal(0.0, 0.015, size=(L, k))
    loc_eng = location_strength * rng.normal(0.0, 0.5, size=(L, k))
    # raise location lifts where some cell would dip below zero
    cells = base[None, :, None] + loc_base[:, None, None] + lift[None] + loc_lift[:, None, :]
    deficit = np.clip(-cells.min(axis=1), 0.0, None)
    loc_lift = loc_lift + deficit
    device_base = np.array([0.006, -0.004, 0.0]) * segment_strength

    loc_weights = rng.dirichlet(np.full(L, 4.0))
    counts = rng.integers(listings_per_location[0], listings_per_location[1] + 1, size=L)
    listing_location = np.repeat(np.arange(L), counts)
    attr_rate = rng.uniform(0.06, 0.85, size=(L, k))
    listing_attrs = rng.random((len(listing_location), k)) < attr_rate[listing_location]
    quality = rng.random(len(listing_location))

    return MarketplaceWorld(
        catalog=catalog,
        segments=segments,
        engagement_logits=engagement,
        conversion_lift=lift,
        base_booking_prob=base,
        presentation_bias_strength=float(presentation_bias_strength),
        location_base=loc_base,
        location_lift=loc_lift,
        location_engagement=loc_eng,
        device_base=device_base,
        location_weights=loc_weights,
        listing_location=listing_location,
        listing_attrs=listing_attrs,
        listing_quality=quality,
        seed=seed,
    )


def conversion_ordered_presentation(world: MarketplaceWorld) -> tuple[int, ...]:
    """A heuristic display order that puts the least converting filters on top.

    Used to build worlds where display prominence and conversion utility
    disagree.
    """
    mean_lift = world.conversion_lift.mean(axis=0) + world.location_lift.mean(axis=0)
    return tuple(int(i) for i in np.argsort(mean_lift, kind="stable"))


def rank_bonus(presentation_order, k: int) -> np.ndarray:
    """+1 for the most prominent filter down to -1 for the least."""
    order = list(presentation_order)
    if sorted(order) != list(range(k)):
        raise ValueError("presentation_order must be a permutation of 0..k-1")
    bonus = np.empty(k)
    for rank, fid in enumerate(order):
        bonus[fid] = 1.0 - 2.0 * rank / (k - 1)
    return bonus


@dataclass(frozen=True)
class SimConfig:
    num_users: int = 20_000
    searches_per_user_mean: float = 3.0
    seed: int = 0
    presentation_order: tuple[int, ...] | None = None
    cancellation_rate: float = 0.05
    sim_days: int = 28
    page_size: int = 20
    start_date: date = date(2025, 1, 1)

    def __post_init__(self) -> None:
        if self.num_users < 1 or self.searches_per_user_mean < 1 or self.sim_days < 1:
            raise ValueError("num_users, sim_days must be positive and searches_per_user_mean >= 1")
        if not 0 <= self.cancellation_rate <= 1:
            raise ValueError("cancellation_rate must be in [0, 1]")
        if self.page_size < 1:
            raise ValueError("page_size must be positive")

    def order_for(self, k: int) -> tuple[int, ...]:
        return tuple(range(k)) if self.presentation_order is None else tuple(self.presentation_order)


def sample_query(world: MarketplaceWorld, segment: str, search_day: date, rng) -> Query:
    """Draw a trip request that falls in ``segment`` as of ``search_day``."""
    has_family = "family" in world.segments
    adults = int(rng.integers(1, 4))
    children = 0
    nights = int(rng.integers(1, 11))
    lead = int(rng.integers(4, 60))
    if segment == "long_stay":
        nights = int(rng.integers(28, 46))
        children = int(rng.integers(0, 3))
        lead = int(rng.integers(4, 91))
    elif segment == "group_trip":
        adults = int(rng.integers(4, 9))
        children = int(rng.integers(0, 4))
        lead = int(rng.integers(0, 121))
    elif segment == "short_lead":
        nights = int(rng.integers(1, 8))
        lead = int(rng.integers(0, 4))
    elif segment == "long_lead":
        lead = int(rng.integers(60, 181))
    elif segment == "family":
        children = int(rng.integers(1, 4))
    elif not has_family:
        children = int(rng.integers(0, 3))
    infants = int(rng.random() < 0.1)
    location = int(rng.choice(world.num_locations, p=world.location_weights))
    platform_idx = int(rng.choice(len(PLATFORMS), p=_PLATFORM_WEIGHTS))
    platform = PLATFORMS[platform_idx]
    if platform == "web":
        device = "desktop" if rng.random() < 0.85 else "tablet"
    else:
        device = "phone" if rng.random() < 0.8 else "tablet"
    checkin = search_day + timedelta(days=lead)
    return Query(
        location_id=location,
        num_adults=adults,
        num_children=children,
        num_infants=infants,
        checkin_date=checkin,
        checkout_date=checkin + timedelta(days=nights),
        platform=platform,
        device_type=device,
        search_timestamp=search_day,
    )


def _user_rng(seed: int, user_id: int):
    return np.random.default_rng([seed, user_id])


def _location_index(world: MarketplaceWorld) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for loc in range(world.num_locations):
        ids = world.listings_in(loc)
        out[loc] = (ids, world.listing_attrs[ids])
    return out


def simulate_user(world: MarketplaceWorld, cfg: SimConfig, user_id: int, bonus: np.ndarray,
                  search_id_start: int, locations=None) -> tuple[list[SearchEvent], list[BookingEvent]]:
    rng = _user_rng(cfg.seed, user_id)
    archetype = world.segments[int(rng.integers(len(world.segments)))]
    n_searches = 1 + int(rng.poisson(cfg.searches_per_user_mean - 1))
    gaps = [0] + [0 if archetype == "short_lead" else int(rng.random() < 0.3) for _ in range(n_searches - 1)]
    offsets = np.cumsum(gaps)
    first_day = cfg.start_date + timedelta(days=int(rng.integers(cfg.sim_days)))
    last_query = sample_query(world, archetype, first_day + timedelta(days=int(offsets[-1])), rng)
    loc = last_query.location_id
    listings, attrs = (locations or _location_index(world))[loc]
    device_base = float(world.device_base[DEVICES.index(last_query.device_type)])

    searches: list[SearchEvent] = []
    bookings: list[BookingEvent] = []
    for i, off in enumerate(offsets):
        day = first_day + timedelta(days=int(off))
        query = replace(last_query, search_timestamp=day)
        seg = world.segment_index(query)
        logits = world.engagement_logits[seg] + world.location_engagement[loc]
        p_apply = sigmoid(logits + world.presentation_bias_strength * bonus)
        filters = rng.random(world.k) < p_apply
        mask = attrs[:, filters].all(axis=1) if filters.any() else np.ones(len(listings), bool)
        results = listings[mask][: cfg.page_size]
        facets = (attrs & mask[:, None]).sum(axis=0)
        fv = tuple(filters.astype(int).tolist())
        searches.append(SearchEvent(
            user_id=user_id,
            search_id=search_id_start + i,
            query=query,
            filters=fv,
            result_listing_ids=tuple(results.tolist()),
            facet_counts=tuple(facets.tolist()),
        ))
        p_book = world.base_booking_prob[seg] + world.location_base[loc] + device_base
        p_book += float(np.dot(world.conversion_lift[seg] + world.location_lift[loc], filters))
        u_book = rng.random()
        if len(results) and u_book < min(max(p_book, 0.0), 1.0):
            w = 1.0 / np.arange(1, len(results) + 1)
            listing = int(rng.choice(results, p=w / w.sum()))
            bookings.append(BookingEvent(
                user_id=user_id,
                listing_id=listing,
                booking_date=day,
                cancelled_within_m_days=bool(rng.random() < cfg.cancellation_rate),
            ))
            break
    return searches, bookings


def simulate_logs(world: MarketplaceWorld, cfg: SimConfig) -> tuple[list[SearchEvent], list[BookingEvent]]:
    """Replay ``cfg.num_users`` users against ``world``.

    Every user draws from a generator seeded by ``(cfg.seed, user_id)`` so
    users can be simulated in any order or partition with identical output.
    Search ids are ``user_id * 1000 + position``.
    """
    bonus = rank_bonus(cfg.order_for(world.k), world.k)
    locations = _location_index(world)
    searches: list[SearchEvent] = []
    bookings: list[BookingEvent] = []
    for uid in range(cfg.num_users):
        s, b = simulate_user(world, cfg, uid, bonus, uid * 1000, locations)
        searches.extend(s)
        bookings.extend(b)
    return searches, bookings


def ground_truth_gain(world: MarketplaceWorld, segment: int, filter_vector, location: int | None = None) -> float:
    """Exact conversion gain of applying ``filter_vector`` for a segment.

    The engagement factor is the probability that every filter in the vector
    gets applied (product of the true per-filter propensities); the bracket
    is the truncated booking probability with the filters minus without.
    """
    if not 0 <= segment < len(world.segments):
        raise ValueError(f"unknown segment {segment}")
    fv = np.asarray(filter_vector, dtype=float)
    p_engage = world.engagement_prob(segment, location)
    p_f = float(np.prod(np.where(fv > 0, p_engage, 1.0)))
    base = world.base(segment, location)
    with_f = min(max(base + float(np.dot(world.lift(segment, location), fv)), 0.0), 1.0)
    without = min(max(base, 0.0), 1.0)
    return p_f * (with_f - without)


def write_world(path: str | Path, world: MarketplaceWorld, cfg: SimConfig | None = None) -> None:
    payload = world.to_json()
    if cfg is not None:
        payload["sim_config"] = {
            "num_users": cfg.num_users,
            "searches_per_user_mean": cfg.searches_per_user_mean,
            "seed": cfg.seed,
            "presentation_order": list(cfg.order_for(world.k)),
            "cancellation_rate": cfg.cancellation_rate,
            "sim_days": cfg.sim_days,
            "page_size": cfg.page_size,
            "start_date": cfg.start_date.isoformat(),
        }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def read_world(path: str | Path) -> MarketplaceWorld:
    return MarketplaceWorld.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def generate_to_dir(out_dir: str | Path, world: MarketplaceWorld, cfg: SimConfig) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    searches, bookings = simulate_logs(world, cfg)
    paths = {
        "catalog": out / "catalog.json",
        "world": out / "world.json",
        "searches": out / "searches.jsonl",
        "bookings": out / "bookings.jsonl",
    }
    core.write_catalog(paths["catalog"], world.catalog)
    write_world(paths["world"], world, cfg)
    core.write_jsonl(paths["searches"], searches)
    core.write_jsonl(paths["bookings"], bookings)
    return paths


def empirical_apply_rates(searches) -> np.ndarray:
    return np.mean([s.filters for s in searches], axis=0)


def describe(world: MarketplaceWorld) -> dict:
    """Small human-readable summary of the planted structure."""
    out = {}
    for s, name in enumerate(world.segments):
        order = np.argsort(-world.conversion_lift[s], kind="stable")[:3]
        out[name] = {
            "base_booking_prob": round(float(world.base_booking_prob[s]), 4),
            "top_lift_filters": [world.catalog.name_of(int(i)) for i in order],
        }
    return out

