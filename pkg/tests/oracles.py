"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations


def brute_force_labels(searches, bookings, lookback_days: int) -> list[int]:
    """Check every (search, booking) pair directly."""
    labels = []
    for s in searches:
        label = 0
        for b in bookings:
            if b.user_id != s.user_id or b.cancelled_within_m_days:
                continue
            gap = (b.booking_date - s.query.search_timestamp).days
            if 0 <= gap <= lookback_days and b.listing_id in list(s.result_listing_ids):
                label = 1
        labels.append(label)
    return labels


def brute_force_pr_auc(scores, labels) -> float:
    """Enumerate every distinct threshold; predict positive when score >= threshold."""
    scores = [float(s) for s in scores]
    labels = [int(y) for y in labels]
    n_pos = sum(labels)
    area = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        predicted = sum(1 for s in scores if s >= t)
        recall = tp / n_pos
        precision = tp / predicted
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def random_small_logs(seed: int, max_users: int = 50, k: int = 6):
    """Hand-rolled random logs that lean on the edge cases: same-day
    bookings, window boundaries, cancellations, listings filtered out of
    results, other users booking the same listing."""
    from datetime import date, timedelta

    import numpy as np

    from filterank.core import BookingEvent, Query, SearchEvent

    rng = np.random.default_rng(seed)
    start = date(2025, 3, 1)
    searches, bookings = [], []
    sid = 0
    for uid in range(int(rng.integers(1, max_users + 1))):
        for _ in range(int(rng.integers(1, 6))):
            day = start + timedelta(days=int(rng.integers(0, 30)))
            q = Query(int(rng.integers(0, 3)), 2, 0, 0, day + timedelta(days=3), day + timedelta(days=5),
                      "web", "desktop", day)
            results = tuple(sorted(rng.choice(12, size=int(rng.integers(0, 6)), replace=False).tolist()))
            filters = tuple(int(b) for b in rng.random(k) < 0.2)
            searches.append(SearchEvent(uid, sid, q, filters, results, tuple(int(x) for x in rng.integers(0, 9, k))))
            sid += 1
        for _ in range(int(rng.integers(0, 3))):
            day = start + timedelta(days=int(rng.integers(0, 50)))
            bookings.append(BookingEvent(uid, int(rng.integers(0, 12)), day, bool(rng.random() < 0.2)))
    order = rng.permutation(len(searches))
    return [searches[i] for i in order], bookings
