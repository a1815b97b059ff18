from __future__ import annotations

from datetime import date

import pytest

from filterank.attribution import attribute, split_dataset
from filterank.core import Query
from filterank.model import ModelConfig, save, train
from filterank.synthgen import SimConfig, generate_world, simulate_logs


def make_query(location_id=1, adults=2, children=0, infants=0, checkin=date(2025, 5, 1),
               checkout=date(2025, 5, 3), platform="web", device="desktop", searched=date(2025, 4, 20)) -> Query:
    return Query(location_id, adults, children, infants, checkin, checkout, platform, device, searched)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(8, 3, seed=1, num_locations=4)


@pytest.fixture(scope="session")
def small_logs(small_world):
    return simulate_logs(small_world, SimConfig(num_users=1500, seed=1))


@pytest.fixture(scope="session")
def small_split(small_logs):
    searches, bookings = small_logs
    return split_dataset(attribute(searches, bookings), 0.8, seed=1)


@pytest.fixture(scope="session")
def tiny_model(small_split):
    tr, ev = small_split
    params, history = train(tr, ev, ModelConfig(hidden_sizes=(16, 8), conversion_hidden=8, epochs=2, seed=3))
    return params, history


@pytest.fixture(scope="session")
def tiny_model_dir(tiny_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model")
    save(tiny_model[0], None, path)
    return path
