import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import app.modules as modules
from app.modules.config import ENV_VARS
from app.modules.features import EMBEDDING_DIM, EmbeddingTable
from app.modules.geolocalizer import Gazetteer, GazetteerRecord
from app.modules.synth import fall_river_sheet, generate_corpus

settings.register_profile(
    "default", settings(suppress_health_check=[HealthCheck.too_slow], max_examples=50, deadline=None)
)

settings.load_profile("default")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Isolate every test from MAPMETA_* variables and the cached geocoder."""
    for name in list(ENV_VARS) + ["MAPMETA_CONFIG"]:
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr(modules, "geocoder", None)
    monkeypatch.setattr(modules, "geocoder_key", None)


@pytest.fixture
def fall_river():
    return fall_river_sheet()


@pytest.fixture
def tiny_table():
    rng = np.random.default_rng(7)
    words = ["fall", "river", "burgettville", "black", "crater", "summit"]
    return EmbeddingTable(EMBEDDING_DIM, {w: rng.normal(0.0, 0.3, EMBEDDING_DIM) for w in words})


@pytest.fixture
def gazetteer():
    return Gazetteer([
        GazetteerRecord("Fall River", 41.70, -71.15, "stream", None, "http://gaz/1"),
        GazetteerRecord("Fall", 41.71, -71.14, "populated place", None, "http://gaz/2"),
        GazetteerRecord("Black Crater", 44.28, -121.77, "peak", 2200.0, "http://gaz/3"),
        GazetteerRecord("Black Butte", 44.40, -121.63, "peak", 1961.0, "http://gaz/4"),
        GazetteerRecord("Fall", -30.00, 120.00, "populated place", None, "http://gaz/5"),
    ])


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(n_sheets=4, seed=3)
