import logging

import pytest
import rdflib
from hypothesis import given, strategies as st
from rdflib.namespace import GEO, RDF, RDFS

from app.modules.errors import ContractError, ValidationError
from app.modules.geolocalizer import Gazetteer, GazetteerRecord, GeoEstimate
from app.modules.linked_metadata import (
    BASE_IRI,
    MapFeature,
    MapRecord,
    RecordStore,
    build_map_record,
    emit_rdf,
    match_entity,
    parse_ntriples,
    query_maps,
    record_graph,
    schema,
    string_similarity,
)
from app.modules.phrase_graph import LocationPhrase

HERE = GeoEstimate(44.28, -121.77, 5, 7)
# one degree of latitude is about 111.2 km
KM = 1.0 / 111.2


def crater(uri, km_north):
    return GazetteerRecord("Black Crater", 44.28 + km_north * KM, -121.77, "peak", 2200.0, uri)


def peak_corpus():
    entities = [
        GazetteerRecord("Black Crater", 44.28, -121.77, "peak", 2200.0, "e:0"),
        GazetteerRecord("Black Butte", 44.40, -121.63, "peak", 1961.0, "e:1"),
        GazetteerRecord("Lava Butte", 43.91, -121.36, "peak", 1524.0, "e:2"),
        GazetteerRecord("Pilot Butte", 44.06, -121.28, "peak", 900.0, "e:3"),
        GazetteerRecord("Amboy Crater", 34.54, -115.79, "peak", 288.0, "e:4"),
        GazetteerRecord("Bristol Lake", 34.47, -115.69, "lake", None, "e:5"),
        GazetteerRecord("Amboy", 34.56, -115.74, "populated place", None, "e:6"),
        GazetteerRecord("Modoc Lava Beds", 41.71, -121.51, "area", None, "e:7"),
        GazetteerRecord("Schonchin Butte", 41.73, -121.52, "peak", 1626.0, "e:8"),
        GazetteerRecord("Tule Lake", 41.95, -121.47, "lake", None, "e:9"),
    ]
    gaz = Gazetteer(entities)

    def record(sheet_id, uris):
        feats = tuple(MapFeature(gaz.resolve(u).name, (f"w{k}",), u, (gaz.resolve(u).lat, gaz.resolve(u).lng))
                      for k, u in enumerate(uris))
        return MapRecord(f"{BASE_IRI}{sheet_id}", sheet_id, (0.0, 0.0), feats + (MapFeature("Unmatched"),))

    records = [
        record("bend", ["e:0", "e:1", "e:3"]),
        record("amboy", ["e:4", "e:5", "e:6"]),
        record("modoc", ["e:7", "e:8", "e:9"]),
    ]
    return gaz, records


@pytest.fixture
def matched_record():
    return MapRecord(f"{BASE_IRI}bend", "bend", (44.28, -121.77), (
        MapFeature("Black Crater", ("w1", "w2"), "http://gaz/3", (44.28, -121.77)),
        MapFeature("Sisters", ("w7",)),
    ))


@pytest.mark.parametrize("a, b, expected", [
    ("Black Crater", "Black Crater", 1.0),
    ("Black Crater", "black crater", 1.0),
    ("abcd", "abce", 0.75),
    ("Fall", "Fall River", 0.4),
])
def test_string_similarity(a, b, expected):
    assert string_similarity(a, b) == pytest.approx(expected)


def test_string_similarity_needs_text():
    with pytest.raises(ContractError):
        string_similarity("", "x")


@given(st.text(min_size=1, max_size=12), st.text(min_size=1, max_size=12))
def test_string_similarity_is_bounded_and_symmetric(a, b):
    s = string_similarity(a, b)
    assert 0.0 <= s <= 1.0
    assert s == string_similarity(b, a)


def test_match_entity_within_radius():
    gaz = Gazetteer([crater("near", 5)])
    assert match_entity("Black Crater", HERE, gaz, 50, 0.8).uri == "near"


def test_match_entity_outside_radius():
    assert match_entity("Black Crater", HERE, Gazetteer([crater("far", 500)]), 50, 0.8) is None


def test_match_entity_prefers_nearer_on_equal_similarity():
    gaz = Gazetteer([crater("forty", 40), crater("five", 5)])
    assert match_entity("black crater", HERE, gaz).uri == "five"


def test_match_entity_prefers_similarity_over_distance():
    gaz = Gazetteer([
        GazetteerRecord("Black Crate", 44.28, -121.77, "peak", None, "close"),
        crater("exact", 30),
    ])
    assert match_entity("Black Crater", HERE, gaz).uri == "exact"


def test_match_entity_below_similarity_threshold():
    gaz = Gazetteer([GazetteerRecord("Black Butte", 44.28, -121.77, "peak", None, "u")])
    assert match_entity("Black Crater", HERE, gaz, sim_threshold=0.8) is None


def test_larger_radius_keeps_a_match_unless_a_better_one_enters():
    gaz = Gazetteer([GazetteerRecord("Black Crate", 44.28, -121.77, "peak", None, "close"), crater("exact", 80)])
    assert match_entity("Black Crater", HERE, gaz, radius_km=50).uri == "close"
    assert match_entity("Black Crater", HERE, gaz, radius_km=100).uri == "exact"


def test_build_map_record(fall_river, gazetteer):
    phrases = [LocationPhrase(("b",), "Burgettville"), LocationPhrase(("f", "r"), "Fall River")]
    est = GeoEstimate(41.70, -71.15, 2, 3)
    record = build_map_record(fall_river, phrases, est, [None, gazetteer.resolve("http://gaz/1")])
    assert record.uri == f"{BASE_IRI}fall-river"
    assert record.nearby == (41.70, -71.15)
    assert record.features[0].see_also is None
    assert record.features[1].see_also == "http://gaz/1"
    assert record.features[1].region_ids == ("f", "r")


def test_build_map_record_without_matches_still_sets_nearby(fall_river):
    phrases = [LocationPhrase(("f",), "Fall"), LocationPhrase(("r",), "River")]
    record = build_map_record(fall_river, phrases, GeoEstimate(41.7, -71.1, 1, 1), [None, None])
    assert record.nearby == (41.7, -71.1)
    assert all(f.see_also is None and f.point is None for f in record.features)


def test_duplicate_phrases_become_distinct_features(fall_river):
    phrases = [LocationPhrase(("f",), "Fall"), LocationPhrase(("r",), "Fall")]
    record = build_map_record(fall_river, phrases, None, [None, None])
    g = record_graph(record)
    assert len(set(g.objects(rdflib.URIRef(record.uri), GEO.sfOverlaps))) == 2
    assert record.nearby is None


def test_build_map_record_alignment(fall_river):
    with pytest.raises(ContractError):
        build_map_record(fall_river, [LocationPhrase(("f",), "Fall")], None, [])


def test_feature_label_must_not_be_blank():
    with pytest.raises(ValidationError):
        MapFeature("  ")


def test_emit_empty_record_has_two_triples():
    text = emit_rdf(MapRecord(f"{BASE_IRI}s", "s", (41.7, -71.1)))
    assert len(text.splitlines()) == 2
    assert f'<{BASE_IRI}s> <{schema()}nearby> "41.7 -71.1" .' in text.splitlines()


def test_emit_matched_feature_has_six_triples():
    record = MapRecord(f"{BASE_IRI}s", "s", (41.7, -71.1),
                       (MapFeature("Fall River", ("f", "r"), "http://gaz/1", (41.7, -71.15)),))
    lines = emit_rdf(record).splitlines()
    assert len(lines) == 6
    assert lines == sorted(lines)
    assert f"<{BASE_IRI}s> <{GEO.sfOverlaps}> <{BASE_IRI}s/feature/0> ." in lines
    assert f"<{BASE_IRI}s/feature/0> <{RDFS.seeAlso}> <http://gaz/1> ." in lines


def test_emit_is_deterministic(matched_record):
    assert emit_rdf(matched_record) == emit_rdf(matched_record)


def test_ntriples_round_trip(matched_record):
    text = emit_rdf(matched_record)
    parsed = parse_ntriples(text)
    assert parsed.uri == matched_record.uri
    assert parsed.sheet_id == "bend"
    assert parsed.nearby == matched_record.nearby
    assert [(f.label, f.see_also, f.point) for f in parsed.features] == \
        [(f.label, f.see_also, f.point) for f in matched_record.features]
    assert emit_rdf(parsed) == text


def test_wkt_points(matched_record):
    g = record_graph(matched_record, wkt=True)
    literal = g.value(rdflib.URIRef(matched_record.uri), schema().nearby)
    assert literal.datatype == GEO.wktLiteral
    assert str(literal) == "POINT(-121.77 44.28)"
    assert parse_ntriples(emit_rdf(matched_record, wkt=True)).nearby == (44.28, -121.77)


def test_xml_serialization_holds_same_triples(matched_record):
    xml = emit_rdf(matched_record, "xml")
    g = rdflib.Graph()
    g.parse(data=xml, format="xml")
    assert len(g) == len(emit_rdf(matched_record).splitlines())
    assert (rdflib.URIRef(matched_record.uri), RDF.type, schema().HistoricalMap) in g


def test_emit_rejects_unknown_syntax(matched_record):
    with pytest.raises(ContractError):
        emit_rdf(matched_record, "turtle")


def test_parse_ntriples_needs_one_map():
    with pytest.raises(ValidationError):
        parse_ntriples("")


def test_query_peaks_above_one_km():
    gaz, records = peak_corpus()
    assert query_maps(records, gaz, "peak", 1000) == ["bend", "modoc"]
    assert query_maps(records, gaz, "peak", 2500) == []
    assert query_maps(records, gaz, "lake") == ["amboy", "modoc"]
    assert query_maps(records, gaz) == ["amboy", "bend", "modoc"]


@pytest.mark.parametrize("feature_type, min_elevation", [
    ("peak", 1000), ("peak", 250), ("peak", 1961), ("lake", None), ("area", 0), (None, 1500), (None, None),
])
def test_query_equals_brute_force_join(feature_type, min_elevation):
    gaz, records = peak_corpus()
    expected = sorted({
        r.sheet_id for r in records for f in r.features for e in gaz.records
        if f.see_also == e.uri
        and (feature_type is None or e.feature_type == feature_type)
        and (min_elevation is None or (e.elevation is not None and e.elevation >= min_elevation))
    })
    assert query_maps(records, gaz, feature_type, min_elevation) == expected


@pytest.mark.parametrize("elevation, expected", [(1000.0, ["m"]), (999.9, []), (None, [])])
def test_query_elevation_bound_is_inclusive(elevation, expected):
    gaz = Gazetteer([GazetteerRecord("Round Top", 44.0, -121.0, "peak", elevation, "e:top")])
    records = [MapRecord(f"{BASE_IRI}m", "m", None, (MapFeature("Round Top", (), "e:top"),))]
    assert query_maps(records, gaz, "peak", 1000) == expected


def test_query_counts_each_map_once():
    gaz, _ = peak_corpus()
    peak = MapFeature("Black Crater", (), "e:0")
    records = [MapRecord(f"{BASE_IRI}m1", "m1", None, (peak, peak)), MapRecord(f"{BASE_IRI}m2", "m2", None, (peak,))]
    assert query_maps(records, gaz, "peak", 1000) == ["m1", "m2"]


def test_query_skips_unknown_entities(caplog):
    gaz, _ = peak_corpus()
    records = [MapRecord(f"{BASE_IRI}m", "m", None, (MapFeature("Ghost Peak", (), "e:404"),))]
    with caplog.at_level(logging.WARNING):
        assert query_maps(records, gaz, "peak") == []
    assert "e:404" in caplog.text


def test_record_store(tmp_path, matched_record):
    store = RecordStore(tmp_path / "records")
    assert store.all() == []
    path = store.put(matched_record)
    assert path == tmp_path / "records" / "bend.nt"
    assert path.read_text() == emit_rdf(matched_record)
    assert store.get("bend").features[0].see_also == "http://gaz/3"
    assert store.get("missing") is None
    store.put(MapRecord(f"{BASE_IRI}amboy", "amboy", None))
    assert [r.sheet_id for r in store.all()] == ["amboy", "bend"]
    assert not list((tmp_path / "records").glob("*.tmp"))
