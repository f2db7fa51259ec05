import numpy as np
import pytest

from scot.align import cost_matrix
from scot.citydata import (UNMATCHED, CityGraph, TripTable, build_mobility, gen_city_family,
                           gen_twin_cities, load_city, read_truth, write_city, write_truth)
from scot.errors import ArtifactNotFound, InputError, ParseError


def test_build_mobility_normalizes_rows():
    M = build_mobility(TripTable.from_records([(0, 1, 3), (0, 2, 1)]), 3)
    np.testing.assert_allclose(M[0], [0, 0.75, 0.25])


def test_build_mobility_empty_trips_uniform():
    M = build_mobility(TripTable.from_records([]), 2)
    np.testing.assert_allclose(M, 0.5)


def test_build_mobility_mixed_rows():
    M = build_mobility(TripTable.from_records([(1, 0, 5)]), 2)
    np.testing.assert_allclose(M[1], [1, 0])
    np.testing.assert_allclose(M[0], [0.5, 0.5])


def test_build_mobility_rejects_bad_input():
    with pytest.raises(InputError):
        build_mobility(TripTable.from_records([(0, 3, 1)]), 3)
    with pytest.raises(InputError):
        build_mobility(TripTable.from_records([]), 0)


def test_citygraph_invariants():
    with pytest.raises(InputError):
        CityGraph("x", [[0, 1], [0, 0]], np.full((2, 2), 0.5))
    with pytest.raises(InputError):
        CityGraph("x", [[1, 0], [0, 0]], np.full((2, 2), 0.5))
    with pytest.raises(InputError):
        CityGraph("x", [[0, 1], [1, 0]], [[0.7, 0.7], [0.5, 0.5]])
    g = CityGraph("x", [[0, 1], [1, 0]], np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        g.adjacency[0, 0] = 1


def _write(dirp, name, text):
    (dirp / name).write_text(text)


def test_load_city_fixture(tmp_path):
    _write(tmp_path, "edges.csv", "i,j\n0,1\n")
    _write(tmp_path, "trips.csv", "origin,dest,count\n0,1,2\n0,2,2\n")
    _write(tmp_path, "labels.csv", "region_id,gdp\n0,1.5\n1,2.5\n2,3.5\n")
    g = load_city(tmp_path)
    expected = np.zeros((3, 3))
    expected[0, 1] = expected[1, 0] = 1
    np.testing.assert_array_equal(g.adjacency, expected)
    np.testing.assert_allclose(g.mobility[0], [0, 0.5, 0.5])
    np.testing.assert_allclose(g.mobility[1:], 1 / 3)
    assert g.labels["gdp"].shape == (3,)


def test_load_city_errors(tmp_path):
    with pytest.raises(ArtifactNotFound):
        load_city(tmp_path / "nope")
    _write(tmp_path, "edges.csv", "i,j\n0,1\n")
    with pytest.raises(ArtifactNotFound):
        load_city(tmp_path)
    _write(tmp_path, "trips.csv", "origin,dest,count\n0,1,x\n")
    with pytest.raises(ParseError) as exc:
        load_city(tmp_path)
    assert "trips.csv:2" in str(exc.value)
    _write(tmp_path, "trips.csv", "origin,dest,count\n0,1,1\n")
    _write(tmp_path, "edges.csv", "i,j\n0,1\n1,1\n")
    with pytest.raises(ParseError) as exc:
        load_city(tmp_path)
    assert "edges.csv:3" in str(exc.value)
    _write(tmp_path, "edges.csv", "a,b\n0,1\n")
    with pytest.raises(ParseError):
        load_city(tmp_path)


def test_load_city_duplicate_label_row(tmp_path):
    _write(tmp_path, "edges.csv", "i,j\n0,1\n")
    _write(tmp_path, "trips.csv", "origin,dest,count\n0,1,1\n")
    _write(tmp_path, "labels.csv", "region_id,gdp\n0,1\n0,2\n")
    with pytest.raises(ParseError) as exc:
        load_city(tmp_path)
    assert "labels.csv:3" in str(exc.value)


def test_twin_zero_noise_is_permutation():
    tw = gen_twin_cities(1, 20, 20)
    assert sorted(tw.true_match.tolist()) == list(range(20))
    np.testing.assert_array_equal(tw.source_latent, tw.target_latent[tw.true_match])
    C, _, _ = cost_matrix(tw.source_latent, tw.target_latent)
    np.testing.assert_allclose(C[np.arange(20), tw.true_match], 0, atol=1e-7)


def test_twin_deterministic(tmp_path):
    for k in range(2):
        tw = gen_twin_cities(1, 20, 20, noise_sigma=0.3)
        write_city(tw.source, tmp_path / str(k) / "source")
        write_city(tw.target, tmp_path / str(k) / "target")
        write_truth(tw, tmp_path / str(k) / "truth.csv")
    for rel in ["source/edges.csv", "source/trips.csv", "source/labels.csv", "target/trips.csv", "truth.csv"]:
        assert (tmp_path / "0" / rel).read_bytes() == (tmp_path / "1" / rel).read_bytes()


def test_twin_unequal_sizes():
    tw = gen_twin_cities(2, 30, 20)
    assert (tw.true_match != UNMATCHED).sum() == 20
    assert (tw.true_match == UNMATCHED).sum() == 10
    matched = tw.true_match[tw.true_match != UNMATCHED]
    assert len(set(matched.tolist())) == 20


def test_twin_drop_frac():
    tw = gen_twin_cities(3, 20, 20, drop_frac=0.25)
    assert (tw.true_match == UNMATCHED).sum() == 5


def test_twin_invariants_and_errors():
    tw = gen_twin_cities(4, 25, 18, noise_sigma=0.1)
    for g in (tw.source, tw.target):
        np.testing.assert_allclose(g.mobility.sum(axis=1), 1, atol=1e-9)
        assert np.array_equal(g.adjacency, g.adjacency.T)
        assert np.all(np.diag(g.adjacency) == 0)
    with pytest.raises(InputError):
        gen_twin_cities(0, 3, 10)
    with pytest.raises(InputError):
        gen_twin_cities(0, 10, 10, drop_frac=1.0)
    with pytest.raises(InputError):
        gen_twin_cities(0, 10, 10, noise_sigma=-1)


def test_city_roundtrip(tmp_path):
    tw = gen_twin_cities(5, 12, 12)
    write_city(tw.source, tmp_path / "s")
    g = load_city(tmp_path / "s")
    np.testing.assert_array_equal(g.adjacency, tw.source.adjacency)
    np.testing.assert_allclose(g.mobility, tw.source.mobility)
    for task, y in tw.source.labels.items():
        np.testing.assert_array_equal(g.labels[task], y)
    write_truth(tw, tmp_path / "truth.csv")
    np.testing.assert_array_equal(read_truth(tmp_path / "truth.csv"), tw.true_match)


def test_city_family_matches():
    sources, target, matches = gen_city_family(0, 16, n_sources=2)
    assert len(sources) == 2 and target.n == 16
    for m in matches:
        assert sorted(m.tolist()) == list(range(16))
