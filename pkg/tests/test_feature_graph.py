"""余弦共现图、连通分量与谱社区检测"""

import itertools

import numpy as np
import pandas as pd
import pytest

from src.errors import DomainError, IngestError
from src.feature_graph import (
    BinaryMatrix, Partition, SimilarityGraph, connected_components, cosine_graph, load_flat,
    modularity, pool_groups, prune_for_display, read_partition, spectral_communities,
    write_edges, write_partition
)


def _graph(n, edges):
    return SimilarityGraph(tuple(f"n{i}" for i in range(n)), {(min(i, j), max(i, j)): 1.0 for i, j in edges})


def _two_cliques():
    left = list(itertools.combinations(range(4), 2))
    right = list(itertools.combinations(range(4, 8), 2))
    return _graph(8, left + right + [(3, 4)])


def _reachability_labels(n, edges):
    reach = np.eye(n, dtype=bool)
    for i, j in edges:
        reach[i, j] = reach[j, i] = True
    for k in range(n):
        reach |= reach[:, [k]] & reach[[k], :]
    return np.array([int(np.flatnonzero(reach[i])[0]) for i in range(n)])


def test_cosine_example():
    matrix = BinaryMatrix(("d1", "d2"), np.array([[1, 1], [1, 1], [0, 1], [0, 0]]))
    graph = cosine_graph(matrix, 0.8)
    assert graph.has_edge("d1", "d2")
    assert graph.edges[(0, 1)] == pytest.approx(2 / np.sqrt(6))
    assert not cosine_graph(matrix, 0.9).edges


def test_identical_and_disjoint_columns():
    values = np.array([[1, 1, 0], [0, 0, 1], [1, 1, 0]])
    graph = cosine_graph(BinaryMatrix(("a", "b", "c"), values), 1.0)
    assert graph.has_edge("a", "b")
    assert not graph.has_edge("a", "c")
    assert not cosine_graph(BinaryMatrix(("a", "b", "c"), values), 0.01).has_edge("b", "c")


def test_zero_columns_are_isolated():
    values = np.array([[1, 0, 1], [1, 0, 1]])
    graph = cosine_graph(BinaryMatrix(("a", "z", "b"), values), 0.0)
    assert graph.degree().tolist() == [1, 0, 1]


@pytest.mark.parametrize("threshold", [-0.1, 1.5])
def test_threshold_domain(threshold):
    with pytest.raises(DomainError):
        cosine_graph(BinaryMatrix(("a",), np.array([[1]])), threshold)


def test_binary_matrix_rejects_non_binary_values():
    with pytest.raises(DomainError):
        BinaryMatrix(("a", "b"), np.array([[0, 2]]))
    with pytest.raises(DomainError):
        BinaryMatrix(("a", "a"), np.array([[0, 1]]))


def test_raising_threshold_never_adds_edges():
    rng = np.random.default_rng(0)
    for _ in range(20):
        matrix = BinaryMatrix(tuple(f"c{j}" for j in range(8)), (rng.random((30, 8)) < 0.3).astype(int))
        low, high = cosine_graph(matrix, 0.3), cosine_graph(matrix, 0.6)
        assert set(high.edges) <= set(low.edges)
        assert all(i < j for i, j in low.edges)


def test_components_example():
    partition = connected_components(_graph(4, [(0, 1), (1, 2)]))
    assert sorted(map(sorted, partition.groups)) == [["n0", "n1", "n2"], ["n3"]]


def test_components_without_edges_are_singletons():
    partition = connected_components(_graph(5, []))
    assert partition.num_groups == 5


def test_components_match_brute_force_reachability():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 13))
        pairs = list(itertools.combinations(range(n), 2))
        edges = [pair for pair in pairs if rng.random() < 0.15]
        partition = connected_components(_graph(n, edges))
        expected = Partition(partition.nodes, _reachability_labels(n, edges))
        np.testing.assert_array_equal(partition.labels, expected.labels)


def test_threshold_one_groups_identical_columns():
    rng = np.random.default_rng(2)
    values = (rng.random((6, 12)) < 0.4).astype(int)
    values[0, 1] = 1
    values[:, 5] = values[:, 1]
    values[:, 9] = values[:, 1]
    matrix = BinaryMatrix(tuple(f"c{j}" for j in range(12)), values)
    labels = connected_components(cosine_graph(matrix, 1.0)).labels

    for i, j in itertools.combinations(range(12), 2):
        identical = values[:, i].any() and np.array_equal(values[:, i], values[:, j])
        assert (labels[i] == labels[j]) == identical
    assert labels[1] == labels[5] == labels[9]


def test_partition_labels_are_contiguous():
    partition = Partition(("a", "b", "c", "d"), [7, 3, 7, 9])
    assert partition.labels.tolist() == [0, 1, 0, 2]
    assert partition.assignment == {"a": 0, "b": 1, "c": 0, "d": 2}


def test_spectral_recovers_two_cliques():
    graph = _two_cliques()
    partition = spectral_communities(graph)
    assert sorted(map(sorted, partition.groups)) == [["n0", "n1", "n2", "n3"], ["n4", "n5", "n6", "n7"]]

    best = max(
        modularity(graph, Partition(graph.nodes, [0] + [int(b) for b in format(mask, "07b")]))
        for mask in range(2 ** 7)
    )
    assert partition.modularity == pytest.approx(best, abs=1e-12)


def test_spectral_single_clique_is_one_group():
    graph = _graph(5, itertools.combinations(range(5), 2))
    partition = spectral_communities(graph)
    assert partition.num_groups == 1
    assert partition.modularity == pytest.approx(0.0, abs=1e-12)


def test_spectral_never_straddles_components():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(2, 13))
        edges = [pair for pair in itertools.combinations(range(n), 2) if rng.random() < 0.3]
        graph = _graph(n, edges)
        communities = spectral_communities(graph)
        components = connected_components(graph)
        for i, j in itertools.combinations(range(n), 2):
            if communities.labels[i] == communities.labels[j]:
                assert components.labels[i] == components.labels[j]
        assert communities.modularity >= -1e-12


def test_spectral_without_edges():
    partition = spectral_communities(_graph(4, []))
    assert partition.num_groups == 4
    assert partition.modularity == 0.0


def test_all_in_one_group_has_zero_modularity():
    graph = _two_cliques()
    assert modularity(graph, Partition(graph.nodes, np.zeros(8))) == pytest.approx(0.0, abs=1e-12)


def test_spectral_is_deterministic():
    graph = _two_cliques()
    first, second = spectral_communities(graph), spectral_communities(graph)
    np.testing.assert_array_equal(first.labels, second.labels)


def test_prune_for_display_drops_low_degree_nodes():
    graph = _two_cliques()
    pendant = SimilarityGraph(graph.nodes + ("leaf",), {**graph.edges, (0, 8): 0.9})
    pruned = prune_for_display(pendant, min_degree=3)
    assert "leaf" not in pruned.nodes
    assert pruned.num_nodes == 8
    assert len(pruned.edges) == len(graph.edges)


def test_pool_groups_takes_row_max():
    matrix = BinaryMatrix(("a", "b", "c"), np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0], [0, 0, 1]]))
    partition = Partition(("a", "b", "c"), [0, 0, 1])
    pooled = pool_groups(matrix, partition)
    assert pooled.names == ("group_0", "group_1")
    assert pooled.values.tolist() == [[1, 0], [1, 0], [0, 0], [0, 1]]


def test_pool_groups_rejects_unknown_nodes():
    matrix = BinaryMatrix(("a",), np.array([[1]]))
    with pytest.raises(DomainError):
        pool_groups(matrix, Partition(("a", "zz"), [0, 1]))


def test_flat_file_round_trip(tmp_path):
    flat = tmp_path / "flat.csv"
    flat.write_text("patient_id,flu,cough,outcome\np1,1,1,1\np2,0,1,0\n", encoding="utf-8")
    matrix = load_flat(flat)
    assert matrix.names == ("flu", "cough")

    partition = connected_components(cosine_graph(matrix, 0.5))
    path = write_partition(partition, tmp_path / "partition.csv")
    loaded = read_partition(path)
    assert loaded.nodes == partition.nodes
    np.testing.assert_array_equal(loaded.labels, partition.labels)

    edges = pd.read_csv(write_edges(cosine_graph(matrix, 0.5), tmp_path / "edges.csv"))
    assert list(edges.columns) == ["source", "target", "weight"]
    assert edges.iloc[0]["weight"] == pytest.approx(1 / np.sqrt(2))


def test_load_flat_rejects_non_binary(tmp_path):
    flat = tmp_path / "flat.csv"
    flat.write_text("flu,cough\n1,3\n", encoding="utf-8")
    with pytest.raises(IngestError):
        load_flat(flat)
