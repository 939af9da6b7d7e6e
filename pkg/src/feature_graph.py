"""
稀疏二值特征的图聚类
余弦共现图、连通分量、谱模块度社区检测，以及按分组合并特征列
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components

from .errors import DomainError, IngestError, ParseError
from .model_core import RESERVED_COLUMNS

logger = logging.getLogger(__name__)

SPLIT_GAIN_TOLERANCE = 1e-10
POWER_ITERATION_CAP = 10_000
POWER_ITERATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class BinaryMatrix:
    """n 个病人 × p 个命名二值列"""

    names: Tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] != len(names):
            raise DomainError(f"矩阵形状 {values.shape} 与列数 {len(names)} 不一致")
        if len(set(names)) != len(names):
            raise DomainError("列名必须唯一")
        if not np.isin(values, (0, 1)).all():
            raise ParseError("二值矩阵只能包含 0 或 1")
        values = values.astype(np.int64)
        values.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "BinaryMatrix":
        return cls(tuple(str(c) for c in frame.columns), frame.to_numpy())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=list(self.names))


@dataclass(frozen=True)
class SimilarityGraph:
    """无向图；edges 的键为 (i, j)，i < j，值为余弦相似度"""

    nodes: Tuple[str, ...]
    edges: Dict[Tuple[int, int], float] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def adjacency(self, weighted: bool = False) -> csr_matrix:
        n = self.num_nodes
        if not self.edges:
            return csr_matrix((n, n))
        rows, cols = zip(*self.edges)
        data = list(self.edges.values()) if weighted else [1.0] * len(self.edges)
        upper = csr_matrix((data, (rows, cols)), shape=(n, n))
        return (upper + upper.T).tocsr()

    def degree(self) -> np.ndarray:
        degree = np.zeros(self.num_nodes, dtype=int)
        for i, j in self.edges:
            degree[i] += 1
            degree[j] += 1
        return degree

    def has_edge(self, a: str, b: str) -> bool:
        i, j = self.nodes.index(a), self.nodes.index(b)
        return (min(i, j), max(i, j)) in self.edges


@dataclass(frozen=True)
class Partition:
    """节点到组号的映射，组号按首次出现顺序从 0 连续编号"""

    nodes: Tuple[str, ...]
    labels: np.ndarray
    modularity: Optional[float] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.shape != (len(self.nodes),):
            raise DomainError("每个节点必须恰好属于一个组")
        _, first_seen, inverse = np.unique(labels, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first_seen))
        contiguous = order[inverse]
        contiguous.flags.writeable = False
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "labels", contiguous)

    @property
    def num_groups(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def assignment(self) -> Dict[str, int]:
        return {node: int(label) for node, label in zip(self.nodes, self.labels)}

    @property
    def groups(self) -> List[List[str]]:
        groups: List[List[str]] = [[] for _ in range(self.num_groups)]
        for node, label in zip(self.nodes, self.labels):
            groups[label].append(node)
        return groups


def cosine_graph(matrix: BinaryMatrix, threshold: float) -> SimilarityGraph:
    """
    按共现余弦相似度建图

    ⟨d1, d2⟩ / (‖d1‖‖d2‖) >= threshold 时连边；全零列的余弦无定义，作为孤立节点。

    Args:
        matrix: 二值矩阵，每列一个诊断/护理人员
        threshold: [0, 1] 内的阈值

    Returns:
        SimilarityGraph
    """
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold 必须在 [0, 1] 内，实际为 {threshold}")
    if matrix.n < 1:
        raise DomainError("矩阵至少需要一行")

    counts = matrix.values.sum(axis=0)
    intersections = matrix.values.T @ matrix.values
    # sqrt(c1·c2) 对相同列精确等于 c，阈值为 1 时不会因舍入丢边
    denominator = np.sqrt(np.outer(counts, counts).astype(float))
    cosine = np.divide(
        intersections, denominator,
        out=np.zeros(denominator.shape), where=denominator > 0
    )

    nonzero = counts > 0
    mask = np.triu(np.outer(nonzero, nonzero) & (cosine >= threshold), k=1)
    edges = {(int(i), int(j)): float(cosine[i, j]) for i, j in zip(*np.nonzero(mask))}

    logger.info(f"🔗 余弦图: {len(matrix.names)} 个节点, {len(edges)} 条边 (阈值 {threshold})")
    return SimilarityGraph(matrix.names, edges)


def connected_components(graph: SimilarityGraph) -> Partition:
    """无向连通分量，孤立节点各自成组"""
    if graph.num_nodes == 0:
        return Partition((), np.zeros(0, dtype=int))
    _, labels = _csgraph_components(graph.adjacency(), directed=False, return_labels=True)
    partition = Partition(graph.nodes, labels)
    logger.info(f"🧩 连通分量: {partition.num_groups} 个")
    return partition


def _modularity_matrix(graph: SimilarityGraph, weighted: bool) -> Tuple[np.ndarray, float]:
    adjacency = graph.adjacency(weighted).toarray()
    degree = adjacency.sum(axis=1)
    two_m = float(degree.sum())
    if two_m == 0:
        return np.zeros_like(adjacency), 0.0
    return adjacency - np.outer(degree, degree) / two_m, two_m


def modularity(graph: SimilarityGraph, partition: Partition, weighted: bool = False) -> float:
    """Q = (1/2m) Σ_ij B_ij δ(g_i, g_j)；无边图定义为 0"""
    b, two_m = _modularity_matrix(graph, weighted)
    if two_m == 0:
        return 0.0
    same = partition.labels[:, None] == partition.labels[None, :]
    return float(b[same].sum() / two_m)


def _leading_eigenvector(b: np.ndarray) -> np.ndarray:
    """对 B + ‖B‖₁·I 做幂迭代；起始向量为全 1 加固定扰动，保证结果可复现"""
    n = b.shape[0]
    shifted = b + np.abs(b).sum(axis=0).max() * np.eye(n)

    vector = np.ones(n) + 0.5 * np.sin(np.arange(1, n + 1))
    vector /= np.linalg.norm(vector)
    for _ in range(POWER_ITERATION_CAP):
        nxt = shifted @ vector
        norm = np.linalg.norm(nxt)
        if norm == 0:
            return vector
        nxt /= norm
        if np.linalg.norm(nxt - vector) < POWER_ITERATION_TOLERANCE:
            return nxt
        vector = nxt

    logger.debug(f"幂迭代在 {POWER_ITERATION_CAP} 步内未收敛，使用当前向量")
    return vector


def _fine_tune(b: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """逐个翻转节点（每个节点只翻一次），保留整个过程中 sᵀBs 最大的划分"""
    off_diagonal = b - np.diag(np.diag(b))
    current = signs.copy()
    score = best = float(current @ b @ current)
    best_signs = current.copy()
    moved = np.zeros(len(signs), dtype=bool)

    for _ in range(len(signs)):
        deltas = -4.0 * current * (off_diagonal @ current)
        deltas[moved] = -np.inf
        i = int(np.argmax(deltas))
        current[i] *= -1
        moved[i] = True
        score += deltas[i]
        if score > best + SPLIT_GAIN_TOLERANCE:
            best = score
            best_signs = current.copy()
    return best_signs


def _bisect(b: np.ndarray, two_m: float, members: np.ndarray, refine: bool) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    sub = b[np.ix_(members, members)]
    sub = sub - np.diag(sub.sum(axis=1))

    vector = _leading_eigenvector(sub)
    signs = np.where(vector >= 0, 1.0, -1.0)
    if refine:
        signs = _fine_tune(sub, signs)

    gain = float(signs @ sub @ signs) / (2.0 * two_m)
    if gain <= SPLIT_GAIN_TOLERANCE or abs(signs.sum()) == len(signs):
        return None
    return members[signs > 0], members[signs < 0]


def spectral_communities(graph: SimilarityGraph, refine: bool = True, weighted: bool = False) -> Partition:
    """
    Newman 主特征向量法的递归二分社区检测

    先按连通分量切开（社区不会跨分量），再在每个分量内对广义模块度矩阵递归二分，
    直到拆分带来的模块度增益不超过 1e-10。

    Args:
        graph: 相似度图
        refine: 每次二分后是否做节点翻转微调
        weighted: 是否用余弦权重代替 0/1 邻接

    Returns:
        带模块度 Q 的 Partition
    """
    n = graph.num_nodes
    if n == 0:
        return Partition((), np.zeros(0, dtype=int), 0.0)

    b, two_m = _modularity_matrix(graph, weighted)
    if two_m == 0:
        return Partition(graph.nodes, np.arange(n), 0.0)

    components = connected_components(graph)
    labels = np.zeros(n, dtype=int)
    next_label = 0

    for component in range(components.num_groups):
        pending = [np.flatnonzero(components.labels == component)]
        while pending:
            members = pending.pop()
            split = _bisect(b, two_m, members, refine) if len(members) > 1 else None
            if split is None:
                labels[members] = next_label
                next_label += 1
            else:
                # 先处理第一半，保证编号顺序确定
                pending.extend([split[1], split[0]])

    partition = Partition(graph.nodes, labels)
    q = modularity(graph, partition, weighted)
    logger.info(f"🧭 谱社区检测: {partition.num_groups} 个社区, Q = {q:.4f}")
    return Partition(graph.nodes, partition.labels, q)


def prune_for_display(graph: SimilarityGraph, min_degree: int = 3) -> SimilarityGraph:
    """只用于可视化：去掉度数小于 min_degree 的节点，不影响算法分组"""
    degree = graph.degree()
    keep = [i for i in range(graph.num_nodes) if degree[i] >= min_degree]
    position = {old: new for new, old in enumerate(keep)}
    edges = {
        (position[i], position[j]): weight
        for (i, j), weight in graph.edges.items()
        if i in position and j in position
    }
    return SimilarityGraph(tuple(graph.nodes[i] for i in keep), edges)


def pool_groups(matrix: BinaryMatrix, partition: Partition, prefix: str = "group_") -> BinaryMatrix:
    """组内任一成员列为 1 时该组特征为 1（按行取最大值）"""
    missing = set(partition.nodes) - set(matrix.names)
    if missing:
        raise DomainError(f"分组中的节点不在矩阵列中: {sorted(missing)[:5]}")

    index = {name: j for j, name in enumerate(matrix.names)}
    columns = []
    for members in partition.groups:
        block = matrix.values[:, [index[name] for name in members]]
        columns.append(block.max(axis=1))

    names = tuple(f"{prefix}{g}" for g in range(partition.num_groups))
    values = np.column_stack(columns) if columns else np.zeros((matrix.n, 0), dtype=int)
    return BinaryMatrix(names, values)


def load_flat(path: Union[str, Path], exclude: Sequence[str] = RESERVED_COLUMNS) -> BinaryMatrix:
    """读取扁平二值 CSV，跳过 patient_id / action / outcome 等非特征列"""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise IngestError(f"文件为空: {path}")
    except (OSError, pd.errors.ParserError) as e:
        raise IngestError(f"无法读取 {path}: {e}")

    frame = frame[[c for c in frame.columns if c not in exclude]]
    if frame.empty:
        raise IngestError(f"{path} 中没有可用的特征行/列")
    try:
        return BinaryMatrix.from_frame(frame)
    except ParseError as e:
        raise IngestError(f"{path}: {e}")


def write_partition(partition: Partition, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"node": list(partition.nodes), "group": partition.labels}).to_csv(path, index=False)
    return path


def read_partition(path: Union[str, Path]) -> Partition:
    frame = pd.read_csv(path, dtype={"node": str})
    if list(frame.columns) != ["node", "group"]:
        raise IngestError(f"{path} 的表头必须为 node,group")
    return Partition(tuple(frame["node"]), frame["group"].to_numpy())


def write_edges(graph: SimilarityGraph, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [(graph.nodes[i], graph.nodes[j], w) for (i, j), w in sorted(graph.edges.items())]
    pd.DataFrame(rows, columns=["source", "target", "weight"]).to_csv(path, index=False)
    return path
