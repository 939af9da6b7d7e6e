"""
数据模型与特征构造
病人上下文、医生/机构指示变量编码，以及送入信念模型的联合特征向量
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DomainError, IngestError, ParseError, SchemaError

logger = logging.getLogger(__name__)

# (医生编号 p, 机构编号 f)，编号从 1 开始；不启用机构时 f 为 None
Action = Tuple[int, Optional[int]]

ID_COLUMN = "patient_id"
ACTION_P_COLUMN = "action_p"
ACTION_F_COLUMN = "action_f"
OUTCOME_COLUMN = "outcome"
RESERVED_COLUMNS = (ID_COLUMN, ACTION_P_COLUMN, ACTION_F_COLUMN, OUTCOME_COLUMN)


def _frozen_array(values: Iterable[float]) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class FeatureSchema:
    """有序的特征列名；numeric 中的列为连续值（如年龄），其余列为 0/1 二值列"""

    columns: Tuple[str, ...]
    numeric: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "numeric", frozenset(self.numeric))

        if len(set(self.columns)) != len(self.columns):
            duplicates = sorted(c for c, count in Counter(self.columns).items() if count > 1)
            raise SchemaError(f"列名重复: {duplicates}")

        unknown = self.numeric - set(self.columns)
        if unknown:
            raise SchemaError(f"numeric 中包含不在 schema 中的列: {sorted(unknown)}")

    @property
    def d_x(self) -> int:
        return len(self.columns)

    def is_binary(self, column: str) -> bool:
        return column not in self.numeric


@dataclass(frozen=True)
class PatientContext:
    """一个病人的特征向量 φ^X(x)"""

    id: str
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen_array(self.features))

    @property
    def d_x(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class ActionSpace:
    """
    可分配的治疗集合：M 个医生，L 个机构（L = 0 表示只选医生）

    动作按医生优先的顺序枚举: (1,1), (1,2), ..., (M,L)
    """

    num_physicians: int
    num_facilities: int = 0

    def __post_init__(self):
        if int(self.num_physicians) < 1:
            raise DomainError(f"num_physicians 必须 >= 1，实际为 {self.num_physicians}")
        if int(self.num_facilities) < 0:
            raise DomainError(f"num_facilities 必须 >= 0，实际为 {self.num_facilities}")

    @property
    def block_size(self) -> int:
        return self.num_physicians + self.num_facilities

    @property
    def actions(self) -> List[Action]:
        if self.num_facilities == 0:
            return [(p, None) for p in range(1, self.num_physicians + 1)]
        return [
            (p, f)
            for p in range(1, self.num_physicians + 1)
            for f in range(1, self.num_facilities + 1)
        ]

    @property
    def size(self) -> int:
        return self.num_physicians * max(self.num_facilities, 1)

    def validate(self, p: int, f: Optional[int]) -> None:
        if not 1 <= int(p) <= self.num_physicians:
            raise DomainError(f"医生编号 {p} 超出范围 [1, {self.num_physicians}]")
        if self.num_facilities == 0:
            if f is not None:
                raise DomainError(f"未启用机构 (L = 0)，但传入了机构编号 {f}")
        elif f is None or not 1 <= int(f) <= self.num_facilities:
            raise DomainError(f"机构编号 {f} 超出范围 [1, {self.num_facilities}]")

    def index(self, action: Action) -> int:
        p, f = action
        self.validate(p, f)
        if self.num_facilities == 0:
            return int(p) - 1
        return (int(p) - 1) * self.num_facilities + (int(f) - 1)


@dataclass(frozen=True)
class EncodedInstance:
    """联合特征向量 φ(x, a) = (1, φ^X(x), 医生指示块, 机构指示块)"""

    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phi", _frozen_array(self.phi))

    @property
    def dimension(self) -> int:
        return int(self.phi.shape[0])


@dataclass(frozen=True)
class Observation:
    context: PatientContext
    action: Action
    outcome: int

    def __post_init__(self):
        if self.outcome not in (-1, 1):
            raise DomainError(f"观测结果必须为 -1 或 +1，实际为 {self.outcome}")


Row = Union[PatientContext, Observation]


@dataclass(frozen=True)
class Dataset:
    schema: FeatureSchema
    rows: Tuple[Row, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        for row in self.rows:
            context = row.context if isinstance(row, Observation) else row
            if context.d_x != self.schema.d_x:
                raise SchemaError(
                    f"病人 {context.id} 的特征维度 {context.d_x} 与 schema 维度 {self.schema.d_x} 不一致"
                )

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def contexts(self) -> List[PatientContext]:
        return [row.context if isinstance(row, Observation) else row for row in self.rows]

    @property
    def observations(self) -> List[Observation]:
        return [row for row in self.rows if isinstance(row, Observation)]

    def standardized(self) -> "Dataset":
        """对连续列做 z-score（使用本数据集的均值/标准差），二值列保持不变"""
        if not self.rows or not self.schema.numeric:
            return self

        matrix = np.vstack([c.features for c in self.contexts])
        for j, column in enumerate(self.schema.columns):
            if self.schema.is_binary(column):
                continue
            mean = matrix[:, j].mean()
            std = matrix[:, j].std()
            matrix[:, j] = (matrix[:, j] - mean) / std if std > 0 else matrix[:, j] - mean

        rows: List[Row] = []
        for row, values in zip(self.rows, matrix):
            if isinstance(row, Observation):
                context = PatientContext(row.context.id, values)
                rows.append(Observation(context, row.action, row.outcome))
            else:
                rows.append(PatientContext(row.id, values))
        return Dataset(self.schema, tuple(rows))


def _parse_number(column: str, value: Any) -> float:
    if isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool):
        return float(value)
    try:
        return float(str(value).strip())
    except ValueError:
        raise ParseError(f"列 {column} 的值 {value!r} 不是数字")


def encode_patient(
    raw_row: Mapping[str, Any],
    schema: FeatureSchema,
    patient_id: str = ""
) -> PatientContext:
    """
    按 schema 顺序把一行原始记录编码为病人上下文

    Args:
        raw_row: 列名到取值的映射，缺失的二值列按 0 处理
        schema: 特征 schema
        patient_id: 病人标识

    Returns:
        PatientContext
    """
    unknown = set(raw_row) - set(schema.columns)
    if unknown:
        raise SchemaError(f"未知列名: {sorted(unknown)}")

    features = []
    for column in schema.columns:
        if column not in raw_row:
            if schema.is_binary(column):
                features.append(0.0)
                continue
            raise SchemaError(f"缺少连续列 {column}（不做缺失值填补）")

        value = _parse_number(column, raw_row[column])
        if schema.is_binary(column) and value not in (0.0, 1.0):
            raise ParseError(f"二值列 {column} 的值必须为 0 或 1，实际为 {raw_row[column]!r}")
        features.append(value)

    return PatientContext(str(patient_id), features)


def encode_action(p: int, f: Optional[int], space: ActionSpace) -> np.ndarray:
    """
    医生/机构指示变量块: e_p (长度 M) 拼接 e_f (长度 L，L = 0 时为空)
    """
    space.validate(p, f)
    block = np.zeros(space.block_size)
    block[int(p) - 1] = 1.0
    if space.num_facilities > 0:
        block[space.num_physicians + int(f) - 1] = 1.0
    return block


def feature_dimension(d_x: int, space: ActionSpace) -> int:
    return 1 + int(d_x) + space.block_size


def assemble(context: PatientContext, p: int, f: Optional[int], space: ActionSpace) -> EncodedInstance:
    """φ(x, a) = (1) ⧺ context.features ⧺ encode_action(p, f)"""
    block = encode_action(p, f, space)
    return EncodedInstance(np.concatenate(([1.0], context.features, block)))


def assemble_matrix(context: PatientContext, space: ActionSpace) -> np.ndarray:
    """
    一次性构造当前病人所有动作的特征矩阵，行顺序与 space.actions 一致

    Returns:
        形状为 (动作数, d) 的矩阵
    """
    actions = space.actions
    d = feature_dimension(context.d_x, space)
    matrix = np.zeros((len(actions), d))
    matrix[:, 0] = 1.0
    matrix[:, 1:1 + context.d_x] = context.features

    offset = 1 + context.d_x
    for i, (p, f) in enumerate(actions):
        matrix[i, offset + p - 1] = 1.0
        if f is not None:
            matrix[i, offset + space.num_physicians + f - 1] = 1.0
    return matrix


def normalize_outcome(value: Any) -> int:
    """把 0/1 或 -1/+1 编码的结果统一为 -1/+1"""
    number = _parse_number(OUTCOME_COLUMN, value)
    if number == 1.0:
        return 1
    if number in (0.0, -1.0):
        return -1
    raise ParseError(f"outcome 只能取 -1/+1 或 0/1，实际为 {value!r}")


def load_dataset(
    path: Union[str, Path],
    schema: Optional[FeatureSchema] = None,
    standardize: bool = False
) -> Dataset:
    """
    读取数据集 CSV

    首行为表头；必须包含 patient_id 列；action_p / action_f / outcome 为可选列。
    未给定 schema 时从文件推断：取值全部为 0/1 的列视为二值列，其余为连续列。

    Args:
        path: CSV 文件路径
        schema: 期望的 schema，给定时文件特征列必须与其一致
        standardize: 是否对连续列做 z-score

    Returns:
        Dataset
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise IngestError(f"数据文件为空: {path}")
    except (OSError, pd.errors.ParserError) as e:
        raise IngestError(f"无法读取数据文件 {path}: {e}")

    if ID_COLUMN not in frame.columns:
        raise IngestError(f"数据文件 {path} 缺少 {ID_COLUMN} 列")
    if len(set(frame.columns)) != len(frame.columns):
        raise IngestError(f"数据文件 {path} 存在重复列名")

    feature_columns = [c for c in frame.columns if c not in RESERVED_COLUMNS]

    numeric_values: Dict[str, np.ndarray] = {}
    for column in feature_columns:
        try:
            numeric_values[column] = pd.to_numeric(frame[column].str.strip()).to_numpy(dtype=float)
        except ValueError:
            raise ParseError(f"列 {column} 含有非数字取值")
        missing = np.flatnonzero(np.isnan(numeric_values[column]))
        if len(missing):
            raise ParseError(f"列 {column} 第 {int(missing[0]) + 2} 行为空值，不支持缺失数据")

    if schema is None:
        numeric = {
            c for c, values in numeric_values.items()
            if not np.isin(values, (0.0, 1.0)).all()
        }
        schema = FeatureSchema(tuple(feature_columns), frozenset(numeric))
    elif tuple(feature_columns) != schema.columns:
        raise IngestError(
            f"数据文件 {path} 的特征列与期望 schema 不一致: "
            f"{feature_columns[:5]}... vs {list(schema.columns[:5])}..."
        )

    for column in schema.columns:
        if schema.is_binary(column) and not np.isin(numeric_values[column], (0.0, 1.0)).all():
            raise ParseError(f"二值列 {column} 含有 0/1 以外的取值")

    has_actions = ACTION_P_COLUMN in frame.columns and OUTCOME_COLUMN in frame.columns
    matrix = (
        np.column_stack([numeric_values[c] for c in schema.columns])
        if schema.columns else np.zeros((len(frame), 0))
    )

    rows: List[Row] = []
    for i, patient_id in enumerate(frame[ID_COLUMN]):
        context = PatientContext(patient_id, matrix[i])
        if not has_actions:
            rows.append(context)
            continue

        p = int(_parse_number(ACTION_P_COLUMN, frame[ACTION_P_COLUMN].iloc[i]))
        f_raw = frame[ACTION_F_COLUMN].iloc[i] if ACTION_F_COLUMN in frame.columns else ""
        f = int(_parse_number(ACTION_F_COLUMN, f_raw)) if str(f_raw).strip() != "" else None
        y = normalize_outcome(frame[OUTCOME_COLUMN].iloc[i])
        rows.append(Observation(context, (p, f), y))

    dataset = Dataset(schema, tuple(rows))
    logger.info(f"📄 读取数据集 {path}: {len(dataset)} 行, {schema.d_x} 个特征列")

    return dataset.standardized() if standardize else dataset
