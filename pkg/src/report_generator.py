"""
实验报告生成器
将实验结果写成长表 CSV、汇总 CSV、运行清单 JSON，以及可选的 Markdown 摘要；
并能从已有的结果 CSV 重新计算可直接作图的曲线和箱线图数据
"""

import logging
import os
import re
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import orjson
import pandas as pd

from . import __version__
from .errors import IngestError
from .simulator import (
    ComparisonResult, ExperimentConfig, ExperimentResult, PairwiseDifference, Summary, summarize
)

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["rep", "n", "action_p", "action_f", "outcome", "cum_success"]
CURVE_COLUMNS = ["n", "mean_rate", "se_rate"]
FINAL_COLUMNS = ["final_median", "final_q25", "final_q75", "final_rate_mean", "time_averaged_rate"]
BOX_COLUMNS = ["median", "q25", "q75", "whisker_low", "whisker_high", "n_outliers", "outliers"]
DIFFERENCE_COLUMNS = ["policy_a", "policy_b", "mean_diff", "se", "ci_low", "ci_high", "relative"]


def safe_label(label: str) -> str:
    """把策略标签转成可用作文件名的形式，如 kg(tau=horizon,eta=0.5) -> kg_tau_horizon_eta_0.5"""
    return re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_") or "run"


def _results_frame(result: ExperimentResult, with_policy: bool) -> pd.DataFrame:
    frames = []
    for rep, trajectory in enumerate(result.trajectories):
        n_steps = len(trajectory.outcomes)
        action_f = pd.array(trajectory.action_f, dtype="Int64")
        if not trajectory.action_f.any():
            action_f = pd.array([pd.NA] * n_steps, dtype="Int64")
        frames.append(pd.DataFrame({
            "rep": np.full(n_steps, rep),
            "n": np.arange(n_steps),
            "action_p": trajectory.action_p,
            "action_f": action_f,
            "outcome": trajectory.outcomes,
            "cum_success": trajectory.cum_success,
        }))

    frame = pd.concat(frames, ignore_index=True)
    if with_policy:
        frame.insert(0, "policy", result.policy)
    return frame


def _curve_frame(summary: Summary) -> pd.DataFrame:
    return pd.DataFrame({
        "n": np.arange(len(summary.mean_rate)),
        "mean_rate": summary.mean_rate,
        "se_rate": summary.se_rate,
    })


def _final_row(summary: Summary) -> Dict[str, float]:
    return {
        "final_median": summary.median,
        "final_q25": summary.q25,
        "final_q75": summary.q75,
        "final_rate_mean": summary.final_rate_mean,
        "time_averaged_rate": summary.time_averaged_rate_mean,
    }


def _box_frame(summary: Summary) -> pd.DataFrame:
    return pd.DataFrame([{
        "median": summary.median,
        "q25": summary.q25,
        "q75": summary.q75,
        "whisker_low": summary.whisker_low,
        "whisker_high": summary.whisker_high,
        "n_outliers": len(summary.outliers),
        "outliers": ";".join(f"{v:g}" for v in summary.outliers),
    }], columns=BOX_COLUMNS)


def _write_sections(path: str, frames: Sequence[pd.DataFrame]) -> None:
    """多个表依次写入同一个 CSV，表之间空一行"""
    with open(path, 'w', encoding='utf-8', newline='') as f:
        for i, frame in enumerate(frames):
            if i:
                f.write("\n")
            frame.to_csv(f, index=False, lineterminator="\n")


def read_results(path: Union[str, Path]) -> Dict[str, pd.DataFrame]:
    """
    读取 run 或 compare 生成的结果长表，按策略拆分

    Args:
        path: results.csv 路径

    Returns:
        {策略标签: 该策略的结果表}；run 生成的单策略文件标签为 "run"

    Raises:
        IngestError: 文件为空、缺少列或取值不合法
    """
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise IngestError(f"结果文件不存在: {path}")
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise IngestError(f"结果文件 {path} 无法解析: {e}")

    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise IngestError(f"结果文件 {path} 缺少列: {', '.join(missing)}")
    if frame.empty:
        raise IngestError(f"结果文件 {path} 没有数据行")

    numeric = ["rep", "n", "outcome", "cum_success"]
    if frame[numeric].isna().any().any() or not all(
        pd.api.types.is_integer_dtype(frame[c]) for c in numeric
    ):
        raise IngestError(f"结果文件 {path} 的 {', '.join(numeric)} 列必须是整数")
    if not frame["outcome"].isin([-1, 1]).all():
        raise IngestError(f"结果文件 {path} 的 outcome 列只能取 -1 或 +1")

    if "policy" not in frame.columns:
        return {"run": frame}
    return {str(label): group for label, group in frame.groupby("policy", sort=False)}


def rates_from_results(frame: pd.DataFrame) -> np.ndarray:
    """结果长表 -> (重复次数 × 病人数) 的累计成功率矩阵"""
    table = frame.pivot(index="rep", columns="n", values="cum_success").sort_index()
    if table.isna().any().any():
        raise IngestError("各次重复的病人数不一致，无法对齐成功率曲线")
    steps = table.columns.to_numpy()
    if not np.array_equal(steps, np.arange(len(steps))):
        raise IngestError("n 列必须从 0 开始连续编号")
    return table.to_numpy(dtype=float) / (steps + 1)


class ReportGenerator:
    """实验报告生成器"""

    def __init__(self, output_dir: Optional[str] = None):
        """
        初始化报告生成器

        Args:
            output_dir: 输出目录
        """
        if output_dir is None:
            output_dir = os.path.join(os.path.dirname(os.path.dirname(__file__)), "outputs")

        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)

    def _path(self, filename: str) -> str:
        return os.path.join(self.output_dir, filename)

    def write_run(self, result: ExperimentResult) -> List[str]:
        """
        单策略运行：results.csv 与 summary.csv

        Returns:
            生成的文件路径
        """
        results_path = self._path("results.csv")
        _results_frame(result, with_policy=False).to_csv(results_path, index=False, lineterminator="\n")
        logger.info(f"结果长表已写入: {results_path}")

        summary = result.summary
        summary_path = self._path("summary.csv")
        _write_sections(summary_path, [
            _curve_frame(summary),
            pd.DataFrame([_final_row(summary)], columns=FINAL_COLUMNS),
        ])
        logger.info(f"汇总已写入: {summary_path}")
        return [results_path, summary_path]

    def write_comparison(self, comparison: ComparisonResult) -> List[str]:
        """
        多策略比较：带 policy 列的 results.csv、每策略一条曲线的 summary.csv 和两两差值表 differences.csv

        Returns:
            生成的文件路径
        """
        results_path = self._path("results.csv")
        frames = [_results_frame(r, with_policy=True) for r in comparison.results.values()]
        pd.concat(frames, ignore_index=True).to_csv(results_path, index=False, lineterminator="\n")

        curves, finals = [], []
        for label, result in comparison.results.items():
            summary = result.summary
            curve = _curve_frame(summary)
            curve.insert(0, "policy", label)
            curves.append(curve)
            finals.append({"policy": label, **_final_row(summary)})

        summary_path = self._path("summary.csv")
        _write_sections(summary_path, [
            pd.concat(curves, ignore_index=True),
            pd.DataFrame(finals, columns=["policy"] + FINAL_COLUMNS),
        ])

        differences_path = self._path("differences.csv")
        self._differences_frame(comparison.differences).to_csv(
            differences_path, index=False, lineterminator="\n"
        )

        logger.info(f"比较结果已写入: {self.output_dir}")
        return [results_path, summary_path, differences_path]

    @staticmethod
    def _differences_frame(differences: Sequence[PairwiseDifference]) -> pd.DataFrame:
        return pd.DataFrame(
            [[getattr(d, c) for c in DIFFERENCE_COLUMNS] for d in differences],
            columns=DIFFERENCE_COLUMNS
        )

    def write_plot_data(self, results_csv: Union[str, Path]) -> List[str]:
        """
        从结果长表重新计算每个策略的曲线数据 curve_<label>.csv 与箱线图数据 box_<label>.csv

        Args:
            results_csv: run 或 compare 生成的 results.csv

        Returns:
            生成的文件路径
        """
        generated = []
        for label, frame in read_results(results_csv).items():
            rates = rates_from_results(frame)
            final_counts = frame.loc[frame.groupby("rep")["n"].idxmax()].sort_values("rep")["cum_success"]
            summary = summarize(final_counts.to_numpy(), rates)

            name = safe_label(label)
            curve_path = self._path(f"curve_{name}.csv")
            _curve_frame(summary).to_csv(curve_path, index=False, lineterminator="\n")
            box_path = self._path(f"box_{name}.csv")
            _box_frame(summary).to_csv(box_path, index=False, lineterminator="\n")
            generated.extend([curve_path, box_path])

            logger.info(f"[{label}] 曲线与箱线图数据已生成: {curve_path}, {box_path}")
        return generated

    def write_manifest(
        self,
        command: str,
        config: ExperimentConfig,
        outputs: Sequence[str],
        duration: float,
        extra: Optional[dict] = None
    ) -> str:
        """
        运行清单：配置回显、种子、版本、输出文件和耗时；配置回显足以原样复现这次运行

        Returns:
            manifest.json 路径
        """
        manifest = {
            "command": command,
            "version": __version__,
            "seed": config.seed,
            "config": config.to_dict(),
            "outputs": [os.path.basename(p) for p in outputs],
            "duration_seconds": round(duration, 3),
            "generated_at": datetime.now().isoformat(timespec="seconds"),
        }
        if extra:
            manifest.update(extra)

        path = self._path("manifest.json")
        with open(path, 'wb') as f:
            f.write(orjson.dumps(manifest, option=orjson.OPT_INDENT_2))
        return path

    def write_markdown(
        self,
        config: ExperimentConfig,
        results: Dict[str, ExperimentResult],
        differences: Sequence[PairwiseDifference] = ()
    ) -> str:
        """
        生成 Markdown 格式摘要

        Args:
            config: 实验配置
            results: {策略标签: 实验结果}
            differences: 两两差值表（仅比较时提供）

        Returns:
            生成的文件路径
        """
        filepath = self._path("report.md")
        n_patients = config.num_patients

        try:
            with open(filepath, 'w', encoding='utf-8') as f:
                f.write("# 治疗分配模拟实验报告\n\n")
                f.write(f"> 生成时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n\n")

                f.write("## 实验配置\n\n")
                f.write("| 项目 | 取值 |\n")
                f.write("|------|------|\n")
                f.write(f"| 病人数 N | {n_patients} |\n")
                f.write(f"| 医生数 M | {config.num_physicians} |\n")
                f.write(f"| 机构数 L | {config.num_facilities} |\n")
                f.write(f"| 重复次数 R | {config.replications} |\n")
                f.write(f"| 种子 | {config.seed} |\n")
                f.write(f"| 先验精度 λ | {config.prior_lambda:g} |\n")
                f.write("\n")

                f.write("## 📊 策略表现\n\n")
                f.write("| 策略 | 最终成功率均值 | 时间平均成功率 | 成功次数中位数 | 25% | 75% | 离群值个数 |\n")
                f.write("|------|----------------|----------------|----------------|-----|-----|------------|\n")
                ranked = sorted(results.items(), key=lambda item: item[1].summary.final_rate_mean, reverse=True)
                for label, result in ranked:
                    s = result.summary
                    f.write(
                        f"| {label} | {s.final_rate_mean:.4f} | {s.time_averaged_rate_mean:.4f} | "
                        f"{s.median:g} | {s.q25:g} | {s.q75:g} | {len(s.outliers)} |\n"
                    )
                f.write("\n")

                if differences:
                    f.write("## 🔍 配对差值\n\n")
                    f.write("| 策略 A | 策略 B | 均值差 | 标准误 | 95% 置信区间 | 相对提升 |\n")
                    f.write("|--------|--------|--------|--------|--------------|----------|\n")
                    for d in differences:
                        f.write(
                            f"| {d.policy_a} | {d.policy_b} | {d.mean_diff:+.4f} | {d.se:.4f} | "
                            f"[{d.ci_low:+.4f}, {d.ci_high:+.4f}] | {d.relative:+.1%} |\n"
                        )
                    f.write("\n")

                f.write("---\n")
                f.write(f"*banditsim {__version__}；成功率为第 N 个病人处的累计成功次数除以 N。*\n")

            logger.info(f"Markdown 报告写入成功: {filepath}")
        except OSError as e:
            logger.error(f"Markdown 报告生成失败: {e}")
            raise

        return filepath
