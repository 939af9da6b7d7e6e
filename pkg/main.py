#!/usr/bin/env python3
"""
banditsim - 主程序入口
治疗分配策略的蒙特卡洛模拟与稀疏特征工程
"""

import logging
import os
import sys
import time
import traceback
from typing import List, Optional

import click
import numpy as np
import pandas as pd
import yaml

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src.config_loader import (
    DEFAULT_CONFIG_PATH, ConfigLoader, load_config, load_environment, resolve_log_level, resolve_workers
)
from src.errors import ConfigError, DomainError, IngestError, ParseError, SchemaError
from src.feature_graph import (
    connected_components, cosine_graph, load_flat, pool_groups, prune_for_display,
    read_partition, spectral_communities, write_edges, write_partition
)
from src.lasso import cv_select, write_selection
from src.model_core import RESERVED_COLUMNS, normalize_outcome
from src.policies import HORIZON, POLICY_KINDS, PolicyConfig
from src.report_generator import ReportGenerator
from src.simulator import compare_policies, run_experiment

logger = logging.getLogger("banditsim")

# 输入数据或配置有误时退出码为 2，其余运行错误为 1
USAGE_ERRORS = (ConfigError, IngestError, SchemaError, ParseError)


def _fail(action: str, error: Exception) -> None:
    click.echo(f"❌ {action}失败: {error}", err=True)
    if isinstance(error, USAGE_ERRORS):
        sys.exit(2)
    logger.debug(traceback.format_exc())
    sys.exit(1)


def _parse_policies(text: str, base: PolicyConfig) -> List[PolicyConfig]:
    """
    解析 --policies，如 "kg,thompson,exploit,explore" 或 "kg:eta=0.5:tau=horizon,explore"

    kg 未写明的 tau / eta 取配置文件 policy 分节中的值。
    """
    policies = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        kind, *options = item.split(":")
        if kind not in POLICY_KINDS:
            raise click.BadParameter(f"未知策略 {kind!r}，可选: {', '.join(POLICY_KINDS)}")

        params = {"tau": base.tau, "eta": base.eta}
        for option in options:
            name, _, value = option.partition("=")
            if name not in params or not value:
                raise click.BadParameter(f"{item!r} 中的 {option!r} 无效，只支持 tau=... 和 eta=...")
            try:
                params[name] = value if name == "tau" and value == HORIZON else float(value)
            except ValueError:
                raise click.BadParameter(f"{item!r} 中的 {name} 必须是数字")

        try:
            policies.append(PolicyConfig(kind, params["tau"], params["eta"]))
        except DomainError as e:
            raise click.BadParameter(str(e))

    labels = [p.label for p in policies]
    if len(set(labels)) != len(labels):
        raise click.BadParameter(f"策略重复: {', '.join(labels)}")
    if len(policies) < 2:
        raise click.BadParameter("比较至少需要两个策略")
    return policies


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='输出调试日志')
def cli(verbose: bool):
    """banditsim - 治疗分配策略模拟：知识梯度、Thompson 采样、纯利用与纯探索"""
    load_environment()
    logging.basicConfig(
        level=resolve_log_level(verbose),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        handlers=[logging.StreamHandler(sys.stderr)]
    )


@cli.command()
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False),
              default=DEFAULT_CONFIG_PATH, show_default=True, help='实验配置文件')
@click.option('--seed', '-s', type=int, help='覆盖配置中的随机种子')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='输出目录')
@click.option('--workers', '-w', type=int, help='并行进程数 (覆盖 BANDITSIM_THREADS)')
@click.option('--format', '-f', 'formats', multiple=True, default=['csv'],
              type=click.Choice(['csv', 'markdown']), help='输出格式')
@click.option('--no-progress', is_flag=True, help='不显示进度条')
def run(config_path: str, seed: Optional[int], out: str, workers: Optional[int], formats: tuple, no_progress: bool):
    """运行一个策略的多次重复实验"""
    started = time.time()
    try:
        config = load_config(config_path, seed)
        n_workers = resolve_workers(workers)
        click.echo(f"🎲 策略 {config.policy.label}: N={config.num_patients}, R={config.replications}, 进程数 {n_workers}")

        result = run_experiment(config, n_workers, show_progress=not no_progress)

        report_generator = ReportGenerator(output_dir=out)
        outputs = report_generator.write_run(result)
        if 'markdown' in formats:
            outputs.append(report_generator.write_markdown(config, {result.policy: result}))
        outputs.append(report_generator.write_manifest(
            "run", config, outputs, time.time() - started, {"workers": n_workers}
        ))

        summary = result.summary
        click.echo(f"\n✅ 实验完成!")
        click.echo(f"📊 最终成功率均值: {summary.final_rate_mean:.4f}  (成功次数中位数 {summary.median:g})")
        click.echo(f"\n📄 输出文件:")
        for file in outputs:
            click.echo(f"   - {file}")

    except Exception as e:
        _fail("实验", e)


@cli.command()
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False),
              default=DEFAULT_CONFIG_PATH, show_default=True, help='实验配置文件')
@click.option('--policies', '-p', default='kg,thompson,exploit,explore', show_default=True,
              help='逗号分隔的策略列表，kg 可写作 kg:eta=0.5:tau=horizon')
@click.option('--seed', '-s', type=int, help='覆盖配置中的随机种子')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='输出目录')
@click.option('--workers', '-w', type=int, help='并行进程数 (覆盖 BANDITSIM_THREADS)')
@click.option('--format', '-f', 'formats', multiple=True, default=['csv'],
              type=click.Choice(['csv', 'markdown']), help='输出格式')
@click.option('--no-progress', is_flag=True, help='不显示进度条')
def compare(config_path: str, policies: str, seed: Optional[int], out: str, workers: Optional[int],
            formats: tuple, no_progress: bool):
    """在相同种子下配对比较多个策略"""
    started = time.time()
    try:
        config = load_config(config_path, seed)
        policy_list = _parse_policies(policies, config.policy)
    except click.BadParameter as e:
        click.echo(f"❌ --policies 无效: {e.message}", err=True)
        sys.exit(2)
    except Exception as e:
        _fail("读取配置", e)

    try:
        n_workers = resolve_workers(workers)
        click.echo(f"🎲 比较 {len(policy_list)} 个策略: {', '.join(p.label for p in policy_list)}")

        comparison = compare_policies(config, policy_list, n_workers, show_progress=not no_progress)

        report_generator = ReportGenerator(output_dir=out)
        outputs = report_generator.write_comparison(comparison)
        if 'markdown' in formats:
            outputs.append(report_generator.write_markdown(config, comparison.results, comparison.differences))
        outputs.append(report_generator.write_manifest(
            "compare", config, outputs, time.time() - started,
            {"workers": n_workers, "policies": [p.label for p in policy_list]}
        ))

        click.echo("\n🏆 最终成功率:")
        click.echo("{:<32} {:<10}".format("策略", "均值"))
        click.echo("-" * 45)
        for label, result in comparison.results.items():
            click.echo("{:<32} {:<10.4f}".format(label, result.summary.final_rate_mean))

        click.echo(f"\n📄 输出文件:")
        for file in outputs:
            click.echo(f"   - {file}")

    except Exception as e:
        _fail("比较", e)


@cli.command()
@click.option('--input', '-i', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True,
              help='run / compare 生成的 results.csv')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='输出目录')
def report(input_path: str, out: str):
    """从结果长表生成可直接作图的曲线与箱线图数据"""
    try:
        outputs = ReportGenerator(output_dir=out).write_plot_data(input_path)
        click.echo(f"📄 已生成 {len(outputs)} 个文件:")
        for file in outputs:
            click.echo(f"   - {file}")
    except Exception as e:
        _fail("生成报告", e)


@cli.command()
@click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False),
              default=DEFAULT_CONFIG_PATH, show_default=True, help='实验配置文件')
def check_config(config_path: str):
    """检查配置与运行环境"""
    click.echo("🔍 检查配置...\n")

    checks = []
    try:
        loader = ConfigLoader(config_path)
        sections = loader.load_dict()
        config = loader.load()
        checks.append(("配置文件", f"✅ {config_path}", True))
    except ConfigError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(2)

    for key in ("context_csv", "history_csv", "truth_path"):
        section = "experiment" if key == "truth_path" else "model" if key == "history_csv" else "features"
        path = sections[section][key]
        if path is None:
            continue
        if os.path.exists(path):
            checks.append((f"{section}.{key}", f"✅ {path}", True))
        else:
            checks.append((f"{section}.{key}", f"❌ 文件不存在: {path}", False))

    raw_threads = os.getenv("BANDITSIM_THREADS")
    workers = resolve_workers()
    if raw_threads:
        checks.append(("BANDITSIM_THREADS", f"✅ {raw_threads} -> {workers} 个进程", True))
    else:
        checks.append(("BANDITSIM_THREADS", f"⚠️  未配置，将使用 CPU 核数 {workers}", True))

    all_ok = True
    for name, status, ok in checks:
        click.echo(f"{status} - {name}")
        if not ok:
            all_ok = False

    click.echo("\n📋 生效的配置:\n")
    click.echo(yaml.safe_dump(config.to_dict(), allow_unicode=True, sort_keys=False))

    if all_ok:
        click.echo("✅ 配置检查通过，可以开始使用!")
    else:
        click.echo("⚠️  配置存在问题，请根据上述提示进行修复")
        sys.exit(2)


@cli.group()
def features():
    """稀疏二值特征的聚类、社区检测、LASSO 筛选与分组合并"""
    pass


@features.command()
@click.option('--input', '-i', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True,
              help='扁平二值 CSV')
@click.option('--threshold', '-t', type=click.FloatRange(0.0, 1.0), default=0.8, show_default=True,
              help='余弦相似度阈值')
@click.option('--out', '-o', type=click.Path(dir_okay=False), required=True, help='输出 node,group CSV')
@click.option('--edges-out', type=click.Path(dir_okay=False), help='输出剪枝后的边表 (仅用于可视化)')
@click.option('--min-degree', type=click.IntRange(0), default=3, show_default=True, help='边表剪枝的最小度数')
def cluster(input_path: str, threshold: float, out: str, edges_out: Optional[str], min_degree: int):
    """按余弦共现图的连通分量分组"""
    try:
        matrix = load_flat(input_path)
        graph = cosine_graph(matrix, threshold)
        partition = connected_components(graph)
        write_partition(partition, out)
        click.echo(f"✅ {graph.num_nodes} 列 -> {partition.num_groups} 个连通分量: {out}")

        if edges_out:
            write_edges(prune_for_display(graph, min_degree), edges_out)
            click.echo(f"📄 边表: {edges_out}")
    except Exception as e:
        _fail("聚类", e)


@features.command()
@click.option('--input', '-i', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True,
              help='扁平二值 CSV')
@click.option('--threshold', '-t', type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True,
              help='余弦相似度阈值')
@click.option('--out', '-o', type=click.Path(dir_okay=False), required=True, help='输出 node,group CSV')
@click.option('--edges-out', type=click.Path(dir_okay=False), help='输出剪枝后的边表 (仅用于可视化)')
@click.option('--min-degree', type=click.IntRange(0), default=3, show_default=True, help='边表剪枝的最小度数')
@click.option('--weighted', is_flag=True, help='用余弦值作为边权计算模块度')
@click.option('--no-refine', is_flag=True, help='跳过每次二分后的节点微调')
def communities(input_path: str, threshold: float, out: str, edges_out: Optional[str], min_degree: int,
                weighted: bool, no_refine: bool):
    """谱模块度社区检测"""
    try:
        matrix = load_flat(input_path)
        graph = cosine_graph(matrix, threshold)
        partition = spectral_communities(graph, refine=not no_refine, weighted=weighted)
        write_partition(partition, out)
        click.echo(f"✅ {graph.num_nodes} 列 -> {partition.num_groups} 个社区, Q = {partition.modularity:.4f}: {out}")

        if edges_out:
            write_edges(prune_for_display(graph, min_degree), edges_out)
            click.echo(f"📄 边表: {edges_out}")
    except Exception as e:
        _fail("社区检测", e)


@features.command()
@click.option('--input', '-i', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True,
              help='带标签列的扁平 CSV')
@click.option('--label', '-l', default='outcome', show_default=True, help='标签列名 (0/1 或 -1/+1)')
@click.option('--nlambda', type=click.IntRange(2), default=25, show_default=True, help='λ 网格点数')
@click.option('--folds', type=click.IntRange(2), default=10, show_default=True, help='交叉验证折数')
@click.option('--seed', '-s', type=int, default=0, show_default=True, help='折划分的随机种子')
@click.option('--out', '-o', type=click.Path(dir_okay=False), required=True, help='输出路径表 CSV')
@click.option('--workers', '-w', type=int, help='交叉验证并行线程数')
def lasso(input_path: str, label: str, nlambda: int, folds: int, seed: int, out: str, workers: Optional[int]):
    """L1 逻辑回归路径 + k 折交叉验证 + 1-SE 规则筛选特征"""
    try:
        frame = pd.read_csv(input_path)
        if label not in frame.columns:
            raise IngestError(f"{input_path} 缺少标签列 {label}")
        try:
            y = np.array([(normalize_outcome(v) + 1) // 2 for v in frame[label]], dtype=float)
        except ParseError as e:
            raise IngestError(f"标签列 {label}: {e}")

        design = frame.drop(columns=[c for c in frame.columns if c == label or c in RESERVED_COLUMNS])
        non_numeric = [c for c in design.columns if not pd.api.types.is_numeric_dtype(design[c])]
        if non_numeric or design.isna().any().any():
            raise IngestError(f"{input_path} 的特征列必须全部为数字: {non_numeric[:5]}")

        selection = cv_select(
            design.to_numpy(dtype=float), y, n_lambda=nlambda, k_folds=folds, rng=seed,
            feature_names=list(design.columns), max_workers=resolve_workers(workers), show_progress=True
        )
        path_csv, selected_txt = write_selection(selection, out)

        if selection.path.degenerate:
            click.echo("⚠️  标签只有一个取值，返回仅含截距的路径", err=True)
        click.echo(f"✅ lambda_min = {selection.lambda_min:.6g}, lambda_1se = {selection.lambda_1se:.6g}")
        click.echo(f"📋 选中 {len(selection.selected_features)} 个特征")
        click.echo(f"📄 {path_csv}\n📄 {selected_txt}")
    except Exception as e:
        _fail("LASSO 筛选", e)


@features.command()
@click.option('--input', '-i', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True,
              help='扁平二值 CSV')
@click.option('--partition', '-p', 'partition_path', type=click.Path(exists=True, dir_okay=False), required=True,
              help='cluster / communities 生成的 node,group CSV')
@click.option('--out', '-o', type=click.Path(dir_okay=False), required=True, help='输出分组特征 CSV')
def pool(input_path: str, partition_path: str, out: str):
    """把同组的列合并为一个特征 (组内任一列为 1 则为 1)"""
    try:
        matrix = load_flat(input_path)
        partition = read_partition(partition_path)
        grouped = pool_groups(matrix, partition).to_frame()

        reserved = [c for c in pd.read_csv(input_path, nrows=0).columns if c in RESERVED_COLUMNS]
        if reserved:
            kept = pd.read_csv(input_path, usecols=reserved, dtype=str, keep_default_na=False)
            grouped = pd.concat([kept, grouped], axis=1)

        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        grouped.to_csv(out, index=False)
        click.echo(f"✅ {matrix.values.shape[1]} 列 -> {partition.num_groups} 个分组特征: {out}")
    except Exception as e:
        _fail("分组合并", e)


if __name__ == '__main__':
    cli()
