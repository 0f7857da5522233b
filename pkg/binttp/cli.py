"""
命令行入口

子命令: ingest, rename, guidelines, retrieve, analyze, run, eval, stats
标准输出只写机器可读的 JSON 摘要；诊断信息写标准错误
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from . import __version__
from .analyzer import analyze_binary, write_report
from .attck_kb import GuidelineStore, TtpCatalog, load_attck_bundle, synthesize_catalog
from .callgraph import build_call_graph, condense_and_order, write_condensation_dot
from .config import RunConfig, load_config, settings_dict
from .errors import BinTtpError, ConfigError, NotFoundError, UndefinedMetricError
from .evaluation import (
    BinaryEvalResult,
    EvalReport,
    binary_eval,
    build_instances,
    compute_metrics,
    emit_eval_report,
    load_analysis_report,
    load_annotations,
    load_binary_truth,
    predicted_ttps_from_report,
    predictions_from_report,
)
from .fileutil import atomic_write_text, dump_json, sha256_file
from .gateway import Gateway, build_gateway
from .ingest import Binary, dedup_functions, load_binary_export, write_binary_export
from .logutil import setup_logging
from .renamer import RenamePassState, rename_binary, rewrite_identifiers
from .retrieval import load_candidates, reduction_stats, retrieve_candidates, save_candidates

log = logging.getLogger(__name__)


class _Session:
    """一次命令执行：配置、网关、当前阶段、计时与输入哈希"""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self.command = args.command
        self.stage = args.command
        self.timings: dict[str, float] = {}
        self.inputs: dict[str, str] = {}
        self._config: RunConfig | None = None
        self._gateway: Gateway | None = None

    @property
    def config(self) -> RunConfig:
        if self._config is None:
            if not getattr(self.args, "config", None):
                raise ConfigError("--config", f"{self.command} 需要 --config")
            self._config = load_config(self.args.config, getattr(self.args, "overrides", None) or [])
            self.add_input(self.args.config)
        return self._config

    @property
    def run_dir(self) -> Path:
        return self.config.paths.run_dir

    def gateway(self) -> Gateway:
        if self._gateway is None:
            self._gateway = build_gateway(self.config.gateway)
        return self._gateway

    def add_input(self, path: str | Path) -> None:
        path = Path(path)
        if path.exists():
            self.inputs[str(path)] = sha256_file(path)

    @contextmanager
    def step(self, name: str):
        self.stage = name
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(self.timings.get(name, 0.0) + time.perf_counter() - started, 3)

    def gateway_stats(self) -> dict:
        if self._gateway is None:
            return {}
        stats = self._gateway.stats
        return {
            "chat_requests": stats.chat_requests,
            "chat_backend_calls": stats.chat_backend_calls,
            "embed_backend_calls": stats.embed_backend_calls,
            "cache_hits": stats.cache_hits,
            "replayed": stats.replayed,
        }

    def write_manifest(self, extra: dict | None = None) -> None:
        if self._config is None:
            return
        manifest = {
            "command": self.command,
            "binttp_version": __version__,
            "python_version": sys.version.split()[0],
            "config": self._config.snapshot(),
            "resolved_config": settings_dict(self._config),
            "inputs": dict(sorted(self.inputs.items())),
            "timings": self.timings,
            "gateway": self.gateway_stats(),
        }
        manifest.update(extra or {})
        atomic_write_text(self.run_dir / "manifest.json", dump_json(manifest))


def _parallelism(session: _Session) -> int:
    return session.config.gateway.parallelism


def _load_export(session: _Session, path: str) -> Binary:
    session.add_input(path)
    return load_binary_export(path)


def _load_catalog(session: _Session) -> TtpCatalog:
    bundle = session.config.require_bundle()
    session.add_input(bundle)
    return load_attck_bundle(bundle, session.config.paths.procedure_limit)


def _needs_rename(binary: Binary) -> bool:
    return any(not f.external and not f.recovered_name for f in binary.functions)


def _rename_stage(session: _Session, binary: Binary, out: Path, checkpoint: Path, resume: bool,
                  dot: str | None = None) -> tuple[Binary, dict]:
    with session.step("ingest"):
        if not getattr(session.args, "no_dedup", False):
            binary = dedup_functions(binary)
        graph = build_call_graph(binary)
        order = condense_and_order(graph)
        if dot:
            write_condensation_dot(order, graph, dot)
    with session.step("rename"):
        state = RenamePassState.load(checkpoint) if resume else RenamePassState()
        gateway = session.gateway()
        before = gateway.stats.chat_requests
        renamed = rename_binary(binary, order, gateway, state, checkpoint, _parallelism(session))
        renamed = rewrite_identifiers(renamed)
        write_binary_export(renamed, out)
    counts = {
        "functions": len(renamed.functions),
        "renamed": len(renamed.internal_functions()),
        "components": len(order.components),
        "cyclic_functions": len(order.cyclic),
        "model_calls": gateway.stats.chat_requests - before,
    }
    return renamed, counts


# ---------------------------------------------------------------- 子命令


def cmd_ingest(session: _Session) -> dict:
    args = session.args
    binary = _load_export(session, args.export)
    if args.dedup:
        binary = dedup_functions(binary)
    graph = build_call_graph(binary)
    order = condense_and_order(graph)
    if args.dot:
        write_condensation_dot(order, graph, args.dot)
    if args.out:
        write_binary_export(binary, args.out)
    return {
        "binary_id": binary.binary_id,
        "functions": len(binary.functions),
        "external": sum(1 for f in binary.functions if f.external),
        "edges": len(graph.edges),
        "components": len(order.components),
        "cyclic_functions": len(order.cyclic),
        "unresolved_calls": graph.unresolved,
    }


def cmd_rename(session: _Session) -> dict:
    args = session.args
    binary = _load_export(session, args.export)
    out = Path(args.out) if args.out else session.run_dir / "renamed.json"
    checkpoint = Path(args.checkpoint) if args.checkpoint else session.run_dir / "rename_checkpoint.json"
    _, counts = _rename_stage(session, binary, out, checkpoint, args.resume, args.dot)
    return {"binary_id": binary.binary_id, "output": str(out), "checkpoint": str(checkpoint), **counts}


def cmd_guidelines(session: _Session) -> dict:
    args = session.args
    with session.step("attck"):
        catalog = _load_catalog(session)
    with session.step("guidelines"):
        store = GuidelineStore(session.config.paths.guideline_dir)
        report = synthesize_catalog(
            catalog, session.gateway(), store, args.ttp or None, args.force, _parallelism(session)
        )
    for ttp_id, message in sorted(report.failed.items()):
        print(f"[guidelines] {ttp_id} 失败: {message}", file=sys.stderr)
    return {
        "attck_version": catalog.attck_version,
        "techniques": len(catalog),
        "written": len(report.written),
        "skipped": len(report.skipped),
        "failed": sorted(report.failed),
    }


def _candidate_summary(candidates) -> dict:
    counts = candidates.counts
    summary = {
        "dense": counts.dense,
        "neural": counts.neural,
        "neural_scored": counts.neural_scored,
        "dense_neural": counts.dense_neural,
        "final": counts.final,
    }
    try:
        summary["reduction"] = {k: round(v, 4) for k, v in reduction_stats(candidates).items()}
    except UndefinedMetricError:
        summary["reduction"] = None
    return summary


def _retrieve_stage(session: _Session, binary: Binary, catalog: TtpCatalog, out: Path):
    with session.step("retrieve"):
        candidates = retrieve_candidates(
            binary, catalog, session.gateway(), session.config.retrieval, _parallelism(session)
        )
        save_candidates(candidates, out)
    return candidates


def cmd_retrieve(session: _Session) -> dict:
    args = session.args
    binary = _load_export(session, args.export)
    with session.step("attck"):
        catalog = _load_catalog(session)
    out = Path(args.out) if args.out else session.run_dir / "candidates.json"
    candidates = _retrieve_stage(session, binary, catalog, out)
    return {"binary_id": binary.binary_id, "output": str(out), "candidates": _candidate_summary(candidates)}


def _analyzer_settings(session: _Session):
    settings = session.config.analyzer
    ablation = getattr(session.args, "ablation", None)
    if ablation == "no_explorer":
        settings = replace(settings, no_explorer=True)
    elif ablation == "no_guideline":
        settings = replace(settings, no_guideline=True)
    return settings


def _load_guidelines(session: _Session, catalog: TtpCatalog, ttp_ids, settings) -> dict:
    if settings.no_guideline:
        return {}
    store = GuidelineStore(session.config.paths.guideline_dir)
    guidelines = {}
    for ttp_id in sorted(set(ttp_ids)):
        try:
            guidelines[ttp_id] = store.load(ttp_id, catalog.attck_version, session.args.allow_version_skew)
        except NotFoundError:
            log.warning("缺少 %s 的推理指南，相关候选对将标记为错误", ttp_id)
    return guidelines


def _analyze_stage(session: _Session, binary: Binary, catalog: TtpCatalog, candidates) -> dict:
    settings = _analyzer_settings(session)
    with session.step("analyze"):
        guidelines = _load_guidelines(session, catalog, [p.ttp_id for p in candidates.pairs], settings)
        report = analyze_binary(
            candidates,
            binary,
            build_call_graph(binary),
            guidelines,
            session.gateway(),
            settings,
            catalog,
            _parallelism(session),
            session.run_dir,
        )
        json_path, text_path = write_report(report, session.run_dir)
    for item in report.errors:
        print(f"[analyze] {item.ttp_id}/{item.func_id} 错误: {item.error}", file=sys.stderr)
    return {
        "pairs": len(report.pairs),
        "present": sum(1 for p in report.pairs if p.verdict is not None and p.verdict.present),
        "errors": len(report.errors),
        "predicted_ttps": report.predicted_ttps,
        "report": str(json_path),
        "report_text": str(text_path),
    }


def cmd_analyze(session: _Session) -> dict:
    args = session.args
    binary = _load_export(session, args.export)
    with session.step("attck"):
        catalog = _load_catalog(session)
    candidates_path = Path(args.candidates) if args.candidates else session.run_dir / "candidates.json"
    session.add_input(candidates_path)
    candidates = load_candidates(candidates_path)
    return {"binary_id": binary.binary_id, **_analyze_stage(session, binary, catalog, candidates)}


def cmd_run(session: _Session) -> dict:
    """完整流水线；输入未重命名时先执行重命名"""
    args = session.args
    binary = _load_export(session, args.export)
    summary: dict = {"binary_id": binary.binary_id}
    if _needs_rename(binary):
        binary, summary["rename"] = _rename_stage(
            session,
            binary,
            session.run_dir / "renamed.json",
            session.run_dir / "rename_checkpoint.json",
            args.resume,
        )
    with session.step("attck"):
        catalog = _load_catalog(session)
    candidates = _retrieve_stage(session, binary, catalog, session.run_dir / "candidates.json")
    summary["candidates"] = _candidate_summary(candidates)
    summary["analysis"] = _analyze_stage(session, binary, catalog, candidates)
    return summary


def cmd_eval(session: _Session) -> dict:
    args = session.args
    reports = []
    for path in args.report:
        session.add_input(path)
        reports.append(load_analysis_report(path))
    result = EvalReport()

    if args.annotations:
        labels = load_annotations(args.annotations)
        predictions = set().union(*(predictions_from_report(r) for r in reports)) if reports else set()
        if args.export:
            functions = [f.func_id for f in load_binary_export(args.export).internal_functions()]
        else:
            functions = sorted({label.func_id for label in labels} | {f for f, _ in predictions})
        ttps = sorted(args.ttps.split(",")) if args.ttps else sorted(set().union(*(label.ttp_ids for label in labels)))
        kept = {(f, t) for f, t in predictions if t in ttps and f in functions}
        if len(kept) != len(predictions):
            log.info("忽略 %d 个不在评估范围内的预测", len(predictions) - len(kept))
        result.functions = compute_metrics(kept, build_instances(functions, ttps, labels))

    if args.truth:
        if len(args.truth) != len(reports):
            raise ConfigError("--truth", "--truth 的数量必须与 --report 一致")
        for report, truth_path in zip(reports, args.truth):
            reported, validated = load_binary_truth(truth_path)
            predicted = predicted_ttps_from_report(report)
            name = report.get("binary_id", Path(truth_path).stem)
            result.binaries[name] = binary_eval(BinaryEvalResult.create(reported, predicted, validated))

    emit_eval_report(result, args.out)
    data = result.to_dict()
    return {
        "output": str(args.out),
        "average": data["functions"]["average"] if data["functions"] else None,
        "overall": data["overall"],
    }


def cmd_stats(session: _Session) -> dict:
    candidates = load_candidates(session.args.candidates)
    return _candidate_summary(candidates)


# ---------------------------------------------------------------- 参数


def _common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", "-c", required=config_required, help="TOML 配置文件")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="覆盖配置项，例如 --set retrieval.k=10（可重复）",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binttp", description="剥离二进制的 ATT&CK 技术归因流水线")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="读取导出文件并输出调用图统计")
    p.add_argument("export", help="反编译导出 JSON")
    p.add_argument("--dedup", action="store_true", help="合并代码完全相同的函数")
    p.add_argument("--dot", help="写出缩合图 DOT 文件")
    p.add_argument("--out", help="写出规范化后的导出文件")
    _common(p, config_required=False)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("rename", help="自底向上重命名并生成摘要")
    p.add_argument("export", help="反编译导出 JSON")
    p.add_argument("--out", help="重命名后的导出文件（默认 run_dir/renamed.json）")
    p.add_argument("--checkpoint", help="检查点文件（默认 run_dir/rename_checkpoint.json）")
    p.add_argument("--resume", action="store_true", help="从检查点继续，跳过已完成的函数")
    p.add_argument("--no-dedup", action="store_true", help="不合并重复函数")
    p.add_argument("--dot", help="写出缩合图 DOT 文件")
    _common(p)
    p.set_defaults(handler=cmd_rename)

    p = sub.add_parser("guidelines", help="离线合成推理指南")
    p.add_argument("--ttp", action="append", default=[], help="只处理指定技术（可重复）")
    p.add_argument("--force", action="store_true", help="覆盖已存在的指南")
    _common(p)
    p.set_defaults(handler=cmd_guidelines)

    p = sub.add_parser("retrieve", help="稠密 + 神经检索，生成候选对")
    p.add_argument("export", help="重命名后的导出 JSON")
    p.add_argument("--out", help="候选集文件（默认 run_dir/candidates.json）")
    _common(p)
    p.set_defaults(handler=cmd_retrieve)

    for name, handler, text in (
        ("analyze", cmd_analyze, "对候选对运行分析代理"),
        ("run", cmd_run, "完整流水线：重命名、检索、分析"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("export", help="导出 JSON（run 接受未重命名的导出）")
        if name == "analyze":
            p.add_argument("--candidates", help="候选集文件（默认 run_dir/candidates.json）")
        else:
            p.add_argument("--resume", action="store_true", help="重命名阶段从检查点继续")
            p.add_argument("--no-dedup", action="store_true", help="不合并重复函数")
        p.add_argument("--ablation", choices=["no_explorer", "no_guideline"], help="消融模式")
        p.add_argument("--allow-version-skew", action="store_true", help="允许指南与 ATT&CK 目录版本不一致")
        _common(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("eval", help="计算评估指标")
    p.add_argument("--report", action="append", default=[], help="分析报告 report.json（可重复）")
    p.add_argument("--annotations", help="函数级标注文件")
    p.add_argument("--export", help="导出文件，用于枚举评估的函数")
    p.add_argument("--ttps", help="逗号分隔的评估技术列表（默认取标注中出现的技术）")
    p.add_argument("--truth", action="append", default=[], help="二进制级真值文件，与 --report 一一对应")
    p.add_argument("--out", default="eval_report.json", help="评估报告 JSON（同名 .txt 为表格）")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("stats", help="候选集的缩减统计")
    p.add_argument("candidates", help="候选集文件")
    p.set_defaults(handler=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    session = _Session(args)
    try:
        summary = args.handler(session)
        session.write_manifest({"summary": summary})
    except ConfigError as error:
        print(f"[{session.stage}] 配置错误: {error}", file=sys.stderr)
        return 2
    except BinTtpError as error:
        print(f"[{session.stage}] 错误: {error}", file=sys.stderr)
        return 1
    except OSError as error:
        print(f"[{session.stage}] 文件错误: {error}", file=sys.stderr)
        return 1

    summary["timings"] = session.timings
    gateway = session.gateway_stats()
    if gateway:
        summary["gateway"] = gateway
    print(json.dumps(summary, ensure_ascii=False, indent=2))
    failed = summary.get("failed") or summary.get("analysis", {}).get("errors") or summary.get("errors")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
