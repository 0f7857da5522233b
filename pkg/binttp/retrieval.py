"""
候选 (函数, TTP) 对检索

稠密检索: 每个 TTP 取余弦相似度 top-k 函数
神经检索: 模型对每个函数给出宽松的 TTP 候选和置信度
门控:     两者取交集，且置信度严格大于 tau
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .attck_kb import TtpCatalog, is_ttp_id, parent_id
from .errors import (
    EmbeddingError,
    GatewayError,
    UndefinedMetricError,
    ValidationError,
)
from .fileutil import atomic_write_text, dump_json
from .gateway import Gateway, Message
from .ingest import Binary, FunctionRecord
from .logutil import ProgressCallback, log_message

log = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 20
    tau: float = 0.5

    def __post_init__(self) -> None:
        if not isinstance(self.k, int) or isinstance(self.k, bool) or self.k < 1:
            raise ValidationError(f"k 必须是正整数: {self.k!r}")
        if not 0.0 <= float(self.tau) <= 1.0:
            raise ValidationError(f"tau 必须在 [0, 1] 之间: {self.tau!r}")


class EmbeddingSet:
    """key -> 单位向量，所有向量同一维度"""

    def __init__(self, keys: Iterable[str], vectors) -> None:
        self.keys = list(keys)
        matrix = np.asarray(vectors, dtype=np.float64)
        if matrix.ndim == 1 and matrix.size == 0:
            matrix = matrix.reshape(0, 0)
        if matrix.ndim != 2 or matrix.shape[0] != len(self.keys):
            raise ValidationError("向量数量与键数量不一致或维度不统一")
        if len(set(self.keys)) != len(self.keys):
            raise ValidationError("嵌入键重复")
        if matrix.shape[0]:
            norms = np.linalg.norm(matrix, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise ValidationError("嵌入向量必须是单位向量")
        self.matrix = matrix

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Iterable[float]]) -> "EmbeddingSet":
        keys = list(mapping)
        return cls(keys, [list(mapping[k]) for k in keys])

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1] if self.matrix.ndim == 2 else 0

    def vector(self, key: str) -> np.ndarray:
        return self.matrix[self.keys.index(key)]


def _embed_texts(keys: list[str], texts: list[str], gateway: Gateway) -> EmbeddingSet:
    if not keys:
        return EmbeddingSet([], np.zeros((0, 0)))
    try:
        vectors = gateway.embed(texts)
    except GatewayError as error:
        raise EmbeddingError(keys, error) from error
    return EmbeddingSet(keys, np.vstack(vectors))


def embed_functions(binary: Binary, gateway: Gateway) -> EmbeddingSet:
    """用重命名后的代码嵌入每个非外部函数"""
    funcs = [f for f in binary.functions if not f.external and f.decompiled_code.strip()]
    return _embed_texts([f.func_id for f in funcs], [f.decompiled_code for f in funcs], gateway)


def embed_ttps(catalog: TtpCatalog, gateway: Gateway) -> EmbeddingSet:
    """用名称 + 定义嵌入每个技术"""
    for record in catalog:
        if not record.description.strip():
            raise ValidationError(f"{record.ttp_id} 没有描述，无法嵌入")
    records = list(catalog)
    return _embed_texts(
        [r.ttp_id for r in records], [f"{r.name}\n{r.description}" for r in records], gateway
    )


def dense_retrieve(ttps: EmbeddingSet, funcs: EmbeddingSet, k: int) -> dict[str, list[tuple[str, float]]]:
    if len(ttps) and len(funcs) and ttps.dim != funcs.dim:
        raise ValidationError(f"嵌入维度不一致: TTP {ttps.dim} vs 函数 {funcs.dim}")
    if not len(funcs):
        return {key: [] for key in ttps.keys}
    scores = np.clip(ttps.matrix @ funcs.matrix.T, -1.0, 1.0)
    # 相同分数按 func_id 升序
    id_rank = np.argsort(np.argsort(np.array(funcs.keys, dtype=object), kind="stable"), kind="stable")
    limit = min(k, len(funcs))
    result = {}
    for row, ttp_id in enumerate(ttps.keys):
        order = np.lexsort((id_rank, -scores[row]))[:limit]
        result[ttp_id] = [(funcs.keys[i], float(scores[row, i])) for i in order]
    return result


# ---------------------------------------------------------------- 神经检索


@dataclass(frozen=True)
class NeuralProposal:
    ttp_id: str
    reasoning: str
    confidence: float


NEURAL_PROMPT = """Below is your code snippet.
{code}

Function summary: {summary}

Summaries of the direct callees:
{callees}

Question: You will be given the renamed function body and its summary. Please analyze the function and identify an over-inclusive set of potentially relevant ATT&CK TTPs that this function exhibits. For each TTP, provide:
1. Brief reasoning (2-3 sentences).
2. Confidence score (0.0-1.0).

Answer with one line per TTP in the form:
<technique id> | <confidence> | <reasoning>
If no technique applies, answer with the single line NONE."""

NEURAL_REFORMAT = (
    "Your answer did not follow the format. Reply with lines '<technique id> | <confidence> | <reasoning>' "
    "or the single line NONE."
)

PROPOSAL_RE = re.compile(
    r"^\s*(?:[-*]\s*)?(T\d{4}(?:\.\d{3})?)\s*\|\s*([-+]?\d*\.?\d+)\s*\|\s*(.*?)\s*$", re.M
)
NONE_RE = re.compile(r"^\s*NONE\s*$", re.M | re.I)


def _parse_proposals(text: str) -> list[tuple[str, float, str]] | None:
    rows = [(m.group(1), float(m.group(2)), m.group(3)) for m in PROPOSAL_RE.finditer(text or "")]
    if rows:
        return rows
    return [] if NONE_RE.search(text or "") else None


def _warn(message: str, on_warning: ProgressCallback | None) -> None:
    log.warning(message)
    if on_warning:
        on_warning(message)


def neural_retrieve(
    func: FunctionRecord,
    gateway: Gateway,
    known_ttps: Iterable[str] | TtpCatalog,
    callee_summaries: Mapping[str, str] | None = None,
    on_warning: ProgressCallback | None = None,
) -> list[NeuralProposal]:
    """子技术归并到父技术，取最大置信度；未知 id 丢弃并告警"""
    known = set(known_ttps.ids()) if isinstance(known_ttps, TtpCatalog) else set(known_ttps)
    if callee_summaries:
        callees = "\n".join(f"- {name}: {text}" for name, text in sorted(callee_summaries.items()))
    else:
        callees = "(none)"
    prompt = NEURAL_PROMPT.format(
        code=func.decompiled_code, summary=func.summary or "(no summary)", callees=callees
    )
    messages = [Message("user", prompt)]
    reply = gateway.chat(gateway.request(messages))
    rows = _parse_proposals(reply)
    if rows is None:
        messages += [Message("assistant", reply), Message("user", NEURAL_REFORMAT)]
        reply = gateway.chat(gateway.request(messages))
        rows = _parse_proposals(reply)
    if rows is None:
        _warn(f"{func.func_id}: 神经检索响应无法解析，视为无候选", on_warning)
        return []

    best: dict[str, NeuralProposal] = {}
    for ttp_id, confidence, reasoning in rows:
        parent = parent_id(ttp_id)
        if parent not in known:
            _warn(f"{func.func_id}: 丢弃未知技术 {ttp_id}", on_warning)
            continue
        proposal = NeuralProposal(parent, reasoning, min(1.0, max(0.0, confidence)))
        if parent not in best or proposal.confidence > best[parent].confidence:
            best[parent] = proposal
    return sorted(best.values(), key=lambda p: p.ttp_id)


def _callee_summaries(binary: Binary, func: FunctionRecord) -> dict[str, str]:
    summaries = {}
    for name in sorted(func.callee_names):
        for callee in binary.lookup(name):
            if callee.func_id != func.func_id:
                summaries[callee.display_name] = callee.summary or f"external library routine {callee.raw_name}"
                break
    return summaries


def run_neural_retrieval(
    binary: Binary,
    dense: Mapping[str, list[tuple[str, float]]],
    gateway: Gateway,
    catalog: TtpCatalog,
    parallelism: int = 1,
    on_warning: ProgressCallback | None = None,
) -> dict[str, list[NeuralProposal]]:
    """只对出现在某个 top-k 列表中的函数做神经检索"""
    wanted = sorted({func_id for ranked in dense.values() for func_id, _ in ranked})
    funcs = [binary.by_id(func_id) for func_id in wanted]

    def work(func: FunctionRecord) -> list[NeuralProposal]:
        return neural_retrieve(func, gateway, catalog, _callee_summaries(binary, func), on_warning)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(work, funcs))
    return dict(zip(wanted, results))


# ---------------------------------------------------------------- 门控


@dataclass(frozen=True)
class CandidatePair:
    func_id: str
    ttp_id: str
    dense_rank: int | None = None
    dense_score: float | None = None
    neural_confidence: float | None = None
    neural_reasoning: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return self.func_id, self.ttp_id


@dataclass
class StageCounts:
    dense: int = 0
    neural: int = 0
    neural_scored: int = 0
    dense_neural: int = 0
    final: int = 0


@dataclass
class CandidateSet:
    counts: StageCounts = field(default_factory=StageCounts)
    pairs: list[CandidatePair] = field(default_factory=list)
    config: RetrievalConfig = field(default_factory=RetrievalConfig)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "counts": asdict(self.counts),
            "pairs": [asdict(p) for p in self.pairs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateSet":
        return cls(
            counts=StageCounts(**data["counts"]),
            pairs=[CandidatePair(**p) for p in data["pairs"]],
            config=RetrievalConfig(**data.get("config", {})),
        )


def gate_candidates(
    dense: Mapping[str, list[tuple[str, float]]],
    neural: Mapping[str, Iterable[NeuralProposal]],
    cfg: RetrievalConfig,
) -> CandidateSet:
    dense_pairs: dict[tuple[str, str], tuple[int, float]] = {}
    for ttp_id, ranked in dense.items():
        for rank, (func_id, score) in enumerate(ranked[: cfg.k], start=1):
            dense_pairs[(func_id, ttp_id)] = (rank, score)

    neural_pairs: dict[tuple[str, str], NeuralProposal] = {}
    for func_id, proposals in neural.items():
        for proposal in proposals:
            neural_pairs[(func_id, proposal.ttp_id)] = proposal
    scored = {key for key, p in neural_pairs.items() if p.confidence > cfg.tau}

    final = sorted(dense_pairs.keys() & scored, key=lambda key: (key[1], dense_pairs[key][0], key[0]))
    pairs = []
    for key in final:
        rank, score = dense_pairs[key]
        proposal = neural_pairs[key]
        pairs.append(
            CandidatePair(
                func_id=key[0],
                ttp_id=key[1],
                dense_rank=rank,
                dense_score=score,
                neural_confidence=proposal.confidence,
                neural_reasoning=proposal.reasoning,
            )
        )
    counts = StageCounts(
        dense=len(dense_pairs),
        neural=len(neural_pairs),
        neural_scored=len(scored),
        dense_neural=len(dense_pairs.keys() & neural_pairs.keys()),
        final=len(pairs),
    )
    return CandidateSet(counts=counts, pairs=pairs, config=cfg)


def reduction_stats(candidates: CandidateSet) -> dict[str, float]:
    """各策略相对稠密检索的候选缩减比例"""
    counts = candidates.counts
    if counts.dense <= 0:
        raise UndefinedMetricError("稠密检索候选数为 0，缩减比例无定义")
    return {
        "neural": 1.0 - counts.neural / counts.dense,
        "neural_scored": 1.0 - counts.neural_scored / counts.dense,
        "dense_neural": 1.0 - counts.dense_neural / counts.dense,
        "final": 1.0 - counts.final / counts.dense,
    }


def save_candidates(candidates: CandidateSet, path: str | Path) -> Path:
    return atomic_write_text(path, dump_json(candidates.to_dict()))


def load_candidates(path: str | Path) -> CandidateSet:
    try:
        return CandidateSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as error:
        raise ValidationError(f"候选集文件不是合法 JSON: {path}: {error}") from error
    except (KeyError, TypeError, ValueError) as error:
        raise ValidationError(f"候选集文件格式错误: {path}: {error!r}") from error


def retrieve_candidates(
    binary: Binary,
    catalog: TtpCatalog,
    gateway: Gateway,
    cfg: RetrievalConfig,
    parallelism: int = 1,
    logger: ProgressCallback | None = None,
) -> CandidateSet:
    """完整第一阶段：嵌入 -> 稠密 top-k -> 神经检索 -> 门控"""
    func_vectors = embed_functions(binary, gateway)
    ttp_vectors = embed_ttps(catalog, gateway)
    dense = dense_retrieve(ttp_vectors, func_vectors, cfg.k)
    log_message(f"稠密检索: {sum(len(v) for v in dense.values())} 个候选对", logger)
    for ttp_id in dense:
        if not is_ttp_id(ttp_id):
            raise ValidationError(f"非法的技术 id: {ttp_id}")
    neural = run_neural_retrieval(binary, dense, gateway, catalog, parallelism)
    candidates = gate_candidates(dense, neural, cfg)
    log_message(f"门控后剩余 {candidates.counts.final} 个候选对", logger)
    return candidates
