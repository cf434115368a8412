"""Identification metrics and the experiment runner.

Closed-set performance is summarised by the CMC curve (rank-1 rate =
RR-1); open-set performance by the empirical DET curve of FPIR against
FNIR, its EER and the FNIR at FPIR = 0.1 %.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import SubjectRecord, Split, l2_normalize, stack
from .data_io import SplitProportions, SyntheticModel, atomic_write, generate_synthetic, \
    read_embeddings, split_records
from .fusion import FusionMethod, compute_training_stats
from .index import IndexForest, build_index
from .pairing import PairingMethod
from .retrieval import (
    CandidateList,
    RetrievalTrace,
    exhaustive_search,
    retrieve,
    schedule_for_k1,
    workload,
)

FPIR_TARGET = 0.1  # percent


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ClosedSetResult:
    cmc: tuple[tuple[int, float], ...]

    @property
    def rr1(self) -> float:
        return self.cmc[0][1]

    def ir(self, rank: int) -> float:
        return self.cmc[min(rank, len(self.cmc)) - 1][1]


@dataclass(frozen=True)
class OpenSetResult:
    det: tuple[tuple[float, float, float], ...]  # (threshold, fpir %, fnir %)
    eer: float
    fnir_at_fpir_0_1pct: float


def cmc_from_ranks(ranks: Sequence[int | None], max_rank: int) -> ClosedSetResult:
    """CMC over ``1..max_rank``; ``None`` marks a mated subject missing from the list."""
    if not ranks:
        raise EvaluationError("no transactions")
    r = np.array([np.inf if x is None else x for x in ranks], dtype=np.float64)
    hits = np.array([np.count_nonzero(r <= k) for k in range(1, max_rank + 1)])
    rates = hits / len(r) * 100.0
    return ClosedSetResult(tuple((k + 1, float(v)) for k, v in enumerate(rates)))


def closed_set_eval(probes: Sequence[SubjectRecord], system: Callable[[np.ndarray], CandidateList],
                    enrolled: Sequence[int] | set[int], max_rank: int | None = None
                    ) -> ClosedSetResult:
    enrolled = set(int(s) for s in enrolled)
    stray = [p.subject_id for p in probes if p.subject_id not in enrolled]
    if stray:
        raise EvaluationError(f"closed-set probes of non-enrolled subjects: {stray[:5]}")
    ranks = [system(p.embedding).rank_of(p.subject_id) for p in probes]
    return cmc_from_ranks(ranks, max_rank or len(enrolled))


def det_from_scores(enrolled_scores, enrolled_correct, nonenrolled_scores) -> OpenSetResult:
    """Exact empirical DET; a transaction is accepted when its best score <= threshold."""
    s = np.asarray(enrolled_scores, dtype=np.float64)
    ok = np.asarray(enrolled_correct, dtype=bool)
    t = np.asarray(nonenrolled_scores, dtype=np.float64)
    if s.size == 0 or t.size == 0:
        raise EvaluationError("open-set evaluation needs both probe partitions")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([s, t])), [np.inf]])
    t_sorted = np.sort(t)
    fpir = np.searchsorted(t_sorted, thresholds, side="right") / t.size * 100.0
    good = np.sort(s[ok])
    accepted_good = np.searchsorted(good, thresholds, side="right")
    fnir = (s.size - accepted_good) / s.size * 100.0
    gap = np.abs(fpir - fnir)
    k = int(np.argmin(gap))
    eer = float((fpir[k] + fnir[k]) / 2)
    within = fpir <= FPIR_TARGET
    fnir_1000 = float(fnir[within].min())
    det = tuple((float(a), float(b), float(c)) for a, b, c in zip(thresholds, fpir, fnir))
    return OpenSetResult(det, eer, fnir_1000)


def open_set_eval(enrolled_probes: Sequence[SubjectRecord],
                  nonenrolled_probes: Sequence[SubjectRecord],
                  system: Callable[[np.ndarray], CandidateList]) -> OpenSetResult:
    if not enrolled_probes or not nonenrolled_probes:
        raise EvaluationError("open-set evaluation needs both probe partitions")
    s, ok = [], []
    for p in enrolled_probes:
        c = system(p.embedding)
        s.append(c.scores[0])
        ok.append(c.top1 == p.subject_id)
    t = [system(p.embedding).scores[0] for p in nonenrolled_probes]
    return det_from_scores(s, ok, t)


# -- experiment runner --------------------------------------------------------------


@dataclass(frozen=True)
class SystemSpec:
    n1: int
    k1_log2: int

    @property
    def name(self) -> str:
        return f"n1_{self.n1}_k1_2^{self.k1_log2}"

    @property
    def k1(self) -> float:
        return 2.0**self.k1_log2


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.  Loaded from a JSON document (schema version 1)."""

    seed: int = 0
    subjects: int = 256
    dim: int = 64
    sigma: float = 0.05
    embeddings: str | None = None
    normalize: bool = True
    fusion: FusionMethod = FusionMethod.AVERAGE1
    pairing: PairingMethod = PairingMethod.SIMILARITY_SCORE
    renormalize: bool = False
    grid_n1: tuple[int, ...] = (2, 4, 8, 16, 32)
    grid_k1_log2: tuple[int, ...] = (-1, -2, -3, -4, -5)
    systems: tuple[SystemSpec, ...] = ()
    baseline: bool = True
    probe_limit: int | None = None
    version: int = 1

    @classmethod
    def from_dict(cls, doc: Mapping) -> ExperimentConfig:
        doc = dict(doc)
        version = doc.pop("version", 1)
        if version != 1:
            raise EvaluationError(f"unsupported config version {version}")
        data = doc.pop("data", {})
        index = doc.pop("index", {})
        grid = doc.pop("grid", {})
        systems = doc.pop("systems", [])
        kwargs: dict = {}
        synth = data.get("synthetic")
        if synth is not None:
            kwargs.update(subjects=int(synth.get("subjects", 256)), dim=int(synth.get("dim", 64)),
                          sigma=float(synth.get("sigma", 0.05)))
        if "embeddings" in data:
            kwargs["embeddings"] = str(data["embeddings"])
        if "fusion" in index:
            kwargs["fusion"] = FusionMethod.parse(index["fusion"])
        if "pairing" in index:
            kwargs["pairing"] = PairingMethod(index["pairing"])
        if "renormalize" in index:
            kwargs["renormalize"] = bool(index["renormalize"])
        if "n1" in grid:
            kwargs["grid_n1"] = tuple(int(x) for x in grid["n1"])
        if "k1_log2" in grid:
            kwargs["grid_k1_log2"] = tuple(int(x) for x in grid["k1_log2"])
        kwargs["systems"] = tuple(SystemSpec(int(s["n1"]), int(s["k1_log2"])) for s in systems)
        for key in ("seed", "normalize", "baseline", "probe_limit"):
            if key in doc:
                kwargs[key] = doc.pop(key)
        if doc:
            raise EvaluationError(f"unknown config keys: {sorted(doc)}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise EvaluationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        for n1 in self.grid_n1 + tuple(s.n1 for s in self.systems):
            if n1 < 2 or n1 & (n1 - 1):
                raise EvaluationError(f"n1 must be a power of two >= 2, got {n1}")
        for k in self.grid_k1_log2 + tuple(s.k1_log2 for s in self.systems):
            if k > 0:
                raise EvaluationError(f"k1_log2 must be <= 0, got {k}")
        if self.subjects < 1 or self.dim < 1 or self.sigma < 0:
            raise EvaluationError("invalid synthetic data parameters")
        if not self.baseline and not self.systems:
            raise EvaluationError("nothing to evaluate: no baseline and no systems")
        if self.probe_limit is not None and self.probe_limit < 1:
            raise EvaluationError("probe_limit must be positive")


@dataclass
class SystemReport:
    name: str
    workload: float
    comparisons: int
    closed: ClosedSetResult
    open: OpenSetResult
    traces: list[tuple] = field(repr=False)


@dataclass
class ReportBundle:
    gallery_size: int
    workload_matrix: list[tuple[int, int, int, float]]
    systems: list[SystemReport]
    metadata: dict


def _load_data(cfg: ExperimentConfig) -> list[SubjectRecord]:
    if cfg.embeddings is not None:
        return read_embeddings(cfg.embeddings)
    return generate_synthetic(SyntheticModel(cfg.subjects, cfg.dim, cfg.sigma, cfg.seed,
                                             split_proportions=SplitProportions()))


def _normalized(records: Sequence[SubjectRecord]) -> list[SubjectRecord]:
    return [SubjectRecord(r.subject_id, r.sample_id, l2_normalize(r.embedding), r.split, r.soft)
            for r in records]


def workload_matrix(gallery_size: int, n1s: Sequence[int], k1_log2s: Sequence[int]
                    ) -> list[tuple[int, int, int, float]]:
    rows = [(1, 0, gallery_size, 100.0)]
    for n1 in n1s:
        if gallery_size % n1:
            continue
        for k in k1_log2s:
            w = workload(schedule_for_k1(gallery_size, n1, 2.0**k), gallery_size)
            rows.append((n1, k, w.comparisons_total, w.workload_percent))
    return rows


def _evaluate_system(name, search: Callable[[np.ndarray], RetrievalTrace | CandidateList],
                     enrolled_probes, nonenrolled_probes, enrolled_ids, gallery_size) -> SystemReport:
    traces = []
    ranks: list[int | None] = []
    s, ok, t = [], [], []
    comparisons = 0
    for p in list(enrolled_probes) + list(nonenrolled_probes):
        out = search(p.embedding)
        if isinstance(out, RetrievalTrace):
            cand, compared = out.candidates, out.compared
        else:
            cand, compared = out, (gallery_size,)
        comparisons = max(comparisons, sum(compared))
        mated = p.split is Split.PROBE_ENROLLED
        rank = cand.rank_of(p.subject_id) if mated else None
        if mated:
            ranks.append(rank)
            s.append(cand.scores[0])
            ok.append(cand.top1 == p.subject_id)
        else:
            t.append(cand.scores[0])
        traces.append((p.sample_id, p.subject_id, int(mated), "/".join(map(str, compared)),
                       cand.top1, float(cand.scores[0]), rank if rank is not None else ""))
    closed = cmc_from_ranks(ranks, len(enrolled_ids))
    opened = det_from_scores(s, ok, t)
    return SystemReport(name, comparisons / gallery_size * 100.0, comparisons, closed, opened,
                        traces)


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    cfg.validate()
    records = _load_data(cfg)
    if cfg.normalize:
        records = _normalized(records)
    parts = split_records(records)
    refs = parts[Split.REFERENCE]
    if not refs:
        raise EvaluationError("data has no reference split")
    enrolled_probes = parts[Split.PROBE_ENROLLED]
    nonenrolled_probes = parts[Split.PROBE_NONENROLLED]
    if cfg.probe_limit is not None:
        enrolled_probes = enrolled_probes[:cfg.probe_limit]
        nonenrolled_probes = nonenrolled_probes[:cfg.probe_limit]
    n = len(refs)
    ids = np.array([r.subject_id for r in refs], dtype=np.uint64)
    ref_matrix = stack(refs)
    stats = None
    if parts[Split.TRAIN]:
        stats = compute_training_stats(stack(parts[Split.TRAIN]))
    if cfg.fusion.needs_stats and stats is None:
        raise EvaluationError(f"{cfg.fusion.name} needs a train split for statistics")

    reports = []
    if cfg.baseline:
        reports.append(_evaluate_system(
            "baseline", lambda v: exhaustive_search(v, ref_matrix, ids),
            enrolled_probes, nonenrolled_probes, ids, n))
    forests: dict[int, IndexForest] = {}
    for spec in cfg.systems:
        if n % spec.n1:
            raise EvaluationError(f"gallery size {n} not divisible by n1={spec.n1}")
        if spec.n1 not in forests:
            forests[spec.n1] = build_index(refs, cfg.fusion, cfg.pairing, spec.n1, stats,
                                           seed=cfg.seed, renormalize=cfg.renormalize)
        forest = forests[spec.n1]
        schedule = schedule_for_k1(n, spec.n1, spec.k1)
        reports.append(_evaluate_system(
            spec.name, lambda v, f=forest, sch=schedule: retrieve(v, f, sch),
            enrolled_probes, nonenrolled_probes, ids, n))

    meta = {
        "config": _config_doc(cfg),
        "gallery_size": n,
        "enrolled_probes": len(enrolled_probes),
        "nonenrolled_probes": len(nonenrolled_probes),
        "normalized_input": cfg.normalize,
        "renormalized_fusion": cfg.renormalize,
        "score": "squared_euclidean",
    }
    return ReportBundle(n, workload_matrix(n, cfg.grid_n1, cfg.grid_k1_log2), reports, meta)


def _config_doc(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc["fusion"] = cfg.fusion.short_name
    doc["pairing"] = cfg.pairing.value
    doc["systems"] = [asdict(s) for s in cfg.systems]
    return doc


def _csv(rows, header) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue().encode()


def _fmt(x):
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return x


def write_manifest(out_dir: Path, files: Sequence[str]) -> Path:
    entries = {name: hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
               for name in sorted(files)}
    path = out_dir / "manifest.json"
    atomic_write(path, (json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n").encode())
    return path


def write_report(bundle: ReportBundle, out_dir) -> list[str]:
    """Write CMC, DET, trace, workload and summary files plus a hash manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, data: bytes) -> None:
        atomic_write(out / name, data)
        written.append(name)

    put("workload.csv", _csv(bundle.workload_matrix,
                             ("n1", "k1_log2", "comparisons", "workload_percent")))
    summary_rows = []
    for rep in bundle.systems:
        put(f"cmc_{rep.name}.csv", _csv(rep.closed.cmc, ("rank", "ir_percent")))
        put(f"det_{rep.name}.csv", _csv(rep.open.det,
                                        ("threshold", "fpir_percent", "fnir_percent")))
        put(f"traces_{rep.name}.csv", _csv(rep.traces, (
            "sample_id", "subject_id", "mated", "compared_per_level", "top1", "top1_score",
            "mated_rank")))
        summary_rows.append({
            "system": rep.name,
            "comparisons": rep.comparisons,
            "workload_percent": round(rep.workload, 2),
            "eer_percent": rep.open.eer,
            "fnir_1000_percent": rep.open.fnir_at_fpir_0_1pct,
            "rr1_percent": rep.closed.rr1,
        })
    summary = {"metadata": bundle.metadata, "results": summary_rows}
    put("summary.json", (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    write_manifest(out, written)
    return written + ["manifest.json"]
