"""Benchmark datasets, answer judging, and accuracy reports."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Sequence

from .graph import append_transcript
from .pipeline import PipelineOptions, ProblemStatement, SolveAborted, solve
from .prompts import TemplatePack, render
from .provider import ChatRequest, Provider, RequestTag

log = logging.getLogger(__name__)

JudgeMethod = Literal["exact", "model"]
Outcome = Literal["success", "fail", "error"]


class MalformedDataset(ValueError):
    def __init__(self, path: str | Path, where: str, reason: str):
        super().__init__(f"{path}: {where}: {reason}")
        self.where = where


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    question: str
    reference: str | None
    task: str
    language: str = "en"


def _check_unique(records: Sequence[DatasetRecord], path) -> None:
    seen: set[str] = set()
    for r in records:
        if r.id in seen:
            raise MalformedDataset(path, f"id {r.id}", "duplicate record id")
        seen.add(r.id)


def load_bbh_task(path: str | Path, language: str = "en") -> list[DatasetRecord]:
    """Read a BBH task file: ``{"examples": [{"input": ..., "target": ...}]}``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text("utf-8"))
    except ValueError as exc:
        raise MalformedDataset(path, "file", f"invalid JSON ({exc})") from None
    examples = data.get("examples") if isinstance(data, dict) else None
    if not isinstance(examples, list):
        raise MalformedDataset(path, "file", 'missing top-level "examples" array')
    records = []
    for i, ex in enumerate(examples):
        if not isinstance(ex, dict) or "input" not in ex or "target" not in ex:
            raise MalformedDataset(path, f"index {i}", 'example needs "input" and "target"')
        question, target = ex["input"], ex["target"]
        if not isinstance(question, str) or not question.strip():
            raise MalformedDataset(path, f"index {i}", "empty input")
        records.append(DatasetRecord(f"{path.stem}-{i:04d}", question, str(target), path.stem, language))
    return records


def load_qa_pairs(path: str | Path, language: str = "zh", task: str | None = None) -> list[DatasetRecord]:
    """Read JSONL question/reference pairs; blank lines are skipped."""
    path = Path(path)
    task = task or path.stem
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                log.warning("%s: skipping blank line %d", path, lineno)
                continue
            try:
                row = json.loads(line)
            except ValueError:
                raise MalformedDataset(path, f"line {lineno}", "invalid JSON") from None
            if not isinstance(row, dict) or not str(row.get("question", "")).strip():
                raise MalformedDataset(path, f"line {lineno}", 'needs a non-empty "question"')
            ref = row.get("reference")
            rid = str(row.get("id", f"{task}-{lineno:04d}"))
            records.append(DatasetRecord(rid, row["question"], None if ref is None else str(ref),
                                         row.get("task", task), row.get("language", language)))
    _check_unique(records, path)
    return records


def dump_qa_pairs(records: Iterable[DatasetRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            row = {"id": r.id, "question": r.question, "task": r.task, "language": r.language}
            if r.reference is not None:
                row["reference"] = r.reference
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# Judges


@dataclass(frozen=True)
class JudgeVerdict:
    correct: bool
    method: JudgeMethod
    explanation: str = ""
    judge_raw: str | None = None


_TRAILING = ".,;:!?。，；：！？、…"


def normalize_answer(text: str) -> str:
    text = " ".join(text.split()).casefold()
    return text.rstrip(_TRAILING).rstrip()


def judge_exact(reference: str, candidate: str) -> JudgeVerdict:
    return JudgeVerdict(normalize_answer(reference) == normalize_answer(candidate), "exact")


_JUDGMENT = re.compile(r"JUDGMENT\s*[:：]\s*[*_]*\s*(INCORRECT|CORRECT)", re.IGNORECASE)


def parse_judgment(raw: str) -> JudgeVerdict:
    m = _JUDGMENT.search(raw)
    if m is None:
        return JudgeVerdict(False, "model", "judge unparseable", raw)
    explanation = raw[m.end():].strip(" \t\r\n—–-:.")
    return JudgeVerdict(m.group(1).upper() == "CORRECT", "model", explanation, raw)


def judge_model(question: str, reference: str | None, candidate: str, provider: Provider,
                templates: TemplatePack, *, model: str = "gpt-3.5-turbo", run_id: str = "",
                temperature: float = 0.0) -> JudgeVerdict:
    ref = reference if reference is not None and reference.strip() else templates.instruction("no_reference")
    prompt = render(templates.judge, {"question": question, "reference": ref, "candidate": candidate})
    response = provider.complete(ChatRequest.user(
        prompt, model=model, temperature=temperature, tag=RequestTag(run_id, "judge", 0),
    ))
    verdict = parse_judgment(response.content)
    if reference is None:
        note = "no reference supplied to judge"
        verdict = JudgeVerdict(verdict.correct, "model",
                               f"{verdict.explanation} ({note})".strip(), verdict.judge_raw)
    return verdict


# --------------------------------------------------------------------------
# Reports


def format_ratio(part: int, total: int) -> str | None:
    """Percentage with two decimals, rounded half up; None when total is 0."""
    if total <= 0:
        return None
    hundredths = (2 * part * 10000 + total) // (2 * total)
    return f"{hundredths // 100}.{hundredths % 100:02d}%"


@dataclass
class RecordVerdict:
    id: str
    task: str
    outcome: Outcome
    answer: str | None = None
    path: str | None = None
    judge: JudgeVerdict | None = None
    error: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RecordVerdict":
        data = dict(data)
        judge = data.pop("judge", None)
        if "status" in data and "outcome" not in data:
            data["outcome"] = data.pop("status")
        return cls(**data, judge=JudgeVerdict(**judge) if judge else None)


@dataclass
class TaskStats:
    task: str
    success: int = 0
    fail: int = 0
    error: int = 0

    @property
    def judged(self) -> int:
        return self.success + self.fail

    @property
    def accuracy(self) -> float | None:
        return self.success / self.judged if self.judged else None

    @property
    def accuracy_pct(self) -> str | None:
        return format_ratio(self.success, self.judged)

    @property
    def fail_pct(self) -> str | None:
        return format_ratio(self.fail, self.judged)

    def to_dict(self) -> dict[str, Any]:
        return {"task": self.task, "success": self.success, "fail": self.fail,
                "error": self.error, "accuracy": self.accuracy, "accuracy_pct": self.accuracy_pct}


@dataclass
class RunReport:
    tasks: list[TaskStats]
    overall: TaskStats
    records: list[RecordVerdict]
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "metadata": self.metadata,
            "overall": self.overall.to_dict(),
            "tasks": [t.to_dict() for t in self.tasks],
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunReport":
        return report_from_verdicts([RecordVerdict.from_dict(r) for r in data["records"]],
                                    dict(data.get("metadata", {})))

    def summary_line(self) -> str:
        o = self.overall
        return (f"Success {o.success} / Fail {o.fail} / Error {o.error} / "
                f"Accuracy {o.accuracy_pct or 'n/a'}")

    def table(self) -> str:
        o = self.overall
        rows = [("Status", "Count", "Ratio"),
                ("Fail", str(o.fail), o.fail_pct or "n/a"),
                ("Success", str(o.success), o.accuracy_pct or "n/a"),
                ("Error", str(o.error), "-")]
        lines = _columns(rows)
        if len(self.tasks) > 1:
            lines.append("")
            task_rows = [("Task", "Success", "Fail", "Error", "Accuracy")]
            task_rows += [(t.task, str(t.success), str(t.fail), str(t.error), t.accuracy_pct or "n/a")
                          for t in self.tasks]
            lines += _columns(task_rows)
        return "\n".join(lines) + "\n"


def _columns(rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for n, row in enumerate(rows):
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return out


def report_from_verdicts(verdicts: Iterable[RecordVerdict],
                         metadata: Mapping[str, Any] | None = None) -> RunReport:
    """Deterministic fold over id-sorted verdicts."""
    ordered = sorted(verdicts, key=lambda v: v.id)
    by_task: dict[str, TaskStats] = {}
    overall = TaskStats("overall")
    for v in ordered:
        stats = by_task.setdefault(v.task, TaskStats(v.task))
        for s in (stats, overall):
            setattr(s, v.outcome, getattr(s, v.outcome) + 1)
    tasks = [by_task[k] for k in sorted(by_task)]
    return RunReport(tasks, overall, ordered, dict(metadata or {}))


def load_verdicts(path: str | Path) -> list[RecordVerdict]:
    """Per-record verdicts from a saved report.json or a JSONL verdict log."""
    text = Path(path).read_text("utf-8")
    try:
        data = json.loads(text)
    except ValueError:
        data = None
    if isinstance(data, dict) and "records" in data:
        return [RecordVerdict.from_dict(r) for r in data["records"]]
    return [RecordVerdict.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


# --------------------------------------------------------------------------
# Running


@dataclass
class JudgeConfig:
    method: JudgeMethod = "model"
    per_task: dict[str, JudgeMethod] = field(default_factory=dict)
    provider: Provider | None = None
    model: str | None = None

    def method_for(self, task: str) -> JudgeMethod:
        return self.per_task.get(task, self.method)


def _run_one(record: DatasetRecord, templates: TemplatePack, provider: Provider,
             options: PipelineOptions, judge: JudgeConfig, transcript_path: Path | None) -> RecordVerdict:
    problem = ProblemStatement(record.id, record.question, record.language, record.task)
    try:
        result = solve(problem, templates, provider, options)
    except SolveAborted as exc:
        if transcript_path is not None:
            append_transcript(transcript_path, exc.transcript)
        return RecordVerdict(record.id, record.task, "error",
                             error=f"{type(exc.cause).__name__}: {exc.cause}")
    except Exception as exc:  # malformed model output and similar
        return RecordVerdict(record.id, record.task, "error", error=f"{type(exc).__name__}: {exc}")
    if transcript_path is not None:
        append_transcript(transcript_path, result.transcript)

    answer = result.answer.text
    method = judge.method_for(record.task)
    try:
        if method == "exact":
            if record.reference is None:
                raise ValueError("exact judging needs a reference answer")
            verdict = judge_exact(record.reference, answer)
        else:
            verdict = judge_model(record.question, record.reference, answer,
                                  judge.provider or provider, templates,
                                  model=judge.model or options.model, run_id=record.id)
    except Exception as exc:
        return RecordVerdict(record.id, record.task, "error", answer, result.path.value,
                             error=f"judge: {type(exc).__name__}: {exc}")
    return RecordVerdict(record.id, record.task, "success" if verdict.correct else "fail",
                         answer, result.path.value, verdict)


def run_benchmark(records: Sequence[DatasetRecord], templates: TemplatePack, provider: Provider,
                  options: PipelineOptions | None = None, judge: JudgeConfig | None = None,
                  parallelism: int = 1, transcript_path: str | Path | None = None,
                  metadata: Mapping[str, Any] | None = None) -> RunReport:
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    options = options or PipelineOptions()
    judge = judge or JudgeConfig()
    tpath = Path(transcript_path) if transcript_path else None
    started = datetime.now(timezone.utc).isoformat()
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        verdicts = list(pool.map(
            lambda r: _run_one(r, templates, provider, options, judge, tpath), records))
    meta = {
        "model": options.model,
        "templates": templates.digest(),
        "language": templates.language,
        "stimulation": options.stimulation,
        "judge": judge.method,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    meta.update(metadata or {})
    return report_from_verdicts(verdicts, meta)


# --------------------------------------------------------------------------
# Comparison


@dataclass(frozen=True)
class TaskDelta:
    task: str
    accuracy_a: float | None
    accuracy_b: float | None
    delta: float | None
    status: Literal["matched", "unmatched"]


@dataclass
class Comparison:
    tasks: list[TaskDelta]
    overall_a: float | None
    overall_b: float | None
    overall_delta: float | None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def table(self) -> str:
        def pct(x: float | None) -> str:
            return "n/a" if x is None else f"{100 * x:.2f}%"

        def signed(x: float | None) -> str:
            return "n/a" if x is None else f"{100 * x:+.2f}"

        rows = [("Task", "A", "B", "Delta", "Status")]
        rows += [(t.task, pct(t.accuracy_a), pct(t.accuracy_b), signed(t.delta), t.status)
                 for t in self.tasks]
        rows.append(("overall", pct(self.overall_a), pct(self.overall_b), signed(self.overall_delta),
                     "matched tasks only"))
        return "\n".join(_columns(rows)) + "\n"


def compare_runs(a: RunReport, b: RunReport) -> Comparison:
    """Per-task accuracy of A minus B; tasks missing from either side are unmatched."""
    ta = {t.task: t for t in a.tasks}
    tb = {t.task: t for t in b.tasks}
    deltas = []
    sa = TaskStats("a")
    sb = TaskStats("b")
    for task in sorted(ta.keys() | tb.keys()):
        x, y = ta.get(task), tb.get(task)
        if x is None or y is None:
            deltas.append(TaskDelta(task, x and x.accuracy, y and y.accuracy, None, "unmatched"))
            continue
        delta = None if x.accuracy is None or y.accuracy is None else x.accuracy - y.accuracy
        deltas.append(TaskDelta(task, x.accuracy, y.accuracy, delta, "matched"))
        sa.success += x.success
        sa.fail += x.fail
        sb.success += y.success
        sb.fail += y.fail
    oa, ob = sa.accuracy, sb.accuracy
    return Comparison(deltas, oa, ob, None if oa is None or ob is None else oa - ob)
