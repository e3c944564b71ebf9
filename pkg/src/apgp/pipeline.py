"""Define, generate three, merge, answer, validate, retry once."""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import Literal

from .graph import (
    ExecutionAborted, NodeContext, NodeKind, NodeOutcome, Status, Transcript,
    build_apgp_graph, execute, MAX_BACKTRACKS_CAP,
)
from .prompts import TemplatePack, assemble_bindings, format_solutions, render
from .provider import ChatRequest, Provider, RequestTag

DEFAULT_TEMPERATURES = {k: 0.2 for k in NodeKind} | {NodeKind.GENERATE: 1.0}


class EmptyNodeOutput(RuntimeError):
    def __init__(self, kind: NodeKind):
        super().__init__(f"empty output from {kind.value} node")
        self.kind = kind


class MalformedSolutions(RuntimeError):
    def __init__(self, raw: str):
        super().__init__("could not find any SOLUTION markers in generate output")
        self.raw = raw


class SolveAborted(RuntimeError):
    def __init__(self, problem_id: str, cause: BaseException, transcript: Transcript):
        super().__init__(f"solve {problem_id} aborted: {cause}")
        self.cause = cause
        self.transcript = transcript


@dataclass(frozen=True)
class ProblemStatement:
    id: str
    text: str
    language: str = "en"
    source: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("problem text is empty")

    @classmethod
    def from_text(cls, text: str, language: str = "en") -> "ProblemStatement":
        digest = hashlib.sha1(text.encode("utf-8")).hexdigest()[:10]
        return cls(f"problem-{digest}", text, language)


@dataclass(frozen=True)
class ProblemDefinition:
    text: str


class Origin(str, enum.Enum):
    GENERATED = "generated"
    AGGREGATED = "aggregated"
    REVISED = "revised"


@dataclass(frozen=True)
class Solution:
    text: str
    origin: Origin
    index: int | None = None


@dataclass(frozen=True)
class Answer:
    text: str
    produced_by: Literal["first_pass", "retry"]


@dataclass(frozen=True)
class ValidationVerdict:
    success: bool
    revised_solution: Solution | None = None
    rationale: str = ""
    parse_status: Literal["parsed", "unparseable"] = "parsed"


class Path(str, enum.Enum):
    SUCCESS_FIRST_PASS = "success_first_pass"
    RETRIED = "retried"
    VALIDATION_UNPARSEABLE = "validation_unparseable"
    # Parsed failure with no retry budget left (max_backtracks=0).
    FAILED_NO_RETRY = "failed_no_retry"


@dataclass
class SolveResult:
    answer: Answer
    verdict: ValidationVerdict
    transcript: Transcript
    path: Path
    solutions: list[Solution] = field(default_factory=list)
    definition: ProblemDefinition | None = None


@dataclass(frozen=True)
class PipelineOptions:
    model: str = "gpt-3.5-turbo"
    temperatures: dict[NodeKind, float] = field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    max_backtracks: int = 1
    generate_mode: Literal["single", "triple"] = "single"
    stimulation: bool = True
    max_output_tokens: int = 1024

    def __post_init__(self):
        if not 0 <= self.max_backtracks <= MAX_BACKTRACKS_CAP:
            raise ValueError(f"max_backtracks must be in [0, {MAX_BACKTRACKS_CAP}]")
        if self.generate_mode not in ("single", "triple"):
            raise ValueError(f"unknown generate_mode {self.generate_mode!r}")

    def temperature(self, kind: NodeKind) -> float:
        return self.temperatures.get(kind, DEFAULT_TEMPERATURES[kind])


# --------------------------------------------------------------------------
# Parsing

_SOLUTION_MARK = re.compile(r"(?im)^[ \t>*#_-]*SOLUTION[ \t]*(\d+)[ \t]*[:：.)\]-]?[*_]*")
_VERDICT = re.compile(r"VERDICT\s*[:：]?\s*[*_]*\s*(SUCCESS|FAIL)", re.IGNORECASE)
_REVISED = re.compile(r"REVISED\s+SOLUTION\s*[:：]", re.IGNORECASE)


def parse_solutions(text: str) -> dict[int, str]:
    """Split on ``SOLUTION n:`` markers; first non-empty section per index wins."""
    marks = list(_SOLUTION_MARK.finditer(text))
    found: dict[int, str] = {}
    for m, nxt in zip(marks, marks[1:] + [None]):
        idx = int(m.group(1))
        body = text[m.end(): nxt.start() if nxt else len(text)].strip()
        if 1 <= idx <= 3 and body and idx not in found:
            found[idx] = body
    return found


def parse_verdict(text: str) -> ValidationVerdict:
    """Never raises: anything without a usable verdict is ``unparseable``."""
    if not isinstance(text, str):
        return ValidationVerdict(False, None, "", "unparseable")
    m = _VERDICT.search(text)
    if m is None:
        return ValidationVerdict(False, None, text.strip(), "unparseable")
    word = m.group(1).upper()
    rev = _REVISED.search(text, m.end())
    rationale = text[m.end(): rev.start() if rev else len(text)].strip(" \t\r\n—–-:.")
    if word == "SUCCESS":
        return ValidationVerdict(True, None, rationale)
    revised = text[rev.end():].strip() if rev else ""
    if not revised:
        # FAIL with nothing to retry from behaves like a failed validation step.
        return ValidationVerdict(False, None, rationale or text.strip(), "unparseable")
    return ValidationVerdict(False, Solution(revised, Origin.REVISED), rationale)


# --------------------------------------------------------------------------
# Node operations


class _Caller:
    """Sends one node's prompt and records it in the transcript."""

    def __init__(self, provider: Provider, options: PipelineOptions, ctx: NodeContext | None,
                 kind: NodeKind, run_id: str = ""):
        self.provider = provider
        self.options = options
        self.ctx = ctx
        self.kind = kind
        self.run_id = ctx.run_id if ctx else run_id
        self.attempt = 0

    def __call__(self, prompt: str, parse=lambda s: s.strip()) -> tuple[str, str]:
        request = ChatRequest.user(
            prompt,
            model=self.options.model,
            temperature=self.options.temperature(self.kind),
            max_output_tokens=self.options.max_output_tokens,
            tag=RequestTag(self.run_id, self.kind.value, self.attempt),
        )
        self.attempt += 1
        response = self.provider.complete(request)
        parsed = parse(response.content)
        if self.ctx is not None:
            self.ctx.log(prompt, response.content, parsed, response.latency_ms,
                         response.token_usage)
        return response.content, parsed


def _prompt(templates: TemplatePack, kind: NodeKind, bindings: dict[str, str],
            options: PipelineOptions) -> str:
    return render(templates[kind], bindings, stimulation=options.stimulation)


def definite(problem: ProblemStatement, templates: TemplatePack, provider: Provider,
             options: PipelineOptions | None = None, ctx: NodeContext | None = None) -> ProblemDefinition:
    options = options or PipelineOptions()
    call = _Caller(provider, options, ctx, NodeKind.DEFINE, problem.id)
    prompt = _prompt(templates, NodeKind.DEFINE, {"problem": problem.text}, options)
    raw, _ = call(prompt, parse=lambda s: s)
    if not raw.strip():
        raise EmptyNodeOutput(NodeKind.DEFINE)
    return ProblemDefinition(raw)


def generate_solutions(definition: ProblemDefinition, templates: TemplatePack, provider: Provider,
                       options: PipelineOptions | None = None,
                       ctx: NodeContext | None = None) -> list[Solution]:
    options = options or PipelineOptions()
    if not definition.text.strip():
        raise ValueError("definition is empty")
    call = _Caller(provider, options, ctx, NodeKind.GENERATE)
    prompt = _prompt(templates, NodeKind.GENERATE, {"definition": definition.text}, options)
    if options.generate_mode == "triple":
        return _generate_triple(prompt, templates, call)

    show = lambda found: format_solutions(found[i] for i in sorted(found))
    raw, _ = call(prompt, parse=lambda s: show(parse_solutions(s)))
    found = parse_solutions(raw)
    if len(found) == 3:
        return [Solution(found[i], Origin.GENERATED, i) for i in (1, 2, 3)]

    retry_prompt = prompt + "\n\n" + templates.instruction("reformat_solutions")
    raw2, _ = call(retry_prompt, parse=lambda s: show(parse_solutions(s)))
    reasked = parse_solutions(raw2)
    if len(reasked) == 3:
        return [Solution(reasked[i], Origin.GENERATED, i) for i in (1, 2, 3)]
    best = reasked if len(reasked) >= len(found) else found
    if not best:
        raise MalformedSolutions(raw2)
    texts = [best[i] for i in sorted(best)]
    if ctx is not None:
        ctx.warn(f"only {len(texts)} solution(s) after re-ask; duplicated the last to reach 3")
    texts += [texts[-1]] * (3 - len(texts))
    return [Solution(t, Origin.GENERATED, i) for i, t in enumerate(texts, 1)]


def _generate_triple(prompt: str, templates: TemplatePack, call: _Caller) -> list[Solution]:
    solutions = []
    for i in (1, 2, 3):
        def pick(s: str, i=i) -> str:
            found = parse_solutions(s)
            return found[min(found)] if found else s.strip()
        _, text = call(prompt + "\n\n" + templates.instruction("single_approach", index=str(i)), parse=pick)
        if not text:
            raise EmptyNodeOutput(NodeKind.GENERATE)
        solutions.append(Solution(text, Origin.GENERATED, i))
    return solutions


def aggregate(definition: ProblemDefinition, s1: Solution, s2: Solution, s3: Solution,
              templates: TemplatePack, provider: Provider, options: PipelineOptions | None = None,
              ctx: NodeContext | None = None) -> Solution:
    """Ask the model to merge the three approaches; no local selection happens."""
    options = options or PipelineOptions()
    call = _Caller(provider, options, ctx, NodeKind.AGGREGATE)
    bindings = {"definition": definition.text,
                "solutions": format_solutions(s.text for s in (s1, s2, s3))}
    raw, _ = call(_prompt(templates, NodeKind.AGGREGATE, bindings, options), parse=lambda s: s)
    if not raw.strip():
        raise EmptyNodeOutput(NodeKind.AGGREGATE)
    return Solution(raw, Origin.AGGREGATED)


def get_answer(definition: ProblemDefinition, solution: Solution, templates: TemplatePack,
               provider: Provider, options: PipelineOptions | None = None,
               ctx: NodeContext | None = None) -> Answer:
    options = options or PipelineOptions()
    if solution.origin is Origin.AGGREGATED:
        kind, produced_by = NodeKind.ANSWER, "first_pass"
    elif solution.origin is Origin.REVISED:
        kind, produced_by = NodeKind.REANSWER, "retry"
    else:
        raise ValueError(f"get_answer needs an aggregated or revised solution, got {solution.origin.value}")
    call = _Caller(provider, options, ctx, kind)
    bindings = {"definition": definition.text, "solution": solution.text}
    raw, _ = call(_prompt(templates, kind, bindings, options), parse=lambda s: s)
    if not raw.strip():
        raise EmptyNodeOutput(kind)
    return Answer(raw, produced_by)


def validate(definition: ProblemDefinition, answer: Answer, templates: TemplatePack,
             provider: Provider, options: PipelineOptions | None = None,
             ctx: NodeContext | None = None) -> ValidationVerdict:
    options = options or PipelineOptions()
    if not answer.text.strip():
        raise ValueError("answer is empty")
    call = _Caller(provider, options, ctx, NodeKind.VALIDATE)
    bindings = {"definition": definition.text, "answer": answer.text}
    raw, _ = call(_prompt(templates, NodeKind.VALIDATE, bindings, options), parse=_verdict_summary)
    return parse_verdict(raw)


def _verdict_summary(text: str) -> str:
    v = parse_verdict(text)
    if v.parse_status == "unparseable":
        return "UNPARSEABLE"
    if v.success:
        return "SUCCESS"
    return v.revised_solution.text


# --------------------------------------------------------------------------
# End to end


def _handlers(problem: ProblemStatement, templates: TemplatePack, provider: Provider,
              options: PipelineOptions):
    """Graph handlers for one run; typed values travel through ``ctx.values``."""

    def define(ctx: NodeContext) -> NodeOutcome:
        d = definite(problem, templates, provider, options, ctx)
        return NodeOutcome(d.text, value=d)

    def generate(ctx: NodeContext) -> NodeOutcome:
        d = ctx.values[NodeKind.DEFINE.value]
        sols = generate_solutions(d, templates, provider, options, ctx)
        return NodeOutcome(format_solutions(s.text for s in sols), value=sols)

    def aggregate_(ctx: NodeContext) -> NodeOutcome:
        d = ctx.values[NodeKind.DEFINE.value]
        best = aggregate(d, *ctx.values[NodeKind.GENERATE.value], templates, provider, options, ctx)
        return NodeOutcome(best.text, value=best)

    def answer(ctx: NodeContext) -> NodeOutcome:
        d = ctx.values[NodeKind.DEFINE.value]
        a = get_answer(d, ctx.values[NodeKind.AGGREGATE.value], templates, provider, options, ctx)
        return NodeOutcome(a.text, value=a)

    def validate_(ctx: NodeContext) -> NodeOutcome:
        d = ctx.values[NodeKind.DEFINE.value]
        v = validate(d, ctx.values[NodeKind.ANSWER.value], templates, provider, options, ctx)
        if v.parse_status == "unparseable":
            return NodeOutcome(v.rationale, Status.UNPARSEABLE, v)
        if v.success:
            return NodeOutcome(v.rationale, Status.SUCCESS, v)
        return NodeOutcome(v.revised_solution.text, Status.FAILURE, v)

    def reanswer(ctx: NodeContext) -> NodeOutcome:
        d = ctx.values[NodeKind.DEFINE.value]
        v: ValidationVerdict = ctx.values[NodeKind.VALIDATE.value]
        a = get_answer(d, v.revised_solution, templates, provider, options, ctx)
        return NodeOutcome(a.text, value=a)

    def guarded(kind: NodeKind, fn):
        def handler(ctx: NodeContext) -> NodeOutcome:
            assemble_bindings(kind, ctx.outputs, problem.text)  # raises on ordering defects
            return fn(ctx)
        return handler

    fns = {
        NodeKind.DEFINE: define,
        NodeKind.GENERATE: generate,
        NodeKind.AGGREGATE: aggregate_,
        NodeKind.ANSWER: answer,
        NodeKind.VALIDATE: validate_,
        NodeKind.REANSWER: reanswer,
    }
    return {kind: guarded(kind, fn) for kind, fn in fns.items()}


def solve(problem: ProblemStatement, templates: TemplatePack, provider: Provider,
          options: PipelineOptions | None = None) -> SolveResult:
    options = options or PipelineOptions()
    graph = build_apgp_graph(options.max_backtracks)
    try:
        result = execute(graph, _handlers(problem, templates, provider, options), problem.text,
                         run_id=problem.id)
    except ExecutionAborted as exc:
        raise SolveAborted(problem.id, exc.cause, exc.transcript) from exc.cause

    values = result.state.values
    verdict: ValidationVerdict = values[NodeKind.VALIDATE.value]
    if NodeKind.REANSWER.value in values:
        answer, path = values[NodeKind.REANSWER.value], Path.RETRIED
    else:
        answer = values[NodeKind.ANSWER.value]
        if verdict.parse_status == "unparseable":
            path = Path.VALIDATION_UNPARSEABLE
        elif verdict.success:
            path = Path.SUCCESS_FIRST_PASS
        else:
            path = Path.FAILED_NO_RETRY
    assert answer.text == result.final_output
    return SolveResult(
        answer=answer,
        verdict=verdict,
        transcript=result.transcript,
        path=path,
        solutions=list(values[NodeKind.GENERATE.value]),
        definition=values[NodeKind.DEFINE.value],
    )
