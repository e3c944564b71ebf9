"""Fixed reasoning graph: node kinds, edges, and the sequential executor.

The graph is always the same six-node shape (define, generate, aggregate,
answer, validate, reanswer) with one backtrack edge from validate to
reanswer.  The executor is generic over that shape but does not support
arbitrary topologies or parallel branches.
"""

from __future__ import annotations

import enum
import json
import threading
import time
import uuid
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping


class NodeKind(str, enum.Enum):
    DEFINE = "define"
    GENERATE = "generate"
    AGGREGATE = "aggregate"
    ANSWER = "answer"
    VALIDATE = "validate"
    REANSWER = "reanswer"


ANSWER_KINDS = frozenset({NodeKind.ANSWER, NodeKind.REANSWER})
MAX_BACKTRACKS_CAP = 3


class EdgeKind(str, enum.Enum):
    NORMAL = "normal"
    BACKTRACK = "backtrack"


class Status(str, enum.Enum):
    """What a handler reports back to the executor."""

    OK = "ok"
    SUCCESS = "success"
    FAILURE = "failure"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    kind: EdgeKind = EdgeKind.NORMAL


@dataclass(frozen=True)
class PipelineGraph:
    nodes: tuple[tuple[str, NodeKind], ...]
    edges: tuple[Edge, ...]
    entry: str
    exits: frozenset[str]
    max_backtracks: int = 1

    def kind_of(self, node_id: str) -> NodeKind:
        for nid, kind in self.nodes:
            if nid == node_id:
                return kind
        raise KeyError(node_id)

    def node_ids(self) -> list[str]:
        return [nid for nid, _ in self.nodes]

    def successors(self, node_id: str, kind: EdgeKind = EdgeKind.NORMAL) -> list[str]:
        return [e.target for e in self.edges if e.source == node_id and e.kind is kind]

    @property
    def call_ceiling(self) -> int:
        return len(self.nodes) + self.max_backtracks


def build_apgp_graph(max_backtracks: int = 1) -> PipelineGraph:
    if max_backtracks < 0:
        raise ValueError(f"max_backtracks must be >= 0, got {max_backtracks}")
    order = [
        NodeKind.DEFINE,
        NodeKind.GENERATE,
        NodeKind.AGGREGATE,
        NodeKind.ANSWER,
        NodeKind.VALIDATE,
    ]
    nodes = tuple((k.value, k) for k in order) + ((NodeKind.REANSWER.value, NodeKind.REANSWER),)
    edges = tuple(Edge(a.value, b.value) for a, b in zip(order, order[1:]))
    edges += (Edge(NodeKind.VALIDATE.value, NodeKind.REANSWER.value, EdgeKind.BACKTRACK),)
    return PipelineGraph(
        nodes=nodes,
        edges=edges,
        entry=NodeKind.DEFINE.value,
        exits=frozenset({NodeKind.VALIDATE.value, NodeKind.REANSWER.value}),
        max_backtracks=max_backtracks,
    )


def validate_graph(graph: PipelineGraph) -> list[str]:
    """Return every structural violation found; an empty list means ok."""
    problems: list[str] = []
    ids = graph.node_ids()
    known = set(ids)
    for nid, count in Counter(ids).items():
        if count > 1:
            problems.append(f"duplicate node id {nid}")
    if graph.entry not in known:
        problems.append(f"entry {graph.entry} is not a node")
    if not graph.exits:
        problems.append("no exit nodes")
    for ex in sorted(graph.exits - known):
        problems.append(f"exit {ex} is not a node")
    if graph.max_backtracks < 0:
        problems.append(f"max_backtracks is negative ({graph.max_backtracks})")

    for e in graph.edges:
        for end in (e.source, e.target):
            if end not in known:
                problems.append(f"edge {e.source}->{e.target} references unknown node {end}")
        if e.kind is EdgeKind.NORMAL and e.target == graph.entry:
            problems.append(f"entry {graph.entry} has incoming normal edge from {e.source}")

    for nid in ids:
        normal = graph.successors(nid, EdgeKind.NORMAL)
        back = graph.successors(nid, EdgeKind.BACKTRACK)
        if len(normal) > 1:
            problems.append(f"node {nid} has {len(normal)} normal successors (at most 1 allowed)")
        if len(back) > 1:
            problems.append(f"node {nid} has {len(back)} backtrack edges (at most 1 allowed)")

    total_back = sum(1 for e in graph.edges if e.kind is EdgeKind.BACKTRACK)
    if total_back > 1:
        problems.append(f"graph has {total_back} backtrack edges (at most 1 allowed)")

    # A cycle along normal edges would make the call ceiling unreachable.
    seen: set[str] = set()
    cur: str | None = graph.entry if graph.entry in known else None
    while cur is not None and cur not in seen:
        seen.add(cur)
        nxt = graph.successors(cur, EdgeKind.NORMAL)
        cur = nxt[0] if nxt else None
    if cur is not None:
        problems.append(f"normal edges form a cycle through {cur}")

    reachable: set[str] = set()
    frontier = [graph.entry] if graph.entry in known else []
    while frontier:
        nid = frontier.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        frontier.extend(e.target for e in graph.edges if e.source == nid and e.target in known)
    for nid in ids:
        if nid not in reachable:
            problems.append(f"unreachable node {nid}")
    return problems


# --------------------------------------------------------------------------
# Transcript


@dataclass
class TranscriptEntry:
    node_id: str
    node_kind: str
    prompt: str
    response: str
    parsed: str
    latency_ms: float = 0.0
    token_usage: dict[str, int] | None = None
    warnings: list[str] = field(default_factory=list)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class Transcript:
    run_id: str
    entries: list[TranscriptEntry] = field(default_factory=list)
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Transcript":
        return cls(
            run_id=data["run_id"],
            entries=[TranscriptEntry(**e) for e in data.get("entries", [])],
            started_at=data.get("started_at", ""),
            finished_at=data.get("finished_at"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Transcript":
        return cls.from_dict(json.loads(line))

    def kinds(self) -> list[str]:
        return [e.node_kind for e in self.entries]


_write_lock = threading.Lock()


def append_transcript(path: str | Path, transcript: Transcript) -> None:
    """Append one run as one line; whole lines are written under a lock."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    line = transcript.to_json() + "\n"
    with _write_lock, p.open("a", encoding="utf-8") as fh:
        fh.write(line)


def read_transcripts(path: str | Path) -> Iterator[Transcript]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield Transcript.from_json(line)


# --------------------------------------------------------------------------
# Execution


@dataclass
class ExecutionState:
    outputs: dict[str, str] = field(default_factory=dict)
    values: dict[str, Any] = field(default_factory=dict)
    visit_counts: Counter = field(default_factory=Counter)
    current: str = ""
    backtracks_used: int = 0


@dataclass
class NodeOutcome:
    """Handler result.

    ``output`` is recorded in the state before any successor runs; ``value``
    holds an optional typed payload (parsed solutions, a verdict) for callers.
    """

    output: str
    status: Status = Status.OK
    value: Any = None


class NodeContext:
    """Per-invocation view handed to a node handler."""

    def __init__(self, run_id: str, node_id: str, kind: NodeKind, input: str,
                 state: ExecutionState, transcript: Transcript):
        self.run_id = run_id
        self.node_id = node_id
        self.kind = kind
        self.input = input
        self._state = state
        self._transcript = transcript
        self.calls = 0

    @property
    def outputs(self) -> Mapping[str, str]:
        return dict(self._state.outputs)

    @property
    def values(self) -> Mapping[str, Any]:
        return dict(self._state.values)

    def log(self, prompt: str, response: str, parsed: str, latency_ms: float = 0.0,
            token_usage: dict[str, int] | None = None, warnings: Iterable[str] = ()) -> None:
        self._transcript.entries.append(
            TranscriptEntry(self.node_id, self.kind.value, prompt, response, parsed,
                            latency_ms, token_usage, list(warnings))
        )
        self.calls += 1

    def warn(self, message: str) -> None:
        """Attach a warning to the most recent entry of this node."""
        if self.calls == 0:
            raise RuntimeError("warn() before any call was logged")
        self._transcript.entries[-1].warnings.append(message)


Handler = Callable[[NodeContext], NodeOutcome]


class GraphDefect(RuntimeError):
    """Internal invariant broken: bad graph, missing handler, runaway loop."""


class ExecutionAborted(RuntimeError):
    def __init__(self, node_id: str, cause: BaseException, transcript: Transcript):
        super().__init__(f"node {node_id} failed: {cause}")
        self.node_id = node_id
        self.cause = cause
        self.transcript = transcript


@dataclass
class ExecutionResult:
    final_output: str
    transcript: Transcript
    state: ExecutionState

    def __iter__(self):
        return iter((self.final_output, self.transcript))


def execute(graph: PipelineGraph, handlers: Mapping[NodeKind, Handler], input: str,
            run_id: str | None = None) -> ExecutionResult:
    problems = validate_graph(graph)
    if problems:
        raise GraphDefect("invalid graph: " + "; ".join(problems))
    missing = {k for _, k in graph.nodes} - set(handlers)
    if missing:
        raise GraphDefect("no handler for " + ", ".join(sorted(k.value for k in missing)))

    state = ExecutionState()
    transcript = Transcript(run_id=run_id or uuid.uuid4().hex)
    invocations = 0
    cur: str | None = graph.entry
    last_answer: str | None = None
    last_output = ""

    while cur is not None:
        invocations += 1
        if invocations > graph.call_ceiling:
            raise GraphDefect(f"exceeded call ceiling {graph.call_ceiling} at node {cur}")
        kind = graph.kind_of(cur)
        state.current = cur
        state.visit_counts[cur] += 1
        ctx = NodeContext(transcript.run_id, cur, kind, input, state, transcript)
        started = time.perf_counter()
        try:
            outcome = handlers[kind](ctx)
        except Exception as exc:
            transcript.finished_at = _now()
            raise ExecutionAborted(cur, exc, transcript) from exc
        if ctx.calls == 0:
            ctx.log("", outcome.output, outcome.output,
                    latency_ms=(time.perf_counter() - started) * 1000)

        state.outputs[cur] = outcome.output
        if outcome.value is not None:
            state.values[cur] = outcome.value
        last_output = outcome.output
        if kind in ANSWER_KINDS:
            last_answer = outcome.output

        back = graph.successors(cur, EdgeKind.BACKTRACK)
        if outcome.status is Status.FAILURE and back and state.backtracks_used < graph.max_backtracks:
            state.backtracks_used += 1
            cur = back[0]
        elif cur in graph.exits and outcome.status is not Status.OK:
            cur = None
        else:
            nxt = graph.successors(cur, EdgeKind.NORMAL)
            cur = nxt[0] if nxt else None

    transcript.finished_at = _now()
    final = last_answer if last_answer is not None else last_output
    return ExecutionResult(final, transcript, state)
