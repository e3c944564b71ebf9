"""Fixed node prompts, removable stimulus segments, and slot filling."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .graph import NodeKind

SLOT_VOCABULARY: dict[NodeKind, frozenset[str]] = {
    NodeKind.DEFINE: frozenset({"problem"}),
    NodeKind.GENERATE: frozenset({"definition"}),
    NodeKind.AGGREGATE: frozenset({"definition", "solutions"}),
    NodeKind.ANSWER: frozenset({"definition", "solution"}),
    NodeKind.VALIDATE: frozenset({"definition", "answer"}),
    NodeKind.REANSWER: frozenset({"definition", "solution"}),
}
ALL_SLOTS = frozenset().union(*SLOT_VOCABULARY.values()) | {"failed_solution"}

SUPPORTED_LANGUAGES = ("en", "zh")
DEFAULT_LANGUAGE = "en"

_TOKEN = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}|[{}]")
_MARK_OPEN, _MARK_CLOSE = "<<", ">>"


class TemplateError(ValueError):
    pass


class BindingError(TemplateError):
    pass


class UnsupportedLanguage(TemplateError):
    pass


def placeholders(body: str) -> list[str]:
    """Placeholder names in order of appearance (a multiset).

    Doubled braces are literal; any other lone brace is an error.
    """
    names = []
    for m in _TOKEN.finditer(body):
        tok = m.group(0)
        if tok in ("{{", "}}"):
            continue
        if m.group(1) is None:
            raise TemplateError(f"stray brace at offset {m.start()} in template body")
        names.append(m.group(1))
    return names


@dataclass(frozen=True)
class PromptTemplate:
    """One node's fixed prompt.

    ``stimulus_spans`` are half-open ``(start, end)`` character offsets into
    ``body``.  Dropping them yields the stimulation-off variant.
    """

    id: str
    node_kind: NodeKind | None
    body: str
    stimulus_spans: tuple[tuple[int, int], ...] = ()
    language: str = DEFAULT_LANGUAGE

    def __post_init__(self):
        names = placeholders(self.body)
        if self.node_kind is not None:
            extra = set(names) - SLOT_VOCABULARY[self.node_kind]
            if extra:
                raise TemplateError(
                    f"template {self.id}: slots {sorted(extra)} not allowed for {self.node_kind.value}"
                )
        prev_end = 0
        for start, end in sorted(self.stimulus_spans):
            if not (0 <= start < end <= len(self.body)):
                raise TemplateError(f"template {self.id}: span ({start}, {end}) out of bounds")
            if start < prev_end:
                raise TemplateError(f"template {self.id}: overlapping stimulus spans")
            prev_end = end
        try:
            kept = placeholders(_drop_spans(self.body, self.stimulus_spans))
        except TemplateError:
            kept = None
        if kept is None or sorted(kept) != sorted(names):
            raise TemplateError(f"template {self.id}: stimulus spans cut through placeholders")

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(placeholders(self.body))

    @classmethod
    def from_marked(cls, id: str, node_kind: NodeKind | None, marked: str,
                    language: str = DEFAULT_LANGUAGE) -> "PromptTemplate":
        """Build a template from text where ``<<...>>`` wraps stimulus segments."""
        body, spans = [], []
        pos = length = 0
        while True:
            i = marked.find(_MARK_OPEN, pos)
            if i < 0:
                body.append(marked[pos:])
                break
            j = marked.find(_MARK_CLOSE, i)
            if j < 0:
                raise TemplateError(f"template {id}: unclosed stimulus marker")
            plain = marked[pos:i]
            stim = marked[i + len(_MARK_OPEN):j]
            body.extend([plain, stim])
            length += len(plain)
            spans.append((length, length + len(stim)))
            length += len(stim)
            pos = j + len(_MARK_CLOSE)
        return cls(id, node_kind, "".join(body), tuple(spans), language)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "node_kind": self.node_kind.value if self.node_kind else None,
            "body": self.body,
            "stimulus_spans": [list(s) for s in self.stimulus_spans],
            "language": self.language,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "PromptTemplate":
        kind = rec.get("node_kind")
        return cls(
            id=rec["id"],
            node_kind=NodeKind(kind) if kind else None,
            body=rec["body"],
            stimulus_spans=tuple(tuple(s) for s in rec.get("stimulus_spans", [])),
            language=rec.get("language", DEFAULT_LANGUAGE),
        )


def _drop_spans(body: str, spans: Iterable[tuple[int, int]]) -> str:
    out, pos = [], 0
    for start, end in sorted(spans):
        out.append(body[pos:start])
        pos = end
    out.append(body[pos:])
    return "".join(out)


def strip_stimulation(template: PromptTemplate) -> PromptTemplate:
    return PromptTemplate(
        template.id, template.node_kind, _drop_spans(template.body, template.stimulus_spans),
        (), template.language,
    )


@dataclass(frozen=True)
class StimulationLexicon:
    tokens: frozenset[str]

    def __post_init__(self):
        if any(not t for t in self.tokens):
            raise TemplateError("lexicon tokens must be non-empty")
        clash = {t for t in self.tokens if t.strip("{}") in ALL_SLOTS}
        if clash:
            raise TemplateError(f"lexicon tokens clash with slot names: {sorted(clash)}")

    def found_in(self, text: str) -> set[str]:
        return {t for t in self.tokens if t in text}


def render(template: PromptTemplate, bindings: Mapping[str, str], stimulation: bool = True) -> str:
    slots = template.slots
    missing = sorted(slots - set(bindings))
    if missing:
        raise BindingError(f"template {template.id}: missing binding for {', '.join(missing)}")
    extra = sorted(set(bindings) - slots)
    if extra:
        raise BindingError(f"template {template.id}: unexpected binding {', '.join(extra)}")
    body = template.body if stimulation else strip_stimulation(template).body

    def sub(m: re.Match) -> str:
        tok = m.group(0)
        if tok == "{{":
            return "{"
        if tok == "}}":
            return "}"
        return bindings[m.group(1)]

    return _TOKEN.sub(sub, body)


# --------------------------------------------------------------------------
# Template packs


@dataclass(frozen=True)
class TemplatePack:
    language: str
    templates: Mapping[NodeKind, PromptTemplate]
    lexicon: StimulationLexicon
    judge: PromptTemplate
    instructions: Mapping[str, str] = field(default_factory=dict)

    def __getitem__(self, kind: NodeKind) -> PromptTemplate:
        return self.templates[kind]

    def instruction(self, name: str, **kw: str) -> str:
        return self.instructions[name].format(**kw)

    def to_dict(self) -> dict:
        return {
            "language": self.language,
            "lexicon": sorted(self.lexicon.tokens),
            "templates": [self.templates[k].to_record() for k in NodeKind],
            "judge": self.judge.to_record(),
            "instructions": dict(self.instructions),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_JUDGE_SLOTS = frozenset({"question", "reference", "candidate"})
_REQUIRED_INSTRUCTIONS = ("reformat_solutions", "single_approach", "no_reference")


def pack_from_dict(data: Mapping) -> TemplatePack:
    try:
        lexicon = StimulationLexicon(frozenset(data["lexicon"]))
        records = data["templates"]
        judge = PromptTemplate.from_record(data["judge"])
        language = data["language"]
    except KeyError as exc:
        raise TemplateError(f"template pack missing field {exc}") from None
    templates: dict[NodeKind, PromptTemplate] = {}
    for rec in records:
        t = PromptTemplate.from_record(rec)
        if t.node_kind is None:
            raise TemplateError(f"template {t.id} has no node_kind")
        if t.node_kind in templates:
            raise TemplateError(f"duplicate template for {t.node_kind.value}")
        templates[t.node_kind] = t
    absent = [k.value for k in NodeKind if k not in templates]
    if absent:
        raise TemplateError(f"template pack lacks node kinds: {', '.join(absent)}")
    for kind, t in templates.items():
        if t.slots != SLOT_VOCABULARY[kind]:
            raise TemplateError(
                f"template {t.id}: slots {sorted(t.slots)} != required {sorted(SLOT_VOCABULARY[kind])}"
            )
    if judge.slots != _JUDGE_SLOTS:
        raise TemplateError(f"judge template slots must be {sorted(_JUDGE_SLOTS)}")
    instructions = dict(data.get("instructions", {}))
    for name in _REQUIRED_INSTRUCTIONS:
        if name not in instructions:
            raise TemplateError(f"template pack missing instruction {name}")
    for t in [*templates.values(), judge]:
        leaked = lexicon.found_in(strip_stimulation(t).body)
        if leaked:
            raise TemplateError(
                f"template {t.id}: stimulus tokens outside marked spans: {sorted(leaked)}"
            )
    return TemplatePack(language, templates, lexicon, judge, instructions)


def load_pack(path: str | Path) -> TemplatePack:
    with Path(path).open(encoding="utf-8") as fh:
        return pack_from_dict(json.load(fh))


def default_templates(language: str = DEFAULT_LANGUAGE) -> TemplatePack:
    if language not in SUPPORTED_LANGUAGES:
        raise UnsupportedLanguage(f"unsupported language {language!r}; have {SUPPORTED_LANGUAGES}")
    text = resources.files("apgp").joinpath("packs", f"{language}.json").read_text("utf-8")
    return pack_from_dict(json.loads(text))


# --------------------------------------------------------------------------
# Bindings


class MissingUpstream(KeyError):
    """A node ran before an output it depends on existed."""


def format_solutions(solutions: Iterable[str]) -> str:
    return "\n\n".join(f"SOLUTION {i}: {s}" for i, s in enumerate(solutions, 1))


def assemble_bindings(kind: NodeKind, outputs: Mapping[str, str], problem: str) -> dict[str, str]:
    """Slot values for ``kind`` taken from earlier node outputs.

    ``outputs`` is keyed by node id; the canonical graph uses the kind value
    as the id.  The generate node's recorded output is already the
    marker-joined solution list, and the validate node's recorded output is
    the revised solution when the verdict was a failure.
    """

    def need(node: NodeKind) -> str:
        try:
            value = outputs[node.value]
        except KeyError:
            raise MissingUpstream(f"{kind.value} needs output of {node.value}") from None
        if not value.strip():
            raise MissingUpstream(f"{kind.value} needs non-empty output of {node.value}")
        return value

    if kind is NodeKind.DEFINE:
        if not problem.strip():
            raise MissingUpstream("define needs a non-empty problem")
        return {"problem": problem}
    definition = need(NodeKind.DEFINE)
    if kind is NodeKind.GENERATE:
        return {"definition": definition}
    if kind is NodeKind.AGGREGATE:
        return {"definition": definition, "solutions": need(NodeKind.GENERATE)}
    if kind is NodeKind.ANSWER:
        return {"definition": definition, "solution": need(NodeKind.AGGREGATE)}
    if kind is NodeKind.VALIDATE:
        return {"definition": definition, "answer": need(NodeKind.ANSWER)}
    if kind is NodeKind.REANSWER:
        return {"definition": definition, "solution": need(NodeKind.VALIDATE)}
    raise ValueError(kind)
