from __future__ import annotations

import json

import pytest
from hypothesis import given, settings, strategies as st

from apgp.graph import NodeKind
from apgp.pipeline import (
    Answer, EmptyNodeOutput, MalformedSolutions, Origin, Path, PipelineOptions, ProblemDefinition,
    ProblemStatement, Solution, SolveAborted, aggregate, definite, generate_solutions, get_answer,
    parse_solutions, parse_verdict, solve, validate,
)
from apgp.prompts import assemble_bindings, render
from conftest import (
    BASE_SCRIPT, FAIL_SCRIPT, FIXTURES, SUCCESS_SCRIPT, THREE, UNPARSEABLE_SCRIPT, scripted,
)

PROBLEM = ProblemStatement("p1", "P_DESC: how many legs do 3 chickens have?")
DEF = ProblemDefinition("P_DEF")


def run(script, **opts):
    provider = scripted(script)
    return solve(PROBLEM, _pack(), provider, PipelineOptions(**opts)), provider


def _pack():
    from apgp.prompts import default_templates
    return default_templates("en")


# -- parsing -----------------------------------------------------------------


def test_parse_three_markers():
    assert parse_solutions("SOLUTION 1: a\nSOLUTION 2: b\nSOLUTION 3: c") == {1: "a", 2: "b", 3: "c"}


def test_parse_markers_out_of_order():
    found = parse_solutions("SOLUTION 2: b\nSOLUTION 1: a\nSOLUTION 3: c")
    assert [found[i] for i in sorted(found)] == ["a", "b", "c"]


def test_parse_markers_lenient():
    text = "**Solution 1:** a\n## solution 2 - b\n> SOLUTION 3) c\nSOLUTION 4: ignored"
    assert parse_solutions(text) == {1: "a", 2: "b", 3: "c"}


def test_parse_multiline_sections():
    found = parse_solutions("intro\nSOLUTION 1: line one\nline two\nSOLUTION 2: b\nSOLUTION 3: c")
    assert found[1] == "line one\nline two"


def test_verdict_success():
    v = parse_verdict("VERDICT: SUCCESS — the answer holds")
    assert v.success and v.revised_solution is None and v.parse_status == "parsed"
    assert v.rationale == "the answer holds"


def test_verdict_fail_with_revision():
    v = parse_verdict("VERDICT: FAIL\nREVISED SOLUTION: try Y")
    assert not v.success and v.revised_solution == Solution("try Y", Origin.REVISED)


def test_verdict_case_insensitive_first_wins():
    v = parse_verdict("verdict:  fail\nrevised solution:  Z\nVERDICT: SUCCESS")
    assert not v.success and v.revised_solution.text == "Z\nVERDICT: SUCCESS"
    assert parse_verdict("Verdict : Success\nVERDICT: FAIL").success


def test_verdict_unparseable():
    v = parse_verdict("I think it's fine.")
    assert v.parse_status == "unparseable" and not v.success


def test_fail_without_revision_is_unparseable():
    assert parse_verdict("VERDICT: FAIL and no fix").parse_status == "unparseable"


@settings(max_examples=500)
@given(st.text())
def test_verdict_totality(text):
    v = parse_verdict(text)
    assert v.parse_status in ("parsed", "unparseable")
    if not v.success and v.parse_status == "parsed":
        assert v.revised_solution is not None


@given(st.text())
def test_solution_parser_totality(text):
    found = parse_solutions(text)
    assert set(found) <= {1, 2, 3} and all(v.strip() for v in found.values())


# -- single nodes ------------------------------------------------------------


def test_definite_pass_through(en_pack):
    p = scripted({"define": "An abstraction: X"})
    assert definite(PROBLEM, en_pack, p).text == "An abstraction: X"


@pytest.mark.parametrize("reply", ["", "   \n\t"])
def test_definite_empty_is_error(en_pack, reply):
    with pytest.raises(EmptyNodeOutput) as info:
        definite(PROBLEM, en_pack, scripted({"define": reply}))
    assert info.value.kind is NodeKind.DEFINE


def test_generate_single_call(en_pack):
    p = scripted({"generate": "SOLUTION 1: a\nSOLUTION 2: b\nSOLUTION 3: c"})
    sols = generate_solutions(DEF, en_pack, p)
    assert [s.text for s in sols] == ["a", "b", "c"]
    assert [(s.origin, s.index) for s in sols] == [(Origin.GENERATED, i) for i in (1, 2, 3)]
    assert p.calls == 1


def test_generate_reask_then_malformed(en_pack):
    p = scripted({"generate": ["SOLUTION 1: a\nSOLUTION 2: b", "no markers here"]})
    sols = generate_solutions(DEF, en_pack, p)
    # Re-ask produced nothing: fall back to the first parse and duplicate.
    assert [s.text for s in sols] == ["a", "b", "b"]
    assert p.calls == 2
    assert "did not follow the required format" in p.requests[1].messages[-1][1]

    p = scripted({"generate": ["nothing", "still nothing"]})
    with pytest.raises(MalformedSolutions) as info:
        generate_solutions(DEF, en_pack, p)
    assert info.value.raw == "still nothing"


def test_generate_reask_recovers(en_pack):
    p = scripted({"generate": ["SOLUTION 1: a", THREE]})
    assert [s.text for s in generate_solutions(DEF, en_pack, p)] == ["alpha plan", "beta plan", "gamma plan"]


def test_generate_triple_mode(en_pack):
    p = scripted({"generate": ["SOLUTION 1: a", "b", "SOLUTION 3: c"]})
    sols = generate_solutions(DEF, en_pack, p, PipelineOptions(generate_mode="triple"))
    assert [s.text for s in sols] == ["a", "b", "c"]
    assert p.calls == 3


def test_aggregate_never_short_circuits(en_pack):
    p = scripted({"aggregate": "merged"})
    same = Solution("a", Origin.GENERATED, 1)
    best = aggregate(DEF, same, same, same, en_pack, p)
    assert best == Solution("merged", Origin.AGGREGATED)
    assert p.calls == 1


def test_get_answer_origin_mapping(en_pack):
    p = scripted({"answer": "A", "reanswer": "B"})
    assert get_answer(DEF, Solution("s", Origin.AGGREGATED), en_pack, p) == Answer("A", "first_pass")
    assert get_answer(DEF, Solution("s", Origin.REVISED), en_pack, p) == Answer("B", "retry")
    with pytest.raises(ValueError):
        get_answer(DEF, Solution("s", Origin.GENERATED, 1), en_pack, p)


def test_validate_never_raises_on_empty_reply(en_pack):
    v = validate(DEF, Answer("A", "first_pass"), en_pack, scripted({"validate": ""}))
    assert v.parse_status == "unparseable"


# -- end to end --------------------------------------------------------------


def test_success_path():
    result, provider = run(SUCCESS_SCRIPT)
    assert result.path is Path.SUCCESS_FIRST_PASS
    assert provider.calls == 5
    assert result.answer == Answer("ANS: first answer", "first_pass")
    answer_entry = result.transcript.entries[3]
    assert answer_entry.node_kind == "answer" and answer_entry.response == result.answer.text


def test_fail_path():
    result, provider = run(FAIL_SCRIPT)
    assert result.path is Path.RETRIED
    assert provider.calls == 6 and len(result.transcript.entries) == 6
    assert result.answer == Answer("ANS_FINAL: retried answer", "retry")
    assert result.verdict.revised_solution.text == "S_FINAL: use metres"


def test_unparseable_path():
    result, provider = run(UNPARSEABLE_SCRIPT)
    assert result.path is Path.VALIDATION_UNPARSEABLE
    assert provider.calls == 5
    assert result.answer.text == "ANS: first answer"


def test_zero_budget_fail_keeps_first_answer():
    result, provider = run(FAIL_SCRIPT, max_backtracks=0)
    assert result.path is Path.FAILED_NO_RETRY
    assert provider.calls == 5 and result.answer.produced_by == "first_pass"


def test_sheep_counting_fixture(en_pack):
    script = json.loads((FIXTURES / "sheep_counting.json").read_text())
    problem = ProblemStatement.from_text(
        "How to prevent falling asleep when counting the number of sheep for the herder?")
    result = solve(problem, en_pack, scripted(script))
    assert result.path is Path.SUCCESS_FIRST_PASS
    assert result.answer.text == script["answer"]
    assert len(result.solutions) == 3
    assert "tally counter" in result.solutions[2].text


def test_argument_fidelity():
    result, _ = run(FAIL_SCRIPT)
    by_kind = {e.node_kind: e.prompt for e in result.transcript.entries}
    assert PROBLEM.text in by_kind["define"]
    for kind in ("generate", "aggregate", "answer", "validate", "reanswer"):
        assert "P_DEF: abstract restatement" in by_kind[kind], kind
    assert all(s in by_kind["aggregate"] for s in ("alpha plan", "beta plan", "gamma plan"))
    assert "S_BEST: merged plan" in by_kind["answer"]
    assert "ANS: first answer" in by_kind["validate"]
    assert "S_FINAL: use metres" in by_kind["reanswer"]
    assert "S_BEST" not in by_kind["reanswer"]


def test_prompts_match_slot_assembly(en_pack):
    """Each recorded prompt equals the template rendered from assemble_bindings."""
    result, _ = run(FAIL_SCRIPT)
    outputs = {}
    for e in result.transcript.entries:
        kind = NodeKind(e.node_kind)
        expected = render(en_pack[kind], assemble_bindings(kind, outputs, PROBLEM.text))
        assert e.prompt == expected
        outputs[e.node_id] = e.parsed


def test_provider_error_aborts_with_partial_transcript():
    script = {k: v for k, v in SUCCESS_SCRIPT.items() if k != "aggregate"}
    with pytest.raises(SolveAborted) as info:
        run(script)
    assert info.value.transcript.kinds() == ["define", "generate"]


def test_duplicate_warning_in_transcript():
    result, provider = run(BASE_SCRIPT | {"generate": ["SOLUTION 1: only", "SOLUTION 1: only"],
                                          "validate": "VERDICT: SUCCESS"})
    assert provider.calls == 6
    gen = [e for e in result.transcript.entries if e.node_kind == "generate"]
    assert len(gen) == 2 and gen[-1].warnings
    assert [s.text for s in result.solutions] == ["only"] * 3


def test_temperatures_per_node():
    _, provider = run(SUCCESS_SCRIPT)
    temps = {r.tag.node: r.temperature for r in provider.requests}
    assert temps["generate"] == 1.0
    assert all(t == 0.2 for n, t in temps.items() if n != "generate")


def test_deterministic_transcripts():
    def strip(t):
        d = t.to_dict()
        d.pop("started_at"), d.pop("finished_at")
        for e in d["entries"]:
            e.pop("latency_ms")
        return json.dumps(d, sort_keys=True)

    a, _ = run(FAIL_SCRIPT)
    b, _ = run(FAIL_SCRIPT)
    assert strip(a.transcript) == strip(b.transcript)


def test_stimulation_off_arm_same_node_sequence(en_pack):
    on, _ = run(FAIL_SCRIPT)
    off, _ = run(FAIL_SCRIPT, stimulation=False)
    assert on.transcript.kinds() == off.transcript.kinds()
    for e in off.transcript.entries:
        assert not en_pack.lexicon.found_in(e.prompt)


GEN_REPLIES = st.sampled_from([THREE, "SOLUTION 1: a\nSOLUTION 2: b", "garbage", "SOLUTION 3: c"])
VAL_REPLIES = st.one_of(
    st.sampled_from(["VERDICT: SUCCESS", "VERDICT: FAIL\nREVISED SOLUTION: y", "VERDICT: FAIL", "meh", ""]),
    st.text(max_size=40),
)


@settings(max_examples=300, deadline=None)
@given(gen=st.lists(GEN_REPLIES, min_size=2, max_size=2), val=VAL_REPLIES,
       budget=st.integers(0, 3))
def test_call_count_law(gen, val, budget):
    script = BASE_SCRIPT | {"generate": gen, "validate": val, "reanswer": "again"}
    provider = scripted(script)
    try:
        result = solve(PROBLEM, _pack(), provider, PipelineOptions(max_backtracks=budget))
    except SolveAborted as exc:
        assert isinstance(exc.cause, MalformedSolutions)
        assert provider.calls == 3
        return
    base = 6 if result.path is Path.RETRIED else 5
    assert provider.calls - base in (0, 1)
    assert provider.calls == len(result.transcript.entries)
