"""Command-line front end: solve, bench, ablation, transcript."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import AppConfig, ConfigError, load_config
from .graph import append_transcript, read_transcripts
from .harness import (
    DatasetRecord, JudgeConfig, MalformedDataset, RunReport, compare_runs, load_bbh_task,
    load_qa_pairs, load_verdicts, report_from_verdicts, run_benchmark,
)
from .pipeline import PipelineOptions, ProblemStatement, SolveAborted, solve
from .prompts import TemplateError, TemplatePack, default_templates, load_pack
from .provider import Provider, ScriptedProvider, build_provider

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
TRANSCRIPTS = Path("transcripts") / "runs.jsonl"


class UsageError(Exception):
    """Bad input of any kind; maps to exit code 2."""


def _templates(args, config: AppConfig, language: str) -> TemplatePack:
    path = getattr(args, "templates", None) or config.templates
    try:
        return load_pack(path) if path else default_templates(language)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load templates: {exc}") from None


def _provider(script: str | None, config: AppConfig) -> Provider:
    if script:
        try:
            return ScriptedProvider.from_file(script)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load script {script}: {exc}") from None
    return build_provider(config.provider)


def _out_dir(args, config: AppConfig) -> Path:
    out = Path(args.out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------


def cmd_solve(args, config: AppConfig) -> int:
    if args.problem_file:
        try:
            text = Path(args.problem_file).read_text("utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read problem file: {exc}") from None
    else:
        text = args.problem
    if not text or not text.strip():
        raise UsageError("problem text is empty")
    language = args.language or config.language
    templates = _templates(args, config, language)
    provider = _provider(args.scripted, config)
    options = config.pipeline_options(stimulation=False if args.no_stimulation else None)
    problem = ProblemStatement.from_text(text.strip(), language)
    out = _out_dir(args, config)
    try:
        result = solve(problem, templates, provider, options)
    except SolveAborted as exc:
        append_transcript(out / TRANSCRIPTS, exc.transcript)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    append_transcript(out / TRANSCRIPTS, result.transcript)
    print(f"path: {result.path.value}")
    print(f"calls: {len(result.transcript.entries)}")
    print("answer:")
    print(result.answer.text)
    return EXIT_OK


def _load_records(args, config: AppConfig) -> list[tuple[list[DatasetRecord], str | None]]:
    """Datasets named on the command line, else those in the config."""
    specs = [(p, args.format, None) for p in args.dataset] if args.dataset else [
        (d.path, d.format, d.language) for d in config.datasets
    ]
    if not specs:
        raise UsageError("no dataset given (use --dataset or the config's datasets list)")
    loaded = []
    for path, fmt, lang in specs:
        if fmt is None:
            raise UsageError(f"--format is required for {path}")
        try:
            if fmt == "bbh":
                recs = load_bbh_task(path, lang or config.language)
            else:
                recs = load_qa_pairs(path, lang or "zh")
        except (OSError, MalformedDataset) as exc:
            raise UsageError(f"cannot load dataset {path}: {exc}") from None
        loaded.append((recs, lang or ("zh" if fmt == "qa" else config.language)))
    return loaded


def _bench_arm(args, config: AppConfig, stimulation: bool, script: str | None,
               out: Path) -> RunReport:
    judge = JudgeConfig(method=args.judge or config.judge.method, per_task=dict(config.judge.per_task),
                        model=config.judge.model)
    if args.judge:
        judge.per_task = {}
    options: PipelineOptions = config.pipeline_options(stimulation=stimulation)
    parallelism = args.parallelism or config.parallelism
    provider = _provider(script, config)
    reports = []
    for records, language in _load_records(args, config):
        templates = _templates(args, config, language)
        reports.append(run_benchmark(records, templates, provider, options, judge, parallelism,
                                     out / TRANSCRIPTS))
    if len(reports) == 1:
        report = reports[0]
    else:
        meta = dict(reports[0].metadata)
        meta["templates"] = sorted({r.metadata["templates"] for r in reports})
        report = report_from_verdicts([v for r in reports for v in r.records], meta)
    _write_report(report, out)
    return report


def _write_report(report: RunReport, out: Path) -> None:
    (out / "report.json").write_text(report.to_json() + "\n", "utf-8")
    (out / "report.txt").write_text(report.table() + "\n" + report.summary_line() + "\n", "utf-8")


def _arm_failed(report: RunReport) -> bool:
    return report.overall.error > 0 and report.overall.judged == 0


def cmd_bench(args, config: AppConfig) -> int:
    out = _out_dir(args, config)
    if args.replay:
        try:
            verdicts = load_verdicts(args.replay)
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"cannot replay {args.replay}: {exc}") from None
        report = report_from_verdicts(verdicts, {"replayed_from": str(args.replay)})
        _write_report(report, out)
    else:
        report = _bench_arm(args, config, not args.no_stimulation, args.scripted, out)
    print(report.table(), end="")
    print(report.summary_line())
    return EXIT_ABORT if _arm_failed(report) else EXIT_OK


def cmd_ablation(args, config: AppConfig) -> int:
    out = _out_dir(args, config)
    arms: dict[str, RunReport] = {}
    status = EXIT_OK
    for name, stim, script in (("stimulation_on", True, args.scripted),
                               ("stimulation_off", False, args.scripted_off or args.scripted)):
        arm_out = out / name
        arm_out.mkdir(parents=True, exist_ok=True)
        try:
            report = _bench_arm(args, config, stim, script, arm_out)
        except UsageError:
            raise
        except Exception as exc:
            print(f"error: arm {name} failed: {exc}", file=sys.stderr)
            status = EXIT_ABORT
            continue
        print(f"[{name}] {report.summary_line()}")
        if _arm_failed(report):
            status = EXIT_ABORT
        arms[name] = report
    if len(arms) == 2:
        comparison = compare_runs(arms["stimulation_on"], arms["stimulation_off"])
        (out / "comparison.json").write_text(json.dumps(comparison.to_dict(), indent=2) + "\n", "utf-8")
        (out / "comparison.txt").write_text(comparison.table(), "utf-8")
        print(comparison.table(), end="")
    return status


def cmd_transcript(args, config: AppConfig) -> int:
    try:
        runs = list(read_transcripts(args.file))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read transcripts: {exc}") from None
    if args.run:
        runs = [t for t in runs if t.run_id == args.run]
        if not runs:
            raise UsageError(f"no run {args.run} in {args.file}")
    for t in runs:
        print(f"run {t.run_id}  ({len(t.entries)} calls, {t.started_at} .. {t.finished_at})")
        for i, e in enumerate(t.entries):
            warn = f"  [{'; '.join(e.warnings)}]" if e.warnings else ""
            if args.full:
                print(f"--- {i} {e.node_kind} ({e.latency_ms:.0f} ms){warn}")
                print(">>> prompt\n" + e.prompt)
                print("<<< response\n" + e.response)
            else:
                first = e.parsed.strip().splitlines()[0] if e.parsed.strip() else ""
                print(f"  {i}  {e.node_kind:<10} {first[:70]}{warn}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apgp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (default: $APGP_CONFIG)")
        p.add_argument("--templates", help="alternate template pack (JSON)")
        p.add_argument("--no-stimulation", action="store_true", help="strip stimulus segments")
        p.add_argument("--scripted", metavar="SCRIPT", help="answer from a script file instead of a model")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("solve", help="solve one problem")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--problem")
    src.add_argument("--problem-file")
    p.add_argument("--language", help="template language (en, zh)")
    common(p)
    p.set_defaults(func=cmd_solve)

    def bench_args(p):
        common(p)
        p.add_argument("--dataset", action="append", default=[], help="dataset file (repeatable)")
        p.add_argument("--format", choices=["bbh", "qa"])
        p.add_argument("--parallelism", type=int)
        p.add_argument("--judge", choices=["exact", "model"])

    p = sub.add_parser("bench", help="run a benchmark")
    bench_args(p)
    p.add_argument("--replay", metavar="VERDICTS", help="re-aggregate stored per-record verdicts")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablation", help="benchmark with and without stimulation, then compare")
    bench_args(p)
    p.add_argument("--scripted-off", metavar="SCRIPT", help="script for the stimulation-off arm")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("transcript", help="inspect a transcript file")
    p.add_argument("file")
    p.add_argument("--run", help="only this run id")
    p.add_argument("--full", action="store_true", help="print prompts and responses")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_transcript)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "parallelism", None) is not None and args.parallelism < 1:
        print("error: --parallelism must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except (ConfigError, UsageError, TemplateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
