"""Command-line interface.

Subcommands mirror the pipeline: ``registry ingest`` and ``registry
filter`` prepare repository listings, ``index`` builds a sorry database,
``dedup`` and ``select`` shape it, ``verify`` checks one proposal,
``run`` evaluates provers over a slice, and ``report`` renders metrics.

Exit codes: 0 success, 1 operational failure (and ``verify`` when the
proposal is not accepted), 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

from .db import load_database, save_database
from .errors import SorryForgeError
from .harness import (
    ProverSpec,
    WorkspaceTaskEnvironment,
    build_backend,
    build_provers,
    category_resolver,
    load_run_records,
    run_evaluation,
    select_test_slice,
    MANIFEST_NAME,
)
from .indexer import IndexerConfig, index_listings
from .metrics import compute_metrics, emit_report
from .model import (
    DatasetSnapshot,
    ProofProposal,
    parse_timestamp,
)
from .registry import (
    DEFAULT_ACTIVITY_POLICY,
    SinceDate,
    WithinWindow,
    filter_eligible,
    ingest_registry,
    listing_from_json,
    listing_to_json,
    load_category_rules,
    load_license_allowlist,
    with_category,
)
from .verifier import verdict_json
from .workspace import DEFAULT_BUILD_COMMAND, DEFAULT_BUILD_TIMEOUT_S

__all__ = ["main", "build_parser"]


def _eprint(message: str) -> None:
    print(message, file=sys.stderr)


def _write_json(path: str | None, payload: Any) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")


def _read_json(path: str) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _load_config(path: str | None) -> tuple[dict[str, Any], Path]:
    if path is None:
        return {}, Path.cwd()
    config = _read_json(path)
    if not isinstance(config, dict):
        raise SorryForgeError(f"config must be a JSON object: {path}")
    return config, Path(path).resolve().parent


def _environment_from_config(config: Mapping[str, Any], base_dir: Path) -> WorkspaceTaskEnvironment:
    backends, default_backend = build_backend(config.get("backend", {"kind": "real"}), base_dir)
    return WorkspaceTaskEnvironment(
        cache_dir=config.get("cache_dir"),
        backends=backends,
        default_backend=default_backend,
        build_command=tuple(config.get("build_command", DEFAULT_BUILD_COMMAND)),
        build_timeout_s=float(config.get("build_timeout_s", DEFAULT_BUILD_TIMEOUT_S)),
        repl_timeout_s=float(config.get("repl_timeout_s", 300.0)),
    )


def _indexer_config(config: Mapping[str, Any], base_dir: Path) -> IndexerConfig:
    backends, default_backend = build_backend(config.get("backend", {"kind": "real"}), base_dir)
    inclusion = config.get("inclusion_date")
    return IndexerConfig(
        cache_dir=config.get("cache_dir"),
        build_command=tuple(config.get("build_command", DEFAULT_BUILD_COMMAND)),
        build_timeout_s=float(config.get("build_timeout_s", DEFAULT_BUILD_TIMEOUT_S)),
        repl_timeout_s=float(config.get("repl_timeout_s", 300.0)),
        inclusion_date=parse_timestamp(str(inclusion)) if inclusion else None,
        backends=backends,
        default_backend=default_backend,
    )


def _load_listings(path: str) -> list:
    entries = _read_json(path)
    if not isinstance(entries, list):
        raise SorryForgeError(f"listings file must be a JSON list: {path}")
    return [listing_from_json(entry) for entry in entries]


def _cmd_registry_ingest(args: argparse.Namespace) -> int:
    raw = Path(args.input).read_text(encoding="utf-8")
    result = ingest_registry(raw)
    _write_json(args.output, [listing_to_json(listing) for listing in result.listings])
    _eprint(f"ingested {len(result.listings)} listings, dropped {result.dropped}")
    return 0


def _cmd_registry_filter(args: argparse.Namespace) -> int:
    listings = _load_listings(args.input)
    if args.since:
        policy = SinceDate(parse_timestamp(args.since))
    elif args.window_days:
        policy = WithinWindow(days=args.window_days)
    else:
        policy = DEFAULT_ACTIVITY_POLICY
    now = parse_timestamp(args.now) if args.now else datetime.now(tz=timezone.utc)
    licenses = load_license_allowlist(args.licenses) if args.licenses else None
    kept = filter_eligible(listings, policy, now, licenses)
    if args.categorize:
        rules = load_category_rules(args.rules)
        kept = [with_category(listing, rules) for listing in kept]
    _write_json(args.output, [listing_to_json(listing) for listing in kept])
    _eprint(f"kept {len(kept)} of {len(listings)} listings")
    return 0


def _cmd_index(args: argparse.Namespace) -> int:
    listings = _load_listings(args.repos)
    config, base_dir = _load_config(args.config)
    indexer_config = _indexer_config(config, base_dir)
    records, stats, failures = index_listings(listings, indexer_config, workers=args.workers)
    for remote, reason in sorted(failures.items()):
        _eprint(f"failed: {remote}: {reason}")
    cutoff = parse_timestamp(args.cutoff) if args.cutoff else datetime.now(tz=timezone.utc)
    snapshot = DatasetSnapshot.build(args.name, cutoff, records, category_of=category_resolver())
    violations = snapshot.validate()
    if violations:
        raise SorryForgeError(f"refusing to write invalid snapshot: {violations[0]}")
    save_database(snapshot, args.db)
    summary = {
        "records": len(records),
        "repos": {remote: stat.as_json() for remote, stat in stats.items()},
        "failures": failures,
    }
    print(json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False))
    if listings and not stats:
        return 1
    return 0


def _cmd_dedup(args: argparse.Namespace) -> int:
    from .indexer import deduplicate

    snapshot = load_database(args.db)
    before = len(snapshot.records)
    records = deduplicate(snapshot.records)
    result = DatasetSnapshot.build(snapshot.name, snapshot.cutoff, records, category_of=category_resolver())
    save_database(result, args.output or args.db)
    _eprint(f"kept {len(records)} of {before} records")
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    snapshot = load_database(args.db)
    selected = select_test_slice(snapshot, args.n)
    if args.name:
        selected = DatasetSnapshot.build(args.name, selected.cutoff, selected.records)
    save_database(selected, args.out)
    _eprint(f"selected {len(selected.records)} of {len(snapshot.records)} records")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    snapshot = load_database(args.db)
    matches = [r for r in snapshot.records if r.id == args.id or r.id.startswith(args.id)]
    if not matches:
        raise SorryForgeError(f"no record with id {args.id}")
    if len(matches) > 1:
        raise SorryForgeError(f"id prefix {args.id} is ambiguous ({len(matches)} records)")
    record = matches[0]

    if args.proposal is not None:
        text = Path(args.proposal).read_text(encoding="utf-8").rstrip("\n")
    else:
        text = args.proposal_text
    proposal = ProofProposal(sorry_id=record.id, text=text, origin=args.origin, iteration=0)

    config, base_dir = _load_config(args.config)
    environment = _environment_from_config(config, base_dir)
    try:
        _, verify = environment.open_task(record)
        verdict = verify(proposal)
    finally:
        environment.close()
    print(json.dumps(verdict_json(proposal, verdict), indent=2, sort_keys=True, ensure_ascii=False))
    return 0 if verdict.accepted else 1


def _cmd_run(args: argparse.Namespace) -> int:
    snapshot = load_database(args.slice)
    prover_config = _read_json(args.provers)
    if not isinstance(prover_config, dict):
        raise SorryForgeError(f"prover config must be a JSON object: {args.provers}")
    provers = build_provers(prover_config, Path(args.provers).resolve().parent)
    if not provers:
        raise SorryForgeError("prover config defines no provers")
    config, base_dir = _load_config(args.config)
    environment = _environment_from_config(config, base_dir)
    try:
        runs = run_evaluation(
            snapshot,
            provers,
            environment,
            args.out,
            workers=args.workers,
        )
    finally:
        environment.close()
    solved = len({run.sorry_id for run in runs if run.solved})
    _eprint(f"{len(runs)} runs over {len(snapshot.records)} tasks; {solved} tasks solved")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    manifest_path = Path(args.runs) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise SorryForgeError(f"no run manifest under {args.runs}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    specs = [ProverSpec.from_json(entry) for entry in manifest.get("provers", [])]
    runs = load_run_records(args.runs)
    table = compute_metrics(runs, specs)
    rendered = emit_report(table, format=args.format)
    if args.output and args.output != "-":
        target = Path(args.output)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(rendered, encoding="utf-8")
    else:
        sys.stdout.write(rendered)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sorryforge", description="Index, verify, and evaluate Lean sorry obligations.")
    sub = parser.add_subparsers(dest="command", required=True)

    registry = sub.add_parser("registry", help="manage repository listings")
    registry_sub = registry.add_subparsers(dest="registry_command", required=True)

    ingest = registry_sub.add_parser("ingest", help="parse a raw registry document")
    ingest.add_argument("--input", required=True)
    ingest.add_argument("--output", default="-")
    ingest.set_defaults(func=_cmd_registry_ingest)

    filt = registry_sub.add_parser("filter", help="apply eligibility rules to listings")
    filt.add_argument("--input", required=True)
    filt.add_argument("--output", default="-")
    filt.add_argument("--since", help="keep repos updated at or after this timestamp")
    filt.add_argument("--window-days", type=int, help="keep repos updated within this trailing window")
    filt.add_argument("--now", help="reference time for the activity window (default: current time)")
    filt.add_argument("--licenses", help="license allow-list file (default: built-in)")
    filt.add_argument("--categorize", action="store_true", help="attach repository categories")
    filt.add_argument("--rules", help="category rules file (default: built-in)")
    filt.set_defaults(func=_cmd_registry_filter)

    index = sub.add_parser("index", help="index sorries from repositories into a database")
    index.add_argument("--repos", required=True, help="listings file from registry filter")
    index.add_argument("--db", required=True, help="output database path (overwritten)")
    index.add_argument("--config", help="environment config file")
    index.add_argument("--name", default="snapshot")
    index.add_argument("--cutoff", help="snapshot cutoff timestamp (default: now)")
    index.add_argument("--workers", type=int, default=4)
    index.set_defaults(func=_cmd_index)

    dedup = sub.add_parser("dedup", help="deduplicate a database in place")
    dedup.add_argument("--db", required=True)
    dedup.add_argument("--output", help="write here instead of overwriting --db")
    dedup.set_defaults(func=_cmd_dedup)

    select = sub.add_parser("select", help="select a balanced test slice")
    select.add_argument("--db", required=True)
    select.add_argument("--n", "-n", type=int, required=True)
    select.add_argument("--out", required=True)
    select.add_argument("--name", help="rename the selected slice")
    select.set_defaults(func=_cmd_select)

    verify = sub.add_parser("verify", help="verify one proposal against one record")
    verify.add_argument("--db", required=True)
    verify.add_argument("--id", required=True, help="record id (unique prefix accepted)")
    group = verify.add_mutually_exclusive_group(required=True)
    group.add_argument("--proposal", help="file holding the replacement text")
    group.add_argument("--proposal-text", help="replacement text given inline")
    verify.add_argument("--config", help="environment config file")
    verify.add_argument("--origin", default="cli")
    verify.set_defaults(func=_cmd_verify)

    run = sub.add_parser("run", help="evaluate provers over a database slice")
    run.add_argument("--slice", required=True, help="slice database file")
    run.add_argument("--provers", required=True, help="prover config file")
    run.add_argument("--config", help="environment config file")
    run.add_argument("--out", required=True, help="output directory for run logs")
    run.add_argument("--workers", type=int, default=1)
    run.set_defaults(func=_cmd_run)

    report = sub.add_parser("report", help="render metrics from run logs")
    report.add_argument("--runs", required=True, help="run output directory")
    report.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    report.add_argument("--output", help="write here instead of stdout")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SorryForgeError as exc:
        _eprint(f"error: {exc}")
        return 1
    except FileNotFoundError as exc:
        _eprint(f"error: file not found: {exc.filename or exc}")
        return 1
    except json.JSONDecodeError as exc:
        _eprint(f"error: invalid JSON: {exc}")
        return 1
    except OSError as exc:
        _eprint(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
