"""``acre`` command line: validate, describe, export-dot and replay."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
import xml.etree.ElementTree as ET
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import __version__
from .engine import ConversationManager, Direction, Message, counter_ids
from .events import EventKind
from .protocol import (
    Protocol,
    ProtocolError,
    ProtocolId,
    StateKind,
    export_dot,
    parse_protocol,
    resolve,
)
from .repository import ProtocolRepository, RepositoryError
from .terms import GroundTermError, TermSyntaxError, render_term

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2

PROBLEM_EVENTS = {EventKind.UNMATCHED, EventKind.AMBIGUOUS, EventKind.FAILED}


class TraceError(ValueError):
    pass


def _table(headers: Sequence[str], rows: Iterable[Sequence[str]], indent: str = "  ") -> List[str]:
    rows = [list(map(str, r)) for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    fmt = lambda cells: indent + "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return [fmt(headers)] + [fmt(r) for r in rows]


def _load_import_paths(dirs: Sequence[str]) -> Dict[ProtocolId, Protocol]:
    found = {}
    for d in dirs:
        for path in sorted(Path(d).glob("*.xml")):
            try:
                p = parse_protocol(path.read_bytes())
            except (OSError, ProtocolError) as exc:
                logging.getLogger(__name__).debug("ignoring %s on import path: %s", path, exc)
                continue
            found.setdefault(p.id, p)
    return found


def _resolve_file(path: str, import_path: Sequence[str], extra: Optional[Dict[ProtocolId, Protocol]] = None) -> Protocol:
    declared = parse_protocol(Path(path).read_bytes())
    lookup = _load_import_paths(import_path)
    lookup.update(extra or {})
    return resolve(declared, lookup)


# -- validate ----------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    io_error = invalid = False
    declared: Dict[str, Protocol] = {}
    for f in args.files:
        try:
            declared[f] = parse_protocol(Path(f).read_bytes())
        except OSError as exc:
            print(f"{f}: ERROR cannot read file: {exc.strerror or exc}")
            io_error = True
        except ProtocolError as exc:
            print(f"{f}: ERROR {exc}")
            invalid = True

    lookup = _load_import_paths(args.import_path)
    lookup.update({p.id: p for p in declared.values()})
    for f, p in declared.items():
        try:
            r = resolve(p, lookup)
        except ProtocolError as exc:
            print(f"{f}: ERROR {exc}")
            invalid = True
            continue
        print(f"{f}: OK {r.id} ({len(r.states)} states, {len(r.transitions)} transitions)")
    return EXIT_IO if io_error else EXIT_INVALID if invalid else EXIT_OK


# -- describe ----------------------------------------------------------------

def describe_protocol(p: Protocol) -> str:
    lines = [f"Protocol: {p.id}",
             "Imports: " + (", ".join(str(i) for i in p.source.imports) or "none"),
             "",
             f"States ({len(p.states)}):"]
    rows = []
    for s in p.states:
        origin = "" if s.owner == p.id else f"imported from {s.owner}"
        rows.append((s.name, s.kind.label(), origin))
    lines += _table(("NAME", "KIND", "ORIGIN"), rows)
    lines += ["", f"Transitions ({len(p.transitions)}):"]
    lines += _table(
        ("FROM", "TO", "PERFORMATIVE", "SENDER", "RECEIVER", "CONTENT"),
        [(t.from_state, t.to_state, t.performative, render_term(t.sender),
          render_term(t.receiver), render_term(t.content)) for t in p.transitions])
    n_initial = sum(1 for s in p.states if s.kind & StateKind.INITIAL)
    n_terminal = sum(1 for s in p.states if s.kind & StateKind.TERMINAL)
    lines += ["", f"Summary: {len(p.states)} states ({n_initial} initial, {n_terminal} terminal), "
                  f"{len(p.transitions)} transitions"]
    return "\n".join(lines) + "\n"


def cmd_describe(args: argparse.Namespace) -> int:
    try:
        p = _resolve_file(args.file, args.import_path)
    except OSError as exc:
        print(f"{args.file}: ERROR cannot read file: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except ProtocolError as exc:
        print(f"{args.file}: ERROR {exc}", file=sys.stderr)
        return EXIT_INVALID
    sys.stdout.write(describe_protocol(p))
    return EXIT_OK


# -- export-dot --------------------------------------------------------------

def cmd_export_dot(args: argparse.Namespace) -> int:
    try:
        p = _resolve_file(args.file, args.import_path)
    except OSError as exc:
        print(f"{args.file}: ERROR cannot read file: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except ProtocolError as exc:
        print(f"{args.file}: ERROR {exc}", file=sys.stderr)
        return EXIT_INVALID
    text = export_dot(p, include_imported=args.resolve)
    try:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        print(f"{args.output}: ERROR cannot write file: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


# -- replay ------------------------------------------------------------------

def read_trace(path: str) -> List[Tuple[int, Direction, Message]]:
    """Parse a JSON-lines trace; blank lines are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                if not isinstance(raw, dict):
                    raise TraceError("record is not a JSON object")
                missing = [k for k in ("sender", "receiver", "performative", "content") if k not in raw]
                if missing:
                    raise TraceError(f"missing field(s) {', '.join(missing)}")
                cid = raw.get("conversation-id", raw.get("conversation_id"))
                protocol = raw.get("protocol")
                message = Message(
                    str(raw["sender"]), str(raw["receiver"]), str(raw["performative"]), str(raw["content"]),
                    conversation_id=str(cid) if cid is not None else None,
                    protocol_id=ProtocolId.parse(protocol) if protocol else None,
                )
                direction = Direction(raw.get("direction", "received"))
            except (json.JSONDecodeError, TraceError, TermSyntaxError, GroundTermError,
                    ProtocolError, ValueError) as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            records.append((lineno, direction, message))
    return records


def _is_descriptor(path: Path) -> bool:
    try:
        return ET.parse(path).getroot().tag.rsplit("}", 1)[-1] == "repository"
    except ET.ParseError:
        return False


def load_sources(repo: ProtocolRepository, sources: Sequence[str]) -> List[ProtocolId]:
    declared = []
    for src in sources:
        path = Path(src)
        if path.is_dir():
            for f in sorted(path.glob("*.xml")):
                if not _is_descriptor(f):
                    declared.append(parse_protocol(f.read_bytes()))
        elif src.startswith(("http://", "https://")) or _is_descriptor(path):
            repo.load_repository(src)
        else:
            declared.append(parse_protocol(path.read_bytes()))
    if declared:
        repo.register(declared)
    return list(repo)


def _snapshot_rows(manager: ConversationManager):
    for row in manager.snapshot():
        bindings = ", ".join(f"{k}={render_term(v)}" for k, v in sorted(row.bindings.items()))
        yield row, bindings


def cmd_replay(args: argparse.Namespace) -> int:
    cache = False if args.no_cache else None
    repo = ProtocolRepository(cache)
    try:
        load_sources(repo, args.protocol)
    except (OSError, RepositoryError) as exc:
        print(f"ERROR loading protocols: {exc}", file=sys.stderr)
        return EXIT_IO
    except ProtocolError as exc:
        print(f"ERROR invalid protocol: {exc}", file=sys.stderr)
        return EXIT_INVALID

    try:
        records = read_trace(args.trace)
    except OSError as exc:
        print(f"{args.trace}: ERROR cannot read trace: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except TraceError as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return EXIT_IO

    index = 0
    if args.ids == "fixed":
        epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)
        id_generator = counter_ids()
        clock = lambda: epoch + timedelta(seconds=index)
    else:
        id_generator = lambda: f"acre-{uuid.uuid4().hex[:12]}"
        clock = None
    manager = ConversationManager(repo, agent=args.agent, id_generator=id_generator, clock=clock)

    problems = 0
    out = sys.stdout
    for lineno, direction, message in records:
        if args.agent and args.agent not in (message.sender, message.receiver):
            continue
        index += 1
        events = manager.ingest(message, direction)
        problems += sum(1 for e in events if e.kind in PROBLEM_EVENTS)
        if args.json:
            for e in events:
                out.write(json.dumps({"message": index, "line": lineno, **e.to_dict()}, sort_keys=True) + "\n")
        else:
            out.write(f"[{index}] line {lineno} {direction.value} {message}\n")
            for e in events:
                out.write(f"    {e.to_line()}\n")

    if args.json:
        for row, _ in _snapshot_rows(manager):
            out.write(json.dumps({"snapshot": {
                "conversation": row.conversation_id,
                "protocol": str(row.protocol_id),
                "participants": list(row.participants),
                "state": row.state,
                "status": row.status.value,
                "bindings": {k: render_term(v) for k, v in sorted(row.bindings.items())},
            }}, sort_keys=True) + "\n")
    else:
        out.write(f"\nConversations ({len(manager)}):\n")
        rows = [(row.conversation_id, str(row.protocol_id), row.state, row.status.value,
                 ",".join(row.participants), bindings) for row, bindings in _snapshot_rows(manager)]
        out.write("\n".join(_table(("ID", "PROTOCOL", "STATE", "STATUS", "PARTICIPANTS", "BINDINGS"), rows)) + "\n")
        out.write(f"\n{index} messages, {problems} problem event(s)\n")

    return EXIT_INVALID if args.strict and problems else EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acre", description="Agent conversation reasoning tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and resolve protocol files")
    p.add_argument("files", nargs="+")
    p.add_argument("--import-path", action="append", default=[], metavar="DIR",
                   help="directory holding imported protocols (repeatable)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("describe", help="print states, transitions and imports of a protocol")
    p.add_argument("file")
    p.add_argument("--import-path", action="append", default=[], metavar="DIR")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("export-dot", help="write a Graphviz rendering of a protocol")
    p.add_argument("file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--resolve", action="store_true", help="include states and transitions of imported protocols")
    p.add_argument("--import-path", action="append", default=[], metavar="DIR")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("replay", help="feed a JSON-lines message trace through a conversation manager")
    p.add_argument("-p", "--protocol", action="append", required=True, metavar="SOURCE",
                   help="protocol file, directory of protocols, or repository descriptor (repeatable)")
    p.add_argument("-t", "--trace", required=True)
    p.add_argument("--strict", action="store_true", help="exit 1 on unmatched, ambiguous or failed events")
    p.add_argument("--ids", choices=("random", "fixed"), default="random",
                   help="'fixed' numbers conversations acre-1, acre-2, ... and uses a logical clock")
    p.add_argument("--json", action="store_true", help="emit the event log as JSON lines")
    p.add_argument("--agent", metavar="NAME", help="replay only messages NAME sends or receives")
    p.add_argument("--no-cache", action="store_true", help="do not write loaded protocols to the cache")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
