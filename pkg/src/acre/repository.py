"""Protocol manager: loads, validates, caches and serves protocol definitions."""

from __future__ import annotations

import logging
import os
import threading
import urllib.parse
import urllib.request
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from .events import EngineEvent, EventKind
from .protocol import (
    Protocol,
    ProtocolError,
    ProtocolId,
    UnresolvedImportError,
    parse_protocol,
    resolve,
    write_protocol,
)

log = logging.getLogger(__name__)

DEFAULT_CACHE_DIR = ".acre-cache"
DEFAULT_TIMEOUT = 10.0

Location = Union[str, os.PathLike]


class RepositoryError(RuntimeError):
    """Loading from a location or repository descriptor failed."""


@dataclass(frozen=True)
class RepositoryDescriptor:
    base: str
    entries: Tuple[Tuple[ProtocolId, str], ...]

    def locations(self) -> List[Tuple[ProtocolId, str]]:
        return [(pid, join_location(self.base, href)) for pid, href in self.entries]


def is_url(location: Location) -> bool:
    return urllib.parse.urlparse(str(location)).scheme in ("http", "https", "file")


def join_location(base: str, relative: str) -> str:
    if is_url(relative) or os.path.isabs(relative):
        return relative
    if is_url(base):
        return urllib.parse.urljoin(base if base.endswith("/") else base + "/", relative)
    return str(Path(base) / relative)


def parent_location(location: Location) -> str:
    location = str(location)
    if is_url(location):
        return urllib.parse.urljoin(location, ".")
    return str(Path(location).resolve().parent)


def parse_descriptor(data: bytes, base: str) -> RepositoryDescriptor:
    """Read ``<repository><protocol namespace name version href/></repository>``.

    A ``base`` attribute on the root overrides the descriptor's own directory.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise RepositoryError(f"malformed repository descriptor: {exc}") from None
    if root.tag.rsplit("}", 1)[-1] != "repository":
        raise RepositoryError("repository descriptor root must be <repository>")
    base = join_location(base, root.get("base")) if root.get("base") else base
    entries = []
    seen = set()
    for n, elem in enumerate(root, 1):
        if elem.tag.rsplit("}", 1)[-1] != "protocol":
            continue
        href = elem.get("href")
        if not href:
            raise RepositoryError(f"descriptor entry {n} has no href")
        try:
            pid = ProtocolId(elem.get("namespace", ""), elem.get("name", ""), elem.get("version", ""))
        except ProtocolError as exc:
            raise RepositoryError(f"descriptor entry {n}: {exc}") from None
        if pid in seen:
            raise RepositoryError(f"descriptor lists {pid} twice")
        seen.add(pid)
        entries.append((pid, href))
    return RepositoryDescriptor(base, tuple(entries))


def _default_fetch(location: str, timeout: float) -> bytes:
    if is_url(location):
        with urllib.request.urlopen(location, timeout=timeout) as response:
            return response.read()
    return Path(location).read_bytes()


def dependency_order(protocols: Sequence[Protocol]) -> List[Protocol]:
    """Order declared protocols so that each comes after the ones it imports.

    Imports outside the batch are ignored here; they must already be known.
    """
    by_id = {p.id: p for p in protocols}
    ordered: List[Protocol] = []
    state: Dict[ProtocolId, str] = {}

    def visit(p: Protocol, path: Tuple[ProtocolId, ...]):
        if state.get(p.id) == "done":
            return
        if state.get(p.id) == "active":
            cycle = " -> ".join(str(x) for x in path + (p.id,))
            raise UnresolvedImportError(f"import cycle: {cycle}")
        state[p.id] = "active"
        for imp in p.imports:
            if imp in by_id:
                visit(by_id[imp], path + (p.id,))
        state[p.id] = "done"
        ordered.append(p)

    for p in sorted(protocols, key=lambda p: p.id):
        visit(p, ())
    return ordered


class ProtocolRepository(Mapping[ProtocolId, Protocol]):
    """Registry of resolved protocols keyed by their identity triple.

    Every successfully loaded protocol is also written to ``cache_dir`` (one
    ``namespace_name_version.xml`` file each) so that ``recover_cache`` can
    restore the registry after a restart.  Pass ``cache_dir=False`` to disable
    persistence.  Reads may happen concurrently; loads are serialised.
    """

    def __init__(
        self,
        cache_dir: Union[Location, None, bool] = None,
        *,
        timeout: float = DEFAULT_TIMEOUT,
        fetch: Optional[Callable[[str, float], bytes]] = None,
        clock: Optional[Callable[[], datetime]] = None,
    ):
        if cache_dir is None:
            cache_dir = os.environ.get("ACRE_CACHE_DIR") or DEFAULT_CACHE_DIR
        self.cache_dir: Optional[Path] = None if cache_dir is False else Path(cache_dir)
        self.timeout = timeout
        self._fetch = fetch or _default_fetch
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._protocols: Dict[ProtocolId, Protocol] = {}
        self._lock = threading.RLock()
        self._listeners: List[Callable[[EngineEvent], None]] = []

    # Mapping interface
    def __getitem__(self, pid: ProtocolId) -> Protocol:
        return self._protocols[pid]

    def __iter__(self) -> Iterator[ProtocolId]:
        return iter(list(self._protocols))

    def __len__(self) -> int:
        return len(self._protocols)

    def subscribe(self, listener: Callable[[EngineEvent], None]) -> None:
        self._listeners.append(listener)

    def _announce(self, pids: Sequence[ProtocolId]) -> None:
        for pid in pids:
            event = EngineEvent(EventKind.PROTOCOL_LOADED, str(pid), "protocol registered",
                                self._clock(), protocol_id=pid)
            for listener in self._listeners:
                listener(event)

    def cache_path(self, pid: ProtocolId) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{pid.namespace}_{pid.name}_{pid.version}.xml"

    def _read(self, location: Location) -> bytes:
        try:
            return self._fetch(str(location), self.timeout)
        except (OSError, ValueError) as exc:
            raise RepositoryError(f"cannot read {location}: {exc}") from exc

    def _stage(self, declared: Sequence[Protocol]) -> Dict[ProtocolId, Protocol]:
        """Resolve a batch against the registry without committing anything."""
        staged: Dict[ProtocolId, Protocol] = {}
        for p in dependency_order(declared):
            existing = self._protocols.get(p.id)
            if existing is not None:
                if existing.source != p:
                    raise ProtocolError(f"{p.id} is already registered with different content")
                continue
            lookup = {**self._protocols, **staged}
            staged[p.id] = resolve(p, lookup)
        return staged

    def _commit(self, staged: Dict[ProtocolId, Protocol], persist: bool = True) -> None:
        self._protocols.update(staged)
        if persist and self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            for pid, p in staged.items():
                self.cache_path(pid).write_bytes(write_protocol(p))
        self._announce(list(staged))

    def register(self, protocols: Union[Protocol, Sequence[Protocol]]) -> List[ProtocolId]:
        """Resolve and register declared protocols (all or nothing)."""
        if isinstance(protocols, Protocol):
            protocols = [protocols]
        with self._lock:
            self._commit(self._stage(protocols))
        return [p.id for p in protocols]

    def load_protocol(self, location: Location) -> ProtocolId:
        """Load one protocol file or URL; its imports must already be registered."""
        declared = parse_protocol(self._read(location))
        self.register(declared)
        log.info("loaded %s from %s", declared.id, location)
        return declared.id

    def load_repository(self, descriptor: Location) -> List[ProtocolId]:
        """Load every protocol a repository descriptor lists, imports first.

        If any entry fails nothing is registered and the cache is untouched.
        """
        desc = parse_descriptor(self._read(descriptor), parent_location(descriptor))
        declared = []
        for pid, location in desc.locations():
            p = parse_protocol(self._read(location))
            if p.id != pid:
                raise RepositoryError(f"{location} defines {p.id}, descriptor says {pid}")
            declared.append(p)
        with self._lock:
            self._commit(self._stage(declared))
        return [p.id for p in dependency_order(declared)]

    def load_directory(self, directory: Location) -> List[ProtocolId]:
        """Load every ``*.xml`` protocol file in a directory (all or nothing)."""
        declared = [parse_protocol(self._read(f)) for f in sorted(Path(directory).glob("*.xml"))]
        with self._lock:
            self._commit(self._stage(declared))
        return [p.id for p in dependency_order(declared)]

    def recover_cache(self) -> List[ProtocolId]:
        """Re-register every protocol found in the cache directory.

        Unreadable or invalid entries are skipped with a warning.
        """
        if self.cache_dir is None:
            return []
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        declared = []
        for path in sorted(self.cache_dir.glob("*.xml")):
            try:
                declared.append(parse_protocol(path.read_bytes()))
            except (OSError, ProtocolError) as exc:
                log.warning("skipping corrupt cache entry %s: %s", path, exc)
        recovered = []
        with self._lock:
            for p in dependency_order(declared):
                try:
                    staged = self._stage([p])
                except ProtocolError as exc:
                    log.warning("skipping cached protocol %s: %s", p.id, exc)
                    continue
                self._commit(staged, persist=False)
                recovered.append(p.id)
        return recovered
