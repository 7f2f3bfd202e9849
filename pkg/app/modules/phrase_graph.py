"""
Location phrases from pairwise linkage decisions.

Positive decisions become directed edges query -> candidate. Strongly (or
weakly) connected components are the phrases; their words are read left to
right.
"""
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from app.modules import mcp
from app.modules.errors import ContractError, GraphError, SheetParseError
from app.modules.ingest import MapSheet, parse_sheet

logger = logging.getLogger(__name__)

COMPONENT_MODES = ("scc", "wcc")
Edge = Tuple[str, str]
Group = Tuple[str, ...]


@dataclass(frozen=True)
class LinkageGraph:
    nodes: Tuple[str, ...]
    edges: frozenset

    def successors(self) -> Dict[str, List[str]]:
        adj: Dict[str, List[str]] = {n: [] for n in self.nodes}
        for src, dst in sorted(self.edges):
            adj[src].append(dst)
        return adj


@dataclass(frozen=True)
class LocationPhrase:
    region_ids: Tuple[str, ...]
    text: str
    mode: str = "scc"

    def __post_init__(self):
        if not self.region_ids:
            raise ContractError("a phrase needs at least one region")
        if len(set(self.region_ids)) != len(self.region_ids):
            raise ContractError(f"phrase repeats a region: {self.region_ids}")


def build_graph(sheet: MapSheet, decisions: Iterable[Edge]) -> LinkageGraph:
    """One edge per positive (query, candidate) pair; duplicates collapse."""
    nodes = tuple(r.id for r in sheet.regions)
    known = set(nodes)
    edges: Set[Edge] = set()
    for src, dst in decisions:
        if src not in known or dst not in known:
            missing = src if src not in known else dst
            raise GraphError(f"edge {src}->{dst} references unknown region '{missing}'")
        if src == dst:
            raise GraphError(f"self-edge on '{src}'")
        edges.add((src, dst))
    return LinkageGraph(nodes, frozenset(edges))


def _canonical(groups: Iterable[Iterable[str]]) -> List[Group]:
    return sorted((tuple(sorted(g)) for g in groups), key=lambda g: g[0])


def strongly_connected_components(graph: LinkageGraph) -> List[Group]:
    """Tarjan's algorithm without recursion."""
    adj = graph.successors()
    counter = itertools.count()
    index: Dict[str, int] = {}
    lowlink: Dict[str, int] = {}
    stack: List[str] = []
    on_stack: Set[str] = set()
    groups: List[List[str]] = []

    for root in graph.nodes:
        if root in index:
            continue
        index[root] = lowlink[root] = next(counter)
        stack.append(root)
        on_stack.add(root)
        work = [(root, iter(adj[root]))]
        while work:
            node, children = work[-1]
            advanced = False
            for child in children:
                if child not in index:
                    index[child] = lowlink[child] = next(counter)
                    stack.append(child)
                    on_stack.add(child)
                    work.append((child, iter(adj[child])))
                    advanced = True
                    break
                if child in on_stack:
                    lowlink[node] = min(lowlink[node], index[child])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
            if lowlink[node] == index[node]:
                group = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    group.append(member)
                    if member == node:
                        break
                groups.append(group)
    return _canonical(groups)


def weakly_connected_components(graph: LinkageGraph) -> List[Group]:
    parent = {n: n for n in graph.nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for src, dst in graph.edges:
        a, b = find(src), find(dst)
        if a != b:
            parent[max(a, b)] = min(a, b)

    members: Dict[str, List[str]] = {}
    for node in graph.nodes:
        members.setdefault(find(node), []).append(node)
    return _canonical(members.values())


def components(graph: LinkageGraph, mode: str = "scc") -> List[Group]:
    if mode == "scc":
        return strongly_connected_components(graph)
    if mode == "wcc":
        return weakly_connected_components(graph)
    raise ContractError(f"unknown component mode '{mode}'")


def order_and_join(group: Sequence[str], sheet: MapSheet, mode: str = "scc") -> LocationPhrase:
    """Order members by bbox center x, then y, then id, and join their texts."""
    if not group:
        raise ContractError("cannot order an empty group")

    def key(rid: str):
        x0, y0, x1, y1 = sheet.region(rid).bounds
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0, rid

    ordered = tuple(sorted(group, key=key))
    return LocationPhrase(ordered, " ".join(sheet.region(rid).text for rid in ordered), mode)


def phrases_for_sheet(sheet: MapSheet, edges: Iterable[Edge], mode: str = "scc") -> List[LocationPhrase]:
    graph = build_graph(sheet, edges)
    return [order_and_join(group, sheet, mode) for group in components(graph, mode)]


def emit_phrases(sheet_id: str, phrases: Iterable[LocationPhrase]) -> str:
    phrases = list(phrases)
    lines = []
    if phrases:
        lines.append(f"# mode {phrases[0].mode}")
    for phrase in phrases:
        lines.append(f"phrase {sheet_id} {phrase.text} | {','.join(phrase.region_ids)}")
    return "".join(line + "\n" for line in lines)


def write_phrases(sheet_id: str, phrases: Iterable[LocationPhrase], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(emit_phrases(sheet_id, phrases), encoding="utf-8")
    return path


def parse_phrases(text: str, source: str = "<phrases>") -> Tuple[Optional[str], List[LocationPhrase]]:
    """Returns (sheet id, phrases); the id is None for an empty file."""
    sheet_id = None
    mode = "scc"
    phrases = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "mode":
                mode = parts[1]
            continue
        parts = line.split(None, 2)
        if len(parts) < 3 or parts[0] != "phrase" or " | " not in f" {parts[2]}":
            raise SheetParseError("expected 'phrase <sheet> <text> | <ids>'", source, lineno, "phrase")
        if sheet_id is not None and parts[1] != sheet_id:
            raise SheetParseError(f"mixed sheets '{sheet_id}' and '{parts[1]}'", source, lineno, "sheet")
        sheet_id = parts[1]
        phrase_text, ids = f" {parts[2]}".rsplit(" | ", 1)
        region_ids = tuple(i for i in ids.strip().split(",") if i)
        try:
            phrases.append(LocationPhrase(region_ids, phrase_text.strip(), mode))
        except ContractError as e:
            raise SheetParseError(str(e), source, lineno, "ids") from None
    return sheet_id, phrases


def read_phrases(path: Union[str, Path]) -> Tuple[Optional[str], List[LocationPhrase]]:
    path = Path(path)
    return parse_phrases(path.read_text(encoding="utf-8"), source=str(path))


@mcp.tool()
async def phrases_from_edges(sheet_path: str, edges_path: str, mode: str = "scc") -> str:
    """Group linked regions of a sheet into location phrases.

    Args:
        sheet_path: Path to the sheet annotation file
        edges_path: Edge-list file produced by the link stage
        mode: Component mode, scc (default) or wcc
    """
    try:
        from app.modules.consensus import linked_edges, read_edges

        sheet = parse_sheet(sheet_path)
        phrases = phrases_for_sheet(sheet, linked_edges(read_edges(edges_path)), mode)
        return json.dumps({
            "status": "success",
            "sheet_id": sheet.sheet_id,
            "mode": mode,
            "count": len(phrases),
            "phrases": [{"text": p.text, "regions": list(p.region_ids)} for p in phrases],
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
