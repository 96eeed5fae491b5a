"""Gene Ontology DAG: OBO parsing, validation, and structural queries.

The ontology is a typed directed acyclic graph. Edge orientation follows the
annotation convention: "A part_of B" stores the edge A -> B, so A is a
predecessor (more specific neighbor) of B and every path climbs toward a
namespace root.
"""

from __future__ import annotations

import json
import re
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable

TERM_ID_RE = re.compile(r"^GO:\d{7}$")

NAMESPACES = ("biological_process", "cellular_component", "molecular_function")


class RelationKind(str, Enum):
    IS_A = "is_a"
    PART_OF = "part_of"
    REGULATES = "regulates"
    POSITIVELY_REGULATES = "positively_regulates"
    NEGATIVELY_REGULATES = "negatively_regulates"


#: Relation kinds that define the namespace hierarchies (root reachability, depth).
HIERARCHY_KINDS = frozenset({RelationKind.IS_A, RelationKind.PART_OF})


class OntologyError(Exception):
    pass


class OboParseError(OntologyError):
    """Malformed OBO input; carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DagValidationError(OntologyError):
    pass


class UnknownTermError(OntologyError):
    pass


@dataclass(frozen=True)
class GoTerm:
    id: str
    name: str = ""
    namespace: str = ""
    definition: str = ""
    is_obsolete: bool = False


def is_term_id(value: str) -> bool:
    return bool(TERM_ID_RE.match(value))


class GoDag:
    """Immutable parsed ontology with precomputed adjacency and depths.

    ``terms`` maps every parsed term (including obsolete ones); obsolete terms
    carry no edges and are excluded from the active ordering and from L.
    """

    def __init__(self, terms: dict[str, GoTerm],
                 edges: Iterable[tuple[str, str, RelationKind]],
                 warnings: dict[str, int] | None = None,
                 strict: bool = True):
        self.terms = dict(terms)
        self.edges = set(edges)
        self.warnings = dict(warnings or {})
        for src, dst, kind in self.edges:
            if src not in self.terms or dst not in self.terms:
                raise UnknownTermError(f"edge endpoint not in term table: {src} -> {dst}")

        # Fixed ordering: ascending term id over non-obsolete terms.
        self.ordering = sorted(t for t, term in self.terms.items() if not term.is_obsolete)
        self.index = {t: i for i, t in enumerate(self.ordering)}
        self.term_count = len(self.ordering)

        self._out = defaultdict(list)   # src -> [(dst, kind)]
        self._in = defaultdict(list)    # dst -> [(src, kind)]
        for src, dst, kind in sorted(self.edges):
            self._out[src].append((dst, kind))
            self._in[dst].append((src, kind))

        self.roots = self._find_roots()
        self._depth = self._compute_depths()

        if strict:
            cycle = find_cycle(self.edges)
            if cycle is not None:
                raise DagValidationError(
                    "directed cycle detected: " + " -> ".join(cycle + [cycle[0]]))

    def _find_roots(self) -> dict[str, str]:
        """One root per namespace: the unique non-obsolete term with no
        outgoing hierarchy edge. Namespaces without a unique root get none
        (validate() reports the resulting reachability violations)."""
        candidates = defaultdict(list)
        for t in self.ordering:
            term = self.terms[t]
            has_parent = any(kind in HIERARCHY_KINDS for _, kind in self._out[t])
            if not has_parent:
                candidates[term.namespace].append(t)
        roots = {}
        for ns, cands in candidates.items():
            if len(cands) > 1:
                # orphans are parentless too; a real root has children
                cands = [t for t in cands
                         if any(kind in HIERARCHY_KINDS for _, kind in self._in[t])]
            if len(cands) == 1:
                roots[ns] = cands[0]
        return roots

    def _compute_depths(self) -> dict[str, int]:
        """BFS from each root over reversed hierarchy edges."""
        depth = {}
        for root in self.roots.values():
            queue = deque([(root, 0)])
            seen = {root}
            while queue:
                node, d = queue.popleft()
                if node not in depth or d < depth[node]:
                    depth[node] = d
                for src, kind in self._in[node]:
                    if kind in HIERARCHY_KINDS and src not in seen:
                        seen.add(src)
                        queue.append((src, d + 1))
        return depth

    # -- structural queries -------------------------------------------------

    def root_ids(self) -> set[str]:
        return set(self.roots.values())

    def depth(self, term_id: str) -> int:
        if term_id not in self.terms:
            raise UnknownTermError(term_id)
        if self.terms[term_id].is_obsolete:
            raise OntologyError(f"{term_id} is obsolete; depth undefined")
        if term_id not in self._depth:
            raise OntologyError(f"{term_id} has no hierarchy path to a namespace root")
        return self._depth[term_id]

    def has_depth(self, term_id: str) -> bool:
        return term_id in self._depth

    def predecessors(self, term_id: str) -> set[str]:
        """Terms with a direct edge into ``term_id`` (any relation kind)."""
        if term_id not in self.terms:
            raise UnknownTermError(term_id)
        return {src for src, _ in self._in[term_id]}

    def successors(self, term_id: str) -> set[str]:
        if term_id not in self.terms:
            raise UnknownTermError(term_id)
        return {dst for dst, _ in self._out[term_id]}

    def adjacency_row(self, term_id: str, kinds: frozenset[RelationKind] | None = None):
        """Symmetrized binary neighbor-indicator over the fixed term ordering.

        Position j is 1 iff an edge of an allowed kind connects ``term_id``
        and ordering[j] in either direction.
        """
        import numpy as np
        if term_id not in self.terms:
            raise UnknownTermError(term_id)
        row = np.zeros(self.term_count, dtype=np.uint8)
        for dst, kind in self._out[term_id]:
            if kinds is None or kind in kinds:
                if dst in self.index:
                    row[self.index[dst]] = 1
        for src, kind in self._in[term_id]:
            if kinds is None or kind in kinds:
                if src in self.index:
                    row[self.index[src]] = 1
        return row

    def adjacency_matrix(self, kinds: frozenset[RelationKind] | None = None):
        """Sparse CSR symmetrized adjacency over the fixed ordering."""
        import numpy as np
        from scipy import sparse
        rows, cols = [], []
        for src, dst, kind in self.edges:
            if kinds is not None and kind not in kinds:
                continue
            if src in self.index and dst in self.index:
                i, j = self.index[src], self.index[dst]
                rows += [i, j]
                cols += [j, i]
        data = np.ones(len(rows), dtype=np.uint8)
        mat = sparse.csr_matrix((data, (rows, cols)),
                                shape=(self.term_count, self.term_count))
        mat.data[:] = 1  # collapse duplicates from multi-kind edge pairs
        return mat


@dataclass
class ValidationReport:
    cycles: list[list[str]] = field(default_factory=list)
    antisymmetry: list[tuple[str, str]] = field(default_factory=list)
    reachability: list[tuple[str, list[str]]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.cycles or self.antisymmetry or self.reachability)

    def summary(self) -> str:
        lines = []
        for cyc in self.cycles:
            lines.append("cycle: " + " -> ".join(cyc + [cyc[0]]))
        for u, v in self.antisymmetry:
            lines.append(f"antisymmetry violated: both {u}->{v} and {v}->{u} present")
        for term, roots in self.reachability:
            if roots:
                lines.append(f"{term} reaches {len(roots)} roots: {', '.join(roots)}")
            else:
                lines.append(f"{term} reaches no namespace root")
        return "\n".join(lines) if lines else "ok"


def find_cycle(edges: Iterable[tuple[str, str, RelationKind]]) -> list[str] | None:
    """Return one directed cycle as a node list, or None. Iterative DFS."""
    out = defaultdict(list)
    for src, dst, _ in sorted(edges):
        out[src].append(dst)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = defaultdict(int)
    parent = {}
    for start in sorted(out):
        if color[start] != WHITE:
            continue
        stack = [(start, iter(out[start]))]
        color[start] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    parent[nxt] = node
                    stack.append((nxt, iter(out[nxt])))
                    advanced = True
                    break
                if color[nxt] == GRAY:
                    cycle = [node]
                    cur = node
                    while cur != nxt:
                        cur = parent[cur]
                        cycle.append(cur)
                    cycle.reverse()
                    return cycle
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return None


def validate(dag: GoDag) -> ValidationReport:
    """Full structural check: acyclicity, pairwise antisymmetry, and
    exactly-one-root reachability (over hierarchy edges) per active term."""
    report = ValidationReport()

    cycle = find_cycle(dag.edges)
    if cycle is not None:
        report.cycles.append(cycle)

    pairs = {(s, d) for s, d, _ in dag.edges}
    seen = set()
    for s, d in sorted(pairs):
        if (d, s) in pairs and (d, s) not in seen:
            report.antisymmetry.append((s, d))
            seen.add((s, d))

    # Reachable roots per term, over hierarchy edges only.
    roots = dag.root_ids()
    if not report.cycles:
        reach_cache: dict[str, frozenset[str]] = {}

        def reachable_roots(t: str) -> frozenset[str]:
            if t in reach_cache:
                return reach_cache[t]
            acc = {t} & roots
            for dst, kind in dag._out[t]:
                if kind in HIERARCHY_KINDS:
                    acc |= reachable_roots(dst)
            result = frozenset(acc)
            reach_cache[t] = result
            return result

        for t in dag.ordering:
            found = sorted(reachable_roots(t))
            if len(found) != 1:
                report.reachability.append((t, found))
    return report


# -- OBO parsing ---------------------------------------------------------------

_REL_LINE_RE = re.compile(r"^(\S+)\s+(GO:\d{7})")


def parse_obo(source: str | bytes | IO, strict: bool = True) -> GoDag:
    """Parse OBO 1.2-style stanza text into a GoDag.

    ``strict=True`` raises DagValidationError if the edge set contains a
    directed cycle; ``strict=False`` defers everything to validate().
    Unknown relation kinds and dangling edge targets are skipped and counted
    in ``dag.warnings``.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw

    terms: dict[str, GoTerm] = {}
    raw_edges: list[tuple[str, str, RelationKind, int]] = []
    warnings = {"unknown_relation": 0, "dangling_edge": 0, "obsolete_edge": 0}

    in_term = False
    cur: dict | None = None
    cur_line = 0

    def flush():
        if cur is None:
            return
        tid = cur.get("id")
        if tid is None:
            raise OboParseError("[Term] stanza without id", cur_line)
        if not is_term_id(tid):
            raise OboParseError(f"malformed term id {tid!r}", cur_line)
        if tid in terms:
            raise OboParseError(f"duplicate term id {tid}", cur_line)
        terms[tid] = GoTerm(
            id=tid,
            name=cur.get("name", ""),
            namespace=cur.get("namespace", ""),
            definition=cur.get("definition", ""),
            is_obsolete=cur.get("is_obsolete", False),
        )
        for dst, kind, ln in cur["edges"]:
            raw_edges.append((tid, dst, kind, ln))

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("!"):
            continue
        if line.startswith("["):
            flush()
            cur = None
            in_term = line == "[Term]"
            if in_term:
                cur = {"edges": []}
                cur_line = line_no
            continue
        if not in_term:
            continue
        if ":" not in line:
            raise OboParseError(f"expected 'key: value', got {line!r}", line_no)
        key, _, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        # trailing "! comment" applies to reference-bearing lines
        if key in ("is_a", "relationship", "id"):
            value = value.split("!")[0].strip()
        if key == "id":
            cur["id"] = value
        elif key == "name":
            cur["name"] = value
        elif key == "namespace":
            cur["namespace"] = value
        elif key == "def":
            m = re.match(r'^"(.*)"', value)
            cur["definition"] = m.group(1) if m else value
        elif key == "is_obsolete":
            cur["is_obsolete"] = value == "true"
        elif key == "is_a":
            if not is_term_id(value):
                raise OboParseError(f"malformed is_a target {value!r}", line_no)
            cur["edges"].append((value, RelationKind.IS_A, line_no))
        elif key == "relationship":
            m = _REL_LINE_RE.match(value)
            if m is None:
                raise OboParseError(f"malformed relationship line {value!r}", line_no)
            kind_str, target = m.group(1), m.group(2)
            try:
                kind = RelationKind(kind_str)
            except ValueError:
                warnings["unknown_relation"] += 1
                continue
            cur["edges"].append((target, kind, line_no))
        # other tags (synonym, xref, subset, ...) are ignored
    flush()

    edges = set()
    for src, dst, kind, _ in raw_edges:
        if dst not in terms:
            warnings["dangling_edge"] += 1
            continue
        if terms[src].is_obsolete or terms[dst].is_obsolete:
            warnings["obsolete_edge"] += 1
            continue
        edges.add((src, dst, kind))

    return GoDag(terms, edges, warnings=warnings, strict=strict)


# -- byte-stable exports -------------------------------------------------------

def edges_to_tsv(dag: GoDag) -> str:
    lines = [f"{src}\t{kind.value}\t{dst}"
             for src, dst, kind in sorted(dag.edges, key=lambda e: (e[0], e[2].value, e[1]))]
    return "\n".join(lines) + ("\n" if lines else "")


def terms_to_json(dag: GoDag) -> str:
    table = {
        tid: {
            "name": term.name,
            "namespace": term.namespace,
            "definition": term.definition,
            "is_obsolete": term.is_obsolete,
        }
        for tid, term in sorted(dag.terms.items())
    }
    return json.dumps(table, sort_keys=True, indent=1) + "\n"
