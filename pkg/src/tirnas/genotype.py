"""Discrete architecture descriptions derived from alpha matrices.

Derivation rule: for each intermediate node, rank incoming edges by the
maximum softmax weight over non-"none" candidates of their alpha row,
retain the top edge (single-bottom) or top two edges (dual-bottom), and
label each retained edge with its strongest non-"none" candidate.  Ties
break deterministically toward the lower edge id and the lower candidate
index.  "none" participates in the softmax during search but is never
retained, so derived cells always stay connected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import yaml

from .cells import N_INTERMEDIATE, CellTemplate, make_template
from .errors import GenotypeError
from .search_space import NONE_INDEX, OP_KINDS

GENOTYPE_FORMAT_VERSION = 1


@dataclass
class Genotype:
    bottom: str
    normal_edges: list          # (to_state, from_state, op_kind)
    reduction_edges: list
    per_node_channels: int
    cells_total: int
    reduction_positions: tuple
    provenance: dict = field(default_factory=dict)

    def edges_for(self, cell_type: str):
        return self.reduction_edges if cell_type == "reduction" else self.normal_edges


def _row_scores(alpha_row: np.ndarray):
    """(edge score, best candidate index) for one alpha row."""
    row = np.asarray(alpha_row, dtype=np.float64)
    e = np.exp(row - row.max())
    soft = e / e.sum()
    masked = soft.copy()
    masked[NONE_INDEX] = -np.inf
    best = int(np.argmax(masked))  # argmax takes the first (lowest) index on ties
    return float(masked[best]), best


def retained_per_node(bottom: str) -> int:
    return 1 if bottom == "single" else 2


def derive_cell_edges(alpha: np.ndarray, template: CellTemplate) -> list:
    if not np.all(np.isfinite(alpha)):
        raise GenotypeError("alpha matrix contains non-finite values")
    keep = retained_per_node(template.bottom)
    edges = []
    for to in template.intermediate_states():
        incoming = template.incoming(to)
        scored = []
        for edge_id, frm, _ in incoming:
            score, best = _row_scores(alpha[edge_id])
            scored.append((score, edge_id, frm, best))
        # descending score, ascending edge id on ties
        scored.sort(key=lambda s: (-s[0], s[1]))
        for score, edge_id, frm, best in scored[:keep]:
            edges.append((to, frm, OP_KINDS[best]))
    return edges


def derive_genotype(alphas: dict, bottom: str, *, per_node_channels: int,
                    cells_total: int, reduction_positions, provenance: dict | None = None) -> Genotype:
    """Prune the continuous architecture into its discrete form."""
    values = {}
    for ct in ("normal", "reduction"):
        a = alphas[ct]
        values[ct] = np.asarray(a.values.data if hasattr(a, "values") else a, dtype=np.float64)
    template = {ct: make_template(bottom, ct) for ct in ("normal", "reduction")}
    geno = Genotype(
        bottom=bottom,
        normal_edges=derive_cell_edges(values["normal"], template["normal"]),
        reduction_edges=derive_cell_edges(values["reduction"], template["reduction"]),
        per_node_channels=per_node_channels,
        cells_total=cells_total,
        reduction_positions=tuple(reduction_positions),
        provenance=dict(provenance or {}),
    )
    validate_genotype(geno)
    return geno


def alpha_checksum(alphas: dict) -> str:
    h = hashlib.sha256()
    for ct in ("normal", "reduction"):
        a = alphas[ct]
        arr = np.asarray(a.values.data if hasattr(a, "values") else a, dtype=np.float64)
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def validate_genotype(geno: Genotype) -> None:
    """Raise GenotypeError naming the first violated invariant."""
    if geno.bottom not in ("single", "dual"):
        raise GenotypeError(f"unknown bottom type {geno.bottom!r}")
    keep = retained_per_node(geno.bottom)
    n_inputs = 1 if geno.bottom == "single" else 2
    for cell_type, edges in (("normal", geno.normal_edges), ("reduction", geno.reduction_edges)):
        per_node: dict[int, list] = {}
        for to, frm, kind in edges:
            if kind not in OP_KINDS:
                raise GenotypeError(f"{cell_type}: unknown op kind {kind!r}")
            if kind == "none":
                raise GenotypeError(f"{cell_type}: retained edge ({to},{frm}) carries 'none'")
            if not n_inputs <= to < n_inputs + N_INTERMEDIATE:
                raise GenotypeError(f"{cell_type}: {to} is not an intermediate state")
            if not 0 <= frm < to:
                raise GenotypeError(f"{cell_type}: from-state {frm} does not precede {to}")
            per_node.setdefault(to, []).append(frm)
        for to in range(n_inputs, n_inputs + N_INTERMEDIATE):
            froms = per_node.get(to, [])
            if len(froms) != keep:
                raise GenotypeError(f"{cell_type}: node {to} retains {len(froms)} edges, needs {keep}")
            if len(set(froms)) != len(froms):
                raise GenotypeError(f"{cell_type}: node {to} has duplicate from-states {froms}")
    if geno.per_node_channels < 1:
        raise GenotypeError("per_node_channels must be positive")
    if geno.cells_total < 1:
        raise GenotypeError("cells_total must be positive")
    for p in geno.reduction_positions:
        if not 1 <= p <= geno.cells_total:
            raise GenotypeError(f"reduction position {p} outside 1..{geno.cells_total}")


# ---------------------------------------------------------------------------
# persistence


def genotype_to_dict(geno: Genotype, config_hash: str | None = None) -> dict:
    doc = {
        "version": GENOTYPE_FORMAT_VERSION,
        "bottom": geno.bottom,
        "per_node_channels": geno.per_node_channels,
        "cells_total": geno.cells_total,
        "reduction_positions": list(geno.reduction_positions),
        "normal_edges": [[to, frm, kind] for to, frm, kind in geno.normal_edges],
        "reduction_edges": [[to, frm, kind] for to, frm, kind in geno.reduction_edges],
        "provenance": dict(geno.provenance),
    }
    if config_hash is not None:
        doc["config_hash"] = config_hash
    return doc


def genotype_from_dict(doc: dict) -> Genotype:
    try:
        geno = Genotype(
            bottom=doc["bottom"],
            normal_edges=[(int(t), int(f), str(k)) for t, f, k in doc["normal_edges"]],
            reduction_edges=[(int(t), int(f), str(k)) for t, f, k in doc["reduction_edges"]],
            per_node_channels=int(doc["per_node_channels"]),
            cells_total=int(doc["cells_total"]),
            reduction_positions=tuple(int(p) for p in doc["reduction_positions"]),
            provenance=dict(doc.get("provenance") or {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise GenotypeError(f"malformed genotype document: {exc}") from exc
    validate_genotype(geno)
    return geno


def save_genotype(geno: Genotype, path, config_hash: str | None = None) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(genotype_to_dict(geno, config_hash), fh, sort_keys=False)


def load_genotype(path) -> Genotype:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise GenotypeError(f"{path} does not contain a genotype document")
    return genotype_from_dict(doc)


# ---------------------------------------------------------------------------
# DOT rendering


def _state_name(bottom: str, state: int) -> str:
    if bottom == "single":
        return "S" if state == 0 else str(state - 1)
    return ("S0", "S1")[state] if state < 2 else str(state - 2)


def genotype_to_dot(geno: Genotype, cell_type: str) -> str:
    """Render one cell as a DOT digraph with op-labeled edges."""
    n_inputs = 1 if geno.bottom == "single" else 2
    lines = [
        f"digraph {cell_type}_cell {{",
        "  rankdir=LR;",
        '  node [shape=box, style=rounded];',
    ]
    for s in range(n_inputs):
        lines.append(f'  "{_state_name(geno.bottom, s)}" [style=filled, fillcolor=lightgrey];')
    for s in range(n_inputs, n_inputs + N_INTERMEDIATE):
        lines.append(f'  "{_state_name(geno.bottom, s)}";')
    lines.append('  "out" [style=filled, fillcolor=lightyellow];')
    for to, frm, kind in geno.edges_for(cell_type):
        lines.append(f'  "{_state_name(geno.bottom, frm)}" -> "{_state_name(geno.bottom, to)}" '
                     f'[label="{kind}"];')
    for s in range(n_inputs, n_inputs + N_INTERMEDIATE):
        lines.append(f'  "{_state_name(geno.bottom, s)}" -> "out" [style=dashed];')
    lines.append("}")
    return "\n".join(lines) + "\n"
