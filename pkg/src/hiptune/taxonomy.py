"""Three-level attack taxonomy used as the label schema and prompt-tree layout.

Node ids are dense integers assigned breadth-first in canonical order::

    level 1:  live, physical, digital
    level 2:  2D, 3D | manipulation, adversarial, generation
    level 3:  print, replay, cutouts | transparent, plaster, resin |
              attribute-edit, face-swap, video-driven | pixel-level,
              semantic-level | ID-consistent, style-transfer, prompt-based

Leaf methods hang off level-3 nodes and get their own dense id range.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

from .errors import ConfigError, LabelError

LIVE = "live"

# parent name -> ordered children; the order is the canonical child index
DEFAULT_STRUCTURE: dict[str, tuple[str, ...]] = {
    "physical": ("2D", "3D"),
    "digital": ("manipulation", "adversarial", "generation"),
    "2D": ("print", "replay", "cutouts"),
    "3D": ("transparent", "plaster", "resin"),
    "manipulation": ("attribute-edit", "face-swap", "video-driven"),
    "adversarial": ("pixel-level", "semantic-level"),
    "generation": ("ID-consistent", "style-transfer", "prompt-based"),
}
LEVEL1 = (LIVE, "physical", "digital")

# method counts per level-3 node in the reference attack collection (sums to 54)
DEFAULT_LEAF_COUNTS: dict[str, int] = {
    "print": 2,
    "replay": 3,
    "cutouts": 6,
    "transparent": 1,
    "plaster": 1,
    "resin": 1,
    "attribute-edit": 2,
    "face-swap": 13,
    "video-driven": 2,
    "pixel-level": 11,
    "semantic-level": 5,
    "ID-consistent": 3,
    "style-transfer": 1,
    "prompt-based": 3,
}


@dataclass(frozen=True)
class TaxonomyNode:
    id: int
    name: str
    level: int
    parent: int | None
    method_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class AttackTaxonomy:
    nodes: tuple[TaxonomyNode, ...]
    _by_name: dict = field(init=False, repr=False, compare=False)
    _children: dict = field(init=False, repr=False, compare=False)
    _method_node: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_name = {}
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise ConfigError(f"node ids must be dense, node {node.name!r} has id {node.id} at position {i}")
            if node.name in by_name:
                raise ConfigError(f"duplicate node name {node.name!r}")
            by_name[node.name] = node
        children: dict[int | None, list[int]] = {}
        method_node = {}
        for node in self.nodes:
            if node.level == 1:
                if node.parent is not None:
                    raise ConfigError(f"level-1 node {node.name!r} must not have a parent")
            else:
                if node.parent is None or not 0 <= node.parent < len(self.nodes):
                    raise ConfigError(f"node {node.name!r} has dangling parent {node.parent}")
                if self.nodes[node.parent].level != node.level - 1:
                    raise ConfigError(f"node {node.name!r} level does not follow its parent")
            children.setdefault(node.parent, []).append(node.id)
            if node.method_ids and node.level != 3:
                raise ConfigError(f"only level-3 nodes carry methods, got {node.name!r}")
            for m in node.method_ids:
                if m in method_node:
                    raise ConfigError(f"method {m} assigned to two nodes")
                method_node[m] = node.id
        if sorted(method_node) != list(range(len(method_node))):
            raise ConfigError("method ids must be dense")
        object.__setattr__(self, "_by_name", by_name)
        object.__setattr__(self, "_children", {k: tuple(v) for k, v in children.items()})
        object.__setattr__(self, "_method_node", method_node)

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> TaxonomyNode:
        if not isinstance(node_id, int) or not 0 <= node_id < len(self.nodes):
            raise LabelError(f"unknown node id {node_id!r}")
        return self.nodes[node_id]

    def by_name(self, name: str) -> TaxonomyNode:
        try:
            return self._by_name[name]
        except KeyError:
            raise LabelError(f"unknown node name {name!r}") from None

    def children(self, node_id: int | None) -> tuple[int, ...]:
        """Children in canonical order; ``None`` gives the level-1 nodes."""
        return self._children.get(node_id, ())

    def level(self, level: int) -> tuple[TaxonomyNode, ...]:
        return tuple(n for n in self.nodes if n.level == level)

    @property
    def live_id(self) -> int:
        return self._by_name[LIVE].id

    @property
    def n_methods(self) -> int:
        return len(self._method_node)

    @property
    def method_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_methods))

    def method_node(self, method_id: int) -> int:
        try:
            return self._method_node[method_id]
        except KeyError:
            raise LabelError(f"unknown method id {method_id!r}") from None

    def path_of_method(self, method_id: int) -> tuple[int, int, int]:
        l3 = self.method_node(method_id)
        l2 = self.nodes[l3].parent
        l1 = self.nodes[l2].parent
        return (l1, l2, l3)

    def child_index(self, node_id: int) -> int:
        node = self[node_id]
        return self.children(node.parent).index(node_id)

    def check_path(self, path) -> None:
        """Raise ``LabelError`` unless ``path`` is a level-1/2/3 parent chain."""
        if len(path) != 3:
            raise LabelError(f"fake path must have 3 nodes, got {path!r}")
        prev = None
        for level, nid in enumerate(path, start=1):
            node = self[nid]
            if node.level != level or node.parent != prev:
                raise LabelError(f"path {tuple(path)!r} is not a parent chain")
            prev = nid
        if path[0] == self.live_id:
            raise LabelError("live node cannot start a fake path")

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "name": n.name,
                    "level": n.level,
                    "parent": n.parent,
                    "method_ids": list(n.method_ids),
                }
                for n in self.nodes
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttackTaxonomy":
        return cls(
            tuple(
                TaxonomyNode(
                    id=int(n["id"]),
                    name=str(n["name"]),
                    level=int(n["level"]),
                    parent=None if n["parent"] is None else int(n["parent"]),
                    method_ids=tuple(int(m) for m in n.get("method_ids", ())),
                )
                for n in data["nodes"]
            )
        )

    def digest(self) -> str:
        """Stable hash used to tag checkpoints."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_taxonomy(
    leaf_methods_per_node: Mapping[str, int] | int | None = None,
    structure: Mapping[str, tuple[str, ...]] | None = None,
) -> AttackTaxonomy:
    """Build the attack tree.

    ``leaf_methods_per_node`` is either a per-level-3-name mapping, a single
    count applied to every level-3 node, or None for the default 54-method
    layout.
    """
    structure = dict(DEFAULT_STRUCTURE if structure is None else structure)
    if leaf_methods_per_node is None:
        leaf_methods_per_node = DEFAULT_LEAF_COUNTS

    names = list(LEVEL1)
    levels = [1, 1, 1]
    parents: list[int | None] = [None, None, None]
    frontier = list(range(3))
    for level in (2, 3):
        nxt = []
        for pid in frontier:
            for child in structure.get(names[pid], ()):
                if child in names:
                    raise ConfigError(f"duplicate node name {child!r}")
                names.append(child)
                levels.append(level)
                parents.append(pid)
                nxt.append(len(names) - 1)
        frontier = nxt
    for pname in structure:
        if pname not in names:
            raise ConfigError(f"structure references unknown parent {pname!r}")
    for i, name in enumerate(names):
        if levels[i] < 3 and name != LIVE and not structure.get(name):
            raise ConfigError(f"fake node {name!r} needs children down to level 3")

    level3 = [i for i, lv in enumerate(levels) if lv == 3]
    if isinstance(leaf_methods_per_node, int):
        counts = {names[i]: leaf_methods_per_node for i in level3}
    else:
        counts = dict(leaf_methods_per_node)
        unknown = set(counts) - {names[i] for i in level3}
        if unknown:
            raise ConfigError(f"leaf counts given for non-level-3 nodes: {sorted(unknown)}")
    methods: dict[int, tuple[int, ...]] = {}
    next_method = 0
    for i in level3:
        n = counts.get(names[i], 0)
        if n < 1:
            raise ConfigError(f"level-3 node {names[i]!r} needs at least one leaf method, got {n}")
        methods[i] = tuple(range(next_method, next_method + n))
        next_method += n

    nodes = tuple(
        TaxonomyNode(id=i, name=names[i], level=levels[i], parent=parents[i], method_ids=methods.get(i, ()))
        for i in range(len(names))
    )
    return AttackTaxonomy(nodes)
