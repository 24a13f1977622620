"""Draft-tree construction.

The drafting policy grows a candidate tree in two stages. Layer by
layer it scores every (frontier node, token) pair by path confidence,
the product of draft probabilities from the root, and keeps the best
``layer_topk`` candidates across the whole layer. Once the tree is
grown, leaves are re-ranked by confidence and only the best
``leaf_budget`` survive; branches are the surviving root-to-leaf token
paths. ``token_budget`` caps the total number of tree tokens.

Ties break identically everywhere: higher path confidence, then higher
single-step probability, then lower token id, then older parent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "TreePolicyConfig",
    "DraftNode",
    "Branch",
    "DraftTree",
    "build_draft_tree",
    "enumerate_branches",
    "greedy_branch",
    "format_tree",
    "tree_adjacency",
]


@dataclass(frozen=True)
class TreePolicyConfig:
    depth: int = 7
    layer_topk: int = 10
    leaf_budget: int = 60
    token_budget: int | None = 60

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.layer_topk < 1:
            raise ValueError("layer_topk must be >= 1")
        if self.leaf_budget < 1:
            raise ValueError("leaf_budget must be >= 1")
        if self.token_budget is not None and self.token_budget < self.depth:
            raise ValueError("token_budget must be >= depth when set")


@dataclass(frozen=True)
class DraftNode:
    token: int
    parent: int | None  # index into DraftTree.nodes, None for children of the root
    draft_prob: float
    path_confidence: float
    depth: int


@dataclass(frozen=True)
class Branch:
    tokens: tuple
    length: int
    confidence: float
    leaf: int  # index of the leaf node in DraftTree.nodes


@dataclass(frozen=True)
class DraftTree:
    """A pruned draft tree rooted at ``context``.

    ``branches`` are sorted by descending confidence (lexicographic
    token order on ties) and form a prefix-free set. ``greedy_path`` is
    the drafter's argmax chain from the root, recorded at build time;
    trees assembled by :meth:`from_branches` leave it empty.
    """

    context: tuple
    nodes: tuple = ()
    branches: tuple = ()
    greedy_path: tuple = ()

    @classmethod
    def from_branches(cls, context, branch_tokens, confidences=None) -> "DraftTree":
        """Assemble a tree directly from a prefix-free set of branches.

        Intended for verification and tests where only the branch set
        matters; synthesized nodes carry probability 1.
        """
        branch_tokens = [tuple(int(t) for t in b) for b in branch_tokens]
        if not branch_tokens:
            raise ValueError("at least one branch required")
        if confidences is None:
            confidences = [1.0] * len(branch_tokens)
        if len(confidences) != len(branch_tokens):
            raise ValueError("confidences must match branches")
        if len(set(branch_tokens)) != len(branch_tokens):
            raise ValueError("branches must be distinct")
        if any(len(b) == 0 for b in branch_tokens):
            raise ValueError("branches must be nonempty")
        by_tokens = sorted(branch_tokens)
        for a, b in zip(by_tokens, by_tokens[1:]):
            if b[: len(a)] == a:
                raise ValueError("branches must be prefix-free")
        # Trie of synthesized nodes so dumps and invariants keep working.
        nodes = []
        children: dict = {}
        leaf_of = {}
        for toks in branch_tokens:
            parent = None
            for d, tok in enumerate(toks):
                key = (parent, tok)
                nid = children.get(key)
                if nid is None:
                    nodes.append(DraftNode(tok, parent, 1.0, 1.0, d + 1))
                    nid = len(nodes) - 1
                    children[key] = nid
                parent = nid
            leaf_of[toks] = parent
        branches = sorted(
            (
                Branch(toks, len(toks), float(conf), leaf_of[toks])
                for toks, conf in zip(branch_tokens, confidences)
            ),
            key=lambda b: (-b.confidence, b.tokens),
        )
        return cls(tuple(int(t) for t in context), tuple(nodes), tuple(branches), ())


def _greedy_chain(draft, ctx: tuple, depth: int) -> tuple:
    out = []
    cur = ctx
    for _ in range(depth):
        tok = int(np.argmax(draft.base_distribution(cur)))
        out.append(tok)
        cur += (tok,)
    return tuple(out)


def build_draft_tree(draft, ctx: Sequence[int], cfg: TreePolicyConfig) -> DraftTree:
    """Grow and prune a draft tree under ``cfg`` (deterministic)."""
    ctx = tuple(int(t) for t in ctx)
    vocab = draft.vocab_size
    tokens: list = []
    parents: list = []
    probs: list = []
    confs: list = []
    depths: list = []
    paths: list = []
    has_child: list = []

    frontier = [-1]  # -1 stands for the root
    budget = cfg.token_budget
    for depth in range(1, cfg.depth + 1):
        if budget is not None and len(tokens) >= budget:
            break
        cands = []
        for nid in frontier:
            if nid == -1:
                pconf, ppath = 1.0, ()
            else:
                pconf, ppath = confs[nid], paths[nid]
            row = draft.base_distribution(ctx + ppath)
            for tok in range(vocab):
                p = float(row[tok])
                if p > 0.0:
                    cands.append((pconf * p, p, tok, nid))
        cands.sort(key=lambda c: (-c[0], -c[1], c[2], c[3]))
        take = cfg.layer_topk
        if budget is not None:
            take = min(take, budget - len(tokens))
        frontier = []
        for conf, p, tok, nid in cands[:take]:
            tokens.append(tok)
            parents.append(nid)
            probs.append(p)
            confs.append(conf)
            depths.append(depth)
            paths.append((paths[nid] if nid >= 0 else ()) + (tok,))
            has_child.append(False)
            if nid >= 0:
                has_child[nid] = True
            frontier.append(len(tokens) - 1)

    leaves = [i for i in range(len(tokens)) if not has_child[i]]
    leaves.sort(key=lambda i: (-confs[i], -probs[i], tokens[i], i))
    kept_leaves = leaves[: cfg.leaf_budget]

    keep = set()
    for leaf in kept_leaves:
        nid = leaf
        while nid != -1 and nid not in keep:
            keep.add(nid)
            nid = parents[nid]
    order = sorted(keep)  # original creation order
    remap = {old: new for new, old in enumerate(order)}
    nodes = tuple(
        DraftNode(
            token=tokens[i],
            parent=remap[parents[i]] if parents[i] != -1 else None,
            draft_prob=probs[i],
            path_confidence=confs[i],
            depth=depths[i],
        )
        for i in order
    )
    branches = sorted(
        (Branch(paths[i], depths[i], confs[i], remap[i]) for i in kept_leaves),
        key=lambda b: (-b.confidence, b.tokens),
    )
    return DraftTree(ctx, nodes, tuple(branches), _greedy_chain(draft, ctx, cfg.depth))


def enumerate_branches(tree: DraftTree) -> list:
    """Branches as ``(tokens, length, confidence)`` triples, best first."""
    return [(b.tokens, b.length, b.confidence) for b in tree.branches]


def greedy_branch(tree: DraftTree) -> int | None:
    """Index of the branch lying on the drafter's argmax chain, if any.

    Branches are prefix-free, so at most one branch is a prefix of the
    greedy path; returns None when that path was pruned away (or the
    tree carries no recorded greedy path).
    """
    for i, b in enumerate(tree.branches):
        if tree.greedy_path[: b.length] == b.tokens:
            return i
    return None


def format_tree(tree: DraftTree) -> str:
    """Indented text dump, children in node-creation order."""
    kids: dict = {}
    for i, node in enumerate(tree.nodes):
        kids.setdefault(node.parent, []).append(i)
    lines = [f"root ctx={tree.context}"]

    def walk(parent, indent):
        for i in kids.get(parent, ()):
            n = tree.nodes[i]
            lines.append(
                f"{'  ' * indent}[{i}] tok={n.token} p={n.draft_prob:.6f} conf={n.path_confidence:.6f}"
            )
            walk(i, indent + 1)

    walk(None, 1)
    return "\n".join(lines)


def tree_adjacency(tree: DraftTree) -> list:
    """Machine-readable adjacency list (parent -1 means the root)."""
    return [
        {
            "id": i,
            "parent": -1 if n.parent is None else n.parent,
            "token": n.token,
            "draft_prob": n.draft_prob,
            "confidence": n.path_confidence,
            "depth": n.depth,
        }
        for i, n in enumerate(tree.nodes)
    ]
