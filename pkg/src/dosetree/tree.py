"""Binary regression trees over particle covariates, their prior and MH moves.

Trees are immutable: moves build new trees that share untouched subtrees with
the current one. Splits are always on particle covariates, so every
(replicate, dose, time) observation of a particle lands in the same leaf.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from dosetree.config import TreePriorParams
from dosetree.exceptions import TreeValidityError

Path = Tuple[int, ...]
LEFT, RIGHT = 0, 1


class Move(str, Enum):
    """Metropolis-Hastings tree moves, in the order of the move probabilities."""

    GROW = "grow"
    PRUNE = "prune"
    CHANGE = "change"
    SWAP = "swap"


MOVES: Tuple[Move, ...] = (Move.GROW, Move.PRUNE, Move.CHANGE, Move.SWAP)


@dataclass(frozen=True)
class SplitRule:
    """Send a particle left when ``x[var_index] <= threshold``."""

    var_index: int
    threshold: float

    def goes_left(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.var_index] <= self.threshold


@dataclass(frozen=True, eq=False)
class Node:
    """Internal node (``rule`` set, two children) or leaf (``coeffs`` optional)."""

    rule: Optional[SplitRule] = None
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    coeffs: Optional[np.ndarray] = None

    @property
    def is_leaf(self) -> bool:
        return self.rule is None

    def child(self, side: int) -> "Node":
        child = self.left if side == LEFT else self.right
        if child is None:
            raise TreeValidityError("Leaf nodes have no children")
        return child


def _same(a: Node, b: Node, with_coeffs: bool) -> bool:
    if a.is_leaf != b.is_leaf:
        return False
    if a.is_leaf:
        if not with_coeffs:
            return True
        if a.coeffs is None or b.coeffs is None:
            return a.coeffs is None and b.coeffs is None
        return bool(np.array_equal(a.coeffs, b.coeffs))
    return (
        a.rule == b.rule
        and _same(a.child(LEFT), b.child(LEFT), with_coeffs)
        and _same(a.child(RIGHT), b.child(RIGHT), with_coeffs)
    )


class Tree:
    """A binary tree whose leaves own spline-coefficient vectors.

    Leaves are numbered left to right; that numbering is the leaf index used by
    routing, by coefficient blocks in chain files and by the samplers.
    """

    __slots__ = ("root",)

    def __init__(self, root: Node):
        self.root = root

    @classmethod
    def stump(cls, coeffs: Optional[np.ndarray] = None) -> "Tree":
        """Root-only tree."""
        return cls(Node(coeffs=coeffs))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tree):
            return NotImplemented
        return _same(self.root, other.root, with_coeffs=True)

    def __hash__(self) -> int:
        return hash(self.to_text(include_coeffs=False))

    def __repr__(self) -> str:
        return f"Tree(n_leaves={self.n_leaves}, depth={self.depth})"

    def same_structure(self, other: "Tree") -> bool:
        """Compare split structure and rules, ignoring leaf coefficients."""
        return _same(self.root, other.root, with_coeffs=False)

    # -- traversal -------------------------------------------------------

    def walk(self) -> Iterator[Tuple[Path, Node]]:
        """Yield ``(path, node)`` in pre-order, left before right."""
        stack: List[Tuple[Path, Node]] = [((), self.root)]
        while stack:
            path, node = stack.pop()
            yield path, node
            if not node.is_leaf:
                stack.append((path + (RIGHT,), node.child(RIGHT)))
                stack.append((path + (LEFT,), node.child(LEFT)))

    def leaf_paths(self) -> List[Path]:
        return [path for path, node in self.walk() if node.is_leaf]

    def internal_paths(self) -> List[Path]:
        return [path for path, node in self.walk() if not node.is_leaf]

    def leaves(self) -> List[Node]:
        return [node for _, node in self.walk() if node.is_leaf]

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_paths())

    @property
    def depth(self) -> int:
        return max(len(path) for path in self.leaf_paths())

    def node_at(self, path: Path) -> Node:
        node = self.root
        for side in path:
            node = node.child(side)
        return node

    def replace(self, path: Path, new_node: Node) -> "Tree":
        """Return a new tree with the subtree at ``path`` replaced."""

        def rebuild(node: Node, rest: Path) -> Node:
            if not rest:
                return new_node
            side, tail = rest[0], rest[1:]
            left = rebuild(node.child(LEFT), tail) if side == LEFT else node.left
            right = rebuild(node.child(RIGHT), tail) if side == RIGHT else node.right
            return Node(rule=node.rule, left=left, right=right)

        return Tree(rebuild(self.root, path))

    def split_variables(self) -> List[int]:
        """Covariate indices used by internal nodes, in pre-order."""
        return [node.rule.var_index for _, node in self.walk() if node.rule is not None]

    # -- leaf coefficients -----------------------------------------------

    @property
    def leaf_coeffs(self) -> List[Optional[np.ndarray]]:
        return [leaf.coeffs for leaf in self.leaves()]

    def with_leaf_coeffs(self, coeffs: Sequence[Optional[np.ndarray]]) -> "Tree":
        """Return a copy whose leaves (left to right) carry ``coeffs``."""
        if len(coeffs) != self.n_leaves:
            raise TreeValidityError(
                f"Got {len(coeffs)} coefficient vectors for {self.n_leaves} leaves"
            )
        sizes = {len(c) for c in coeffs if c is not None}
        if len(sizes) > 1:
            raise TreeValidityError("Leaf coefficient vectors must share one length")
        iterator = iter(coeffs)

        def rebuild(node: Node) -> Node:
            if node.is_leaf:
                c = next(iterator)
                if c is not None:
                    c = np.array(c, dtype=float)
                    c.setflags(write=False)
                return Node(coeffs=c)
            return Node(
                rule=node.rule, left=rebuild(node.child(LEFT)), right=rebuild(node.child(RIGHT))
            )

        return Tree(rebuild(self.root))

    # -- routing -----------------------------------------------------------

    def route(self, covariates: np.ndarray) -> np.ndarray:
        """Leaf index of every row of a ``(n, p)`` covariate matrix."""
        X = np.atleast_2d(np.asarray(covariates, dtype=float))
        out = np.empty(X.shape[0], dtype=int)
        counter = [0]

        def visit(node: Node, rows: np.ndarray) -> None:
            if node.is_leaf:
                out[rows] = counter[0]
                counter[0] += 1
                return
            assert node.rule is not None
            left = node.rule.goes_left(X[rows])
            visit(node.child(LEFT), rows[left])
            visit(node.child(RIGHT), rows[~left])

        visit(self.root, np.arange(X.shape[0]))
        return out

    # -- text serialization -----------------------------------------------

    def to_text(self, include_coeffs: bool = True) -> str:
        """Nested text form: ``split <var> <threshold>`` / ``leaf [coeffs...]``."""
        lines = []
        for path, node in self.walk():
            indent = "  " * len(path)
            if node.rule is not None:
                lines.append(f"{indent}split {node.rule.var_index} {node.rule.threshold!r}")
            elif include_coeffs and node.coeffs is not None:
                values = " ".join(repr(float(v)) for v in node.coeffs)
                lines.append(f"{indent}leaf {values}")
            else:
                lines.append(f"{indent}leaf")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "Tree":
        """Parse the output of :meth:`to_text`.

        Raises:
            TreeValidityError: If the text is not a well-formed tree
        """
        lines = [line for line in text.splitlines() if line.strip()]
        position = [0]

        def parse(depth: int) -> Node:
            if position[0] >= len(lines):
                raise TreeValidityError("Tree text ended before all children were read")
            line = lines[position[0]]
            indent = len(line) - len(line.lstrip(" "))
            if indent != 2 * depth:
                raise TreeValidityError(f"Bad indentation in tree text: {line!r}")
            position[0] += 1
            parts = line.split()
            if parts[0] == "split" and len(parts) == 3:
                rule = SplitRule(int(parts[1]), float(parts[2]))
                left = parse(depth + 1)
                right = parse(depth + 1)
                return Node(rule=rule, left=left, right=right)
            if parts[0] == "leaf":
                coeffs = np.array([float(v) for v in parts[1:]]) if len(parts) > 1 else None
                if coeffs is not None:
                    coeffs.setflags(write=False)
                return Node(coeffs=coeffs)
            raise TreeValidityError(f"Unrecognized tree line: {line!r}")

        root = parse(0)
        if position[0] != len(lines):
            raise TreeValidityError("Trailing lines after a complete tree")
        return cls(root)


def assign_leaf(x: np.ndarray, tree: Tree) -> int:
    """Leaf index of a single covariate vector; ties go left."""
    node = tree.root
    path: Path = ()
    while node.rule is not None:
        side = LEFT if bool(node.rule.goes_left(np.asarray(x, dtype=float))) else RIGHT
        path = path + (side,)
        node = node.child(side)
    return tree.leaf_paths().index(path)


class CovariateSpace:
    """Training covariates plus the distinct observed values of each covariate.

    A threshold ``a`` for covariate ``j`` is available at a node when ``a`` is an
    observed value of ``j`` and ``x_j <= a`` leaves both children nonempty.
    """

    def __init__(self, covariates: np.ndarray):
        X = np.atleast_2d(np.asarray(covariates, dtype=float))
        if not np.all(np.isfinite(X)):
            raise TreeValidityError("Covariates must be finite")
        self.X = X
        self.values = [np.unique(X[:, j]) for j in range(X.shape[1])]

    @property
    def n_particles(self) -> int:
        return int(self.X.shape[0])

    @property
    def n_vars(self) -> int:
        return int(self.X.shape[1])

    def available(self, rows: np.ndarray) -> Dict[int, np.ndarray]:
        """Map covariate index to its available thresholds for the given rows."""
        if rows.size < 2:
            return {}
        sub = self.X[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        out: Dict[int, np.ndarray] = {}
        for j, values in enumerate(self.values):
            if lo[j] < hi[j]:
                out[j] = values[(values >= lo[j]) & (values < hi[j])]
        return out

    def rows_at(self, tree: Tree, path: Path) -> np.ndarray:
        rows = np.arange(self.n_particles)
        node = tree.root
        for side in path:
            assert node.rule is not None
            left = node.rule.goes_left(self.X[rows])
            rows = rows[left] if side == LEFT else rows[~left]
            node = node.child(side)
        return rows

    def leaf_rows(self, tree: Tree) -> List[np.ndarray]:
        """Training rows of every leaf, left to right."""
        leaf_index = tree.route(self.X)
        return [np.flatnonzero(leaf_index == r) for r in range(tree.n_leaves)]

    def is_valid(self, tree: Tree) -> bool:
        """Every leaf holds at least one training particle."""
        counts = np.bincount(tree.route(self.X), minlength=tree.n_leaves)
        return bool(np.all(counts > 0))


CovariatesLike = Union[np.ndarray, CovariateSpace]


def _space(covariates: CovariatesLike) -> CovariateSpace:
    return covariates if isinstance(covariates, CovariateSpace) else CovariateSpace(covariates)


def p_split(depth: int, params: TreePriorParams) -> float:
    """Prior probability that a node at ``depth`` (root = 0) is internal."""
    return params.alpha * (1.0 + depth) ** (-params.nu)


def sample_tree_prior(
    covariates: CovariatesLike, params: TreePriorParams, rng: np.random.Generator
) -> Tree:
    """Draw a tree top-down from the tree-generating prior."""
    space = _space(covariates)

    def grow(rows: np.ndarray, depth: int) -> Node:
        avail = space.available(rows)
        if not avail or rng.random() >= p_split(depth, params):
            return Node()
        var_index = int(rng.choice(sorted(avail)))
        threshold = float(rng.choice(avail[var_index]))
        left = space.X[rows, var_index] <= threshold
        return Node(
            rule=SplitRule(var_index, threshold),
            left=grow(rows[left], depth + 1),
            right=grow(rows[~left], depth + 1),
        )

    return Tree(grow(np.arange(space.n_particles), 0))


def log_tree_prior(tree: Tree, covariates: CovariatesLike, params: TreePriorParams) -> float:
    """Log prior probability of the tree structure given the covariates.

    Raises:
        TreeValidityError: If a rule is not an available split at its node
    """
    space = _space(covariates)

    def visit(node: Node, rows: np.ndarray, depth: int) -> float:
        avail = space.available(rows)
        if node.rule is None:
            if not avail:
                return 0.0
            return math.log1p(-p_split(depth, params))
        rule = node.rule
        thresholds = avail.get(rule.var_index)
        if thresholds is None or not np.any(thresholds == rule.threshold):
            raise TreeValidityError(
                f"Rule x[{rule.var_index}] <= {rule.threshold!r} is not an available split"
            )
        split_prob = p_split(depth, params)
        if split_prob <= 0.0:
            return -math.inf
        total = math.log(split_prob) - math.log(len(avail)) - math.log(thresholds.size)
        left = space.X[rows, rule.var_index] <= rule.threshold
        total += visit(node.child(LEFT), rows[left], depth + 1)
        total += visit(node.child(RIGHT), rows[~left], depth + 1)
        return total

    return visit(tree.root, np.arange(space.n_particles), 0)


@dataclass(frozen=True)
class MoveProposal:
    """Outcome of a tree proposal.

    ``status`` is ``"ok"`` for a candidate to accept or reject, ``"noop"`` when the
    move is structurally impossible and ``"invalid"`` when the candidate leaves a
    leaf empty or has zero prior probability; the latter two count as rejections.
    """

    move: Move
    tree: Optional[Tree]
    log_ratio: float
    status: str = "ok"

    @property
    def is_candidate(self) -> bool:
        return self.status == "ok" and self.tree is not None


def _prunable_paths(tree: Tree) -> List[Path]:
    return [
        path
        for path, node in tree.walk()
        if not node.is_leaf and node.child(LEFT).is_leaf and node.child(RIGHT).is_leaf
    ]


def _swappable_paths(tree: Tree) -> List[Path]:
    return [
        path
        for path, node in tree.walk()
        if not node.is_leaf and (not node.child(LEFT).is_leaf or not node.child(RIGHT).is_leaf)
    ]


def _finish(
    move: Move,
    old: Tree,
    new: Tree,
    space: CovariateSpace,
    params: TreePriorParams,
    log_q_reverse: float,
    log_q_forward: float,
) -> MoveProposal:
    if not space.is_valid(new):
        return MoveProposal(move, None, -math.inf, "invalid")
    log_prior_new = log_tree_prior(new, space, params)
    if log_prior_new == -math.inf:
        return MoveProposal(move, None, -math.inf, "invalid")
    log_ratio = log_prior_new - log_tree_prior(old, space, params) + log_q_reverse - log_q_forward
    return MoveProposal(move, new, log_ratio)


def _log(value: float) -> float:
    return math.log(value) if value > 0 else -math.inf


def propose_move(
    tree: Tree,
    covariates: CovariatesLike,
    move_probs: Sequence[float],
    params: TreePriorParams,
    rng: np.random.Generator,
) -> MoveProposal:
    """Draw one of GROW/PRUNE/CHANGE/SWAP and build the candidate tree.

    The returned log ratio is the tree-prior ratio plus the log of
    ``q(old | new) / q(new | old)``; the likelihood ratio is left to the caller.
    """
    probs = np.asarray(move_probs, dtype=float)
    if probs.shape != (4,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(
            f"move_probs must be 4 non-negative numbers summing to 1, got {move_probs}"
        )
    space = _space(covariates)
    move = MOVES[int(rng.choice(4, p=probs))]
    p_grow, p_prune, p_change, p_swap = (float(p) for p in probs)

    if move is Move.GROW:
        leaf_paths = tree.leaf_paths()
        path = leaf_paths[int(rng.integers(len(leaf_paths)))]
        rows = space.rows_at(tree, path)
        avail = space.available(rows)
        if not avail:
            return MoveProposal(move, None, -math.inf, "noop")
        var_index = int(rng.choice(sorted(avail)))
        thresholds = avail[var_index]
        threshold = float(rng.choice(thresholds))
        grown = Node(rule=SplitRule(var_index, threshold), left=Node(), right=Node())
        new = tree.replace(path, grown)
        log_q_forward = (
            _log(p_grow)
            - math.log(len(leaf_paths))
            - math.log(len(avail))
            - math.log(thresholds.size)
        )
        log_q_reverse = _log(p_prune) - math.log(len(_prunable_paths(new)))
        return _finish(move, tree, new, space, params, log_q_reverse, log_q_forward)

    if move is Move.PRUNE:
        candidates = _prunable_paths(tree)
        if not candidates:
            return MoveProposal(move, None, -math.inf, "noop")
        path = candidates[int(rng.integers(len(candidates)))]
        rule = tree.node_at(path).rule
        assert rule is not None
        new = tree.replace(path, Node())
        avail = space.available(space.rows_at(tree, path))
        log_q_forward = _log(p_prune) - math.log(len(candidates))
        log_q_reverse = (
            _log(p_grow)
            - math.log(new.n_leaves)
            - math.log(len(avail))
            - math.log(avail[rule.var_index].size)
        )
        return _finish(move, tree, new, space, params, log_q_reverse, log_q_forward)

    if move is Move.CHANGE:
        candidates = tree.internal_paths()
        if not candidates:
            return MoveProposal(move, None, -math.inf, "noop")
        path = candidates[int(rng.integers(len(candidates)))]
        node = tree.node_at(path)
        assert node.rule is not None
        avail = space.available(space.rows_at(tree, path))
        var_index = int(rng.choice(sorted(avail)))
        threshold = float(rng.choice(avail[var_index]))
        new = tree.replace(
            path, Node(rule=SplitRule(var_index, threshold), left=node.left, right=node.right)
        )
        # both directions pick the node and the predictor with equal probability
        log_q_forward = -math.log(avail[var_index].size)
        log_q_reverse = -math.log(avail[node.rule.var_index].size)
        return _finish(move, tree, new, space, params, log_q_reverse, log_q_forward)

    candidates = _swappable_paths(tree)
    if not candidates:
        return MoveProposal(move, None, -math.inf, "noop")
    path = candidates[int(rng.integers(len(candidates)))]
    parent = tree.node_at(path)
    left, right = parent.child(LEFT), parent.child(RIGHT)
    internal_sides = [side for side, child in ((LEFT, left), (RIGHT, right)) if not child.is_leaf]
    both_same = len(internal_sides) == 2 and left.rule == right.rule
    if both_same:
        new_parent = Node(
            rule=left.rule,
            left=Node(rule=parent.rule, left=left.left, right=left.right),
            right=Node(rule=parent.rule, left=right.left, right=right.right),
        )
    else:
        side = internal_sides[int(rng.integers(len(internal_sides)))]
        chosen = parent.child(side)
        swapped = Node(rule=parent.rule, left=chosen.left, right=chosen.right)
        new_parent = Node(
            rule=chosen.rule,
            left=swapped if side == LEFT else left,
            right=swapped if side == RIGHT else right,
        )
        new_left, new_right = new_parent.child(LEFT), new_parent.child(RIGHT)
        if not new_left.is_leaf and not new_right.is_leaf and new_left.rule == new_right.rule:
            # the reverse swap would move both children, so this move has no inverse
            return MoveProposal(move, None, -math.inf, "invalid")
    new = tree.replace(path, new_parent)
    return _finish(move, tree, new, space, params, 0.0, 0.0)
