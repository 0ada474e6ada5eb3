"""Trie-constrained beam search with one-shot tree verification.

Decoding starts as ordinary beam search where every step only considers the
trie children of each beam's current node. After each step a cost model
compares the time to generate the remaining levels one step at a time with
the time to score every remaining candidate at once. Once the latter is
cheaper, the subtrees below all live beams are flattened depth-first into a
single sequence, a tree mask restricts each node's attention to its own
prefix and ancestors, and one forward pass yields every node's next-token
distribution. Path scores are accumulated down the tree and the best leaves
are traced back.

Scores are log-probabilities renormalized over the legal children of the
node being extended, in both the stepwise and the one-shot path.
"""

from __future__ import annotations

import re
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DecodeError, ShapeError
from .model import PAD, ToyTransformer, forward, log_softmax
from .trie import PrefixTrie

MAX_FLAT_NODES = 4096


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    score: float
    node: int


@dataclass
class DecodeSession:
    prompt: tuple[int, ...]
    beams: list[BeamHypothesis]
    steps: int = 0
    forward_passes: int = 0

    @classmethod
    def start(cls, prompt: Sequence[int]) -> "DecodeSession":
        prompt = tuple(int(t) for t in prompt)
        if not prompt:
            raise DecodeError("prompt must contain at least one token")
        return cls(prompt, [BeamHypothesis((), 0.0, 0)])

    def prefix(self, beam: BeamHypothesis) -> tuple[int, ...]:
        return self.prompt + beam.tokens


def legal_logprobs(logits_row: np.ndarray, children: dict[int, int]) -> dict[int, float]:
    """Log-probabilities renormalized over the legal child tokens."""
    toks = np.fromiter(children, dtype=np.int64, count=len(children))
    lp = log_softmax(np.asarray(logits_row, dtype=np.float64)[toks])
    return dict(zip(toks.tolist(), lp.tolist()))


def _batch_last_logits(model: ToyTransformer, prefixes: list[tuple[int, ...]]) -> np.ndarray:
    """Logits at the last position of each prefix, one forward over a left-padded batch."""
    width = max(len(p) for p in prefixes)
    b = len(prefixes)
    tokens = np.full((b, width), PAD, dtype=np.int64)
    positions = np.zeros((b, width), dtype=np.int64)
    mask = np.zeros((b, width, width), dtype=bool)
    causal = np.tril(np.ones((width, width), dtype=bool))
    for i, p in enumerate(prefixes):
        off = width - len(p)
        tokens[i, off:] = p
        positions[i, off:] = np.arange(len(p))
        mask[i, off:, off:] = causal[: len(p), : len(p)]
    return forward(model, tokens, mask, positions)[:, -1, :]


def constrained_step(model: ToyTransformer, session: DecodeSession, trie: PrefixTrie, beam_size: int) -> DecodeSession:
    """Extend every unfinished beam by one legal token and keep the best ``beam_size``.

    Beams already at a leaf are carried over unchanged and compete on score.
    """
    if beam_size < 1:
        raise DecodeError("beam_size must be >= 1")
    active = [i for i, b in enumerate(session.beams) if not trie.is_leaf(b.node)]
    if not active:
        raise DecodeError("every beam is at a leaf; finalize instead of stepping")
    logits = _batch_last_logits(model, [session.prefix(session.beams[i]) for i in active])
    candidates = []
    for i, beam in enumerate(session.beams):
        if trie.is_leaf(beam.node):
            candidates.append((-beam.score, i, -1, beam))
    for row, i in enumerate(active):
        beam = session.beams[i]
        children = trie.child_of[beam.node]
        for tok, lp in legal_logprobs(logits[row], children).items():
            candidates.append((-(beam.score + lp), i, tok,
                               BeamHypothesis(beam.tokens + (tok,), beam.score + lp, children[tok])))
    candidates.sort(key=lambda c: c[:3])
    return replace(session, beams=[c[3] for c in candidates[:beam_size]],
                   steps=session.steps + 1, forward_passes=session.forward_passes + 1)


# ---------------------------------------------------------------------------
# cost model and trigger


@dataclass(frozen=True)
class CostModel:
    """Step time (EMA) and a linear verification cost ``alpha * nodes + beta``.

    Units are whatever the observations use; the defaults are in units of one
    autoregressive step.
    """

    t_step: float = 1.0
    alpha: float = 0.01
    beta: float = 1.0
    decay: float = 0.9
    window: int = 32
    n_step_obs: int = 0
    verify_obs: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if min(self.t_step, self.alpha, self.beta) < 0:
            raise ValueError("cost model parameters must be >= 0")

    def verify_cost(self, n_nodes: int) -> float:
        return self.alpha * n_nodes + self.beta


def update_cost_model(cm: CostModel, step_times: Sequence[float] = (), verify_times: Sequence[tuple[int, float]] = ()) -> CostModel:
    """Fold in measured step latencies and ``(node_count, seconds)`` verification timings."""
    t_step, n_obs = cm.t_step, cm.n_step_obs
    for t in step_times:
        if t < 0:
            raise ValueError("timings must be >= 0")
        t_step = t if n_obs == 0 else cm.decay * t_step + (1.0 - cm.decay) * t
        n_obs += 1
    window = deque(cm.verify_obs, maxlen=cm.window)
    for n, t in verify_times:
        if n < 0 or t < 0:
            raise ValueError("timings must be >= 0")
        window.append((float(n), float(t)))
    alpha, beta = cm.alpha, cm.beta
    if verify_times and len(window) >= 2:
        obs = np.array(window)
        if np.ptp(obs[:, 0]) > 0:
            A = np.column_stack([obs[:, 0], np.ones(len(obs))])
            (alpha, beta), *_ = np.linalg.lstsq(A, obs[:, 1], rcond=None)
            alpha, beta = max(float(alpha), 0.0), max(float(beta), 0.0)
    return replace(cm, t_step=float(t_step), alpha=alpha, beta=beta, n_step_obs=n_obs, verify_obs=tuple(window))


@dataclass(frozen=True)
class TriggerEstimate:
    trigger: bool
    predicted_saving: float
    remaining_levels: int
    n_nodes: int


def estimate_trigger(cm: CostModel, session: DecodeSession, trie: PrefixTrie,
                     max_nodes: int = MAX_FLAT_NODES) -> TriggerEstimate:
    """Fire when stepping through the remaining levels costs more than one verification.

    With a single level left a verification pass replaces exactly one step and
    saves no forward pass, so it never fires there. A subtree larger than
    ``max_nodes`` defers the trigger.
    """
    l_rem = max(int(trie.heights[b.node]) for b in session.beams)
    n = sum(int(trie.sizes[b.node]) for b in session.beams)
    saving = cm.t_step * l_rem - cm.verify_cost(n)
    return TriggerEstimate(saving > 0 and l_rem >= 2 and n <= max_nodes, saving, l_rem, n)


# ---------------------------------------------------------------------------
# flattening and tree mask


@dataclass(frozen=True)
class FlatNode:
    token: int
    parent: int  # flat index, -1 when the parent is the beam's own node
    depth: int  # 0 for the beam node's children
    trie_node: int
    beam: int


@dataclass
class FlattenedSubtree:
    nodes: list[FlatNode]

    def __len__(self) -> int:
        return len(self.nodes)


def flatten_subtree(session: DecodeSession, trie: PrefixTrie) -> FlattenedSubtree:
    """Depth-first preorder of every beam's remaining subtree, children by ascending token."""
    nodes: list[FlatNode] = []
    for b, beam in enumerate(session.beams):
        stack = [(child, -1, 0) for child in reversed(trie.children[beam.node])]
        while stack:
            tnode, parent, depth = stack.pop()
            me = len(nodes)
            nodes.append(FlatNode(int(trie.tokens[tnode]), parent, depth, tnode, b))
            stack.extend((c, me, depth + 1) for c in reversed(trie.children[tnode]))
    if not nodes:
        raise DecodeError("empty subtree: every beam is at a leaf")
    return FlattenedSubtree(nodes)


@dataclass
class TreeMask:
    """Input layout for one verification pass.

    The sequence is one left-padded prefix segment per beam that owns nodes,
    followed by all flattened nodes. ``prefix_last[b]`` is the sequence index
    of beam ``b``'s last prefix token; node ``i`` sits at ``node_start + i``.
    """

    tokens: np.ndarray
    positions: np.ndarray
    visible: np.ndarray
    prefix_last: dict[int, int]
    node_start: int
    n_nodes: int


def build_tree_mask(flat: FlattenedSubtree, session: DecodeSession) -> TreeMask:
    owners = sorted({nd.beam for nd in flat.nodes})
    lengths = {b: len(session.prefix(session.beams[b])) for b in owners}
    width = max(lengths.values())
    node_start = width * len(owners)
    total = node_start + len(flat)
    tokens = np.full(total, PAD, dtype=np.int64)
    positions = np.zeros(total, dtype=np.int64)
    visible = np.zeros((total, total), dtype=bool)
    seg_of: dict[int, slice] = {}
    prefix_last: dict[int, int] = {}
    for s, b in enumerate(owners):
        start = s * width + width - lengths[b]
        end = (s + 1) * width
        tokens[start:end] = session.prefix(session.beams[b])
        positions[start:end] = np.arange(lengths[b])
        visible[start:end, start:end] = np.tril(np.ones((lengths[b], lengths[b]), dtype=bool))
        seg_of[b] = slice(start, end)
        prefix_last[b] = end - 1
    for i, nd in enumerate(flat.nodes):
        row = node_start + i
        tokens[row] = nd.token
        positions[row] = lengths[nd.beam] + nd.depth
        visible[row, seg_of[nd.beam]] = True
        visible[row, row] = True
        p = nd.parent
        while p >= 0:
            visible[row, node_start + p] = True
            p = flat.nodes[p].parent
    return TreeMask(tokens, positions, visible, prefix_last, node_start, len(flat))


# ---------------------------------------------------------------------------
# verification


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    leaf: int  # trie node

    def payload(self, trie: PrefixTrie) -> int:
        return int(trie.payloads[self.leaf])


@dataclass
class VerificationResult:
    t_scores: np.ndarray  # [n_nodes, vocab] log-softmax at each node's position
    b_scores: np.ndarray  # [n_nodes]
    selected: list[Hypothesis]


def verify_parallel(model: ToyTransformer, session: DecodeSession, flat: FlattenedSubtree,
                    tm: TreeMask, trie: PrefixTrie, beam_size: int) -> tuple[DecodeSession, VerificationResult]:
    """Score every flattened node in one forward pass and pick the best leaves."""
    if tm.n_nodes != len(flat) or len(tm.tokens) != tm.node_start + len(flat):
        raise DecodeError("tree mask does not match the flattened subtree")
    for i, nd in enumerate(flat.nodes):
        if tm.tokens[tm.node_start + i] != nd.token:
            raise DecodeError(f"tree mask token at node {i} does not match the flattened subtree")
    logits = forward(model, tm.tokens, tm.visible, tm.positions).astype(np.float64)
    node_rows = logits[tm.node_start:]
    t_scores = log_softmax(node_rows)

    legal: dict[int, dict[int, float]] = {}  # keyed by sequence row of the context

    def context_scores(row: int, trie_node: int) -> dict[int, float]:
        if row not in legal:
            legal[row] = legal_logprobs(logits[row], trie.child_of[trie_node])
        return legal[row]

    b_scores = np.empty(len(flat), dtype=np.float64)
    for i, nd in enumerate(flat.nodes):
        beam = session.beams[nd.beam]
        if nd.parent < 0:
            base, row, ctx = beam.score, tm.prefix_last[nd.beam], beam.node
        else:
            base, row, ctx = b_scores[nd.parent], tm.node_start + nd.parent, flat.nodes[nd.parent].trie_node
        b_scores[i] = base + context_scores(row, ctx)[nd.token]

    candidates = []
    for b, beam in enumerate(session.beams):
        if trie.is_leaf(beam.node):
            candidates.append((-beam.score, b, -1, beam.tokens, beam.node))
    for i, nd in enumerate(flat.nodes):
        if trie.is_leaf(nd.trie_node):
            path = []
            j = i
            while j >= 0:
                path.append(flat.nodes[j].token)
                j = flat.nodes[j].parent
            tokens = session.beams[nd.beam].tokens + tuple(reversed(path))
            candidates.append((-b_scores[i], nd.beam, i, tokens, nd.trie_node))
    candidates.sort(key=lambda c: c[:3])
    selected = [Hypothesis(c[3], -c[0], c[4]) for c in candidates[:beam_size]]
    done = replace(session, beams=[BeamHypothesis(h.tokens, h.score, h.leaf) for h in selected],
                   forward_passes=session.forward_passes + 1)
    return done, VerificationResult(t_scores, b_scores, selected)


# ---------------------------------------------------------------------------
# driver


@dataclass
class DecodeResult:
    hypotheses: list[Hypothesis]
    steps: int
    forward_passes: int
    flattened_nodes: int
    trigger_step: int | None
    seconds: float = 0.0
    step_times: list[float] = field(default_factory=list)
    verify_time: tuple[int, float] | None = None


_FORCED = re.compile(r"ptpv_forced_at_depth\((\d+)\)")


def parse_mode(mode: str) -> tuple[str, int | None]:
    if mode in ("autoregressive", "ptpv"):
        return mode, None
    m = _FORCED.fullmatch(mode)
    if m:
        return "forced", int(m.group(1))
    raise DecodeError(f"unknown decode mode {mode!r}")


def decode(model: ToyTransformer, trie: PrefixTrie, prompt: Sequence[int], beam_size: int,
           mode: str = "ptpv", cost_model: CostModel | None = None,
           max_flat_nodes: int = MAX_FLAT_NODES) -> DecodeResult:
    """Decode the best ``beam_size`` trie leaves for ``prompt``.

    ``mode`` is ``"autoregressive"``, ``"ptpv"`` (cost-model trigger) or
    ``"ptpv_forced_at_depth(d)"`` (verify once ``d`` steps have been taken).
    """
    kind, forced_depth = parse_mode(mode)
    if trie.n_leaves == 0:
        raise DecodeError("trie has no leaves")
    if beam_size < 1:
        raise DecodeError("beam_size must be >= 1")
    cm = cost_model or CostModel()
    session = DecodeSession.start(prompt)
    if len(session.prompt) + int(trie.heights[0]) > model.config.max_positions:
        raise ShapeError("prompt plus trie depth exceeds the model's max_positions")
    trigger_step = None
    flattened = 0
    step_times = []
    verify_time = None
    t_start = time.perf_counter()
    while any(not trie.is_leaf(b.node) for b in session.beams):
        if kind == "ptpv":
            fire = estimate_trigger(cm, session, trie, max_flat_nodes).trigger
        else:
            fire = kind == "forced" and session.steps == forced_depth
        if fire:
            trigger_step = session.steps
            flat = flatten_subtree(session, trie)
            flattened = len(flat)
            t0 = time.perf_counter()
            session, _ = verify_parallel(model, session, flat, build_tree_mask(flat, session), trie, beam_size)
            verify_time = (flattened, time.perf_counter() - t0)
            break
        t0 = time.perf_counter()
        session = constrained_step(model, session, trie, beam_size)
        step_times.append(time.perf_counter() - t0)
    hyps = [Hypothesis(b.tokens, b.score, b.node) for b in session.beams]
    hyps.sort(key=lambda h: -h.score)
    return DecodeResult(hyps, session.steps, session.forward_passes, flattened, trigger_step,
                        time.perf_counter() - t_start, step_times, verify_time)


def profile_cost_model(model: ToyTransformer, trie: PrefixTrie, prompts: Sequence[Sequence[int]],
                       beam_size: int, cm: CostModel | None = None) -> CostModel:
    """Fit a cost model from wall-clock timings of real steps and forced verifications."""
    cm = cm or CostModel()
    depth = int(trie.heights[0])
    for prompt in prompts:
        ar = decode(model, trie, prompt, beam_size, "autoregressive")
        obs = []
        for d in range(depth):
            res = decode(model, trie, prompt, beam_size, f"ptpv_forced_at_depth({d})")
            if res.verify_time is not None:
                obs.append(res.verify_time)
        cm = update_cost_model(cm, ar.step_times, obs)
    return cm
