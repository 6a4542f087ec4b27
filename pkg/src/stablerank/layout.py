"""Prompt assembly, segment masking, and position assignment.

A ranking query is serialized as one sequence: a shared context block
(instruction, separator, interaction history, wrapped in span delimiters)
followed by one delimited block per candidate. Everything downstream hangs
off the :class:`PromptLayout` bookkeeping built here:

- the segment mask lets a candidate block attend only to itself and the
  shared context, never to other candidates;
- shared positional framing gives every candidate block the same position
  ids (continuing the context block), so under rotary attention a candidate
  sees identical geometry no matter which slot it occupies.

Both tricks are toggled independently through :class:`InvarianceMode`,
which is how the ablation grid (mask only, positions only, both, neither)
is expressed.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, LayoutError

# Special token ids. The structural delimiters live here because this module
# gives them meaning; the data module builds its vocabulary on top of them.
PAD = 0
SPAN_OPEN = 1
SPAN_CLOSE = 2
ITEM_OPEN = 3
ITEM_CLOSE = 4
SEP = 5
N_SPECIAL = 6


class InvarianceMode(Enum):
    """Which order-robustness mechanisms are active.

    STANDARD   causal mask, sequential positions (the plain fine-tune setup)
    POS_ONLY   causal mask, shared candidate positions
    ATTN_ONLY  segment mask, sequential positions
    FULL       segment mask, shared candidate positions
    """

    STANDARD = "standard"
    POS_ONLY = "pos"
    ATTN_ONLY = "attn"
    FULL = "full"

    @property
    def segment_mask(self) -> bool:
        return self in (InvarianceMode.ATTN_ONLY, InvarianceMode.FULL)

    @property
    def shared_positions(self) -> bool:
        return self in (InvarianceMode.POS_ONLY, InvarianceMode.FULL)

    @classmethod
    def parse(cls, name: str) -> "InvarianceMode":
        key = name.strip().lower().replace("-", "_")
        aliases = {
            "standard": cls.STANDARD,
            "pos": cls.POS_ONLY,
            "pos_only": cls.POS_ONLY,
            "attn": cls.ATTN_ONLY,
            "attn_only": cls.ATTN_ONLY,
            "full": cls.FULL,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ContractError(
                f"unknown invariance mode {name!r}; expected one of standard|pos|attn|full"
            ) from None


@dataclass
class PromptLayout:
    """Serialized query plus segment bookkeeping.

    Ranges are half-open [start, end) over token indices. The context range
    starts at 0 and the candidate ranges tile the rest of the sequence in
    slot order. ``candidate_order[s]`` is the canonical identity of the
    candidate sitting in slot s.
    """

    tokens: np.ndarray
    context_range: tuple[int, int]
    candidate_ranges: list[tuple[int, int]]
    candidate_order: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.candidate_order = np.asarray(self.candidate_order, dtype=np.int64)
        seq = self.tokens.shape[0]
        cs, ce = self.context_range
        if cs != 0 or not 0 < ce <= seq:
            raise LayoutError(f"context range [{cs},{ce}) invalid for seq length {seq}")
        if not self.candidate_ranges:
            raise LayoutError("layout needs at least one candidate")
        cursor = ce
        for a, b in self.candidate_ranges:
            if a != cursor or b <= a:
                raise LayoutError(f"candidate ranges must tile [{ce},{seq}) contiguously")
            cursor = b
        if cursor != seq:
            raise LayoutError(f"candidate ranges end at {cursor}, expected {seq}")
        n = len(self.candidate_ranges)
        if self.candidate_order.shape != (n,) or set(self.candidate_order.tolist()) != set(range(n)):
            raise LayoutError("candidate_order must be a permutation of 0..N-1")

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_candidates(self) -> int:
        return len(self.candidate_ranges)

    @property
    def context_len(self) -> int:
        return self.context_range[1] - self.context_range[0]


def assemble_prompt(
    instruction,
    history,
    candidates,
    order=None,
    max_seq_len: int | None = None,
) -> PromptLayout:
    """Serialize context and candidate token lists into a PromptLayout.

    Context block: SPAN_OPEN, instruction, SEP, history, SPAN_CLOSE (the
    separator is dropped when either side is empty). Slot s then holds
    ITEM_OPEN, candidates[order[s]], ITEM_CLOSE; delimiters belong to the
    segment they open or close. Candidates never fit by truncation: if the
    total exceeds max_seq_len this raises LayoutError.
    """
    candidates = [np.asarray(c, dtype=np.int64) for c in candidates]
    n = len(candidates)
    if n < 1:
        raise LayoutError("at least one candidate required")
    if order is None:
        order = np.arange(n, dtype=np.int64)
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or set(order.tolist()) != set(range(n)):
        raise ContractError(f"order must be a permutation of 0..{n - 1}")

    instruction = np.asarray(instruction, dtype=np.int64)
    history = np.asarray(history, dtype=np.int64)
    parts = [np.array([SPAN_OPEN], dtype=np.int64), instruction]
    if instruction.size and history.size:
        parts.append(np.array([SEP], dtype=np.int64))
    parts.append(history)
    parts.append(np.array([SPAN_CLOSE], dtype=np.int64))
    context = np.concatenate(parts)

    blocks = [context]
    ranges = []
    cursor = context.size
    for s in range(n):
        c = candidates[int(order[s])]
        block = np.concatenate(
            [np.array([ITEM_OPEN], dtype=np.int64), c, np.array([ITEM_CLOSE], dtype=np.int64)]
        )
        ranges.append((cursor, cursor + block.size))
        cursor += block.size
        blocks.append(block)
    if max_seq_len is not None and cursor > max_seq_len:
        raise LayoutError(
            f"assembled prompt is {cursor} tokens but max_seq_len is {max_seq_len}; "
            "candidates are never truncated"
        )
    return PromptLayout(
        tokens=np.concatenate(blocks),
        context_range=(0, int(context.size)),
        candidate_ranges=ranges,
        candidate_order=order,
    )


def build_segment_mask(layout: PromptLayout) -> np.ndarray:
    """Boolean [seq, seq]: query t may attend key u.

    Context attends context; each candidate block attends itself and the
    context; every cross-candidate cell is false.
    """
    seq = layout.seq_len
    mask = np.zeros((seq, seq), dtype=bool)
    cs, ce = layout.context_range
    mask[cs:ce, cs:ce] = True
    for a, b in layout.candidate_ranges:
        mask[a:b, a:b] = True
        mask[a:b, cs:ce] = True
    return mask


def combine_causal(seg: np.ndarray) -> np.ndarray:
    """Conjunction with the causal condition u <= t (sequence index order)."""
    if seg.ndim != 2 or seg.shape[0] != seg.shape[1]:
        raise ContractError(f"expected a square mask, got shape {seg.shape}")
    return seg & np.tril(np.ones(seg.shape, dtype=bool))


def build_attention_mask(layout: PromptLayout, mode: InvarianceMode) -> np.ndarray:
    """The mask the model actually runs under: segment-structured or plain
    causal depending on mode, always causal over sequence index."""
    if mode.segment_mask:
        seg = build_segment_mask(layout)
    else:
        seg = np.ones((layout.seq_len, layout.seq_len), dtype=bool)
    return combine_causal(seg)


def assign_positions(layout: PromptLayout, mode: InvarianceMode) -> np.ndarray:
    """Per-token 1-based position ids.

    Sequential modes: 1..seq_len. Shared-framing modes: context tokens get
    1..|context|, then every candidate's j-th token gets |context|+j no
    matter which slot the candidate occupies, so relative offsets to the
    context are identical across slots and permutations.
    """
    seq = layout.seq_len
    if not mode.shared_positions:
        return np.arange(1, seq + 1, dtype=np.int64)
    positions = np.empty(seq, dtype=np.int64)
    cs, ce = layout.context_range
    positions[cs:ce] = np.arange(1, ce - cs + 1)
    for a, b in layout.candidate_ranges:
        positions[a:b] = np.arange(ce + 1, ce + 1 + (b - a))
    return positions


def permute_layout(layout: PromptLayout, pi) -> PromptLayout:
    """Reorder candidate blocks; slot s of the result holds old slot pi[s].

    The context block is untouched. candidate_order is composed so each
    block keeps its canonical identity.
    """
    n = layout.n_candidates
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (n,) or set(pi.tolist()) != set(range(n)):
        raise ContractError(f"pi must be a permutation of 0..{n - 1}")
    cs, ce = layout.context_range
    blocks = [layout.tokens[cs:ce]]
    ranges = []
    cursor = ce
    for s in range(n):
        a, b = layout.candidate_ranges[int(pi[s])]
        ranges.append((cursor, cursor + (b - a)))
        cursor += b - a
        blocks.append(layout.tokens[a:b])
    return PromptLayout(
        tokens=np.concatenate(blocks),
        context_range=(cs, ce),
        candidate_ranges=ranges,
        candidate_order=layout.candidate_order[pi],
    )


def format_debug_grid(layout: PromptLayout, mode: InvarianceMode) -> str:
    """Plain-text dump of segments, positions, and the combined mask.

    '#' marks a permitted (query, key) cell. Meant for golden-file tests
    and eyeballing small layouts.
    """
    seq = layout.seq_len
    seg = np.empty(seq, dtype=object)
    cs, ce = layout.context_range
    seg[cs:ce] = "H"
    for s, (a, b) in enumerate(layout.candidate_ranges):
        seg[a:b] = str(s + 1)
    positions = assign_positions(layout, mode)
    mask = build_attention_mask(layout, mode)
    lines = [
        f"mode: {mode.value}",
        "seg: " + " ".join(seg),
        "pos: " + " ".join(str(p) for p in positions),
        "mask:",
    ]
    for t in range(seq):
        lines.append(" ".join("#" if mask[t, u] else "." for u in range(seq)))
    return "\n".join(lines) + "\n"
