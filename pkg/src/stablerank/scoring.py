"""Single-pass listwise scoring.

One forward pass over the assembled prompt scores every candidate: a
candidate's score is the mean token-level log-probability over its block,
delimiters included. The first token of a block is scored from the last
context row's log-softmax rather than from the physically preceding row;
the preceding row belongs to whatever candidate happens to sit in the
previous slot, so conditioning on it would leak presentation order into
the score. The last context row is the same no matter how candidates are
arranged.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .layout import (
    InvarianceMode,
    PromptLayout,
    assemble_prompt,
    assign_positions,
    build_attention_mask,
)
from .model import ModelParams, forward


@dataclass
class ScoredList:
    """Scores indexed by canonical candidate identity, plus the induced ranking.

    ranking[r] is the identity placed at rank r (rank 0 = best). order is
    the presentation permutation the prompt was assembled with.
    """

    identities: np.ndarray
    scores: np.ndarray
    ranking: np.ndarray
    order: np.ndarray
    mode: InvarianceMode

    @property
    def n(self) -> int:
        return int(self.identities.shape[0])


def span_score_indices(layout: PromptLayout) -> tuple[np.ndarray, np.ndarray]:
    """(rows, cols) into the [seq, vocab] log-prob matrix, slot by slot.

    For a candidate block [a, b): token a is read from the last context row;
    token t in (a, b) is read from row t-1. Concatenated over slots, so slot
    s occupies positions sum(len_0..s-1) .. +len_s.
    """
    ce = layout.context_range[1]
    rows, cols = [], []
    for a, b in layout.candidate_ranges:
        if b - a < 1:
            raise ContractError(f"empty candidate span [{a},{b})")
        rows.append(np.concatenate([[ce - 1], np.arange(a, b - 1)]))
        cols.append(layout.tokens[a:b])
    return np.concatenate(rows), np.concatenate(cols)


def span_log_probs(logits, layout: PromptLayout) -> list[np.ndarray]:
    """Per-slot arrays of token log-probs for each candidate block."""
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    if data.ndim != 2 or data.shape[0] != layout.seq_len:
        raise ContractError(
            f"logits shape {data.shape} does not match layout length {layout.seq_len}"
        )
    lp = ad.log_softmax(ad.Tensor(data)).data
    rows, cols = span_score_indices(layout)
    picked = lp[rows, cols]
    out = []
    offset = 0
    for a, b in layout.candidate_ranges:
        out.append(picked[offset : offset + (b - a)])
        offset += b - a
    return out


def candidate_scores_tensor(logits: ad.Tensor, layout: PromptLayout) -> ad.Tensor:
    """Differentiable scores [N], indexed by canonical candidate identity.

    Mean span log-prob per slot, then routed slot -> identity through a
    constant averaging matrix so gradients flow back into the forward pass.
    """
    lp = ad.log_softmax(logits)
    rows, cols = span_score_indices(layout)
    picked = ad.select(lp, rows, cols)
    n = layout.n_candidates
    avg = np.zeros((n, rows.shape[0]), dtype=logits.data.dtype)
    offset = 0
    for s, (a, b) in enumerate(layout.candidate_ranges):
        ident = int(layout.candidate_order[s])
        avg[ident, offset : offset + (b - a)] = 1.0 / (b - a)
        offset += b - a
    return ad.reshape(ad.matmul(ad.Tensor(avg), ad.reshape(picked, (rows.shape[0], 1))), (n,))


def rank(scores) -> np.ndarray:
    """Descending stable sort; ties broken by ascending candidate identity."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ContractError("NaN score cannot be ranked")
    return np.argsort(-scores, kind="stable")


def score_candidates(
    params: ModelParams,
    instruction,
    history,
    candidates,
    mode: InvarianceMode,
    order=None,
) -> ScoredList:
    """Assemble, run one forward pass, and score all candidate blocks.

    The scoring mode is an input here, deliberately independent of whatever
    mode the parameters were trained under. When called with a recording
    tape active the score computation stays differentiable.
    """
    layout = assemble_prompt(
        instruction, history, candidates, order=order, max_seq_len=params.config.max_seq_len
    )
    positions = assign_positions(layout, mode)
    mask = build_attention_mask(layout, mode)
    logits = forward(params, layout.tokens, positions, mask)
    scores = candidate_scores_tensor(logits, layout)
    data = scores.data
    if not np.isfinite(data).all():
        raise ContractError("non-finite candidate score")
    return ScoredList(
        identities=np.arange(layout.n_candidates, dtype=np.int64),
        scores=data,
        ranking=rank(data),
        order=layout.candidate_order.copy(),
        mode=mode,
    )


def scores_with_tensor(
    params: ModelParams,
    instruction,
    history,
    candidates,
    mode: InvarianceMode,
    order=None,
) -> tuple[ad.Tensor, PromptLayout]:
    """Training-path variant: identity-indexed score Tensor plus the layout."""
    layout = assemble_prompt(
        instruction, history, candidates, order=order, max_seq_len=params.config.max_seq_len
    )
    positions = assign_positions(layout, mode)
    mask = build_attention_mask(layout, mode)
    logits = forward(params, layout.tokens, positions, mask)
    return candidate_scores_tensor(logits, layout), layout


def dump_scores(path: str, records: list[dict]) -> None:
    """Line-delimited score records for downstream tooling.

    Each record: query_id, mode, order, scores (by identity), ranking.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def scored_list_record(query_id, sl: ScoredList) -> dict:
    return {
        "query_id": int(query_id),
        "mode": sl.mode.value,
        "order": [int(x) for x in sl.order],
        "scores": [float(s) for s in sl.scores],
        "ranking": [int(r) for r in sl.ranking],
    }
