"""Listwise rank training: nDCG machinery, pairwise logistic loss, AdamW.

The loss is the classic LambdaRank form: for every candidate pair where
one label beats the other, a logistic penalty on the score margin, weighted
by how much the list's nDCG would change if the two swapped places in the
current predicted ranking. Swap weights are recomputed from the current
scores each call but treated as constants by the gradient.

Determinism contract: a (config, seed) pair fixes the whole run. Batch
composition at step t comes from a counter-based generator seeded with
(seed, t), so resuming from a checkpoint at any step replays the identical
remainder of the run.
"""

import json
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import TokenizedQuery
from .errors import ConfigError, ContractError, TrainingDivergedError
from .layout import InvarianceMode
from .model import ModelParams
from .scoring import rank, scores_with_tensor


def dcg(gains, k: int) -> float:
    """Sum of gain_r / log2(r+1) over the first k ranks (1-based r)."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    gains = np.asarray(gains, dtype=np.float64)[:k]
    ranks = np.arange(1, gains.shape[0] + 1, dtype=np.float64)
    return float(np.sum(gains / np.log2(ranks + 1.0)))


def ndcg_at_k(scores, labels, k: int) -> float:
    """nDCG of ranking-by-scores against graded labels; 0 when no gain exists."""
    labels = np.asarray(labels, dtype=np.float64)
    if (labels < 0).any():
        raise ContractError("labels must be non-negative")
    ranking = rank(scores)
    ideal = dcg(np.sort(labels)[::-1], k)
    if ideal == 0.0:
        return 0.0
    return dcg(labels[ranking], k) / ideal


def delta_ndcg(scores, labels, i: int, j: int) -> float:
    """|nDCG change| from swapping candidates i and j in the current ranking,
    over the full list (k = N)."""
    if i == j:
        raise ContractError("delta_ndcg needs two distinct candidates")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = scores.shape[0]
    ranking = rank(scores)
    ideal = dcg(np.sort(labels)[::-1], n)
    if ideal == 0.0:
        return 0.0
    current = dcg(labels[ranking], n)
    swapped_ranking = ranking.copy()
    pos = np.empty(n, dtype=np.int64)
    pos[ranking] = np.arange(n)
    swapped_ranking[pos[i]], swapped_ranking[pos[j]] = j, i
    swapped = dcg(labels[swapped_ranking], n)
    return abs(swapped - current) / ideal


def _pair_weights(scores_data: np.ndarray, labels: np.ndarray):
    """(I, J, w): ordered index pairs with labels[I] > labels[J] and their
    frozen |delta nDCG| weights, in row-major pair order."""
    labels = np.asarray(labels, dtype=np.float64)
    I, J = np.nonzero(labels[:, None] > labels[None, :])
    if I.size == 0:
        return I, J, None
    n = labels.shape[0]
    ranking = rank(scores_data)
    pos = np.empty(n, dtype=np.int64)
    pos[ranking] = np.arange(n)
    discount = 1.0 / np.log2(pos + 2.0)
    ideal = dcg(np.sort(labels)[::-1], n)
    w = np.abs((labels[I] - labels[J]) * (discount[I] - discount[J])) / ideal
    return I, J, w


def lambdarank_loss(scores, labels, sigma: float = 1.0):
    """Mean over preference pairs of |dNDCG| * log(1 + exp(-sigma (s_i - s_j))).

    Returns None when the labels admit no preference pair (the caller skips
    the example). scores may be a plain array (inspection) or a Tensor on an
    active tape (training); weights are constants either way.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    s = scores if isinstance(scores, ad.Tensor) else ad.Tensor(np.asarray(scores, dtype=np.float64))
    I, J, w = _pair_weights(s.data, labels)
    if w is None:
        return None
    margins = ad.sub(ad.gather(s, I), ad.gather(s, J))
    penalties = ad.softplus(ad.mul(margins, -float(sigma)))
    return ad.mean(ad.mul(penalties, ad.Tensor(w.astype(s.data.dtype))))


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.05
    sigma: float = 1.0
    mode: InvarianceMode = InvarianceMode.FULL
    seed: int = 0
    grad_clip_norm: float | None = None
    weight_decay: float = 0.0
    eval_every: int = 50
    order_seed: int | None = None  # None: canonical presentation order

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = InvarianceMode.parse(self.mode)
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive when set")


@dataclass
class TrainLog:
    """One entry per optimizer step. Wall-clock stays in memory only; the
    serialized log must be a pure function of (config, seed, data)."""

    entries: list[dict] = field(default_factory=list)
    skipped_examples: int = 0
    wall_clock_seconds: float = 0.0

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n")


def warmup_lr(base: float, step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear ramp over the first warmup_fraction of steps, then flat."""
    warm = int(round(total_steps * warmup_fraction))
    if warm <= 0 or step >= warm:
        return base
    return base * (step + 1) / warm


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay and optional
    global-norm clipping, reading gradients off the parameter tensors."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params: ModelParams, moments: dict | None = None):
        self.params = params
        if moments is None:
            self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
            self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        else:
            self.m = {n: moments["m"][n].astype(params[n].dtype) for n in params.names()}
            self.v = {n: moments["v"][n].astype(params[n].dtype) for n in params.names()}

    def apply(self, step: int, lr: float, weight_decay: float = 0.0, clip_norm: float | None = None):
        grads = {}
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            if not np.isfinite(g).all():
                raise TrainingDivergedError(f"non-finite gradient in {name} at step {step}")
            grads[name] = g
        if clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > clip_norm:
                scale = clip_norm / total
                grads = {n: g * scale for n, g in grads.items()}
        t_idx = step + 1
        bc1 = 1.0 - self.BETA1**t_idx
        bc2 = 1.0 - self.BETA2**t_idx
        for name, tensor in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.EPS)
            if weight_decay:
                tensor.data -= lr * weight_decay * tensor.data
            tensor.data -= lr * update

    def state(self, step: int) -> dict:
        return {"step": step, "m": self.m, "v": self.v}


def optimizer_step(
    params: ModelParams,
    optimizer: AdamW,
    step: int,
    config: TrainConfig,
    total_steps: int | None = None,
) -> None:
    """One update at the warmup-scheduled learning rate for this step index."""
    total = config.steps if total_steps is None else total_steps
    lr = warmup_lr(config.learning_rate, step, total, config.warmup_fraction)
    optimizer.apply(step, lr, config.weight_decay, config.grad_clip_norm)


def _presentation_order(config: TrainConfig, step: int, slot: int, n: int):
    if config.order_seed is None:
        return None
    rng = np.random.default_rng((config.order_seed, step, slot))
    return rng.permutation(n)


def validation_ndcg(
    params: ModelParams, queries: list[TokenizedQuery], mode: InvarianceMode, k: int = 10
) -> float:
    """Mean nDCG@k over queries, canonical presentation order."""
    vals = []
    for tq in queries:
        scores, _ = scores_with_tensor(params, tq.instruction, tq.history, tq.candidates, mode)
        vals.append(ndcg_at_k(scores.data, tq.labels, k))
    return float(np.mean(vals)) if vals else 0.0


def train(
    params: ModelParams,
    train_queries: list[TokenizedQuery],
    config: TrainConfig,
    val_queries: list[TokenizedQuery] | None = None,
    start_step: int = 0,
    optimizer: AdamW | None = None,
    checkpoint_fn=None,
    checkpoint_every: int = 0,
    verbose: bool = False,
) -> tuple[AdamW, TrainLog]:
    """Gradient-accumulation training loop.

    Each optimizer step draws batch_size example indices from a generator
    seeded (config.seed, step), accumulates per-example gradients, averages,
    and applies one AdamW update at the warmup-scheduled rate. Examples
    without any preference pair are skipped and counted. checkpoint_fn, when
    given, is called as checkpoint_fn(completed_step, params, optimizer)
    every checkpoint_every steps.
    """
    if not train_queries:
        raise ContractError("empty training set")
    if not 0 <= start_step <= config.steps:
        raise ContractError(f"start_step {start_step} outside 0..{config.steps}")
    opt = optimizer if optimizer is not None else AdamW(params)
    log = TrainLog()
    t0 = time.monotonic()

    for step in range(start_step, config.steps):
        rng = np.random.default_rng((config.seed, step))
        picks = rng.integers(0, len(train_queries), size=config.batch_size)
        params.zero_grads()
        losses = []
        skipped = 0
        for slot, qi in enumerate(picks):
            tq = train_queries[int(qi)]
            order = _presentation_order(config, step, slot, len(tq.candidates))
            with ad.Tape():
                scores, _ = scores_with_tensor(
                    params, tq.instruction, tq.history, tq.candidates, config.mode, order=order
                )
                loss = lambdarank_loss(scores, tq.labels, config.sigma)
                if loss is None:
                    skipped += 1
                    continue
                if not np.isfinite(loss.data).all():
                    raise TrainingDivergedError(f"non-finite loss at step {step}")
                ad.backward(loss)
            losses.append(loss.item())
        log.skipped_examples += skipped

        used = len(losses)
        if used > 0:
            inv = 1.0 / used
            for t in params.values():
                if t.grad is not None:
                    t.grad *= inv
            optimizer_step(params, opt, step, config)
        entry = {
            "step": step,
            "loss": float(np.mean(losses)) if used else None,
            "examples_used": used,
            "skipped": skipped,
            "lr": warmup_lr(config.learning_rate, step, config.steps, config.warmup_fraction),
        }
        done = step + 1
        if val_queries is not None and config.eval_every > 0 and done % config.eval_every == 0:
            entry["val_ndcg10"] = validation_ndcg(params, val_queries, config.mode)
        log.entries.append(entry)
        if verbose and (done % 25 == 0 or done == config.steps):
            val_part = f" val_ndcg10={entry['val_ndcg10']:.4f}" if "val_ndcg10" in entry else ""
            loss_part = f"{entry['loss']:.5f}" if entry["loss"] is not None else "n/a"
            print(f"step {done}/{config.steps} loss={loss_part}{val_part}", file=sys.stderr)
        if checkpoint_fn is not None and checkpoint_every > 0 and done % checkpoint_every == 0:
            checkpoint_fn(done, params, opt)

    log.wall_clock_seconds = time.monotonic() - t0
    return opt, log
