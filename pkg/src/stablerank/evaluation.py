"""Effectiveness and order-robustness evaluation.

Robustness is measured by re-scoring the same candidate set under several
presentation orders and comparing the induced rankings pairwise (Kendall
tau, Spearman rho, top-k set agreement). Effectiveness (HR@k, nDCG@k) is
averaged across those orders, so an order-sensitive scorer pays for its
variance. Exposure asks the complementary question: does the input slot an
item lands in change its chance of reaching the output top-k?
"""

import csv
from dataclasses import dataclass

import numpy as np

from .data import TokenizedQuery
from .errors import ContractError
from .layout import InvarianceMode
from .model import ModelParams
from .scoring import score_candidates
from .training import ndcg_at_k


def hit_rate_at_k(ranking, labels, k: int) -> float:
    """1.0 if any positive-label identity sits in the top k of the ranking."""
    ranking = np.asarray(ranking, dtype=np.int64)
    labels = np.asarray(labels)
    if not 1 <= k <= ranking.shape[0]:
        raise ContractError(f"k={k} outside 1..{ranking.shape[0]}")
    return 1.0 if (labels[ranking[:k]] > 0).any() else 0.0


def _positions(ranking: np.ndarray, ids_sorted: np.ndarray) -> np.ndarray:
    """Rank position of each identity, aligned to ascending identity order."""
    pos = np.empty(ranking.shape[0], dtype=np.int64)
    pos[np.searchsorted(ids_sorted, ranking)] = np.arange(ranking.shape[0])
    return pos


def _check_rankings(a, b, min_n=1):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n = a.shape[0]
    if b.shape[0] != n or set(a.tolist()) != set(b.tolist()) or len(set(a.tolist())) != n:
        raise ContractError("rankings must be permutations of the same identity set")
    if n < min_n:
        raise ContractError(f"need at least {min_n} candidates")
    return a, b, n


def kendall_tau(ranking_a, ranking_b) -> float:
    """(concordant - discordant) / (n(n-1)/2) over unordered identity pairs."""
    a, b, n = _check_rankings(ranking_a, ranking_b, min_n=2)
    ids = np.sort(a)
    pa, pb = _positions(a, ids), _positions(b, ids)
    da = pa[:, None] - pa[None, :]
    db = pb[:, None] - pb[None, :]
    upper = np.triu_indices(n, k=1)
    signs = np.sign(da[upper]) * np.sign(db[upper])
    return float(signs.sum() / (n * (n - 1) / 2))


def spearman_rho(ranking_a, ranking_b) -> float:
    """1 - 6 sum(d^2) / (n(n^2-1)) over per-identity rank differences."""
    a, b, n = _check_rankings(ranking_a, ranking_b, min_n=2)
    ids = np.sort(a)
    d = (_positions(a, ids) - _positions(b, ids)).astype(np.float64)
    return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1)))


def topk_agreement(ranking_a, ranking_b, k: int) -> float:
    """|top-k(a) intersect top-k(b)| / k over identities."""
    a, b, n = _check_rankings(ranking_a, ranking_b)
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside 1..{n}")
    return len(set(a[:k].tolist()) & set(b[:k].tolist())) / k


@dataclass
class RobustnessReport:
    mode: InvarianceMode
    n_permutations: int
    k: int
    per_query: list[dict]  # query_id, tau, rho, topk, score_spread, ndcg5/10, hr5/10
    aggregate: dict  # means over queries

    def write_csv(self, summary_path: str, per_query_path: str) -> None:
        with open(summary_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "metric", "value"])
            for key in sorted(self.aggregate):
                w.writerow([self.mode.value, key, repr(self.aggregate[key])])
        fields = ["query_id", "tau", "rho", "topk", "score_spread", "ndcg5", "ndcg10", "hr5", "hr10"]
        with open(per_query_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for row in self.per_query:
                w.writerow([row["query_id"]] + [repr(float(row[f])) for f in fields[1:]])


def _query_permutations(n: int, P: int, rng: np.random.Generator) -> list[np.ndarray]:
    """P presentation orders, the first always the identity."""
    return [np.arange(n, dtype=np.int64)] + [rng.permutation(n) for _ in range(P - 1)]


def permutation_harness(
    params: ModelParams,
    queries: list[TokenizedQuery],
    mode: InvarianceMode,
    P: int = 8,
    k: int = 5,
    seed: int = 0,
) -> RobustnessReport:
    """Score every query under P orders; compare rankings pairwise.

    Per query the permutation stream is seeded (seed, query_id), so reports
    are reproducible and independent of query iteration order.
    """
    if P < 2:
        raise ContractError(f"need at least 2 permutations, got {P}")
    per_query = []
    for tq in queries:
        n = len(tq.candidates)
        rng = np.random.default_rng((seed, tq.query_id))
        rankings = []
        scores = np.empty((P, n))
        for p, order in enumerate(_query_permutations(n, P, rng)):
            sl = score_candidates(params, tq.instruction, tq.history, tq.candidates, mode, order=order)
            rankings.append(sl.ranking)
            scores[p] = sl.scores
        taus, rhos, tks = [], [], []
        for i in range(P):
            for j in range(i + 1, P):
                taus.append(kendall_tau(rankings[i], rankings[j]))
                rhos.append(spearman_rho(rankings[i], rankings[j]))
                tks.append(topk_agreement(rankings[i], rankings[j], k))
        per_query.append(
            {
                "query_id": tq.query_id,
                "tau": float(np.mean(taus)),
                "rho": float(np.mean(rhos)),
                "topk": float(np.mean(tks)),
                "score_spread": float((scores.max(axis=0) - scores.min(axis=0)).max()),
                "ndcg5": float(np.mean([ndcg_at_k(s, tq.labels, 5) for s in scores])),
                "ndcg10": float(np.mean([ndcg_at_k(s, tq.labels, 10) for s in scores])),
                "hr5": float(np.mean([hit_rate_at_k(r, tq.labels, min(5, n)) for r in rankings])),
                "hr10": float(np.mean([hit_rate_at_k(r, tq.labels, min(10, n)) for r in rankings])),
            }
        )
    keys = ["tau", "rho", "topk", "score_spread", "ndcg5", "ndcg10", "hr5", "hr10"]
    aggregate = {key: float(np.mean([row[key] for row in per_query])) for key in keys}
    aggregate["max_score_spread"] = float(max(row["score_spread"] for row in per_query))
    return RobustnessReport(mode, P, k, per_query, aggregate)


@dataclass
class ExposureTable:
    """Per input slot: fraction of trials whose occupant reached the top-k."""

    k: int
    K: int
    trials: int
    hits: np.ndarray  # integer hit counts per slot

    @property
    def exposure(self) -> np.ndarray:
        return self.hits / self.trials

    @property
    def slot_mean(self) -> float:
        # integer ratio: every trial contributes exactly k hits over K slots
        return float(self.hits.sum() / (self.trials * self.K))

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "exposure", "hits", "trials"])
            for s in range(self.K):
                w.writerow([s + 1, repr(float(self.exposure[s])), int(self.hits[s]), self.trials])


def exposure_report(
    params: ModelParams,
    queries: list[TokenizedQuery],
    mode: InvarianceMode,
    k: int = 5,
    P: int = 8,
    seed: int = 0,
) -> ExposureTable:
    """Tally, over queries x P orders, which input slots reach the top-k."""
    if P < 1:
        raise ContractError("need at least 1 permutation")
    if not queries:
        raise ContractError("empty query list")
    K = len(queries[0].candidates)
    if not 1 <= k <= K:
        raise ContractError(f"k={k} outside 1..{K}")
    hits = np.zeros(K, dtype=np.int64)
    trials = 0
    for tq in queries:
        if len(tq.candidates) != K:
            raise ContractError("exposure table needs equal-width candidate lists")
        rng = np.random.default_rng((seed, tq.query_id))
        for order in _query_permutations(K, P, rng):
            sl = score_candidates(params, tq.instruction, tq.history, tq.candidates, mode, order=order)
            top = set(sl.ranking[:k].tolist())
            for slot in range(K):
                if int(order[slot]) in top:
                    hits[slot] += 1
            trials += 1
    return ExposureTable(k=k, K=K, trials=trials, hits=hits)


def bootstrap_aggregate(rankings: list) -> np.ndarray:
    """Consensus ranking by ascending mean rank; ties by ascending identity."""
    if not rankings:
        raise ContractError("need at least one ranking")
    base = np.asarray(rankings[0], dtype=np.int64)
    n = base.shape[0]
    ident_set = set(base.tolist())
    if len(ident_set) != n:
        raise ContractError("ranking contains duplicate identities")
    ids = np.sort(base)
    mean_pos = np.zeros(n, dtype=np.float64)
    for r in rankings:
        r = np.asarray(r, dtype=np.int64)
        if r.shape[0] != n or set(r.tolist()) != ident_set:
            raise ContractError("rankings must share one identity set")
        mean_pos += _positions(r, ids)
    mean_pos /= len(rankings)
    # ascending mean rank; stable argsort over ascending identities breaks ties
    return ids[np.argsort(mean_pos, kind="stable")]


def bootstrap_stability(
    params: ModelParams,
    queries: list[TokenizedQuery],
    mode: InvarianceMode,
    P: int = 8,
    seed: int = 0,
) -> dict:
    """Bootstrapped-consensus agreement vs raw single-pass agreement.

    Per query, two disjoint batches of P orders each are scored; the tau
    between their consensus rankings measures the aggregated system, while
    the mean pairwise tau within the first batch measures the single-pass
    system on the same draw budget.
    """
    if P < 2:
        raise ContractError(f"need at least 2 permutations, got {P}")
    boot_taus, single_taus = [], []
    for tq in queries:
        n = len(tq.candidates)
        rng = np.random.default_rng((seed, tq.query_id))
        orders = _query_permutations(n, 2 * P, rng)
        rankings = [
            score_candidates(
                params, tq.instruction, tq.history, tq.candidates, mode, order=order
            ).ranking
            for order in orders
        ]
        first, second = rankings[:P], rankings[P:]
        boot_taus.append(kendall_tau(bootstrap_aggregate(first), bootstrap_aggregate(second)))
        single_taus.append(
            float(np.mean([kendall_tau(first[i], first[j]) for i in range(P) for j in range(i + 1, P)]))
        )
    return {
        "bootstrap_tau": float(np.mean(boot_taus)),
        "single_pass_tau": float(np.mean(single_taus)),
        "per_query_bootstrap_tau": boot_taus,
        "per_query_single_pass_tau": single_taus,
    }


def effectiveness_table(
    params: ModelParams,
    queries: list[TokenizedQuery],
    modes: list[InvarianceMode],
    P: int = 8,
    seed: int = 0,
) -> list[dict]:
    """One row per mode: HR@5/10 and nDCG@5/10 averaged over permutations."""
    rows = []
    for mode in modes:
        report = permutation_harness(params, queries, mode, P=P, seed=seed)
        rows.append(
            {
                "mode": mode.value,
                "hr5": report.aggregate["hr5"],
                "hr10": report.aggregate["hr10"],
                "ndcg5": report.aggregate["ndcg5"],
                "ndcg10": report.aggregate["ndcg10"],
                "tau": report.aggregate["tau"],
            }
        )
    return rows


def write_effectiveness_csv(path: str, rows: list[dict]) -> None:
    fields = ["mode", "hr5", "hr10", "ndcg5", "ndcg10", "tau"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([row["mode"]] + [repr(float(row[f])) for f in fields[1:]])
