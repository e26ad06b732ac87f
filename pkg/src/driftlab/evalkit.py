"""Evaluation maths: BLEU, perplexity, empirical KL and Pareto frontiers."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .seqpolicy import SeqPolicy, log_prob_batch, sample_batch


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _bleu_stats(candidate, reference, max_n: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        matches[n - 1] = sum(min(c, ref[g]) for g, c in cand.items())
        totals[n - 1] = max(len(candidate) - n + 1, 0)
    return matches, totals, len(candidate), len(reference)


def _bleu_from_stats(matches, totals, cand_len: int, ref_len: int) -> float:
    if cand_len == 0 or np.any(matches == 0):
        return 0.0
    log_p = np.mean(np.log(matches / totals))
    bp = min(0.0, 1.0 - ref_len / cand_len)
    return float(math.exp(bp + log_p))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Single-reference BLEU without smoothing."""
    if max_n < 1:
        raise ValueError("max_n must be at least 1")
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return _bleu_from_stats(*_bleu_stats(list(candidate), list(reference), max_n))


def corpus_bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU: n-gram counts and lengths are pooled before the geometric mean."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        m, t, c, r = _bleu_stats(list(cand), list(ref), max_n)
        matches += m
        totals += t
        c_len += c
        r_len += r
    return _bleu_from_stats(matches, totals, c_len, r_len)


# ---------------------------------------------------------------------------
# likelihood-based drift


def perplexity(policy: SeqPolicy, corpus) -> float:
    """exp(mean per-token NLL) over ``(prompt, response)`` pairs."""
    if not corpus:
        raise ValueError("corpus must be non-empty")
    prompts = [p for p, _ in corpus]
    responses = [r for _, r in corpus]
    lps = log_prob_batch(policy, prompts, responses)
    nll = -np.concatenate(lps)
    return float(np.exp(nll.mean()))


@dataclass
class KlEstimate:
    mean: float
    stderr: float
    n: int


def empirical_kl_stats(policy: SeqPolicy, ref_policy: SeqPolicy, prompts, samples_per_prompt: int,
                       rng: np.random.Generator) -> KlEstimate:
    """Monte-Carlo per-token KL(pi || pi_ref) from samples of ``policy``.

    Each sample contributes its summed log-ratio divided by its length; the
    estimate is the mean over samples.
    """
    if samples_per_prompt < 1:
        raise ValueError("samples_per_prompt must be at least 1")
    batch = [p for p in prompts for _ in range(samples_per_prompt)]
    trajs = sample_batch(policy, batch, rng)
    return kl_from_trajectories(trajs, ref_policy)


def kl_from_trajectories(trajs, ref_policy: SeqPolicy) -> KlEstimate:
    ref = log_prob_batch(ref_policy, [t.prompt for t in trajs], [t.response for t in trajs])
    per_seq = np.array([(t.logp_online - r).sum() / len(t.response) for t, r in zip(trajs, ref)])
    se = float(per_seq.std(ddof=1) / np.sqrt(per_seq.size)) if per_seq.size > 1 else float("nan")
    return KlEstimate(float(per_seq.mean()), se, per_seq.size)


def empirical_kl(policy: SeqPolicy, ref_policy: SeqPolicy, prompts, samples_per_prompt: int,
                 rng: np.random.Generator) -> float:
    return empirical_kl_stats(policy, ref_policy, prompts, samples_per_prompt, rng).mean


# ---------------------------------------------------------------------------
# Pareto frontiers


class DriftDirection(str, enum.Enum):
    HIGHER_IS_BETTER = "hi"
    LOWER_IS_BETTER = "lo"

    def orient(self, drift):
        """Map drift so that larger is always better."""
        return drift if self is DriftDirection.HIGHER_IS_BETTER else -drift


@dataclass(frozen=True)
class ParetoPoint:
    task_score: float
    drift_score: float
    step: int = 0
    arm: str = ""
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.task_score) and math.isfinite(self.drift_score)):
            raise ValueError("pareto points must be finite")


def dominates(q: ParetoPoint, p: ParetoPoint, direction: DriftDirection) -> bool:
    dq, dp = direction.orient(q.drift_score), direction.orient(p.drift_score)
    return q.task_score >= p.task_score and (dq > dp or (dq == dp and q.task_score > p.task_score))


def pareto_frontier(points, direction: DriftDirection | str) -> list[ParetoPoint]:
    """Non-dominated subset sorted by task score (ascending).

    Exact duplicates in (task, drift) collapse to the earliest step.
    """
    direction = DriftDirection(direction)
    if not points:
        raise ValueError("need at least one point")
    best: dict[tuple[float, float], ParetoPoint] = {}
    for p in points:
        key = (p.task_score, p.drift_score)
        cur = best.get(key)
        if cur is None or (p.step, p.arm, p.seed) < (cur.step, cur.arm, cur.seed):
            best[key] = p
    uniq = sorted(best.values(), key=lambda p: (-p.task_score, -direction.orient(p.drift_score)))
    kept = []
    prev_best = -math.inf  # best oriented drift among strictly higher task scores
    i = 0
    while i < len(uniq):
        task = uniq[i].task_score
        group_best = direction.orient(uniq[i].drift_score)
        j = i
        while j < len(uniq) and uniq[j].task_score == task:
            j += 1
        if group_best > prev_best:
            kept.append(uniq[i])
        prev_best = max(prev_best, group_best)
        i = j
    return sorted(kept, key=lambda p: p.task_score)


def _quality(frontier: list[ParetoPoint], tau: float, direction: DriftDirection) -> float:
    """Best oriented drift among frontier points with task >= tau (step interpolation)."""
    for p in frontier:
        if p.task_score >= tau:
            return direction.orient(p.drift_score)
    return -math.inf


@dataclass
class Comparison:
    verdict: str  # "a-dominates" | "b-dominates" | "incomparable"
    a_better: list[tuple[float, float]] = field(default_factory=list)
    b_better: list[tuple[float, float]] = field(default_factory=list)
    crossings: int = 0
    shared_range: tuple[float, float] | None = None
    shared_a_better_fraction: float = 0.0
    shared_b_better_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "interpolation": "step",
            "a_better": [list(x) for x in self.a_better],
            "b_better": [list(x) for x in self.b_better],
            "crossings": self.crossings,
            "shared_range": list(self.shared_range) if self.shared_range else None,
            "shared_a_better_fraction": self.shared_a_better_fraction,
            "shared_b_better_fraction": self.shared_b_better_fraction,
        }


def _signed_segments(fa, fb, lo: float, hi: float, direction: DriftDirection):
    """[(start, end, sign)] over [lo, hi]; sign +1 where a is better, -1 where b is."""
    cuts = sorted({lo, hi} | {p.task_score for p in fa + fb if lo < p.task_score < hi})
    segs = []

    def sign_at(tau):
        qa, qb = _quality(fa, tau, direction), _quality(fb, tau, direction)
        return (qa > qb) - (qa < qb)

    if len(cuts) == 1:
        return [(lo, hi, sign_at(lo))]
    for a, b in zip(cuts[:-1], cuts[1:]):
        # quality is constant on (a, b]; include the left endpoint of the range itself
        s = sign_at(b)
        if a == lo:
            s0 = sign_at(lo)
            if s0 != s:
                segs.append((lo, lo, s0))
        segs.append((a, b, s))
    merged = []
    for seg in segs:
        if merged and merged[-1][2] == seg[2] and merged[-1][1] == seg[0]:
            merged[-1] = (merged[-1][0], seg[1], seg[2])
        else:
            merged.append(seg)
    return merged


def compare_arms(frontier_a, frontier_b, direction: DriftDirection | str) -> Comparison:
    """Dominance between two frontiers under step-function interpolation.

    a dominates b when, at every task level b reaches, a reaches at least as
    good a drift, and strictly better somewhere.
    """
    direction = DriftDirection(direction)
    fa = sorted(frontier_a, key=lambda p: p.task_score)
    fb = sorted(frontier_b, key=lambda p: p.task_score)
    lo = min(fa[0].task_score, fb[0].task_score)
    hi = max(fa[-1].task_score, fb[-1].task_score)
    segs = _signed_segments(fa, fb, lo, hi, direction)
    a_better = [(s, e) for s, e, sg in segs if sg > 0]
    b_better = [(s, e) for s, e, sg in segs if sg < 0]

    def worse_within(segs_, limit, sign):
        return any(sg == sign and s <= limit for s, e, sg in segs_)

    a_dom = not worse_within(segs, fb[-1].task_score, -1) and bool(a_better)
    b_dom = not worse_within(segs, fa[-1].task_score, +1) and bool(b_better)
    verdict = "a-dominates" if a_dom and not b_dom else "b-dominates" if b_dom and not a_dom else "incomparable"
    signs = [sg for _, _, sg in segs if sg != 0]
    crossings = sum(1 for x, y in zip(signs[:-1], signs[1:]) if x != y)
    out = Comparison(verdict, a_better, b_better, crossings)
    # under step interpolation an arm reaches every level up to its best task score
    s_lo = lo
    s_hi = min(fa[-1].task_score, fb[-1].task_score)
    if s_lo <= s_hi:
        out.shared_range = (s_lo, s_hi)
        shared = _signed_segments(fa, fb, s_lo, s_hi, direction)
        width = s_hi - s_lo
        if width > 0:
            out.shared_a_better_fraction = sum(e - s for s, e, sg in shared if sg > 0) / width
            out.shared_b_better_fraction = sum(e - s for s, e, sg in shared if sg < 0) / width
        else:
            sg = shared[0][2]
            out.shared_a_better_fraction = float(sg > 0)
            out.shared_b_better_fraction = float(sg < 0)
    return out


def frontier_area(frontier, lo: float, hi: float, direction: DriftDirection | str) -> float:
    """Integral of oriented frontier drift over task levels in [lo, hi].

    Levels above the frontier's best task score are treated as unreachable and
    raise; callers pick ``hi`` within the reached range.
    """
    direction = DriftDirection(direction)
    fr = sorted(frontier, key=lambda p: p.task_score)
    if hi > fr[-1].task_score:
        raise ValueError("upper limit beyond the frontier's reach")
    cuts = sorted({lo, hi} | {p.task_score for p in fr if lo < p.task_score < hi})
    return float(sum((b - a) * _quality(fr, b, direction) for a, b in zip(cuts[:-1], cuts[1:])))


def frontier_value_at(frontier, tau: float, direction: DriftDirection | str) -> float:
    """Raw (un-oriented) drift of the step-interpolated frontier at task level ``tau``."""
    direction = DriftDirection(direction)
    q = _quality(sorted(frontier, key=lambda p: p.task_score), tau, direction)
    if q == -math.inf:
        return math.nan
    return float(direction.orient(q))
