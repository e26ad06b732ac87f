"""Seeded synthetic tasks: a pivot-translation game and a sentiment-like continuation task.

Pivot game
    Source language A and target D both have one token per concept; the
    intermediate language E has two tokens per concept, a canonical form
    ``c(a) = a`` and a synonym ``s(a) = K + a``. The gold A->E translation is
    canonical, so greedy A->E accuracy measures drift. The sender (A->E) is
    pretrained on text that uses the synonym at a fixed rate. The receiver
    (E->D) is pretrained on pairs whose canonical forms are mislabelled for an
    "ambiguous" subset of concepts (labels lean toward a confuser concept),
    while synonyms are labelled cleanly. Fine-tuning only sees (A, D) pairs:
    the sender is rewarded by the receiver's log-likelihood of the gold D
    tokens, so switching ambiguous concepts to synonyms pays off
    immediately, while keeping canonical forms only pays once the receiver
    has relearned them. A few concept pairs also share one canonical token,
    which no receiver can disambiguate: some drift is genuinely needed to
    reach full task accuracy, and a frozen sender pays for its zero drift
    in reward.

Continuation task
    A slot-structured Markov source alternates neutral and sentiment slots.
    Sentiment slots draw from a positive or negative group with equal
    probability; the hidden attribute is "at least half of the continuation's
    sentiment slots are positive". A bag-of-tokens classifier trained on
    attribute labels is the reward model, and perplexity on held-out source
    continuations measures drift.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .evalkit import (
    DriftDirection,
    corpus_bleu,
    kl_from_trajectories,
    perplexity,
)
from .gradcore import Tape
from .optim import Adam
from .rewardlab import RewardModel, train_reward_model
from .seqpolicy import (
    EOS,
    PolicyConfig,
    SeqPolicy,
    Trajectory,
    extract_params,
    load_params,
    log_prob_batch,
    make_rows,
    sample_batch,
)
from .trainers import EvalResult


class TaskSizeError(ValueError):
    pass


class PretrainError(RuntimeError):
    pass


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent stream for (seed, tags); tags may be ints or strings."""
    words = [int(seed)]
    for tag in tags:
        if isinstance(tag, str):
            words.extend(tag.encode("utf-8"))
        else:
            words.append(int(tag))
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# supervised pretraining shared by both tasks


@dataclass
class PretrainReport:
    epochs: int
    losses: list[float] = field(default_factory=list)
    metric: float = float("nan")
    metric_name: str = ""


def supervised_step(policy: SeqPolicy, prompts, responses, opt: Adam) -> float:
    tape = Tape()
    nodes = policy.tape_params(tape)
    rows = make_rows(policy, prompts, responses)
    out = policy.forward(tape, rows, nodes)
    loss = tape.scale(tape.mean(tape.pick(out.log_probs, rows.target)), -1.0)
    grads = tape.backward(loss)
    opt.step(policy.flat, policy.flatten_grads(grads, nodes), policy.policy_mask)
    return float(loss.value)


def fit_supervised(policy: SeqPolicy, pairs, epochs: int, rng: np.random.Generator, lr: float = 0.01,
                   batch_size: int = 64) -> list[float]:
    """Minibatch cross-entropy training; returns mean loss per epoch."""
    opt = Adam(policy.n_params, lr=lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        tot = 0.0
        for start in range(0, len(pairs), batch_size):
            chunk = [pairs[i] for i in order[start:start + batch_size]]
            tot += supervised_step(policy, [p for p, _ in chunk], [r for _, r in chunk], opt) * len(chunk)
        losses.append(tot / len(pairs))
    return losses


def greedy_decode(policy: SeqPolicy, prompts) -> list[np.ndarray]:
    trajs = sample_batch(policy, prompts, np.random.default_rng(0), greedy=True)
    return [t.response[t.response != EOS] for t in trajs]


def token_accuracy(preds, golds) -> float:
    """Position-wise accuracy over gold tokens; missing or extra tokens count as errors."""
    hits = total = 0
    for p, g in zip(preds, golds):
        n = min(len(p), len(g))
        hits += int(np.sum(np.asarray(p[:n]) == np.asarray(g[:n])))
        total += max(len(g), len(p))
    return hits / max(total, 1)


def mean_token_entropy(policy: SeqPolicy, trajs: list[Trajectory]) -> float:
    rows = make_rows(policy, [t.prompt for t in trajs], [t.response for t in trajs])
    lsm = policy.log_softmax_np(rows)
    p = np.exp(lsm)
    return float(np.mean(-(p * lsm).sum(axis=1)))


def _with_eos(seq) -> np.ndarray:
    return np.append(np.asarray(seq, dtype=np.int64), EOS)


def export_jsonl(pairs, path) -> None:
    with open(path, "w") as fh:
        for x, y in pairs:
            fh.write(json.dumps({"prompt": [int(v) for v in x], "response": [int(v) for v in y]}) + "\n")


def import_jsonl(path) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append((np.array(d["prompt"], dtype=np.int64), np.array(d["response"], dtype=np.int64)))
    return out


# ---------------------------------------------------------------------------
# pivot game


@dataclass(frozen=True)
class PivotSizes:
    n_concepts: int = 12
    min_len: int = 6
    max_len: int = 8
    synonym_rate: float = 0.3
    ambiguous_frac: float = 0.5
    confusion: float = 0.7
    collision_pairs: int = 2
    n_pretrain: int = 1500
    n_finetune: int = 1500
    n_eval: int = 200
    emb_dim: int = 16
    hidden: int = 32


@dataclass
class PivotTask:
    seed: int
    sizes: PivotSizes
    tau: np.ndarray  # concept -> gold D token, tau[0] == EOS
    confuser: np.ndarray  # concept -> concept its canonical form is confused with
    ambiguous: np.ndarray  # boolean per concept
    canon: np.ndarray  # concept -> canonical E token; colliding pairs share one
    pretrain_ae: list  # (A, E) pairs
    pretrain_ed: list  # (E, D) pairs with noisy canonical labels
    finetune_ad: list  # (A, D) pairs, no E annotation
    eval_a: list  # held-out A sequences

    @property
    def K(self) -> int:
        return self.sizes.n_concepts

    @property
    def vocab_a(self) -> int:
        return self.K + 1

    @property
    def vocab_e(self) -> int:
        return 2 * self.K + 1

    @property
    def vocab_d(self) -> int:
        return self.K + 1

    @property
    def descriptor(self) -> str:
        s = self.sizes
        return (f"pivot seed={self.seed} concepts={s.n_concepts} len={s.min_len}-{s.max_len} ambiguity=2 "
                f"synonym_rate={s.synonym_rate} ambiguous_frac={s.ambiguous_frac} confusion={s.confusion} "
                f"collision_pairs={s.collision_pairs}")

    @property
    def collided(self) -> np.ndarray:
        """Concepts whose canonical token belongs to another concept."""
        return self.canon != np.arange(self.K + 1)

    def canonical(self, a) -> np.ndarray:
        return self.canon[np.asarray(a, dtype=np.int64)]

    def synonym(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.int64)
        return np.where(a > 0, a + self.K, 0)

    def e_to_concept(self, e) -> np.ndarray:
        e = np.asarray(e, dtype=np.int64)
        return np.where(e > self.K, e - self.K, e)

    def gold_e(self, a) -> np.ndarray:
        return self.canonical(a)

    def gold_d(self, a) -> np.ndarray:
        return self.tau[np.asarray(a, dtype=np.int64)]

    def lossless_e(self, a) -> np.ndarray:
        """Least-drifted E that still identifies every concept: synonyms only where canonical forms collide."""
        a = np.asarray(a, dtype=np.int64)
        return np.where(self.collided[a], self.synonym(a), self.canonical(a))

    def policy_configs(self) -> tuple[PolicyConfig, PolicyConfig]:
        s = self.sizes
        L = s.max_len + 1
        sender = PolicyConfig(self.vocab_e, self.vocab_a, s.emb_dim, s.hidden, L)
        receiver = PolicyConfig(self.vocab_d, self.vocab_e, s.emb_dim, s.hidden, L)
        return sender, receiver


def build_pivot_task(seed: int, sizes: PivotSizes = PivotSizes()) -> PivotTask:
    K = sizes.n_concepts
    if K < 4:
        raise TaskSizeError("need at least 4 concepts to admit ambiguous pairs")
    if sizes.min_len < 2 or sizes.max_len < sizes.min_len:
        raise TaskSizeError("sequence lengths must satisfy 2 <= min_len <= max_len")
    n_amb = int(round(sizes.ambiguous_frac * K))
    if n_amb > K - 1:
        raise TaskSizeError("ambiguous_frac leaves no unambiguous concept to confuse with")
    if sizes.collision_pairs < 0 or 2 * sizes.collision_pairs > K - n_amb:
        raise TaskSizeError("not enough unambiguous concepts for the requested collision pairs")
    rng = derive_rng(seed, "pivot-task")
    tau = np.concatenate([[EOS], 1 + rng.permutation(K)])
    ambiguous = np.zeros(K + 1, dtype=bool)
    ids = 1 + rng.permutation(K)
    amb_ids = ids[:n_amb]
    ambiguous[amb_ids] = True
    canon = np.arange(K + 1)
    pairs = ids[n_amb:n_amb + 2 * sizes.collision_pairs].reshape(-1, 2)
    canon[pairs[:, 1]] = pairs[:, 0]
    confuser = np.arange(K + 1)
    for a in amb_ids:
        others = [c for c in range(1, K + 1) if c != a]
        confuser[a] = others[rng.integers(len(others))]

    def draw_a(n, seen):
        out = []
        while len(out) < n:
            L = int(rng.integers(sizes.min_len, sizes.max_len + 1))
            a = 1 + rng.integers(K, size=L)
            key = tuple(a)
            if key in seen:
                continue
            seen.add(key)
            out.append(a)
        return out

    seen: set = set()
    eval_a = draw_a(sizes.n_eval, seen)
    pre_a = draw_a(sizes.n_pretrain, seen)
    ft_a = draw_a(sizes.n_finetune, seen)
    task = PivotTask(seed, sizes, tau, confuser, ambiguous, canon, [], [], [], eval_a)
    for a in pre_a:
        syn = rng.random(len(a)) < sizes.synonym_rate
        e = np.where(syn, task.synonym(a), task.canonical(a))
        task.pretrain_ae.append((a, _with_eos(e)))
        # receiver pretraining text: canonical forms of ambiguous concepts are
        # labelled with the confuser's translation at rate `confusion`
        e2_syn = rng.random(len(a)) < sizes.synonym_rate
        e2 = np.where(e2_syn, task.synonym(a), task.canonical(a))
        concept = a.copy()
        flip = (~e2_syn) & ambiguous[a] & (rng.random(len(a)) < sizes.confusion)
        concept[flip] = confuser[a[flip]]
        task.pretrain_ed.append((e2, _with_eos(tau[concept])))
    for a in ft_a:
        task.finetune_ad.append((a, task.gold_d(a)))
    return task


def oracle_sender(task: PivotTask):
    return lambda a_seqs: [task.lossless_e(a) for a in a_seqs]


def oracle_receiver(task: PivotTask):
    return lambda e_seqs: [task.tau[task.e_to_concept(e)] for e in e_seqs]


def permuted_code(task: PivotTask, seed: int = 0):
    """Sender speaking a scrambled E plus a receiver that has learned the scramble."""
    rng = derive_rng(seed, "permuted-code")
    perm = np.concatenate([[EOS], 1 + rng.permutation(task.vocab_e - 1)])
    inv = np.argsort(perm)

    def sender(a_seqs):
        return [perm[task.lossless_e(a)] for a in a_seqs]

    def receiver(e_seqs):
        return [task.tau[task.e_to_concept(inv[np.asarray(e, dtype=np.int64)])] for e in e_seqs]

    return sender, receiver


def pivot_scores(task: PivotTask, sender, receiver, a_seqs=None) -> dict:
    """End-to-end and A->E accuracies for callables mapping token lists."""
    a_seqs = task.eval_a if a_seqs is None else a_seqs
    e_hat = sender(a_seqs)
    d_hat = receiver(e_hat)
    return {
        "task": token_accuracy(d_hat, [task.gold_d(a) for a in a_seqs]),
        "drift": token_accuracy(e_hat, [task.gold_e(a) for a in a_seqs]),
        "bleu": corpus_bleu([list(e) for e in e_hat], [list(task.gold_e(a)) for a in a_seqs]) if a_seqs else 0.0,
    }


def sender_accuracy(task: PivotTask, sender: SeqPolicy) -> float:
    preds = greedy_decode(sender, task.eval_a)
    return token_accuracy(preds, [task.gold_e(a) for a in task.eval_a])


# ---------------------------------------------------------------------------
# continuation task


@dataclass(frozen=True)
class ContinuationSizes:
    n_neutral: int = 8
    n_pos: int = 3
    n_neg: int = 3
    prompt_len: int = 4
    cont_len: int = 14
    planted_rate: float = 0.77
    n_pretrain: int = 3000
    n_rm: int = 3000
    n_eval: int = 300
    n_eval_prompts: int = 64
    emb_dim: int = 16
    hidden: int = 32


class SlotMarkov:
    """Slot-structured first-order source.

    Slot ``s`` of the joint (prompt + continuation) sequence is neutral when
    ``s`` is even and sentiment-bearing when odd. ``trans[parity, prev]`` is
    the next-token distribution; EOS follows the last continuation token.
    """

    def __init__(self, trans: np.ndarray, prompt_len: int, cont_len: int):
        self.trans = trans
        self.prompt_len = prompt_len
        self.cont_len = cont_len
        self.vocab = trans.shape[-1]

    def sample(self, rng: np.random.Generator, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
        total = self.prompt_len + self.cont_len
        seqs = np.zeros((n, total), dtype=np.int64)
        prev = np.zeros(n, dtype=np.int64)
        for s in range(total):
            p = self.trans[s % 2, prev]
            cdf = np.cumsum(p, axis=1)
            u = (1.0 - rng.random(n)) * cdf[:, -1]
            tok = (cdf < u[:, None]).sum(axis=1)
            seqs[:, s] = tok
            prev = tok
        return [(seqs[i, :self.prompt_len], _with_eos(seqs[i, self.prompt_len:])) for i in range(n)]

    def continuation_logp(self, prompt, response) -> np.ndarray:
        """Per-token log-probabilities of ``response`` (including its EOS)."""
        prompt = np.asarray(prompt, dtype=np.int64)
        response = np.asarray(response, dtype=np.int64)
        out = np.zeros(len(response))
        prev = prompt[-1] if len(prompt) else EOS
        for t, tok in enumerate(response):
            if t == self.cont_len:
                out[t] = 0.0 if tok == EOS else -np.inf
            else:
                s = self.prompt_len + t
                with np.errstate(divide="ignore"):
                    out[t] = np.log(self.trans[s % 2, prev, tok])
            prev = tok
        return out

    def perplexity(self, corpus) -> float:
        nll = -np.concatenate([self.continuation_logp(p, r) for p, r in corpus])
        return float(np.exp(nll.mean()))

    def entropy_floor(self, corpus) -> float:
        """exp of the mean conditional entropy along the corpus' states."""
        ents = []
        for prompt, response in corpus:
            prev = prompt[-1]
            for t, tok in enumerate(response):
                if t == self.cont_len:
                    ents.append(0.0)
                else:
                    p = self.trans[(self.prompt_len + t) % 2, prev]
                    nz = p[p > 0]
                    ents.append(float(-(nz * np.log(nz)).sum()))
                prev = tok
        return float(np.exp(np.mean(ents)))


@dataclass
class ContinuationTask:
    seed: int
    sizes: ContinuationSizes
    reference: SlotMarkov
    planted: SlotMarkov
    degenerate: SlotMarkov
    pos_tokens: np.ndarray
    neg_tokens: np.ndarray
    pretrain_pairs: list
    rm_data: list
    eval_pairs: list
    eval_prompts: list
    reward_model: RewardModel = None  # type: ignore[assignment]
    rm_accuracy: float = float("nan")

    @property
    def vocab(self) -> int:
        return self.reference.vocab

    @property
    def n_sentiment_slots(self) -> int:
        s = self.sizes
        return sum(1 for t in range(s.cont_len) if (s.prompt_len + t) % 2 == 1)

    @property
    def threshold(self) -> int:
        return self.n_sentiment_slots // 2 + 1

    def attribute(self, response) -> int:
        r = np.asarray(response)
        return int(np.isin(r, self.pos_tokens).sum() >= self.threshold)

    @property
    def descriptor(self) -> str:
        s = self.sizes
        return (f"continuation seed={self.seed} vocab={self.vocab} prompt_len={s.prompt_len} "
                f"cont_len={s.cont_len} planted_rate={s.planted_rate}")

    def policy_config(self) -> PolicyConfig:
        s = self.sizes
        return PolicyConfig(self.vocab, self.vocab, s.emb_dim, s.hidden, s.cont_len + 1)


def build_continuation_task(seed: int, sizes: ContinuationSizes = ContinuationSizes(),
                            rm_epochs: int = 300) -> ContinuationTask:
    if sizes.n_pos < 1 or sizes.n_neg < 1 or sizes.n_neutral < 2:
        raise TaskSizeError("need at least one positive, one negative and two neutral tokens")
    if sizes.cont_len < 2 or sizes.prompt_len < 1:
        raise TaskSizeError("prompt and continuation lengths too small")
    rng = derive_rng(seed, "continuation-task")
    V = 1 + sizes.n_neutral + sizes.n_pos + sizes.n_neg
    neutral = np.arange(1, 1 + sizes.n_neutral)
    pos = np.arange(1 + sizes.n_neutral, 1 + sizes.n_neutral + sizes.n_pos)
    neg = np.arange(1 + sizes.n_neutral + sizes.n_pos, V)

    def tables(pos_mass: float) -> np.ndarray:
        trans = np.zeros((2, V, V))
        for prev in range(V):
            trans[0, prev, neutral] = neutral_rows[prev]
            trans[1, prev, pos] = pos_mass * pos_rows[prev]
            trans[1, prev, neg] = (1 - pos_mass) * neg_rows[prev]
        return trans

    neutral_rows = rng.dirichlet(np.ones(sizes.n_neutral), size=V)
    pos_rows = rng.dirichlet(2 * np.ones(sizes.n_pos), size=V)
    neg_rows = rng.dirichlet(2 * np.ones(sizes.n_neg), size=V)
    reference = SlotMarkov(tables(0.5), sizes.prompt_len, sizes.cont_len)
    planted = SlotMarkov(tables(sizes.planted_rate), sizes.prompt_len, sizes.cont_len)
    # degenerate source: one positive token everywhere, with a little smoothing
    degen = np.full((2, V, V), 0.01 / (V - 1))
    degen[:, :, pos[0]] = 0.99
    degen[:, :, EOS] = 0.0
    degen /= degen.sum(axis=-1, keepdims=True)
    degenerate = SlotMarkov(degen, sizes.prompt_len, sizes.cont_len)

    pretrain = reference.sample(rng, sizes.n_pretrain)
    rm_pairs = reference.sample(rng, sizes.n_rm)
    eval_pairs = reference.sample(rng, sizes.n_eval)
    eval_prompts = [p for p, _ in reference.sample(rng, sizes.n_eval_prompts)]
    task = ContinuationTask(seed, sizes, reference, planted, degenerate, pos, neg, pretrain, [], eval_pairs,
                            eval_prompts)
    task.rm_data = [(r, task.attribute(r)) for _, r in rm_pairs]
    labels = {lbl for _, lbl in task.rm_data}
    if len(labels) < 2:
        raise TaskSizeError("attribute is constant over the sampled support")
    rm = RewardModel(V, "classifier", rng=derive_rng(seed, "reward-model-init"))
    report = train_reward_model(rm, task.rm_data, rm_epochs, derive_rng(seed, "reward-model-train"), lr=0.02)
    task.reward_model = rm
    task.rm_accuracy = report.heldout_accuracy
    return task


def generator_reward(task: ContinuationTask, gen: SlotMarkov, n: int = 500, seed: int = 0) -> float:
    samples = gen.sample(derive_rng(seed, "generator-reward"), n)
    return float(task.reward_model.score_batch([r for _, r in samples]).mean())


# ---------------------------------------------------------------------------
# pretraining entry point


def pretrain(policy: SeqPolicy, task, epochs: int, rng: np.random.Generator, lr: float = 0.01,
             check: bool = True) -> tuple[SeqPolicy, PretrainReport]:
    """Supervised pretraining of the pivot sender or the continuation policy.

    The pivot sender is trained on (A, E) text and must reach held-out A->E
    accuracy of at least 0.9; the continuation policy must reach perplexity
    within 1.2x of the source's entropy floor on held-out text.
    """
    if isinstance(task, PivotTask):
        pairs = task.pretrain_ae
    elif isinstance(task, ContinuationTask):
        pairs = task.pretrain_pairs
    else:
        raise TypeError(f"unsupported task {type(task).__name__}")
    if not pairs:
        raise ValueError("supervised split is empty")
    report = PretrainReport(epochs)
    report.losses = fit_supervised(policy, pairs, epochs, rng, lr=lr)
    if isinstance(task, PivotTask):
        report.metric_name = "a_to_e_accuracy"
        report.metric = sender_accuracy(task, policy)
        ok = report.metric >= 0.9
    else:
        report.metric_name = "perplexity_over_floor"
        floor = task.reference.entropy_floor(task.eval_pairs)
        report.metric = perplexity(policy, task.eval_pairs) / floor
        ok = report.metric <= 1.2
    if check and epochs > 0 and not ok:
        raise PretrainError(f"pretraining did not converge: {report.metric_name}={report.metric:.4f} "
                            f"after {epochs} epochs")
    return policy, report


PIVOT_SENDER_EPOCHS = 12
PIVOT_RECEIVER_EPOCHS = 12
CONTINUATION_EPOCHS = 12


@functools.lru_cache(maxsize=None)
def pretrained_pivot(seed: int, sizes: PivotSizes = PivotSizes()):
    task = build_pivot_task(seed, sizes)
    s_cfg, r_cfg = task.policy_configs()
    sender = SeqPolicy(s_cfg, derive_rng(seed, "sender-init"))
    pretrain(sender, task, PIVOT_SENDER_EPOCHS, derive_rng(seed, "sender-pretrain"))
    receiver = SeqPolicy(r_cfg, derive_rng(seed, "receiver-init"))
    fit_supervised(receiver, task.pretrain_ed, PIVOT_RECEIVER_EPOCHS, derive_rng(seed, "receiver-pretrain"))
    return task, extract_params(sender), extract_params(receiver)


@functools.lru_cache(maxsize=None)
def pretrained_continuation(seed: int, sizes: ContinuationSizes = ContinuationSizes()):
    task = build_continuation_task(seed, sizes)
    policy = SeqPolicy(task.policy_config(), derive_rng(seed, "policy-init"))
    pretrain(policy, task, CONTINUATION_EPOCHS, derive_rng(seed, "policy-pretrain"))
    return task, extract_params(policy)


def _restore(config: PolicyConfig, params) -> SeqPolicy:
    p = SeqPolicy(config)
    load_params(p, params)
    return p


def detach_value(policy: SeqPolicy) -> SeqPolicy:
    """Copy of ``policy`` whose value head runs on its own copy of the backbone."""
    cfg = policy.config
    new_cfg = PolicyConfig(cfg.vocab_size, cfg.prompt_vocab_size, cfg.emb_dim, cfg.hidden, cfg.max_len, True)
    out = SeqPolicy(new_cfg)
    for name, arr in policy.params.items():
        out.params[name][...] = arr
        if ("v." + name) in out.params:
            out.params["v." + name][...] = arr
    return out


# ---------------------------------------------------------------------------
# environments


class PivotEnv:
    """Mutable per-run state of the pivot game: online sender plus learning receiver."""

    direction = DriftDirection.HIGHER_IS_BETTER

    def __init__(self, seed: int, sizes: PivotSizes = PivotSizes(), receiver_lr: float = 3e-4,
                 value_head_detached: bool = False, eval_kl_samples: int = 64, reward: str = "logprob"):
        if reward not in ("logprob", "prob"):
            raise ValueError(f"reward must be 'logprob' or 'prob', got {reward!r}")
        self.reward_kind = reward
        task, sender_params, receiver_params = pretrained_pivot(seed, sizes)
        self.task = task
        s_cfg, r_cfg = task.policy_configs()
        self.policy = _restore(s_cfg, sender_params)
        if value_head_detached:
            self.policy = detach_value(self.policy)
        self.ref_policy = self.policy.clone()
        self.receiver = _restore(r_cfg, receiver_params)
        self.receiver_opt = Adam(self.receiver.n_params, lr=receiver_lr)
        self.descriptor = task.descriptor
        self.eval_seed = seed
        self.eval_kl_samples = eval_kl_samples

    def prompts(self, rng: np.random.Generator, n: int) -> list:
        idx = rng.integers(len(self.task.finetune_ad), size=n)
        return [self.task.finetune_ad[i][0] for i in idx]

    def _receiver_io(self, trajs):
        e = [t.response[t.response != EOS] for t in trajs]
        d = [_with_eos(self.task.gold_d(t.prompt)) for t in trajs]
        return e, d

    def rewards(self, trajs: list[Trajectory]) -> np.ndarray:
        e, d = self._receiver_io(trajs)
        lps = log_prob_batch(self.receiver, e, d)
        if self.reward_kind == "prob":
            return np.array([float(np.exp(lp).mean()) for lp in lps])
        return np.array([float(lp.sum()) for lp in lps])

    def after_step(self, trajs: list[Trajectory], rng: np.random.Generator) -> None:
        e, d = self._receiver_io(trajs)
        supervised_step(self.receiver, e, d, self.receiver_opt)

    def supervised_batch(self, rng: np.random.Generator, n: int):
        idx = rng.integers(len(self.task.pretrain_ae), size=n)
        pairs = [self.task.pretrain_ae[i] for i in idx]
        return [p for p, _ in pairs], [r for _, r in pairs]

    def prefix_values(self, trajs):
        raise NotImplementedError("the pivot game has no sequence-level reward model to use as a value")

    def evaluate(self, policy: SeqPolicy) -> EvalResult:
        task = self.task
        e_hat = greedy_decode(policy, task.eval_a)
        d_hat = greedy_decode(self.receiver, e_hat)
        golds_e = [task.gold_e(a) for a in task.eval_a]
        drift = token_accuracy(e_hat, golds_e)
        score = token_accuracy(d_hat, [task.gold_d(a) for a in task.eval_a])
        rng = derive_rng(self.eval_seed, "pivot-eval-samples")
        prompts = [task.eval_a[i] for i in range(min(self.eval_kl_samples, len(task.eval_a)))]
        trajs = sample_batch(policy, prompts, rng)
        kl = kl_from_trajectories(trajs, self.ref_policy).mean
        ent = mean_token_entropy(policy, trajs)
        bleu = corpus_bleu([list(e) for e in e_hat], [list(g) for g in golds_e])
        return EvalResult(score, drift, kl, ent, {"drift_bleu": bleu})


class ContinuationEnv:
    """Per-run state of the continuation task (the reward model is frozen)."""

    direction = DriftDirection.LOWER_IS_BETTER

    def __init__(self, seed: int, sizes: ContinuationSizes = ContinuationSizes(), value_head_detached: bool = False,
                 eval_samples_per_prompt: int = 4):
        task, params = pretrained_continuation(seed, sizes)
        self.task = task
        self.policy = _restore(task.policy_config(), params)
        if value_head_detached:
            self.policy = detach_value(self.policy)
        self.ref_policy = self.policy.clone()
        self.descriptor = task.descriptor
        self.eval_seed = seed
        self.eval_samples_per_prompt = eval_samples_per_prompt

    def prompts(self, rng: np.random.Generator, n: int) -> list:
        idx = rng.integers(len(self.task.pretrain_pairs), size=n)
        return [self.task.pretrain_pairs[i][0] for i in idx]

    def rewards(self, trajs: list[Trajectory]) -> np.ndarray:
        return self.task.reward_model.score_batch([t.response for t in trajs])

    def after_step(self, trajs, rng) -> None:
        pass

    def supervised_batch(self, rng: np.random.Generator, n: int):
        idx = rng.integers(len(self.task.pretrain_pairs), size=n)
        pairs = [self.task.pretrain_pairs[i] for i in idx]
        return [p for p, _ in pairs], [r for _, r in pairs]

    def prefix_values(self, trajs: list[Trajectory]) -> list[np.ndarray]:
        """Reward-model scores of every prefix y_<t, used as a frozen value function."""
        rm = self.task.reward_model
        out = []
        for t in trajs:
            n = len(t.response)
            counts = np.zeros((n, rm.vocab_size))
            running = np.zeros(rm.vocab_size)
            for i in range(n):
                counts[i] = running
                tok = t.response[i]
                if tok != EOS:
                    running[tok] += 1
            tot = counts.sum(axis=1, keepdims=True)
            bags = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
            out.append(1.0 / (1.0 + np.exp(-rm._raw(bags))))
        return out

    def evaluate(self, policy: SeqPolicy) -> EvalResult:
        task = self.task
        rng = derive_rng(self.eval_seed, "continuation-eval-samples")
        prompts = [p for p in task.eval_prompts for _ in range(self.eval_samples_per_prompt)]
        trajs = sample_batch(policy, prompts, rng)
        score = float(task.reward_model.score_batch([t.response for t in trajs]).mean())
        drift = perplexity(policy, task.eval_pairs)
        kl = kl_from_trajectories(trajs, self.ref_policy).mean
        ent = mean_token_entropy(policy, trajs)
        return EvalResult(score, drift, kl, ent)


def make_env(task_name: str, seed: int, value_head_detached: bool = False, **kwargs):
    if task_name == "pivot":
        return PivotEnv(seed, value_head_detached=value_head_detached, **kwargs)
    if task_name == "continuation":
        return ContinuationEnv(seed, value_head_detached=value_head_detached, **kwargs)
    raise ValueError(f"unknown task preset {task_name!r}")
