"""On-policy trainers: REINFORCE, PPO-clip with GAE, multitask and NLPO masking.

``run_training`` drives one (arm, seed) run against a task environment and
emits one metric record per evaluation. Environments supply prompts,
rewards and evaluation; see :class:`TaskEnv`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol

import numpy as np

from .driftctl import EmaTracker, ResetKind, ema_update, maybe_reset, reset_optimizer_state
from .gradcore import NEG_LOGIT, Tape
from .optim import Adam, clip_grad_norm
from .rewardlab import KlController, adaptive_beta_update, shape_reward
from .seqpolicy import (
    EOS,
    LayoutError,
    Rows,
    SeqPolicy,
    Trajectory,
    extract_params,
    log_prob_batch,
    make_rows,
    sample_batch,
    token_entropy,
    values_batch,
)

CSV_HEADER = ["step", "task_score", "drift_score", "kl_to_init", "beta", "entropy", "reset_event"]


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    algo: str = "reinforce"
    lr: float = 1e-3
    batch_size: int = 32
    clip_epsilon: float = 0.2
    gamma: float = 1.0
    lam: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    lambda_mt: float = 0.0
    baseline_decay: float = 0.9
    total_steps: int = 300
    reset_kind: str = "none"
    reset_period: int = 100
    eta: float = 0.99
    beta: float = 0.0
    adaptive_kl: bool = False
    target_kl: float = 0.1
    kl_gain: float = 0.1
    ppo_epochs: int = 4
    ppo_minibatches: int = 4
    # None picks the algorithm default: on for PPO, off for REINFORCE
    normalize_advantages: bool | None = None
    # None picks the algorithm default (1.0 for PPO, unclipped REINFORCE); 0 disables
    max_grad_norm: float | None = None
    kl_early_stop: float | None = None
    frozen_sender: bool = False
    frozen_value: bool = False
    keep_optimizer_state: bool = False
    value_head_detached: bool = False
    nlpo: bool = False
    top_p: float = 0.9
    sync_period: int = 20
    track_ema: bool = False
    eval_interval: int | None = None

    def __post_init__(self):
        if self.algo not in ("reinforce", "ppo"):
            raise ValueError(f"algo must be 'reinforce' or 'ppo', got {self.algo!r}")
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        for name in ("entropy_coef", "value_coef", "lambda_mt", "beta", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.baseline_decay <= 1.0:
            raise ValueError("baseline_decay must lie in [0, 1]")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        ResetKind(self.reset_kind)

    @property
    def advantage_norm(self) -> bool:
        if self.normalize_advantages is None:
            return self.algo == "ppo"
        return self.normalize_advantages

    @property
    def grad_clip(self) -> float | None:
        if self.max_grad_norm is None:
            return 1.0 if self.algo == "ppo" else None
        return self.max_grad_norm or None

    @property
    def interval(self) -> int:
        if self.eval_interval:
            return self.eval_interval
        return max(1, round(0.02 * self.total_steps))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# task environment protocol


@dataclass
class EvalResult:
    task_score: float
    drift_score: float
    kl_to_init: float
    entropy: float
    extras: dict = field(default_factory=dict)


class TaskEnv(Protocol):
    descriptor: str
    policy: SeqPolicy
    ref_policy: SeqPolicy

    def prompts(self, rng: np.random.Generator, n: int) -> list: ...

    def rewards(self, trajs: list[Trajectory]) -> np.ndarray: ...

    def after_step(self, trajs: list[Trajectory], rng: np.random.Generator) -> None: ...

    def evaluate(self, policy: SeqPolicy) -> EvalResult: ...

    def supervised_batch(self, rng: np.random.Generator, n: int) -> tuple[list, list]: ...

    def prefix_values(self, trajs: list[Trajectory]) -> list[np.ndarray]: ...


# ---------------------------------------------------------------------------
# estimators


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates with a zero bootstrap after the last token."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards and values differ in length: {r.shape} vs {v.shape}")
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        v_next = v[t + 1] if t + 1 < len(r) else 0.0
        delta = r[t] + gamma * v_next - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Boolean mask of the smallest most-probable set with mass >= top_p."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    if top_p >= 1.0:
        return np.ones(probs.shape, dtype=bool)
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    csum = np.cumsum(sorted_p, axis=-1)
    # number kept = 1 + count of prefixes still short of top_p
    keep_n = 1 + (csum < top_p).sum(axis=-1, keepdims=True)
    ranks = np.arange(probs.shape[-1])
    keep_sorted = ranks < keep_n
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, keep_sorted, axis=-1)
    return mask


def nucleus_additive(probs: np.ndarray, top_p: float) -> np.ndarray:
    return np.where(nucleus(probs, top_p), 0.0, NEG_LOGIT)


def nlpo_mask(next_token_logits, mask_model: SeqPolicy, prompt, prefix, top_p: float) -> np.ndarray:
    """Restrict logits to the mask model's nucleus for this state.

    Tokens outside the nucleus get a logit of ``NEG_LOGIT`` (probability 0
    after the softmax); allowed logits are returned unchanged.
    """
    logits = np.asarray(next_token_logits, dtype=np.float64)
    prefix = np.asarray(prefix, dtype=np.int64)
    rows = make_rows(mask_model, [prompt], [prefix], score_targets=False)
    lsm = mask_model.log_softmax_np(rows)[-1]
    keep = nucleus(np.exp(lsm), top_p)
    return np.where(keep, logits, NEG_LOGIT)


def mask_fn_for(mask_model: SeqPolicy, top_p: float):
    """Batch mask callback for :func:`sample_batch`."""
    cfg = mask_model.config

    def fn(active, prompts, prefixes, t):
        src = np.array([p[t] if t < len(p) else EOS for p in prompts], dtype=np.int64)
        last = np.array([p[-1] if len(p) else EOS for p in prompts], dtype=np.int64)
        prev = prefixes[:, t - 1] if t > 0 else np.zeros(len(prompts), dtype=np.int64)
        rows = Rows(src, last, prev, np.full(len(prompts), t), np.arange(len(prompts)), len(prompts))
        probs = np.exp(mask_model.log_softmax_np(rows))
        if top_p >= 1.0:
            return np.zeros((len(prompts), cfg.vocab_size))
        return nucleus_additive(probs, top_p)

    return fn


# ---------------------------------------------------------------------------
# losses and steps


@dataclass
class BaselineState:
    value: float | None = None


@dataclass
class StepStats:
    loss: float
    pg_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    mt_loss: float = 0.0
    grad_norm: float = 0.0
    approx_kl: float = 0.0
    epochs_run: int = 0


def multitask_loss(tape: Tape, policy: SeqPolicy, nodes, prompts, responses, lambda_mt: float):
    """lambda_mt times mean token cross-entropy on supervised pairs."""
    rows = make_rows(policy, prompts, responses)
    out = policy.forward(tape, rows, nodes)
    nll = tape.scale(tape.mean(tape.pick(out.log_probs, rows.target)), -1.0)
    return tape.scale(nll, lambda_mt)


def _finite_or_raise(x: float, what: str) -> None:
    if not math.isfinite(x):
        raise DivergenceError(f"{what} became non-finite ({x})")


def _apply(policy: SeqPolicy, optimizer: Adam, grad: np.ndarray, max_norm: float | None) -> float:
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("gradient became non-finite")
    norm = clip_grad_norm(grad, max_norm)
    optimizer.step(policy.flat, grad)
    if not np.all(np.isfinite(policy.flat)):
        raise DivergenceError("parameters became non-finite")
    return norm


def sequence_returns(batch: list[Trajectory]) -> np.ndarray:
    return np.array([t.shaped_rewards.sum() for t in batch])


def reinforce_grad(policy: SeqPolicy, batch: list[Trajectory], baseline: float, config: TrainerConfig,
                   supervised=None) -> tuple[np.ndarray, StepStats]:
    """Gradient of the REINFORCE loss with a fixed baseline.

    loss = -mean_i (R_i - b) * sum_t log pi(y_it) - c_H * mean token entropy
           [+ lambda_mt * supervised cross-entropy]
    """
    if not batch:
        raise ValueError("empty batch")
    returns = sequence_returns(batch)
    adv = returns - baseline
    if config.advantage_norm and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    tape = Tape()
    nodes = policy.tape_params(tape)
    rows = make_rows(policy, [t.prompt for t in batch], [t.response for t in batch],
                     [t.mask for t in batch] if any(t.mask is not None for t in batch) else None)
    out = policy.forward(tape, rows, nodes)
    logp = tape.pick(out.log_probs, rows.target)
    weights = adv[rows.seq] / len(batch)
    pg = tape.scale(tape.sum(tape.mul(logp, tape.const(weights))), -1.0)
    ent = tape.mean(token_entropy(tape, out))
    loss = tape.sub(pg, tape.scale(ent, config.entropy_coef))
    mt = 0.0
    if supervised is not None and config.lambda_mt > 0:
        mt_node = multitask_loss(tape, policy, nodes, supervised[0], supervised[1], config.lambda_mt)
        loss = tape.add(loss, mt_node)
        mt = float(mt_node.value)
    grads = tape.backward(loss)
    stats = StepStats(float(loss.value), float(pg.value), 0.0, float(ent.value), mt)
    _finite_or_raise(stats.loss, "REINFORCE loss")
    return policy.flatten_grads(grads, nodes), stats


def reinforce_step(policy: SeqPolicy, batch: list[Trajectory], baseline: BaselineState, config: TrainerConfig,
                   optimizer: Adam, supervised=None) -> StepStats:
    """One REINFORCE update; the baseline is updated after use as an EMA of batch returns."""
    returns = sequence_returns(batch) if batch else np.zeros(0)
    if baseline.value is None and batch:
        baseline.value = float(returns.mean())
    grad, stats = reinforce_grad(policy, batch, baseline.value, config, supervised)
    stats.grad_norm = _apply(policy, optimizer, grad, config.grad_clip)
    d = config.baseline_decay
    baseline.value = d * baseline.value + (1.0 - d) * float(returns.mean())
    return stats


def prepare_ppo_batch(batch: list[Trajectory], config: TrainerConfig) -> None:
    """Fill advantages (GAE) and returns in place; values must be set."""
    for t in batch:
        t.advantages = gae(t.shaped_rewards, t.values, config.gamma, config.lam)
        t.returns = t.advantages + t.values
    if config.advantage_norm:
        allv = np.concatenate([t.advantages for t in batch])
        mu, sd = allv.mean(), allv.std()
        for t in batch:
            t.advantages = (t.advantages - mu) / (sd + 1e-8)


def ppo_loss(tape: Tape, policy: SeqPolicy, nodes, batch: list[Trajectory], old_logps, config: TrainerConfig,
             use_value_loss: bool = True):
    rows = make_rows(policy, [t.prompt for t in batch], [t.response for t in batch],
                     [t.mask for t in batch] if any(t.mask is not None for t in batch) else None)
    out = policy.forward(tape, rows, nodes)
    logp = tape.pick(out.log_probs, rows.target)
    old = np.concatenate(old_logps)
    adv = np.concatenate([t.advantages for t in batch])
    ratio = tape.exp(tape.sub(logp, tape.const(old)))
    eps = config.clip_epsilon
    surr1 = tape.mul(ratio, tape.const(adv))
    surr2 = tape.mul(tape.clip(ratio, 1.0 - eps, 1.0 + eps), tape.const(adv))
    pg = tape.scale(tape.mean(tape.minimum(surr1, surr2)), -1.0)
    ent = tape.mean(token_entropy(tape, out))
    loss = tape.sub(pg, tape.scale(ent, config.entropy_coef))
    vloss = None
    if use_value_loss and config.value_coef > 0:
        ret = np.concatenate([t.returns for t in batch])
        diff = tape.sub(out.values, tape.const(ret))
        vloss = tape.scale(tape.mean(tape.mul(diff, diff)), 0.5)
        loss = tape.add(loss, tape.scale(vloss, config.value_coef))
    return loss, pg, vloss, ent, logp


def ppo_step(policy: SeqPolicy, batch: list[Trajectory], old_logps, config: TrainerConfig, optimizer: Adam,
             rng: np.random.Generator, supervised=None, use_value_loss: bool = True) -> StepStats:
    """PPO-clip epochs over minibatches of whole sequences."""
    if not batch:
        raise ValueError("empty batch")
    for t, lp in zip(batch, old_logps):
        if len(lp) != len(t.response) or t.advantages is None:
            raise LayoutError("stale batch: log-probs or advantages do not match responses")
    n = len(batch)
    n_mb = max(1, min(config.ppo_minibatches, n))
    stats = StepStats(0.0)
    for epoch in range(config.ppo_epochs):
        order = rng.permutation(n)
        for chunk in np.array_split(order, n_mb):
            mb = [batch[i] for i in chunk]
            tape = Tape()
            nodes = policy.tape_params(tape)
            loss, pg, vloss, ent, _ = ppo_loss(tape, policy, nodes, mb, [old_logps[i] for i in chunk], config,
                                               use_value_loss)
            if supervised is not None and config.lambda_mt > 0:
                loss = tape.add(loss, multitask_loss(tape, policy, nodes, supervised[0], supervised[1], config.lambda_mt))
            _finite_or_raise(float(loss.value), "PPO loss")
            grads = tape.backward(loss)
            stats.grad_norm = _apply(policy, optimizer, policy.flatten_grads(grads, nodes), config.grad_clip)
            stats.loss, stats.pg_loss, stats.entropy = float(loss.value), float(pg.value), float(ent.value)
            stats.value_loss = float(vloss.value) if vloss is not None else 0.0
        stats.epochs_run = epoch + 1
        if config.kl_early_stop is not None:
            new = log_prob_batch(policy, [t.prompt for t in batch], [t.response for t in batch],
                                 [t.mask for t in batch] if batch[0].mask is not None else None)
            stats.approx_kl = float(np.mean(np.concatenate(old_logps) - np.concatenate(new)))
            if stats.approx_kl > 1.5 * config.kl_early_stop:
                break
    return stats


# ---------------------------------------------------------------------------
# run loop


@dataclass
class MetricRecord:
    step: int
    task_score: float
    drift_score: float
    kl_to_init: float
    beta: float
    entropy: float
    reset_event: str = ""

    def row(self) -> list[str]:
        return [str(self.step), repr(float(self.task_score)), repr(float(self.drift_score)),
                repr(float(self.kl_to_init)), repr(float(self.beta)), repr(float(self.entropy)), self.reset_event]


@dataclass
class TrainingResult:
    records: list[MetricRecord]
    ema_records: list[MetricRecord] = field(default_factory=list)
    reset_events: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def records_to_csv(records: list[MetricRecord], descriptor: str = "") -> str:
    buf = io.StringIO()
    if descriptor:
        buf.write(f"# task: {descriptor}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricRecord]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if header != CSV_HEADER:
        raise ValueError(f"unexpected metrics header {header}")
    out = []
    for row in reader:
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"malformed metrics row {row}")
        out.append(MetricRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]), float(row[4]),
                                float(row[5]), row[6]))
    return out


def _record(step: int, ev, beta: float, event: str = "") -> MetricRecord:
    return MetricRecord(step, ev.task_score, ev.drift_score, ev.kl_to_init, beta, ev.entropy, event)


def collect(env: TaskEnv, policy: SeqPolicy, config: TrainerConfig, rng: np.random.Generator,
            beta: float, mask_model: SeqPolicy | None = None) -> list[Trajectory]:
    """Sample a batch, score it and attach reference log-probs and shaped rewards."""
    prompts = env.prompts(rng, config.batch_size)
    mask_fn = mask_fn_for(mask_model, config.top_p) if mask_model is not None else None
    batch = sample_batch(policy, prompts, rng, mask_fn=mask_fn)
    rewards = env.rewards(batch)
    if not np.all(np.isfinite(rewards)):
        raise DivergenceError("task reward became non-finite")
    refs = log_prob_batch(env.ref_policy, [t.prompt for t in batch], [t.response for t in batch])
    for t, r, lr in zip(batch, rewards, refs):
        t.reward_terminal = float(r)
        t.logp_ref = lr
        t.shaped_rewards = shape_reward(float(r), t.logp_online, lr, beta)
    return batch


def run_training(env: TaskEnv, config: TrainerConfig, rng: np.random.Generator) -> TrainingResult:
    """Train ``env.policy`` in place and return the metric stream.

    Any non-finite value met along the way is reported as :class:`DivergenceError`.
    """
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return _train(env, config, rng)
    except FloatingPointError as exc:
        raise DivergenceError(f"numeric overflow: {exc}") from exc


def _train(env: TaskEnv, config: TrainerConfig, rng: np.random.Generator) -> TrainingResult:
    policy = env.policy
    kind = ResetKind(config.reset_kind)
    opt = Adam(policy.n_params, lr=config.lr)
    tracker = EmaTracker(extract_params(policy), config.eta, config.reset_period)
    ctrl = KlController(config.beta, target_kl=config.target_kl, gain=config.kl_gain, adaptive=config.adaptive_kl)
    baseline = BaselineState()
    mask_model = policy.clone() if config.nlpo else None
    ema_view = policy.clone() if config.track_ema else None

    result = TrainingResult([_record(0, env.evaluate(policy), ctrl.beta)])
    if ema_view is not None:
        result.ema_records.append(_record(0, env.evaluate(ema_view), ctrl.beta))
    T = config.total_steps
    for step in range(1, T + 1):
        batch = collect(env, policy, config, rng, ctrl.beta, mask_model)
        supervised = env.supervised_batch(rng, config.batch_size) if config.lambda_mt > 0 else None
        if not config.frozen_sender:
            if config.algo == "reinforce":
                reinforce_step(policy, batch, baseline, config, opt, supervised)
            else:
                if config.frozen_value:
                    vals = env.prefix_values(batch)
                else:
                    vals = values_batch(policy, [t.prompt for t in batch], [t.response for t in batch])
                for t, v in zip(batch, vals):
                    t.values = np.asarray(v, dtype=np.float64)
                prepare_ppo_batch(batch, config)
                ppo_step(policy, batch, [t.logp_online for t in batch], config, opt, rng, supervised,
                         use_value_loss=not config.frozen_value)
        env.after_step(batch, rng)
        ema_update(tracker, extract_params(policy))
        observed = float(np.mean(np.concatenate([t.logp_online - t.logp_ref for t in batch])))
        _finite_or_raise(observed, "batch KL")
        due = kind is not ResetKind.NONE and tracker.steps_since_reset == tracker.reset_period
        if due or step % config.interval == 0 or step == T:
            result.records.append(_record(step, env.evaluate(policy), ctrl.beta))
            if ema_view is not None:
                ema_view.flat[...] = tracker.theta_bar.values
                result.ema_records.append(_record(step, env.evaluate(ema_view), ctrl.beta))
        if maybe_reset(tracker, policy, kind, step):
            if not config.keep_optimizer_state:
                reset_optimizer_state(opt, policy.policy_mask)
            # second record at the same step: the state right after the reset
            result.records.append(_record(step, env.evaluate(policy), ctrl.beta, kind.value))
        if mask_model is not None and step % config.sync_period == 0:
            mask_model.flat[...] = policy.flat
        adaptive_beta_update(ctrl, observed)
    result.reset_events = list(tracker.events)
    return result
