"""Reward models, KL-shaped rewards and the adaptive KL coefficient."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .gradcore import Tape
from .optim import Adam
from .seqpolicy import EOS, ParamVector

# named coefficients for the KL penalty
BETA_PRESETS = {
    "pivot": 0.05,
    "minimal": 0.001,
    "continuation": 0.1,
    "preference": 0.02,
}


class DegenerateDatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shaping


def shape_reward(r: float, logp_online, logp_ref, beta: float) -> np.ndarray:
    """Per-token rewards: -beta * log-ratio at every token, plus ``r`` at the end."""
    lo = np.asarray(logp_online, dtype=np.float64)
    lr = np.asarray(logp_ref, dtype=np.float64)
    if lo.shape != lr.shape:
        raise ValueError(f"log-prob lengths differ: {lo.shape} vs {lr.shape}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if lo.size == 0:
        raise ValueError("cannot shape an empty response")
    out = -beta * (lo - lr)
    out[-1] += r
    return out


@dataclass
class KlController:
    beta: float
    target_kl: float = 1.0
    gain: float = 0.1
    adaptive: bool = False
    clip: float = 0.2

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.target_kl <= 0:
            raise ValueError("target_kl must be positive")


def adaptive_beta_update(ctrl: KlController, observed_mean_kl: float) -> float:
    """Proportional controller nudging beta toward the KL target."""
    if not ctrl.adaptive:
        return ctrl.beta
    err = float(np.clip((observed_mean_kl - ctrl.target_kl) / ctrl.target_kl, -ctrl.clip, ctrl.clip))
    ctrl.beta = max(0.0, ctrl.beta * (1.0 + ctrl.gain * err))
    return ctrl.beta


# ---------------------------------------------------------------------------
# preference scoring


def preference_loss(r_plus: float, r_minus: float) -> float:
    """Bradley-Terry negative log-likelihood -log sigmoid(r+ - r-)."""
    d = float(r_plus) - float(r_minus)
    # log1p(exp(-d)) computed without overflow
    return float(np.logaddexp(0.0, -d))


def upvote_score(upvotes: int) -> float:
    if upvotes < 0:
        raise ValueError("upvotes must be non-negative")
    return math.log2(1 + upvotes)


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple
    chosen: tuple
    rejected: tuple
    chosen_score: float | None = None
    rejected_score: float | None = None

    def __post_init__(self):
        if tuple(self.chosen) == tuple(self.rejected):
            raise ValueError("chosen and rejected responses must differ")


def save_preferences(pairs: list[PreferencePair], path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps({"prompt": list(p.prompt), "chosen": list(p.chosen), "rejected": list(p.rejected)}) + "\n")


def load_preferences(path) -> list[PreferencePair]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                pairs.append(PreferencePair(tuple(d["prompt"]), tuple(d["chosen"]), tuple(d["rejected"])))
    return pairs


# ---------------------------------------------------------------------------
# reward model


class RewardModel:
    """Bag-of-tokens scorer: mean embedding -> tanh layer -> scalar.

    ``kind="classifier"`` squashes the scalar through a sigmoid so scores are
    probabilities; ``kind="preference"`` returns the raw scalar. EOS tokens
    are ignored when pooling.
    """

    def __init__(self, vocab_size: int, kind: str = "classifier", emb_dim: int = 16, hidden: int = 16,
                 rng: np.random.Generator | None = None):
        if kind not in ("classifier", "preference"):
            raise ValueError(f"unknown reward model kind {kind!r}")
        self.vocab_size = vocab_size
        self.kind = kind
        self.emb_dim = emb_dim
        self.hidden = hidden
        self._shapes = [("emb", (vocab_size, emb_dim)), ("w1", (emb_dim, hidden)), ("b1", (hidden,)),
                        ("w2", (hidden, 1)), ("b2", (1,))]
        sizes = [int(np.prod(s)) for _, s in self._shapes]
        self.flat = np.zeros(sum(sizes))
        self.params = {}
        off = 0
        for (name, shape), n in zip(self._shapes, sizes):
            self.params[name] = self.flat[off:off + n].reshape(shape)
            off += n
        if rng is not None:
            self.params["emb"][...] = rng.normal(0, 0.5, (vocab_size, emb_dim))
            self.params["w1"][...] = rng.normal(0, 1 / np.sqrt(emb_dim), (emb_dim, hidden))
            self.params["w2"][...] = rng.normal(0, 1 / np.sqrt(hidden), (hidden, 1))

    @property
    def layout(self) -> str:
        return f"rewardmodel/v1:{self.kind}:V{self.vocab_size}:E{self.emb_dim}:H{self.hidden}"

    def extract(self) -> ParamVector:
        return ParamVector(self.flat.copy(), self.layout)

    def load(self, pv: ParamVector) -> None:
        if pv.layout != self.layout or pv.values.size != self.flat.size:
            raise ValueError(f"layout {pv.layout!r} does not match {self.layout!r}")
        self.flat[...] = pv.values

    def bags(self, seqs) -> np.ndarray:
        """Normalised token-count rows, EOS excluded; (N, V)."""
        out = np.zeros((len(seqs), self.vocab_size))
        for i, s in enumerate(seqs):
            s = np.asarray(s, dtype=np.int64)
            s = s[s != EOS]
            if s.size:
                if s.max() >= self.vocab_size or s.min() < 0:
                    raise ValueError("token out of range for reward model")
                out[i] = np.bincount(s, minlength=self.vocab_size) / s.size
        return out

    def _raw(self, bags: np.ndarray) -> np.ndarray:
        p = self.params
        h = np.tanh(bags @ p["emb"] @ p["w1"] + p["b1"])
        return (h @ p["w2"] + p["b2"])[:, 0]

    def score_batch(self, seqs) -> np.ndarray:
        raw = self._raw(self.bags(seqs))
        if self.kind == "classifier":
            return 1.0 / (1.0 + np.exp(-raw))
        return raw

    def score(self, seq) -> float:
        return float(self.score_batch([seq])[0])

    def raw_tape(self, tape: Tape, bags: np.ndarray, nodes=None):
        if nodes is None:
            nodes = {name: tape.param(self.params[name]) for name, _ in self._shapes}
        x = tape.matmul(tape.const(bags), nodes["emb"])
        h = tape.tanh(tape.add(tape.matmul(x, nodes["w1"]), nodes["b1"]))
        return tape.sum_rows(tape.add(tape.matmul(h, nodes["w2"]), nodes["b2"])), nodes

    def flatten(self, grads, nodes) -> np.ndarray:
        return np.concatenate([grads[nodes[name]].reshape(-1) for name, _ in self._shapes])


def classifier_loss(model: RewardModel, tape: Tape, bags: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy written through log-sigmoid."""
    raw, nodes = model.raw_tape(tape, bags)
    sign = np.where(labels > 0.5, 1.0, -1.0)
    ll = tape.log_sigmoid(tape.mul(raw, tape.const(sign)))
    return tape.scale(tape.mean(ll), -1.0), nodes


def pairwise_loss(model: RewardModel, tape: Tape, bags_plus: np.ndarray, bags_minus: np.ndarray):
    """Mean Bradley-Terry loss over a batch of pairs."""
    r_plus, nodes = model.raw_tape(tape, bags_plus)
    r_minus, _ = model.raw_tape(tape, bags_minus, nodes)
    ll = tape.log_sigmoid(tape.sub(r_plus, r_minus))
    return tape.scale(tape.mean(ll), -1.0), nodes


@dataclass
class RewardTrainReport:
    train_losses: list[float] = field(default_factory=list)
    heldout_accuracy: float = float("nan")


def train_reward_model(model: RewardModel, dataset, epochs: int, rng: np.random.Generator,
                       lr: float = 0.01, holdout: float = 0.2) -> RewardTrainReport:
    """Full-batch Adam training; returns per-epoch train losses and held-out accuracy.

    ``dataset`` is either a list of ``(tokens, label)`` pairs (classifier) or a
    list of :class:`PreferencePair` (preference). Accuracy is classification
    accuracy at 0.5 for classifiers and pairwise ranking accuracy otherwise.
    """
    if not dataset:
        raise DegenerateDatasetError("empty dataset")
    pairwise = isinstance(dataset[0], PreferencePair)
    order = rng.permutation(len(dataset))
    n_hold = int(round(holdout * len(dataset)))
    hold = [dataset[i] for i in order[:n_hold]]
    train = [dataset[i] for i in order[n_hold:]]
    if pairwise:
        if all(tuple(p.chosen) == tuple(p.rejected) for p in dataset):
            raise DegenerateDatasetError("all preference pairs are ties")
        bp = model.bags([p.chosen for p in train])
        bm = model.bags([p.rejected for p in train])
    else:
        labels = np.array([float(lbl) for _, lbl in dataset])
        if labels.min() == labels.max():
            raise DegenerateDatasetError("classifier dataset has a single class")
        bags = model.bags([s for s, _ in train])
        y = np.array([float(lbl) for _, lbl in train])
    opt = Adam(model.flat.size, lr=lr)
    report = RewardTrainReport()
    for _ in range(epochs):
        tape = Tape()
        if pairwise:
            loss, nodes = pairwise_loss(model, tape, bp, bm)
        else:
            loss, nodes = classifier_loss(model, tape, bags, y)
        grads = tape.backward(loss)
        report.train_losses.append(float(loss.value))
        opt.step(model.flat, model.flatten(grads, nodes))
    if hold:
        if pairwise:
            sp = model.score_batch([p.chosen for p in hold])
            sm = model.score_batch([p.rejected for p in hold])
            report.heldout_accuracy = float(np.mean(sp > sm))
        else:
            s = model.score_batch([q for q, _ in hold])
            yh = np.array([float(lbl) for _, lbl in hold])
            report.heldout_accuracy = float(np.mean((s > 0.5) == (yh > 0.5)))
    return report
