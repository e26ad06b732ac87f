"""Conditional autoregressive categorical policy with a scalar value head.

Architecture (per response position ``t``)::

    enc_t  = tanh(E_src[x_t] W_cur + E_src[x_last] W_last + b_enc)      prompt encoder
    h_t    = tanh(enc_t W_ctx + E_dec[y_{t-1}] W_in + P[t])             decoder hidden
    logits = h_t W_out + b_out
    V(s_t) = h_t w_v + b_v                                               value head

``x_t`` is the prompt token aligned with output position ``t`` (0 past the
end of the prompt), ``x_last`` the final prompt token, and ``y_{-1}`` is 0.
Token 0 is end-of-sequence everywhere. At position ``max_len - 1`` only EOS
may be emitted, so every response terminates within ``max_len`` tokens and
that forced token carries log-probability 0.

Parameters live in one flat float64 vector; each named weight is a view
into it. The order below is the checkpoint layout:

    src_emb, enc_cur, enc_last, enc_bias, dec_emb, dec_in, dec_ctx,
    pos_emb, out_w, out_b                 -- policy scope
    [v.src_emb ... v.pos_emb]             -- value scope, only when detached
    value_w, value_b                      -- value scope
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gradcore import NEG_LOGIT, Node, Tape

EOS = 0
SCOPES = ("all", "policy", "value")

_BACKBONE = ("src_emb", "enc_cur", "enc_last", "enc_bias", "dec_emb", "dec_in", "dec_ctx", "pos_emb")


class LayoutError(ValueError):
    """Parameter vector does not match the target architecture."""


class TokenError(ValueError):
    """Token index outside the vocabulary or malformed sequence."""


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    prompt_vocab_size: int | None = None
    emb_dim: int = 16
    hidden: int = 32
    max_len: int = 16
    value_head_detached: bool = False

    @property
    def src_vocab(self) -> int:
        return self.prompt_vocab_size or self.vocab_size

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        V, P, E, H, L = self.vocab_size, self.src_vocab, self.emb_dim, self.hidden, self.max_len
        backbone = [
            ("src_emb", (P, E)),
            ("enc_cur", (E, H)),
            ("enc_last", (E, H)),
            ("enc_bias", (H,)),
            ("dec_emb", (V, E)),
            ("dec_in", (E, H)),
            ("dec_ctx", (H, H)),
            ("pos_emb", (L, H)),
        ]
        out = backbone + [("out_w", (H, V)), ("out_b", (V,))]
        if self.value_head_detached:
            out += [("v." + name, shape) for name, shape in backbone]
        out += [("value_w", (H, 1)), ("value_b", (1,))]
        return out

    @property
    def layout_tag(self) -> str:
        return (
            f"seqpolicy/v1:V{self.vocab_size}:P{self.src_vocab}:E{self.emb_dim}"
            f":H{self.hidden}:L{self.max_len}:D{int(self.value_head_detached)}"
        )


@dataclass
class ParamVector:
    values: np.ndarray
    layout: str

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.values.size


@dataclass
class Trajectory:
    prompt: np.ndarray
    response: np.ndarray
    logp_online: np.ndarray
    logp_ref: np.ndarray | None = None
    values: np.ndarray | None = None
    reward_terminal: float = 0.0
    shaped_rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    # additive logit mask applied while sampling (NLPO); None when unrestricted
    mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.response)

    def validate(self) -> None:
        n = len(self.response)
        for name in ("logp_online", "logp_ref", "values", "shaped_rewards", "advantages", "returns"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, response has {n}")
        for name in ("logp_online", "logp_ref"):
            arr = getattr(self, name)
            if arr is not None and np.any(arr > 0):
                raise ValueError(f"{name} contains positive log-probabilities")


@dataclass
class Rows:
    """Flattened (sequence, position) rows fed to the network."""

    src: np.ndarray
    last: np.ndarray
    prev: np.ndarray
    pos: np.ndarray
    seq: np.ndarray
    n_seqs: int
    target: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __len__(self) -> int:
        return self.pos.size


def _check_tokens(tokens: np.ndarray, vocab: int, what: str) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise TokenError(f"{what} token out of range [0, {vocab})")


def make_rows(
    policy: "SeqPolicy",
    prompts,
    responses,
    masks=None,
    *,
    score_targets: bool = True,
) -> Rows:
    """Rows for teacher-forced evaluation of ``responses`` given ``prompts``.

    With ``score_targets=False`` the responses are prefixes and one row is
    produced per prefix length ``0..len(prefix)`` (value/entropy queries at
    every state). Otherwise one row per response token.
    """
    cfg = policy.config
    src, last, prev, pos, seq, tgt, mrows = [], [], [], [], [], [], []
    for i, (x, y) in enumerate(zip(prompts, responses)):
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        _check_tokens(x, cfg.src_vocab, "prompt")
        _check_tokens(y, cfg.vocab_size, "response")
        if len(y) > cfg.max_len:
            raise TokenError(f"response length {len(y)} exceeds max_len {cfg.max_len}")
        eos_at = np.flatnonzero(y == EOS)
        if eos_at.size and eos_at[0] != len(y) - 1:
            raise TokenError("EOS may only appear as the final response token")
        n = len(y) if score_targets else len(y) + 1
        if not score_targets and n > cfg.max_len:
            n = cfg.max_len
        t = np.arange(n)
        xs = np.zeros(n, dtype=np.int64)
        k = min(n, len(x))
        xs[:k] = x[:k]
        src.append(xs)
        last.append(np.full(n, x[-1] if len(x) else EOS, dtype=np.int64))
        pv = np.zeros(n, dtype=np.int64)
        pv[1:] = y[: n - 1]
        prev.append(pv)
        pos.append(t)
        seq.append(np.full(n, i, dtype=np.int64))
        if score_targets:
            tgt.append(y)
        if masks is not None:
            m = masks[i]
            mrows.append(np.zeros((n, cfg.vocab_size)) if m is None else np.asarray(m)[:n])
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)  # noqa: E731
    rows = Rows(cat(src), cat(last), cat(prev), cat(pos), cat(seq), len(src))
    if score_targets:
        rows.target = cat(tgt)
    if masks is not None:
        rows.mask = np.concatenate(mrows) if mrows else np.zeros((0, cfg.vocab_size))
    return rows


@dataclass
class PolicyOutputs:
    logits: Node
    log_probs: Node  # log-softmax over the vocabulary, (N, V)
    values: Node
    params: dict[str, Node] = field(default_factory=dict)


class SeqPolicy:
    """Small conditional sequence policy. See module docstring for layout."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator | None = None, init_scale: float = 1.0):
        self.config = config
        self._shapes = config.shapes()
        self._slices: dict[str, slice] = {}
        offset = 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self.flat = np.zeros(offset)
        self.params = {name: self.flat[self._slices[name]].reshape(shape) for name, shape in self._shapes}
        value_names = {name for name, _ in self._shapes if name.startswith(("v.", "value_"))}
        self.value_mask = np.zeros(offset, dtype=bool)
        for name in value_names:
            self.value_mask[self._slices[name]] = True
        self.policy_mask = ~self.value_mask
        if rng is not None:
            self._init_random(rng, init_scale)

    def _init_random(self, rng: np.random.Generator, scale: float) -> None:
        for name, shape in self._shapes:
            base = name.split(".")[-1]
            if base in ("enc_bias", "out_b", "value_b"):
                continue
            if base.endswith("emb"):
                std = 0.5
            else:
                std = 1.0 / np.sqrt(shape[0])
            self.params[name][...] = rng.normal(0.0, std * scale, size=shape)

    # -- parameters -------------------------------------------------------

    @property
    def layout(self) -> str:
        return self.config.layout_tag

    @property
    def n_params(self) -> int:
        return self.flat.size

    def scope_mask(self, scope: str) -> np.ndarray:
        if scope == "all":
            return np.ones(self.flat.size, dtype=bool)
        if scope == "policy":
            return self.policy_mask
        if scope == "value":
            return self.value_mask
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")

    def slice_of(self, name: str) -> slice:
        return self._slices[name]

    def clone(self) -> "SeqPolicy":
        other = SeqPolicy(self.config)
        other.flat[...] = self.flat
        return other

    def tape_params(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.param(self.params[name]) for name, _ in self._shapes}

    def flatten_grads(self, grads: dict[Node, np.ndarray], nodes: dict[str, Node]) -> np.ndarray:
        flat = np.zeros_like(self.flat)
        for name, node in nodes.items():
            flat[self._slices[name]] = grads[node].reshape(-1)
        return flat

    # -- numpy fast path ----------------------------------------------------

    def _hidden_np(self, rows: Rows, prefix: str = "") -> np.ndarray:
        p = self.params
        enc = np.tanh(
            p[prefix + "src_emb"][rows.src] @ p[prefix + "enc_cur"]
            + p[prefix + "src_emb"][rows.last] @ p[prefix + "enc_last"]
            + p[prefix + "enc_bias"]
        )
        return np.tanh(
            enc @ p[prefix + "dec_ctx"]
            + p[prefix + "dec_emb"][rows.prev] @ p[prefix + "dec_in"]
            + p[prefix + "pos_emb"][rows.pos]
        )

    def forced_mask(self, pos: np.ndarray) -> np.ndarray | None:
        """Additive mask pinning the last admissible position to EOS."""
        forced = pos == self.config.max_len - 1
        if not forced.any():
            return None
        mask = np.zeros((pos.size, self.config.vocab_size))
        mask[forced, 1:] = NEG_LOGIT
        return mask

    def logits_np(self, rows: Rows) -> np.ndarray:
        h = self._hidden_np(rows)
        logits = h @ self.params["out_w"] + self.params["out_b"]
        forced = self.forced_mask(rows.pos)
        if forced is not None:
            logits = logits + forced
        if rows.mask is not None:
            logits = logits + rows.mask
        return logits

    def log_softmax_np(self, rows: Rows) -> np.ndarray:
        z = self.logits_np(rows)
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def values_np(self, rows: Rows) -> np.ndarray:
        prefix = "v." if self.config.value_head_detached else ""
        h = self._hidden_np(rows, prefix)
        return (h @ self.params["value_w"] + self.params["value_b"])[:, 0]

    # -- tape path ----------------------------------------------------------

    def _hidden_tape(self, tape: Tape, nodes: dict[str, Node], rows: Rows, prefix: str = "") -> Node:
        emb = nodes[prefix + "src_emb"]
        cur = tape.matmul(tape.embedding(emb, rows.src), nodes[prefix + "enc_cur"])
        last = tape.matmul(tape.embedding(emb, rows.last), nodes[prefix + "enc_last"])
        enc = tape.tanh(tape.add(tape.add(cur, last), nodes[prefix + "enc_bias"]))
        ctx = tape.matmul(enc, nodes[prefix + "dec_ctx"])
        dec = tape.matmul(tape.embedding(nodes[prefix + "dec_emb"], rows.prev), nodes[prefix + "dec_in"])
        pos = tape.embedding(nodes[prefix + "pos_emb"], rows.pos)
        return tape.tanh(tape.add(tape.add(ctx, dec), pos))

    def forward(self, tape: Tape, rows: Rows, nodes: dict[str, Node] | None = None) -> PolicyOutputs:
        if nodes is None:
            nodes = self.tape_params(tape)
        h = self._hidden_tape(tape, nodes, rows)
        logits = tape.add(tape.matmul(h, nodes["out_w"]), nodes["out_b"])
        extra = self.forced_mask(rows.pos)
        if rows.mask is not None:
            extra = rows.mask if extra is None else extra + rows.mask
        if extra is not None:
            logits = tape.add(logits, tape.const(extra))
        log_probs = tape.log_softmax(logits)
        hv = self._hidden_tape(tape, nodes, rows, "v.") if self.config.value_head_detached else h
        values = tape.sum_rows(tape.add(tape.matmul(hv, nodes["value_w"]), nodes["value_b"]))
        return PolicyOutputs(logits, log_probs, values, nodes)


def token_entropy(tape: Tape, out: PolicyOutputs) -> Node:
    """Per-row entropy of the next-token distribution, (N,)."""
    probs = tape.exp(out.log_probs)
    return tape.scale(tape.sum_rows(tape.mul(probs, out.log_probs)), -1.0)


# ---------------------------------------------------------------------------
# operations


def _prompt_array(prompt) -> np.ndarray:
    return np.asarray(prompt, dtype=np.int64).reshape(-1)


def sample_batch(
    policy: SeqPolicy,
    prompts,
    rng: np.random.Generator,
    temperature: float = 1.0,
    greedy: bool = False,
    mask_fn=None,
) -> list[Trajectory]:
    """Sample one response per prompt.

    ``logp_online`` records log-probabilities of the policy itself (temperature
    1, including any NLPO mask); ``temperature`` only shapes the sampler.
    ``mask_fn(prompts_idx, prompts, prefixes, pos) -> (n, V) additive mask``
    restricts the support (used for NLPO).
    """
    if temperature <= 0 and not greedy:
        raise ValueError("temperature must be positive; use greedy=True for argmax decoding")
    cfg = policy.config
    prompts = [_prompt_array(x) for x in prompts]
    for x in prompts:
        _check_tokens(x, cfg.src_vocab, "prompt")
    B = len(prompts)
    L = cfg.max_len
    resp = np.zeros((B, L), dtype=np.int64)
    logp = np.zeros((B, L))
    masks = np.zeros((B, L, cfg.vocab_size)) if mask_fn is not None else None
    lengths = np.zeros(B, dtype=np.int64)
    last = np.array([x[-1] if len(x) else EOS for x in prompts], dtype=np.int64)
    active = np.arange(B)
    for t in range(L):
        if active.size == 0:
            break
        src = np.array([prompts[i][t] if t < len(prompts[i]) else EOS for i in active], dtype=np.int64)
        prev = resp[active, t - 1] if t > 0 else np.zeros(active.size, dtype=np.int64)
        rows = Rows(src, last[active], prev, np.full(active.size, t), active, B)
        if mask_fn is not None:
            m = mask_fn(active, [prompts[i] for i in active], resp[active, :t], t)
            rows.mask = m
            masks[active, t] = m
        z = policy.logits_np(rows)
        z = z - z.max(axis=1, keepdims=True)
        lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        if greedy:
            tok = lsm.argmax(axis=1)
        else:
            zt = lsm / temperature
            probs = np.exp(zt - zt.max(axis=1, keepdims=True))
            cdf = np.cumsum(probs, axis=1)
            u = (1.0 - rng.random(active.size)) * cdf[:, -1]
            tok = (cdf < u[:, None]).sum(axis=1)
        resp[active, t] = tok
        logp[active, t] = lsm[np.arange(active.size), tok]
        lengths[active] = t + 1
        active = active[tok != EOS]
    out = []
    for i in range(B):
        n = lengths[i]
        out.append(
            Trajectory(
                prompt=prompts[i],
                response=resp[i, :n].copy(),
                logp_online=logp[i, :n].copy(),
                mask=None if masks is None else masks[i, :n].copy(),
            )
        )
    return out


def sample(policy: SeqPolicy, prompt, rng: np.random.Generator, temperature: float = 1.0, greedy: bool = False) -> Trajectory:
    return sample_batch(policy, [prompt], rng, temperature, greedy)[0]


def log_prob_batch(policy: SeqPolicy, prompts, responses, masks=None) -> list[np.ndarray]:
    rows = make_rows(policy, prompts, responses, masks)
    lsm = policy.log_softmax_np(rows)
    lp = lsm[np.arange(len(rows)), rows.target]
    bounds = np.cumsum([0] + [len(r) for r in responses])
    return [lp[bounds[i] : bounds[i + 1]] for i in range(len(responses))]


def log_prob(policy: SeqPolicy, prompt, response, mask=None) -> np.ndarray:
    """Per-token log pi(y_t | x, y_<t)."""
    return log_prob_batch(policy, [prompt], [response], None if mask is None else [mask])[0]


def step_entropy(policy: SeqPolicy, prompt, prefix) -> float:
    """Entropy of the next-token distribution after ``prefix``."""
    prefix = np.asarray(prefix, dtype=np.int64)
    rows = make_rows(policy, [prompt], [prefix], score_targets=False)
    lsm = policy.log_softmax_np(rows)[-1]
    p = np.exp(lsm)
    return float(max(0.0, -(p * lsm).sum()))


def value(policy: SeqPolicy, prompt, prefix) -> float:
    """Value estimate of the state reached after emitting ``prefix``."""
    prefix = np.asarray(prefix, dtype=np.int64)
    rows = make_rows(policy, [prompt], [prefix], score_targets=False)
    return float(policy.values_np(rows)[-1])


def values_batch(policy: SeqPolicy, prompts, responses) -> list[np.ndarray]:
    """V(s_t) for every response position t (state before emitting y_t)."""
    rows = make_rows(policy, prompts, responses)
    v = policy.values_np(rows)
    bounds = np.cumsum([0] + [len(r) for r in responses])
    return [v[bounds[i] : bounds[i + 1]] for i in range(len(responses))]


def extract_params(policy: SeqPolicy) -> ParamVector:
    return ParamVector(policy.flat.copy(), policy.layout)


def load_params(policy: SeqPolicy, params: ParamVector, scope: str = "all") -> None:
    if params.layout != policy.layout or params.values.size != policy.flat.size:
        raise LayoutError(f"layout {params.layout!r} does not match {policy.layout!r}")
    mask = policy.scope_mask(scope)
    policy.flat[mask] = params.values[mask]


# ---------------------------------------------------------------------------
# checkpoints: <u32 tag length><tag utf-8><u64 count><count x f64>, little-endian


def save_checkpoint(params: ParamVector, path) -> None:
    tag = params.layout.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<Q", params.values.size))
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    data = Path(path).read_bytes()
    (n_tag,) = struct.unpack_from("<I", data, 0)
    tag = data[4 : 4 + n_tag].decode("utf-8")
    (count,) = struct.unpack_from("<Q", data, 4 + n_tag)
    start = 12 + n_tag
    if len(data) != start + 8 * count:
        raise LayoutError(f"checkpoint {path} is truncated or has trailing bytes")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=start).astype(np.float64)
    return ParamVector(values, tag)
