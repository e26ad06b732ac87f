import numpy as np
import pytest

from driftlab.benchtasks import (
    ContinuationEnv,
    ContinuationSizes,
    PivotEnv,
    PivotSizes,
    PretrainError,
    TaskSizeError,
    build_continuation_task,
    build_pivot_task,
    derive_rng,
    detach_value,
    export_jsonl,
    generator_reward,
    import_jsonl,
    make_env,
    oracle_receiver,
    oracle_sender,
    permuted_code,
    pivot_scores,
    pretrain,
    pretrained_continuation,
    pretrained_pivot,
    token_accuracy,
)
from driftlab.evalkit import perplexity
from driftlab.seqpolicy import EOS, PolicyConfig, SeqPolicy, log_prob, sample_batch, values_batch
from driftlab.trainers import TrainerConfig, run_training


@pytest.fixture(scope="module")
def pivot():
    return build_pivot_task(0)


@pytest.fixture(scope="module")
def cont():
    return pretrained_continuation(0)[0]


# -- determinism and plumbing

def test_derive_rng_streams():
    a = derive_rng(3, "x").random(4)
    assert np.array_equal(a, derive_rng(3, "x").random(4))
    assert not np.array_equal(a, derive_rng(3, "y").random(4))
    assert not np.array_equal(a, derive_rng(4, "x").random(4))


def test_pivot_task_is_pure_function_of_seed(pivot):
    again = build_pivot_task(0)
    for name in ("tau", "confuser", "ambiguous", "canon"):
        assert np.array_equal(getattr(pivot, name), getattr(again, name))
    for split in ("pretrain_ae", "pretrain_ed", "finetune_ad"):
        for (x1, y1), (x2, y2) in zip(getattr(pivot, split), getattr(again, split)):
            assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert not np.array_equal(build_pivot_task(1).tau, pivot.tau)


def test_continuation_task_is_pure_function_of_seed():
    small = ContinuationSizes(n_pretrain=50, n_rm=400, n_eval=20, n_eval_prompts=4)
    a = build_continuation_task(5, small, rm_epochs=20)
    b = build_continuation_task(5, small, rm_epochs=20)
    assert np.array_equal(a.reference.trans, b.reference.trans)
    assert np.array_equal(a.reward_model.flat, b.reward_model.flat)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a.pretrain_pairs, b.pretrain_pairs))


def test_jsonl_round_trip(tmp_path, pivot):
    export_jsonl(pivot.finetune_ad[:5], tmp_path / "ft.jsonl")
    back = import_jsonl(tmp_path / "ft.jsonl")
    assert all(np.array_equal(x, y) and np.array_equal(r, s) for (x, r), (y, s) in zip(pivot.finetune_ad[:5], back))


def test_token_accuracy_counts_length_mismatch():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[1, 2]], [[1, 2, 3, 4]]) == 0.5
    assert token_accuracy([[1, 9, 3, 4]], [[1, 2]]) == 0.25


# -- pivot task

def test_pivot_splits(pivot):
    seen_eval = {tuple(a) for a in pivot.eval_a}
    assert not seen_eval & {tuple(a) for a, _ in pivot.pretrain_ae}
    assert not seen_eval & {tuple(a) for a, _ in pivot.finetune_ad}
    for a, d in pivot.finetune_ad:
        # fine-tuning targets are D tokens only, never E
        assert np.array_equal(d, pivot.gold_d(a))
        assert d.max() < pivot.vocab_d
    for a, e in pivot.pretrain_ae:
        assert e[-1] == EOS and len(e) == len(a) + 1


def test_vocab_sizes_within_bounds(pivot):
    assert max(pivot.vocab_a, pivot.vocab_e, pivot.vocab_d) <= 32


def test_oracle_composition_is_perfect(pivot):
    s = pivot_scores(pivot, oracle_sender(pivot), oracle_receiver(pivot))
    assert s["task"] == 1.0


def test_permuted_code_reaches_task_with_chance_drift(pivot):
    sender, receiver = permuted_code(pivot)
    s = pivot_scores(pivot, sender, receiver)
    assert s["task"] == 1.0
    assert s["drift"] < 0.15


def test_collided_concepts_share_canonical_tokens(pivot):
    coll = np.flatnonzero(pivot.collided)
    assert len(coll) == pivot.sizes.collision_pairs
    for c in coll:
        partner = pivot.canon[c]
        assert partner != c and not pivot.collided[partner] and not pivot.ambiguous[c]


def test_gold_e_is_not_lossless(pivot):
    # the canonical channel alone cannot carry every concept
    s = pivot_scores(pivot, lambda a_seqs: [pivot.gold_e(a) for a in a_seqs], oracle_receiver(pivot))
    assert s["drift"] == 1.0 and s["task"] < 1.0


@pytest.mark.parametrize("sizes", [PivotSizes(n_concepts=3), PivotSizes(min_len=1), PivotSizes(max_len=4, min_len=5),
                                   PivotSizes(ambiguous_frac=1.0), PivotSizes(collision_pairs=4)])
def test_pivot_size_errors(sizes):
    with pytest.raises(TaskSizeError):
        build_pivot_task(0, sizes)


def test_pretrained_sender_accuracy():
    task, sender_params, _ = pretrained_pivot(0)
    env = PivotEnv(0)
    assert env.evaluate(env.policy).drift_score >= 0.9


def test_pivot_env_reward_kinds():
    env = PivotEnv(0)
    trajs = sample_batch(env.policy, [a for a, _ in env.task.finetune_ad[:8]], np.random.default_rng(0))
    lp = env.rewards(trajs)
    assert np.all(lp <= 0)
    p = PivotEnv(0, reward="prob").rewards(trajs)
    assert np.all((p > 0) & (p <= 1))
    with pytest.raises(ValueError):
        PivotEnv(0, reward="bleu")


def test_pivot_sender_learns_only_through_policy_gradient():
    # with a zero learning rate the REINFORCE term is switched off; the sender must not move
    env = PivotEnv(0)
    before = env.policy.flat.copy()
    run_training(env, TrainerConfig(lr=0.0, total_steps=3, batch_size=4, eval_interval=3), np.random.default_rng(0))
    np.testing.assert_array_equal(env.policy.flat, before)


def test_initial_record_is_pretrained_snapshot():
    env = PivotEnv(0)
    snap = env.evaluate(env.policy)
    res = run_training(PivotEnv(0), TrainerConfig(lr=1e-3, total_steps=2, batch_size=4), np.random.default_rng(0))
    assert res.records[0].drift_score == snap.drift_score
    assert res.records[0].task_score == snap.task_score


# -- continuation task

def test_reference_generator_scores_mid_scale(cont):
    assert 0.4 <= generator_reward(cont, cont.reference) <= 0.6


def test_planted_solution_is_high_reward_and_in_support(cont):
    assert generator_reward(cont, cont.planted) >= 0.9
    ref_ppl = cont.reference.perplexity(cont.eval_pairs)
    planted_on_ref = cont.planted.perplexity(cont.eval_pairs)
    assert planted_on_ref <= 1.1 * ref_ppl


def test_degenerate_generator_hacks_reward(cont):
    assert generator_reward(cont, cont.degenerate) >= 0.9
    assert cont.degenerate.perplexity(cont.eval_pairs) >= 5 * cont.reference.perplexity(cont.eval_pairs)


def test_attribute_definition(cont):
    pos = cont.pos_tokens[0]
    assert cont.attribute([pos] * cont.sizes.cont_len) == 1
    assert cont.attribute([cont.neg_tokens[0]] * cont.sizes.cont_len) == 0
    assert cont.vocab <= 32


def test_continuation_pretraining_reaches_floor(cont):
    _, params = pretrained_continuation(0)
    env = ContinuationEnv(0)
    floor = cont.reference.entropy_floor(cont.eval_pairs)
    assert perplexity(env.policy, cont.eval_pairs) <= 1.2 * floor


def test_uniform_policy_perplexity_is_vocab_size():
    pol = SeqPolicy(PolicyConfig(10, max_len=6))
    corpus = [(np.array([1, 2]), np.array([3, 4, 5, EOS]))]
    assert perplexity(pol, corpus) == pytest.approx(10.0, abs=1e-12)


def test_zero_epoch_pretraining_is_a_no_op(pivot):
    s_cfg, _ = pivot.policy_configs()
    pol = SeqPolicy(s_cfg, np.random.default_rng(0))
    before = pol.flat.copy()
    pretrain(pol, pivot, 0, np.random.default_rng(0))
    np.testing.assert_array_equal(pol.flat, before)


def test_pretrain_guard_reports_non_convergence(pivot):
    s_cfg, _ = pivot.policy_configs()
    with pytest.raises(PretrainError, match="a_to_e_accuracy"):
        pretrain(SeqPolicy(s_cfg, np.random.default_rng(0)), pivot, 1, np.random.default_rng(0), lr=1e-6)


def test_continuation_size_errors():
    with pytest.raises(TaskSizeError):
        build_continuation_task(0, ContinuationSizes(n_pos=0))
    with pytest.raises(TaskSizeError):
        build_continuation_task(0, ContinuationSizes(cont_len=1))


def test_frozen_value_prefix_scores(cont):
    env = ContinuationEnv(0)
    trajs = sample_batch(env.policy, cont.eval_prompts[:4], np.random.default_rng(0))
    vals = env.prefix_values(trajs)
    for t, v in zip(trajs, vals):
        assert len(v) == len(t.response)
        # the value at the final token is the reward model's score of the whole response
        assert v[-1] == pytest.approx(cont.reward_model.score(t.response[:-1]), abs=1e-12)


def test_detach_value_preserves_outputs():
    env = ContinuationEnv(0)
    det = detach_value(env.policy)
    prompts = env.task.eval_prompts[:3]
    trajs = sample_batch(env.policy, prompts, np.random.default_rng(0))
    for t in trajs:
        np.testing.assert_allclose(log_prob(det, t.prompt, t.response), log_prob(env.policy, t.prompt, t.response),
                                   atol=1e-12)
    a = values_batch(det, prompts, [t.response for t in trajs])
    b = values_batch(env.policy, prompts, [t.response for t in trajs])
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_make_env():
    assert isinstance(make_env("pivot", 0), PivotEnv)
    assert isinstance(make_env("continuation", 0), ContinuationEnv)
    with pytest.raises(ValueError):
        make_env("chess", 0)
