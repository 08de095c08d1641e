import numpy as np
import pytest
from factories import random_policy_trajectory, small_vocab
from hypothesis import given, settings
from hypothesis import strategies as st

from medeyes import grammar
from medeyes.core import Answer, ReasoningStep, Source, Trajectory
from medeyes.env import GeneratorConfig, generate_episode
from medeyes.policy import (
    ActionVocab,
    DecodeRule,
    Featurizer,
    FeatureSpec,
    PolicyParams,
    load_checkpoint,
    log_prob_grad,
    sample_rollout,
    save_checkpoint,
    token_log_prob,
    token_log_probs,
    trajectory_log_prob,
)


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def _fd_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        up, dn = theta.copy(), theta.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


# ------------------------------------------------------------- vocabulary


def test_vocab_layout():
    v = ActionVocab()
    assert v.tokens[0] == "STOP" and v.tokens[1] == "SCAN" and v.tokens[-1] == "OBS"
    assert v.size == 2 + 4 + 16 + 11 + 1
    assert v.is_gaze(1) and not v.is_gaze(v.stop) and not v.is_gaze(v.obs)
    assert v.answer_of(v.answer_ids["yes"]) == "yes" and v.answer_of(v.stop) is None
    assert v.answer_token(" YES ") == v.answer_ids["yes"]
    assert v.answer_token("perhaps") == v.stop


def test_vocab_box_tokens():
    v = ActionVocab()
    for tok, box in v.boxes.items():
        assert v.box_token(box) == tok
    from medeyes.core import BBox
    assert v.tokens[v.box_token(BBox(5, 9, 7, 11))] == "GAZE_9"
    with pytest.raises(ValueError):
        ActionVocab(grid_size=10, bin_size=4)


def test_tokenize_masks_feedback():
    v = ActionVocab()
    from medeyes.core import BBox, Gaze
    steps = [ReasoningStep("a", Gaze(BBox(0, 0, 4, 4)), "0"), ReasoningStep("b", Answer())]
    ids, mask = v.tokenize(steps, "no")
    assert ids == [v.box_token(BBox(0, 0, 4, 4)), v.obs, v.answer_ids["no"]]
    assert mask == [True, False, True]


def test_decode_rule_rows():
    v = small_vocab()
    rule = DecodeRule(v, t_max=3)
    early = rule.row(0)
    assert early[v.obs] == 0 and early.sum() == v.size - 1
    last = rule.row(2)
    assert set(np.flatnonzero(last)) == {v.stop, *v.answer_ids.values()}
    m = rule.matrix([True, False, True, False, True])
    assert np.array_equal(m[0], rule.row(0)) and np.array_equal(m[2], rule.row(1))
    assert np.array_equal(m[4], rule.row(2)) and m[1].all()
    with pytest.raises(ValueError):
        DecodeRule(v, t_max=0)


# ---------------------------------------------------------- log-probs


def test_zero_params_uniform():
    v = 21
    params = PolicyParams.zeros(5, v)
    ctx = np.random.default_rng(0).normal(size=5)
    for tok in range(v):
        assert token_log_prob(params, ctx, tok) == pytest.approx(np.log(1 / v), abs=1e-15)


def test_token_log_prob_with_allowed_set():
    params = PolicyParams.zeros(3, 6)
    allowed = np.array([1, 0, 1, 1, 0, 0], np.uint8)
    assert token_log_prob(params, np.ones(3), 2, allowed) == pytest.approx(np.log(1 / 3))
    assert token_log_prob(params, np.ones(3), 1, allowed) == -np.inf
    with pytest.raises(ValueError):
        token_log_prob(params, np.ones(3), 6)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(2, 32), st.floats(0.1, 20.0))
def test_normalization(seed, d, v, scale):
    rng = np.random.default_rng(seed)
    params = PolicyParams(rng.normal(scale=scale, size=(d, v)))
    ctx = rng.normal(size=d)
    total = sum(np.exp(token_log_prob(params, ctx, t)) for t in range(v))
    assert abs(total - 1.0) <= 1e-12
    assert all(np.isfinite(token_log_prob(params, ctx, t)) for t in range(v))


def test_column_shift_changes_only_relative_odds():
    rng = np.random.default_rng(1)
    params = PolicyParams(rng.normal(size=(4, 7)))
    ctx = np.array([1.0, 0.3, -0.2, 0.5])
    shifted = params.copy()
    shifted.theta[0, 2] += 1.5  # logit of token 2 rises by 1.5 (ctx[0] = 1)
    before = np.array([token_log_prob(params, ctx, t) for t in range(7)])
    after = np.array([token_log_prob(shifted, ctx, t) for t in range(7)])
    others = [t for t in range(7) if t != 2]
    assert np.allclose((after - before)[others], (after - before)[others][0], atol=1e-12)
    assert (after[2] - after[0]) - (before[2] - before[0]) == pytest.approx(1.5, abs=1e-12)
    everywhere = params.copy()
    everywhere.theta[0, :] += 3.0
    assert np.allclose([token_log_prob(everywhere, ctx, t) for t in range(7)], before, atol=1e-12)


def test_single_token_trajectory_at_zero():
    v = small_vocab()
    t = Trajectory([ReasoningStep("a", Answer())], "yes", Source.ON, [v.answer_ids["yes"]], [True])
    t.features = np.ones((1, 4))
    assert trajectory_log_prob(PolicyParams.zeros(4, v.size), t) == pytest.approx(np.log(1 / v.size))
    t.admissible = DecodeRule(v, 1).matrix(t.mask)
    assert trajectory_log_prob(PolicyParams.zeros(4, v.size), t) == pytest.approx(np.log(1 / 12))


def test_all_masked_trajectory():
    from medeyes.core import BBox, Gaze
    t = Trajectory([ReasoningStep("a", Gaze(BBox(0, 0, 1, 1)), "0"), ReasoningStep("b", Answer())],
                   "yes", Source.ON, [2, 20, 5], [False, False, False])
    t.features = np.ones((3, 4))
    params = PolicyParams(np.random.default_rng(0).normal(size=(4, 21)))
    assert trajectory_log_prob(params, t) == 0.0
    assert not log_prob_grad(params, t).any()


def test_factorization_over_concatenation():
    rng = np.random.default_rng(3)
    v = small_vocab()
    params = PolicyParams(rng.normal(size=(8, v.size)))
    for _ in range(50):
        t1 = random_policy_trajectory(rng, v, 8, constrained=False)
        t2 = random_policy_trajectory(rng, v, 8, constrained=False)
        joined = Trajectory(t1.steps[:-1] + t2.steps, t2.answer, Source.ON,
                            t1.token_ids[:-1] + t2.token_ids, t1.mask[:-1] + t2.mask)
        joined.features = np.vstack([t1.features[:-1], t2.features])
        head = token_log_probs(params, t1)[:-1].sum()
        assert trajectory_log_prob(params, joined) == pytest.approx(head + trajectory_log_prob(params, t2), abs=1e-12)
        g_joined = log_prob_grad(params, joined)
        t1_head = Trajectory(t1.steps, t1.answer, Source.ON, t1.token_ids, t1.mask[:-1] + [False])
        t1_head.features = t1.features
        assert np.allclose(g_joined, log_prob_grad(params, t1_head) + log_prob_grad(params, t2), atol=1e-12)


def test_inadmissible_token_rejected():
    v = small_vocab()
    rng = np.random.default_rng(0)
    t = random_policy_trajectory(rng, v, 4)
    t.admissible = t.admissible.copy()
    t.admissible[-1, t.token_ids[-1]] = 0
    with pytest.raises(ValueError):
        trajectory_log_prob(PolicyParams.zeros(4, v.size), t)
    t.features = None
    with pytest.raises(ValueError):
        trajectory_log_prob(PolicyParams.zeros(4, v.size), t)


@pytest.mark.parametrize("constrained", [False, True])
def test_gradient_matches_finite_differences(constrained):
    rng = np.random.default_rng(4 + constrained)
    v = small_vocab()
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 9))
        params = PolicyParams(rng.normal(scale=0.7, size=(d, v.size)))
        t = random_policy_trajectory(rng, v, d, constrained=constrained)
        analytic = log_prob_grad(params, t)
        numeric = _fd_grad(lambda th: trajectory_log_prob(PolicyParams(th), t), params.theta)
        worst = max(worst, _rel_err(analytic, numeric))
    assert worst <= 1e-6


def test_single_token_gradient_structure():
    rng = np.random.default_rng(6)
    params = PolicyParams(rng.normal(size=(5, 21)))
    t = Trajectory([ReasoningStep("a", Answer())], "yes", Source.ON, [9], [True])
    phi = rng.normal(size=5)
    t.features = phi[None, :]
    logits = phi @ params.theta
    p = np.exp(logits - logits.max())
    p /= p.sum()
    onehot = np.eye(21)[9]
    assert np.allclose(log_prob_grad(params, t), np.outer(phi, onehot - p), atol=1e-13)


# ----------------------------------------------------------- rollouts


def _setup(t_max=3):
    vocab = ActionVocab()
    rule = DecodeRule(vocab, t_max)
    feat = Featurizer(FeatureSpec(), rule)
    return vocab, feat


def test_answer_bias_gives_length_one():
    vocab, feat = _setup()
    params = PolicyParams.zeros(feat.dim, vocab.size)
    params.theta[0, vocab.answer_ids["no"]] = 50.0
    rng = np.random.default_rng(0)
    for seed in range(20):
        ep = generate_episode(seed, GeneratorConfig())
        t = sample_rollout(params, ep, vocab, feat, rng, 3)
        assert t.length == 1 and t.answer == "no"


def test_rollouts_are_grammar_valid_and_bounded():
    vocab, feat = _setup()
    rng = np.random.default_rng(1)
    for i in range(1000):
        params = PolicyParams(rng.normal(scale=2.0, size=(feat.dim, vocab.size)))
        ep = generate_episode(i, GeneratorConfig())
        t = sample_rollout(params, ep, vocab, feat, rng, 3)
        assert grammar.validate(grammar.serialize(t)).overall
        assert 1 <= t.length <= 3 and t.source is Source.ON
        assert t.token_ids.count(vocab.obs) == t.length - 1
        assert t.features.shape == (len(t.token_ids), feat.dim)
        assert np.isfinite(trajectory_log_prob(params, t))


def test_rollout_features_match_featurizer():
    vocab, feat = _setup()
    rng = np.random.default_rng(2)
    params = PolicyParams(rng.normal(size=(feat.dim, vocab.size)))
    for seed in range(30):
        ep = generate_episode(seed, GeneratorConfig())
        t = sample_rollout(params, ep, vocab, feat, rng, 3)
        sampled_feats, sampled_adm = t.features.copy(), t.admissible.copy()
        feat.attach(t, ep)
        assert np.array_equal(sampled_feats, t.features)
        assert np.array_equal(sampled_adm, t.admissible)


def test_rollout_determinism():
    vocab, feat = _setup()
    params = PolicyParams(np.random.default_rng(3).normal(size=(feat.dim, vocab.size)))
    ep = generate_episode(8, GeneratorConfig())
    a = [sample_rollout(params, ep, vocab, feat, np.random.default_rng(5), 3) for _ in range(2)]
    assert a[0] == a[1]


def test_stop_token_means_abstain():
    vocab, feat = _setup(t_max=1)
    params = PolicyParams.zeros(feat.dim, vocab.size)
    params.theta[0, vocab.stop] = 50.0
    t = sample_rollout(params, generate_episode(0, GeneratorConfig()), vocab, feat, np.random.default_rng(0), 1)
    assert t.answer == "unknown" and t.token_ids == [vocab.stop]


# --------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    vocab = ActionVocab()
    params = PolicyParams(np.random.default_rng(0).normal(size=(7, vocab.size)))
    save_checkpoint(params, vocab, tmp_path / "p.bin")
    back = load_checkpoint(tmp_path / "p.bin", vocab)
    assert np.array_equal(back.theta, params.theta)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "p.bin", small_vocab())
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.bin")


def test_params_must_be_finite():
    with pytest.raises(ValueError):
        PolicyParams(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        PolicyParams(np.zeros(3))
