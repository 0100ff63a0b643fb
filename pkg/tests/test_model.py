import numpy as np
import pytest

from deskrl import autodiff as ad
from deskrl.autodiff import ShapeError, Tape, Tensor
from deskrl.data import PaddedWindow
from deskrl.envs import ContinuousActions, DiscreteActions
from deskrl.model import (
    MIXER_ATTENTION,
    MIXER_CONV,
    MIXER_DIRECT,
    MODAL_ACTION,
    MODAL_RTG,
    MODAL_STATE,
    AttentionParams,
    CheckpointError,
    DirectAttentionParams,
    ModelConfig,
    SequenceModel,
    attention_token_mix,
    conv_token_mix,
    count_token_mixer_params,
    direct_attention_mix,
    load_checkpoint,
    mixers_from_name,
    modal_layout,
    parameter_shapes,
    save_checkpoint,
)

CONT2 = ContinuousActions(dim=2)


def small_config(**overrides):
    base = dict(
        context_length=4,
        hidden_dim=8,
        n_blocks=1,
        state_dim=3,
        action_space=CONT2,
        filter_length=3,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_window(cfg, rng, pad=0):
    k = cfg.context_length
    mask = np.ones(k, dtype=bool)
    mask[:pad] = False
    if cfg.discrete:
        actions = rng.integers(0, cfg.action_space.n, size=k)
        actions[:pad] = 0
    else:
        actions = rng.normal(size=(k, cfg.action_space.dim))
        actions[:pad] = 0.0
    rtg = rng.normal(size=k)
    rtg[:pad] = 0.0
    states = rng.normal(size=(k, cfg.state_dim))
    states[:pad] = 0.0
    return PaddedWindow(rtg, states, actions, mask)


# ---------------------------------------------------------------------------
# layout


def test_trimodal_layout_ordering():
    layout = modal_layout(2)
    assert layout.n == 5
    assert list(layout.modal_ids) == [MODAL_RTG, MODAL_STATE, MODAL_ACTION, MODAL_RTG, MODAL_STATE]
    assert list(layout.timesteps) == [0, 0, 0, 1, 1]


def test_layout_without_actions():
    layout = modal_layout(3, include_action_tokens=False)
    assert layout.n == 6
    assert list(layout.modal_ids) == [MODAL_RTG, MODAL_STATE] * 3


def test_position_4_uses_rtg_bank_for_k2():
    # 1-based position p=4 has mod(p,3)=1: an RTG slot
    layout = modal_layout(2)
    assert layout.modal_ids[3] == MODAL_RTG


# ---------------------------------------------------------------------------
# conv mixer


def test_conv_identity_filter_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 3)))
    w = Tensor(np.array([[1.0, 0.0]] * 3))
    out = conv_token_mix(x, [w, w, w], modal_layout(2).modal_ids)
    assert np.array_equal(out.data, x.data)


def test_conv_direct_formula_example():
    x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0], [5.0]]))
    w = Tensor(np.array([[1.0, 0.5]]))
    out = conv_token_mix(x, [w, w, w], modal_layout(2).modal_ids)
    assert np.allclose(out.data.ravel(), [1.0, 2.5, 4.0, 5.5, 7.0], atol=1e-15)


def conv_oracle(x, banks, modal_ids, length):
    """Nested-loop evaluation of the causal filter equation, 1-based positions."""
    n, d = x.shape
    out = np.zeros((n, d))
    for p in range(1, n + 1):
        w = banks[modal_ids[p - 1]]
        for q in range(d):
            acc = 0.0
            for lag in range(length):
                src = p - lag
                if src >= 1:
                    acc += w[q, lag] * x[src - 1, q]
            out[p - 1, q] = acc
    return out


def test_conv_matches_nested_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        k = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5))
        length = int(rng.integers(1, 7))
        layout = modal_layout(k)
        x = rng.normal(size=(layout.n, d))
        banks = [rng.normal(size=(d, length)) for _ in range(3)]
        got = conv_token_mix(
            Tensor(x), [Tensor(b) for b in banks], layout.modal_ids
        ).data
        assert np.allclose(got, conv_oracle(x, banks, layout.modal_ids, length), atol=1e-12)


def test_conv_modal_dispatch_isolates_action_bank():
    rng = np.random.default_rng(2)
    layout = modal_layout(3)
    x = Tensor(rng.normal(size=(layout.n, 4)))
    banks = [Tensor(rng.normal(size=(4, 3))) for _ in range(3)]
    base = conv_token_mix(x, banks, layout.modal_ids).data
    banks[MODAL_ACTION] = Tensor(rng.normal(size=(4, 3)))
    changed = conv_token_mix(x, banks, layout.modal_ids).data
    non_action = layout.modal_ids != MODAL_ACTION
    assert np.array_equal(base[non_action], changed[non_action])
    assert not np.array_equal(base[~non_action], changed[~non_action])


def test_conv_locality_window():
    # single-block locality: rows at lag >= L cannot influence the output
    rng = np.random.default_rng(3)
    layout = modal_layout(4)
    length = 3
    x = rng.normal(size=(layout.n, 2))
    banks = [Tensor(rng.normal(size=(2, length))) for _ in range(3)]
    base = conv_token_mix(Tensor(x), banks, layout.modal_ids).data
    p = 7
    x2 = x.copy()
    x2[p - length] += 5.0
    out2 = conv_token_mix(Tensor(x2), banks, layout.modal_ids).data
    assert abs(out2[p] - base[p]).max() < 1e-12


def test_conv_unified_bank_shares_gradient():
    rng = np.random.default_rng(4)
    layout = modal_layout(3)
    x = Tensor(rng.normal(size=(layout.n, 2)))
    w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_all(conv_token_mix(x, [w], np.zeros(layout.n, dtype=np.intp)))
        tape.backward(y)
    assert w.grad is not None and w.grad.shape == (2, 2)


# ---------------------------------------------------------------------------
# attention mixer


def test_attention_single_token_returns_value():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 4)))
    params = AttentionParams(
        Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4)))
    )
    out = attention_token_mix(x, params)
    assert np.allclose(out.data, x.data @ params.value.data, atol=1e-14)


def test_attention_zero_value_matrix_gives_zero():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(5, 4)))
    params = AttentionParams(
        Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))), Tensor(np.zeros((4, 4)))
    )
    assert np.array_equal(attention_token_mix(x, params).data, np.zeros((5, 4)))


def test_attention_equal_scores_average_values():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 4)))
    params = AttentionParams(
        Tensor(np.zeros((4, 2))), Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(4, 4)))
    )
    out = attention_token_mix(x, params)
    v = x.data @ params.value.data
    assert np.allclose(out.data[1], 0.5 * (v[0] + v[1]), atol=1e-14)


def test_attention_score_scaling_flag():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(3, 4)))
    params = AttentionParams(
        Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4)))
    )
    plain = attention_token_mix(x, params, scale_scores=False).data
    scaled = attention_token_mix(x, params, scale_scores=True).data
    assert not np.allclose(plain, scaled)


# ---------------------------------------------------------------------------
# direct attention mixer


def test_direct_identity_matrix_reproduces_xv():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(4, 3)))
    params = DirectAttentionParams(Tensor(np.eye(4)), Tensor(rng.normal(size=(3, 3))))
    out = direct_attention_mix(x, params)
    assert np.allclose(out.data, x.data @ params.value.data, atol=1e-14)


def test_direct_zero_matrix_gives_zero():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(4, 3)))
    params = DirectAttentionParams(Tensor(np.zeros((4, 4))), Tensor(rng.normal(size=(3, 3))))
    assert np.array_equal(direct_attention_mix(x, params).data, np.zeros((4, 3)))


def test_direct_matches_brute_force_matmul():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 1))
    a = np.tril(rng.normal(size=(5, 5)))
    v = rng.normal(size=(1, 1))
    params = DirectAttentionParams(Tensor(a), Tensor(v))
    out = direct_attention_mix(Tensor(x), params).data
    assert np.allclose(out, a @ (x @ v), atol=1e-13)


def test_direct_upper_triangle_ignored_and_ungradiented():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(4, 3)))
    a_data = rng.normal(size=(4, 4))
    a = Tensor(a_data, requires_grad=True)
    params = DirectAttentionParams(a, Tensor(rng.normal(size=(3, 3))))
    out1 = direct_attention_mix(x, params).data
    a.data = a_data + np.triu(np.ones((4, 4)), k=1) * 100.0
    out2 = direct_attention_mix(x, params).data
    assert np.array_equal(out1, out2)
    with Tape() as tape:
        y = ad.sum_all(direct_attention_mix(x, params))
        tape.backward(y)
    assert np.array_equal(np.triu(a.grad, k=1), np.zeros((4, 4)))


def test_direct_restricted_to_attention_alphas_reproduces_attention():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(7, 6)))
    params = AttentionParams(
        Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 6)))
    )
    capture = []
    attn_out = attention_token_mix(x, params, capture=capture).data
    alpha = capture[0][0]
    direct = DirectAttentionParams(Tensor(alpha), params.value)
    direct_out = direct_attention_mix(x, direct).data
    assert np.abs(attn_out - direct_out).max() < 1e-10


# ---------------------------------------------------------------------------
# causality (all mixers)


@pytest.mark.parametrize("kind", [MIXER_CONV, MIXER_ATTENTION, MIXER_DIRECT])
def test_mixer_causality_exhaustive(kind):
    rng = np.random.default_rng(14)
    layout = modal_layout(4)
    n, d = layout.n, 6
    x = rng.normal(size=(n, d))

    if kind == MIXER_CONV:
        banks = [Tensor(rng.normal(size=(d, 3))) for _ in range(3)]
        run = lambda arr: conv_token_mix(Tensor(arr), banks, layout.modal_ids).data
    elif kind == MIXER_ATTENTION:
        params = AttentionParams(
            Tensor(rng.normal(size=(d, d))), Tensor(rng.normal(size=(d, d))), Tensor(rng.normal(size=(d, d)))
        )
        run = lambda arr: attention_token_mix(Tensor(arr), params).data
    else:
        params = DirectAttentionParams(Tensor(rng.normal(size=(n, n))), Tensor(rng.normal(size=(d, d))))
        run = lambda arr: direct_attention_mix(Tensor(arr), params).data

    base = run(x)
    for p in range(n):
        x2 = x.copy()
        x2[p] += rng.normal(size=d)
        out2 = run(x2)
        if p > 0:
            assert np.abs(out2[:p] - base[:p]).max() < 1e-12


# ---------------------------------------------------------------------------
# embeddings and blocks


def test_zero_window_zero_embeddings_gives_zero_grid():
    cfg = small_config()
    model = SequenceModel(cfg, rng=np.random.default_rng(0))
    for name in list(model.params):
        if name.startswith("embed_"):
            model.params[name].data[...] = 0.0
    window = PaddedWindow(
        np.zeros(4), np.zeros((4, 3)), np.zeros((4, 2)), np.ones(4, dtype=bool)
    )
    grid = model.embed_windows([window])
    assert np.array_equal(grid.data, np.zeros((11, 8)))


def test_embedding_interleave_order_k2():
    cfg = small_config(context_length=2)
    model = SequenceModel(cfg, rng=np.random.default_rng(1))
    # make each modality produce a distinct constant row via the bias
    for name in list(model.params):
        if name.startswith("embed_"):
            model.params[name].data[...] = 0.0
    model.params["embed_rtg.bias"].data[...] = 1.0
    model.params["embed_state.bias"].data[...] = 2.0
    model.params["embed_action.bias"].data[...] = 3.0
    window = PaddedWindow(
        np.zeros(2), np.zeros((2, 3)), np.zeros((2, 2)), np.ones(2, dtype=bool)
    )
    grid = model.embed_windows([window]).data
    assert np.array_equal(grid[:, 0], [1.0, 2.0, 3.0, 1.0, 2.0])


def test_one_hot_state_with_identity_embedding_selects_row():
    cfg = small_config(state_dim=8)
    model = SequenceModel(cfg, rng=np.random.default_rng(2))
    model.params["embed_state.weight"].data[...] = np.eye(8)
    model.params["embed_state.bias"].data[...] = 0.0
    states = np.zeros((4, 8))
    states[2, 5] = 1.0
    window = PaddedWindow(np.zeros(4), states, np.zeros((4, 2)), np.ones(4, dtype=bool))
    grid = model.embed_windows([window]).data
    state_rows = grid[model.config.layout().positions(MODAL_STATE)]
    expected = np.zeros(8)
    expected[5] = 1.0
    assert np.array_equal(state_rows[2], expected)


def test_window_length_mismatch_rejected():
    cfg = small_config()
    model = SequenceModel(cfg, rng=np.random.default_rng(3))
    bad = PaddedWindow(np.zeros(5), np.zeros((5, 3)), np.zeros((5, 2)), np.ones(5, dtype=bool))
    with pytest.raises(ShapeError, match="context length"):
        model.forward_window(bad)


def test_block_with_zeroed_outputs_is_identity():
    cfg = small_config(n_blocks=1)
    model = SequenceModel(cfg, rng=np.random.default_rng(4))
    for bank in ("rtg", "state", "action"):
        model.params[f"block0.mixer.filter_{bank}"].data[...] = 0.0
    model.params["block0.ffn.w2"].data[...] = 0.0
    model.params["block0.ffn.b2"].data[...] = 0.0
    rng = np.random.default_rng(5)
    grid = Tensor(rng.normal(size=(11, 8)))
    out = model.block_forward(0, grid)
    assert np.array_equal(out.data, grid.data)


def test_block_deterministic_without_dropout():
    cfg = small_config(dropout=0.0)
    model = SequenceModel(cfg, rng=np.random.default_rng(6))
    w = random_window(cfg, np.random.default_rng(7))
    a = model.forward_window(w).data
    b = model.forward_window(w).data
    assert np.array_equal(a, b)


def test_block_composition_matches_step_by_step_oracle():
    cfg = small_config(n_blocks=1, filter_length=2)
    model = SequenceModel(cfg, rng=np.random.default_rng(8))
    for bank in ("rtg", "state", "action"):
        f = model.params[f"block0.mixer.filter_{bank}"].data
        f[...] = 0.0
        f[:, 0] = 1.0  # identity filter
    model.params["block0.ffn.w2"].data[...] = 0.0
    model.params["block0.ffn.b2"].data[...] = 0.0
    rng = np.random.default_rng(9)
    x = rng.normal(size=(11, 8))

    # oracle: Z1 = LN(T) + T (identity mixer), Z2 = Z1 (zero FFN)
    g1 = model.params["block0.ln1.gain"].data
    b1 = model.params["block0.ln1.bias"].data
    mu = x.mean(axis=1, keepdims=True)
    sig = np.sqrt(x.var(axis=1, keepdims=True) + cfg.ln_eps)
    expected = ((x - mu) / sig) * g1 + b1 + x

    out = model.block_forward(0, Tensor(x))
    assert np.allclose(out.data, expected, atol=1e-12)


def test_dropout_applied_in_train_mode():
    cfg = small_config(dropout=0.5)
    model = SequenceModel(cfg, rng=np.random.default_rng(10))
    w = random_window(cfg, np.random.default_rng(11))
    a = model.forward_window(w, train_mode=True, rng=np.random.default_rng(0)).data
    b = model.forward_window(w, train_mode=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError, match="rng"):
        model.forward_window(w, train_mode=True)


# ---------------------------------------------------------------------------
# model forward


def test_head_bias_only_when_weights_zero():
    cfg = small_config()
    model = SequenceModel(cfg, rng=np.random.default_rng(12))
    model.params["head.weight"].data[...] = 0.0
    model.params["head.bias"].data[...] = np.array([0.25, -0.5])
    w = random_window(cfg, np.random.default_rng(13))
    out = model.forward_window(w).data
    assert np.allclose(out, np.tile([0.25, -0.5], (4, 1)), atol=1e-15)


def test_output_shapes_continuous_and_discrete():
    cont = SequenceModel(small_config(), rng=np.random.default_rng(14))
    w = random_window(cont.config, np.random.default_rng(15))
    assert cont.forward_window(w).data.shape == (4, 2)
    disc_cfg = small_config(action_space=DiscreteActions(n=5))
    disc = SequenceModel(disc_cfg, rng=np.random.default_rng(16))
    w2 = random_window(disc_cfg, np.random.default_rng(17))
    assert disc.forward_window(w2).data.shape == (4, 5)


def test_perturbing_current_state_changes_only_current_prediction():
    cfg = small_config(n_blocks=1, filter_length=1)
    model = SequenceModel(cfg, rng=np.random.default_rng(18))
    rng = np.random.default_rng(19)
    w = random_window(cfg, rng)
    base = model.forward_window(w).data
    states2 = w.states.copy()
    states2[-1] += rng.normal(size=3)
    w2 = PaddedWindow(w.rtg, states2, w.actions, w.mask)
    out2 = model.forward_window(w2).data
    assert np.abs(out2[:-1] - base[:-1]).max() < 1e-12
    assert np.abs(out2[-1] - base[-1]).max() > 1e-8


def test_model_forward_causality_across_timesteps():
    cfg = small_config(context_length=6, n_blocks=2, mixers=("conv", "attention"))
    model = SequenceModel(cfg, rng=np.random.default_rng(20))
    rng = np.random.default_rng(21)
    w = random_window(cfg, rng)
    base = model.forward_window(w).data
    # perturbing the state at timestep 3 leaves predictions 0..2 unchanged
    states2 = w.states.copy()
    states2[3] += 1.0
    out2 = model.forward_window(PaddedWindow(w.rtg, states2, w.actions, w.mask)).data
    assert np.abs(out2[:3] - base[:3]).max() < 1e-12


# ---------------------------------------------------------------------------
# parameter accounting


def test_conv_mixer_count_formula():
    cfg = ModelConfig(
        context_length=8,
        hidden_dim=128,
        n_blocks=3,
        state_dim=4,
        action_space=CONT2,
        filter_length=6,
    )
    report = count_token_mixer_params(cfg)
    assert report.mixer_total == 3 * 128 * 6 * 3  # 6912
    assert report.mixer_total == 6912


def test_attention_mixer_count_formula():
    cfg = ModelConfig(
        context_length=8,
        hidden_dim=128,
        n_blocks=1,
        state_dim=4,
        action_space=CONT2,
        mixers=(MIXER_ATTENTION,),
        attention_width=128,
    )
    report = count_token_mixer_params(cfg)
    assert report.per_block[0][1] == 2 * 128 * 128 + 128 * 128  # 49152
    assert report.per_block[0][1] == 49152


def test_unified_filter_count():
    cfg = ModelConfig(
        context_length=4,
        hidden_dim=1,
        n_blocks=1,
        state_dim=2,
        action_space=CONT2,
        filter_length=6,
        unified_filter=True,
    )
    assert count_token_mixer_params(cfg).mixer_total == 6


def test_projection_layer_adds_d_squared_plus_d():
    base = small_config()
    proj = small_config(projection_layer=True)
    d = base.hidden_dim
    delta = count_token_mixer_params(proj).mixer_total - count_token_mixer_params(base).mixer_total
    assert delta == d * d + d


def test_counts_match_enumerated_tensors():
    for cfg in (
        small_config(n_blocks=2, mixers=("conv", "attention")),
        small_config(mixers=(MIXER_DIRECT,)),
        small_config(projection_layer=True),
        small_config(unified_filter=True),
        small_config(include_action_tokens=False),
    ):
        model = SequenceModel(cfg, rng=np.random.default_rng(0))
        report = count_token_mixer_params(cfg)
        measured_mixer = sum(
            p.data.size for name, p in model.params.items() if ".mixer." in name
        )
        assert measured_mixer == report.mixer_total
        assert sum(p.data.size for p in model.params.values()) == report.model_total


def test_hybrid_mixers_layout():
    assert mixers_from_name("hybrid", 3) == (MIXER_CONV, MIXER_CONV, MIXER_ATTENTION)
    with pytest.raises(ValueError):
        mixers_from_name("hybrid", 1)


# ---------------------------------------------------------------------------
# action-token exclusion


def test_model_without_action_tokens_ignores_actions():
    cfg = small_config(include_action_tokens=False)
    model = SequenceModel(cfg, rng=np.random.default_rng(22))
    assert "embed_action.weight" not in model.params
    rng = np.random.default_rng(23)
    w = random_window(cfg, rng)
    base = model.forward_window(w).data
    w2 = PaddedWindow(w.rtg, w.states, rng.normal(size=w.actions.shape), w.mask)
    assert np.array_equal(model.forward_window(w2).data, base)


def test_positional_embedding_defaults():
    assert not small_config().use_positional_embedding  # pure conv
    assert small_config(mixers=(MIXER_ATTENTION,)).use_positional_embedding
    assert small_config(mixers=(MIXER_DIRECT,)).use_positional_embedding
    assert small_config(positional_embedding=True).use_positional_embedding
    cfg = small_config(n_blocks=2, mixers=("conv", "attention"), positional_embedding=False)
    assert not cfg.use_positional_embedding
    assert "pos_embedding" not in parameter_shapes(cfg)


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = small_config(n_blocks=2, mixers=("conv", "direct_attention"), projection_layer=True)
    model = SequenceModel(cfg, rng=np.random.default_rng(24))
    path = tmp_path / "model.json"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == model.config
    for name, p in model.params.items():
        assert np.array_equal(back.params[name].data, p.data)
        assert back.params[name].data.tobytes() == p.data.tobytes()
    # save again: identical bytes
    path2 = tmp_path / "model2.json"
    save_checkpoint(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_mismatched_params(tmp_path):
    cfg = small_config()
    model = SequenceModel(cfg, rng=np.random.default_rng(25))
    values = model.param_values()
    values.pop("head.bias")
    with pytest.raises(CheckpointError, match="head.bias"):
        SequenceModel(cfg, params=values)


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(CheckpointError, match="not a"):
        load_checkpoint(path)


def test_identity_init_option():
    cfg = small_config(conv_identity_init=True)
    model = SequenceModel(cfg, rng=np.random.default_rng(26))
    f = model.params["block0.mixer.filter_state"].data
    assert np.array_equal(f[:, 0], np.ones(8))
    assert np.array_equal(f[:, 1:], np.zeros((8, 2)))
