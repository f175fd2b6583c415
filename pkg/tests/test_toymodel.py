import math

import numpy as np
import pytest

from emblab.datagen import ModalitySpec, WorldSpec, build_world, sample_batch
from emblab.numerics import Rng, grad_check
from emblab.toymodel import (
    Checkpoint,
    CheckpointError,
    LoraAdapter,
    ModelSpec,
    ToyModel,
    _gen_loss_grads,
    checkpoint_to_model,
    encode,
    generative_loss,
    init_lora,
    init_model,
    load_checkpoint,
    merge_lora,
    model_to_checkpoint,
    pretrain,
    save_checkpoint,
    soup,
    spec_for_world,
)


def tiny_spec(**kw):
    base = dict(
        modalities=(("img", 5), ("aud", 4)),
        enc_hidden=6,
        trunk_dims=(7, 5),
        embed_dim=5,
        vocab_size=11,
        text_len=3,
        init_seed=13,
    )
    base.update(kw)
    return ModelSpec(**base)


def tiny_world(seed=1, sigma=0.1):
    return build_world(
        WorldSpec(
            latent_classes=6,
            latent_dim=3,
            modalities=(ModalitySpec("img", 5, sigma), ModalitySpec("aud", 4, sigma)),
            vocab_size=11,
            text_len=3,
            seed=seed,
        )
    )


def test_init_deterministic():
    m1 = init_model(tiny_spec())
    m2 = init_model(tiny_spec())
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_init_zero_head_gives_ln_v_exactly():
    world = tiny_world()
    model = init_model(tiny_spec())
    batch = sample_batch(world, 9, Rng(4))
    for src in ("text", "img", "aud"):
        assert generative_loss(model, batch, src) == math.log(11)


def test_single_layer_trunk_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        tiny_spec(trunk_dims=(5,))


def test_trunk_width_must_match_embed_dim():
    with pytest.raises(ValueError, match="embed_dim"):
        tiny_spec(trunk_dims=(7, 6))


def test_encode_deterministic_and_adapter_noop():
    model = init_model(tiny_spec())
    x = Rng(3).normal(4 * 5).reshape(4, 5)
    base = encode(model, "img", x)
    again = encode(model, "img", x)
    adapter = init_lora(model, rank=2, alpha=4.0, seed=0)
    with_adapter = encode(model, "img", x, adapter=adapter)
    assert np.array_equal(base, again)
    assert np.array_equal(base, with_adapter)  # B is zero at init


def test_encode_validates_inputs():
    model = init_model(tiny_spec())
    with pytest.raises(ValueError, match="unknown modality"):
        encode(model, "video", np.zeros((2, 5)))
    with pytest.raises(ValueError, match="img input"):
        encode(model, "img", np.zeros((2, 4)))
    with pytest.raises(ValueError, match="token id"):
        encode(model, "text", np.full((2, 3), 99))


def test_encode_matches_hand_forward():
    spec = ModelSpec(
        modalities=(("img", 2),),
        enc_hidden=2,
        trunk_dims=(2, 2),
        embed_dim=2,
        vocab_size=3,
        text_len=2,
        init_seed=0,
    )
    model = init_model(spec)
    p = model.params
    p["tok.table"][:] = [[0.5, -0.1], [0.2, 0.6], [-0.3, 0.4]]
    p["enc.img.w1"][:] = [[0.3, -0.2], [0.1, 0.5]]
    p["enc.img.b1"][:] = [[0.05, -0.1]]
    p["enc.img.w2"][:] = [[0.7, 0.2], [-0.4, 0.6], [0.1, -0.3]]
    p["enc.img.b2"][:] = [[0.0, 0.1, -0.2]]
    p["trunk.0.w"][:] = [[0.2, -0.3], [0.4, 0.1]]
    p["trunk.0.b"][:] = [[0.01, 0.02]]
    p["trunk.1.w"][:] = [[-0.5, 0.3], [0.2, 0.2]]
    p["trunk.1.b"][:] = [[0.0, -0.02]]

    x = np.array([[0.4, -1.2]])
    h = np.tanh(p["enc.img.w1"] @ x[0] + p["enc.img.b1"][0])
    logits = p["enc.img.w2"] @ h + p["enc.img.b2"][0]
    probs = np.exp(logits) / np.exp(logits).sum()
    z0 = probs @ p["tok.table"]
    z1 = np.tanh(p["trunk.0.w"] @ z0 + p["trunk.0.b"][0])
    z2 = np.tanh(p["trunk.1.w"] @ z1 + p["trunk.1.b"][0])

    emb, layers = encode(model, "img", x, capture_layers=True)
    assert np.allclose(emb[0], z2, atol=1e-12, rtol=0)
    assert len(layers) == 2
    assert np.allclose(layers[0][0], z1, atol=1e-12, rtol=0)

    # text path: mean of token embeddings through the same trunk
    toks = np.array([[2, 0]])
    z0t = p["tok.table"][toks[0]].mean(axis=0)
    z1t = np.tanh(p["trunk.0.w"] @ z0t + p["trunk.0.b"][0])
    z2t = np.tanh(p["trunk.1.w"] @ z1t + p["trunk.1.b"][0])
    assert np.allclose(encode(model, "text", toks)[0], z2t, atol=1e-12, rtol=0)


def test_generative_loss_hand_value():
    spec = tiny_spec(modalities=(("img", 5),), vocab_size=3, text_len=2)
    model = init_model(spec)
    logits = np.array([0.7, -0.4, 0.1, 1.5, 0.2, -0.3])  # (L=2, V=3) flattened
    model.params["head.w"][:] = 0.0
    model.params["head.b"][:] = logits
    world = build_world(
        WorldSpec(
            latent_classes=3,
            latent_dim=2,
            modalities=(ModalitySpec("img", 5, 0.0),),
            vocab_size=3,
            text_len=2,
            seed=0,
        )
    )
    s = sample_batch(world, 1, Rng(0))[0]
    g0, g1 = int(s.tokens[0]), int(s.tokens[1])
    row0, row1 = logits[:3], logits[3:]

    def lsm(row, idx):
        return row[idx] - math.log(np.exp(row).sum())

    expect = -(lsm(row0, g0) + lsm(row1, g1)) / 2
    assert generative_loss(model, [s], "img") == pytest.approx(expect, abs=1e-12)


def test_generative_loss_perfect_prediction_limit():
    spec = tiny_spec(modalities=(("img", 5),), vocab_size=3, text_len=2)
    world = build_world(
        WorldSpec(
            latent_classes=3,
            latent_dim=2,
            modalities=(ModalitySpec("img", 5, 0.0),),
            vocab_size=3,
            text_len=2,
            seed=0,
        )
    )
    s = sample_batch(world, 1, Rng(0))[0]
    model = init_model(spec)
    onehot = np.full((2, 3), -1e4)
    onehot[0, s.tokens[0]] = 1e4
    onehot[1, s.tokens[1]] = 1e4
    model.params["head.b"][:] = onehot.reshape(1, -1)
    assert generative_loss(model, [s], "img") < 1e-12


def test_generative_loss_validations():
    model = init_model(tiny_spec())
    world = tiny_world()
    batch = sample_batch(world, 2, Rng(1))
    with pytest.raises(ValueError, match="non-empty"):
        generative_loss(model, [], "img")
    bad = [
        type(batch[0])(class_id=0, obs=batch[0].obs, tokens=np.array([0, 1, 99]))
    ]
    with pytest.raises(ValueError, match="token id"):
        generative_loss(model, bad, "text")


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _loss_fn_for(model, source, inputs, tokens, scope, adapter=None):
    spec = model.spec

    if scope == "lora":
        def f(params):
            ad = LoraAdapter(
                rank=adapter.rank,
                alpha=adapter.alpha,
                b={i: params[f"lora.{i}.b"] for i in adapter.b},
                a={i: params[f"lora.{i}.a"] for i in adapter.a},
            )
            return _gen_loss_grads(model, source, inputs, tokens, ad, scope="lora")
        return f

    def f(params):
        probe = ToyModel(spec, params)
        return _gen_loss_grads(probe, source, inputs, tokens, scope=scope)
    return f


@pytest.mark.parametrize("source", ["text", "img", "aud"])
def test_generative_gradients_pass_fd_check(source):
    world = tiny_world(seed=8)
    model = init_model(tiny_spec(init_seed=21))
    # move off the zero-head saddle so head grads are informative
    rng = Rng(99)
    model.params["head.w"] += 0.05 * rng.normal(
        model.params["head.w"].size
    ).reshape(model.params["head.w"].shape)
    batch = sample_batch(world, 3, Rng(5))
    tokens = np.stack([s.tokens for s in batch])
    inputs = tokens if source == "text" else np.stack([s.obs[source] for s in batch])
    f = _loss_fn_for(model, source, inputs, tokens, scope="all")
    err = grad_check(f, model.params, h=1e-5)
    assert err < 1e-4


def test_lora_gradients_pass_fd_check():
    world = tiny_world(seed=8)
    model = init_model(tiny_spec(init_seed=21))
    adapter = init_lora(model, rank=2, alpha=4.0, seed=3)
    rng = Rng(2)
    for i in adapter.b:  # nonzero B so both factors get signal
        adapter.b[i] += 0.1 * rng.normal(adapter.b[i].size).reshape(adapter.b[i].shape)
    batch = sample_batch(world, 3, Rng(5))
    tokens = np.stack([s.tokens for s in batch])
    params = {}
    for i in adapter.b:
        params[f"lora.{i}.b"] = adapter.b[i]
        params[f"lora.{i}.a"] = adapter.a[i]
    f = _loss_fn_for(model, "text", tokens, tokens, scope="lora", adapter=adapter)
    err = grad_check(f, params, h=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# training, lora merge, soup, checkpoints
# ---------------------------------------------------------------------------


def test_pretrain_zero_steps_noop():
    world = tiny_world()
    model = init_model(tiny_spec())
    out, trace = pretrain(model, world, ["text", "img"], steps=0, lr=1e-3,
                          batch=4, rng=Rng(0))
    assert trace == []
    for k in model.params:
        assert np.array_equal(out.params[k], model.params[k])


def test_pretrain_first_trace_entry_is_ln_v():
    world = tiny_world()
    model = init_model(tiny_spec())
    _, trace = pretrain(model, world, ["text", "img"], steps=3, lr=1e-3,
                        batch=4, rng=Rng(0))
    assert trace[0] == math.log(11)


def test_pretrain_learns_noiseless_world():
    world = tiny_world(seed=2, sigma=0.0)
    model = init_model(spec_for_world(world, enc_hidden=16, trunk_dims=(16, 12),
                                      init_seed=5))
    out, trace = pretrain(model, world, ["text", "img", "aud"], steps=800,
                          lr=3e-3, batch=16, rng=Rng(7))
    assert trace[-1] < 0.5 * trace[0]
    heldout = sample_batch(world, 64, Rng(123))
    assert generative_loss(out, heldout, "img") < 0.5 * math.log(11)


def test_pretrain_validations():
    world = tiny_world()
    model = init_model(tiny_spec())
    with pytest.raises(ValueError, match="non-empty"):
        pretrain(model, world, [], 1, 1e-3, 4, Rng(0))
    with pytest.raises(ValueError, match="unknown modality"):
        pretrain(model, world, ["video"], 1, 1e-3, 4, Rng(0))


def test_merge_lora_zero_is_noop():
    model = init_model(tiny_spec())
    adapter = init_lora(model, rank=3, alpha=6.0, seed=1)
    merged = merge_lora(model, adapter)
    for k in model.params:
        assert np.array_equal(merged.params[k], model.params[k])


def test_merge_matches_attached_forward():
    model = init_model(tiny_spec())
    adapter = init_lora(model, rank=3, alpha=6.0, seed=1)
    rng = Rng(9)
    for i in adapter.b:
        adapter.b[i] += 0.2 * rng.normal(adapter.b[i].size).reshape(adapter.b[i].shape)
    merged = merge_lora(model, adapter)
    x = Rng(11).normal(100 * 5).reshape(100, 5)
    attached = encode(model, "img", x, adapter=adapter)
    materialized = encode(merged, "img", x)
    assert np.max(np.abs(attached - materialized)) < 1e-6


def test_merge_hand_outer_product():
    model = init_model(tiny_spec(trunk_dims=(2, 5), enc_hidden=2))
    adapter = init_lora(model, rank=1, alpha=2.0, seed=0)
    adapter.b[0][:] = np.array([[1.0], [2.0]])
    adapter.a[0][:] = np.array([[3.0, 4.0, 5.0, 6.0, 7.0]])
    w_before = model.params["trunk.0.w"].copy()
    merged = merge_lora(model, adapter)
    # (alpha/r) B A = 2 * outer([1,2],[3..7])
    expect = w_before + 2.0 * np.outer([1.0, 2.0], [3.0, 4.0, 5.0, 6.0, 7.0])
    assert np.allclose(merged.params["trunk.0.w"], expect, atol=1e-12, rtol=0)


def test_merge_shape_mismatch():
    model = init_model(tiny_spec())
    other = init_model(tiny_spec(trunk_dims=(9, 5)))
    adapter = init_lora(other, rank=2, alpha=4.0, seed=0)
    with pytest.raises(ValueError, match="shape mismatch"):
        merge_lora(model, adapter)


def test_trunk_perturbation_moves_all_modalities():
    model = init_model(tiny_spec())
    world = tiny_world()
    batch = sample_batch(world, 8, Rng(3))
    tokens = np.stack([s.tokens for s in batch])
    img = np.stack([s.obs["img"] for s in batch])
    before_t = encode(model, "text", tokens)
    before_i = encode(model, "img", img)
    bumped = model.copy()
    bumped.params["trunk.0.w"] += 0.1
    assert np.abs(encode(bumped, "text", tokens) - before_t).max() > 0
    assert np.abs(encode(bumped, "img", img) - before_i).max() > 0


def _random_checkpoint(seed, spec=None):
    model = init_model(spec or tiny_spec())
    rng = Rng(seed)
    for k in model.params:
        model.params[k] += 0.1 * rng.normal(model.params[k].size).reshape(
            model.params[k].shape
        )
    return model_to_checkpoint(model, stage=f"s{seed}", seed=seed, steps=seed)


def test_soup_idempotent_bitwise():
    c = _random_checkpoint(1)
    mixed = soup([c, c])
    for k in c.tensors:
        assert np.array_equal(mixed.tensors[k], c.tensors[k])


def test_soup_hand_arithmetic():
    a = _random_checkpoint(1)
    b = Checkpoint(a.spec, {k: np.full_like(v, 0.4) for k, v in a.tensors.items()},
                   dict(a.meta))
    a2 = Checkpoint(a.spec, {k: np.full_like(v, 0.2) for k, v in a.tensors.items()},
                    dict(a.meta))
    mixed = soup([a2, b])
    for k in mixed.tensors:
        assert np.allclose(mixed.tensors[k], 0.3, atol=1e-15, rtol=0)


def test_soup_matches_loop_oracle_and_permutation_invariant():
    cs = [_random_checkpoint(s) for s in (1, 2, 3)]
    mixed = soup(cs)
    swapped = soup([cs[2], cs[0], cs[1]])
    for k in mixed.tensors:
        oracle = np.zeros_like(mixed.tensors[k])
        for c in cs:
            oracle += c.tensors[k]
        oracle /= 3
        assert np.allclose(mixed.tensors[k], oracle, rtol=1e-12, atol=1e-14)
        assert np.array_equal(mixed.tensors[k], swapped.tensors[k])
    assert mixed.meta["stage"] == "soup"
    assert len(mixed.meta["parents"].split(",")) == 3


def test_soup_validations():
    c = _random_checkpoint(1)
    other = _random_checkpoint(2, spec=tiny_spec(trunk_dims=(9, 5)))
    with pytest.raises(ValueError, match="at least 2"):
        soup([c])
    with pytest.raises(ValueError, match="specs differ"):
        soup([c, other])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    c = _random_checkpoint(5)
    path = tmp_path / "model.lcoc"
    save_checkpoint(c, path)
    back = load_checkpoint(path)
    assert back.spec == c.spec
    assert back.meta == c.meta
    assert set(back.tensors) == set(c.tensors)
    for k in c.tensors:
        assert np.array_equal(back.tensors[k], c.tensors[k])
    model = checkpoint_to_model(back)
    assert np.array_equal(model.params["head.w"], c.tensors["head.w"])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.lcoc"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    c = _random_checkpoint(6)
    path = tmp_path / "model.lcoc"
    save_checkpoint(c, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    c = _random_checkpoint(7)
    path = tmp_path / "model.lcoc"
    save_checkpoint(c, path)
    data = bytearray(path.read_bytes())
    data[4] = 9  # bump version field
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
