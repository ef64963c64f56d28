"""Decoder tests: a straight-line numpy recomputation oracle for the two-way
block, finite-difference gradient checks, and post-processing arithmetic."""

import math

import numpy as np
import pytest
import torch

from mvseg import decoder as dec

torch.set_num_threads(1)


def tiny_config(**kw):
    defaults = dict(embed_dim=8, num_blocks=1, num_heads=2, mlp_ratio=2)
    defaults.update(kw)
    return dec.DecoderConfig(**defaults)


def fill_params(module, seed, scale=0.08):
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in module.parameters():
            vals = rng.normal(0.0, scale, size=tuple(p.shape))
            p.copy_(torch.from_numpy(vals))


# ---------------------------------------------------------------------------
# Straight-line numpy re-implementation used as the oracle


def np_layernorm(x, w, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def np_attention(params, prefix, q_in, kv_in, num_heads):
    def lin(name, x):
        return x @ params[f"{prefix}.{name}.weight"].T + params[f"{prefix}.{name}.bias"]

    q, k, v = lin("q_proj", q_in), lin("k_proj", kv_in), lin("v_proj", kv_in)
    d = q.shape[-1]
    hd = d // num_heads
    outs = []
    for h in range(num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        outs.append(np_softmax(scores) @ v[:, sl])
    merged = np.concatenate(outs, axis=-1)
    return lin("out_proj", merged)


def np_decoder_logits(params, config, prompt_tokens, point_grid):
    """Recompute compute_logits for a single view, entirely in numpy."""
    heads = config.num_heads
    t = np.concatenate([prompt_tokens, params["mask_token"]], axis=0)
    p = point_grid.reshape(-1, point_grid.shape[-1])

    def ln(name, x):
        return np_layernorm(x, params[f"{name}.weight"], params[f"{name}.bias"])

    for i in range(config.num_blocks):
        pre = f"blocks.{i}"
        n = ln(f"{pre}.norm_self", t)
        t = t + np_attention(params, f"{pre}.self_attn", n, n, heads)
        q = ln(f"{pre}.norm_cross_q", t)
        kv = ln(f"{pre}.norm_point_kv", p)
        t = t + np_attention(params, f"{pre}.cross_prompt_to_point", q, kv, heads)
        n = ln(f"{pre}.norm_mlp", t)
        hidden = np_gelu(n @ params[f"{pre}.mlp.fc1.weight"].T + params[f"{pre}.mlp.fc1.bias"])
        t = t + hidden @ params[f"{pre}.mlp.fc2.weight"].T + params[f"{pre}.mlp.fc2.bias"]
        q = ln(f"{pre}.norm_point_q", p)
        kv = ln(f"{pre}.norm_prompt_kv", t)
        p = p + np_attention(params, f"{pre}.cross_point_to_prompt", q, kv, heads)

    t = ln("norm_prompts_final", t)
    p = ln("norm_points_final", p)
    mask = t[-1]
    h = np_gelu(mask @ params["readout.0.weight"].T + params["readout.0.bias"])
    read = h @ params["readout.2.weight"].T + params["readout.2.bias"]
    return (p @ read).reshape(point_grid.shape[:2])


def params_as_numpy(module):
    return {k: v.detach().cpu().double().numpy() for k, v in module.state_dict().items()}


def test_two_way_block_matches_brute_force():
    # 1 view, 1 prompt, 1 block, hand-set small weights, 2x2 grid.
    config = tiny_config()
    decoder = dec.MaskDecoder(config).double()
    fill_params(decoder, seed=11)
    rng = np.random.default_rng(0)
    grid = torch.from_numpy(rng.normal(0, 0.5, size=(2, 2, 8)))
    prompts = torch.from_numpy(rng.normal(0, 0.5, size=(1, 8)))

    embeddings = dec.EmbeddingSet([grid], prompts, [(2, 2)])
    with torch.no_grad():
        got = decoder.compute_logits(embeddings)[0].numpy()

    expected = np_decoder_logits(
        params_as_numpy(decoder), config, prompts.numpy(), grid.numpy()
    )
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_two_blocks_match_brute_force():
    config = tiny_config(num_blocks=2)
    decoder = dec.MaskDecoder(config).double()
    fill_params(decoder, seed=4)
    rng = np.random.default_rng(2)
    grid = torch.from_numpy(rng.normal(0, 0.5, size=(3, 2, 8)))
    prompts = torch.from_numpy(rng.normal(0, 0.5, size=(2, 8)))
    with torch.no_grad():
        got = decoder.compute_logits(dec.EmbeddingSet([grid], prompts, [(3, 2)]))[0].numpy()
    expected = np_decoder_logits(params_as_numpy(decoder), config, prompts.numpy(), grid.numpy())
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_full_view_concatenates_views():
    # full_view over two views must equal single_view on one pre-concatenated
    # grid, split back afterwards.
    config = tiny_config(attention_scope="full_view")
    decoder = dec.MaskDecoder(config).double()
    fill_params(decoder, seed=7)
    rng = np.random.default_rng(5)
    a = torch.from_numpy(rng.normal(0, 0.5, size=(2, 2, 8)))
    b = torch.from_numpy(rng.normal(0, 0.5, size=(2, 2, 8)))
    prompts = torch.from_numpy(rng.normal(0, 0.5, size=(2, 8)))

    with torch.no_grad():
        got = decoder.compute_logits(dec.EmbeddingSet([a, b], prompts, [(2, 2), (2, 2)]))
        merged = torch.cat([a.reshape(-1, 8), b.reshape(-1, 8)]).reshape(8, 1, 8)
        ref = decoder.compute_logits(
            dec.EmbeddingSet([merged], prompts, [(8, 1)]), scope="single_view"
        )[0].reshape(-1)
    np.testing.assert_allclose(got[0].numpy().ravel(), ref[:4].numpy(), atol=1e-12)
    np.testing.assert_allclose(got[1].numpy().ravel(), ref[4:].numpy(), atol=1e-12)


def test_empty_prompts_rejected():
    decoder = dec.MaskDecoder(tiny_config())
    grid = torch.zeros(2, 2, 8)
    with pytest.raises(ValueError, match="at least one prompt"):
        decoder.compute_logits(dec.EmbeddingSet([grid], torch.zeros(0, 8), [(2, 2)]))


def test_unknown_scope_rejected():
    decoder = dec.MaskDecoder(tiny_config())
    grid = torch.zeros(2, 2, 8)
    with pytest.raises(ValueError, match="attention_scope"):
        decoder.compute_logits(
            dec.EmbeddingSet([grid], torch.zeros(1, 8), [(2, 2)]), scope="both"
        )
    with pytest.raises(ValueError):
        dec.DecoderConfig(attention_scope="global")
    with pytest.raises(ValueError):
        dec.DecoderConfig(embed_dim=10, num_heads=4)


def test_prompt_order_invariance():
    # Attention treats prompt tokens as a set; only the mask token is
    # positional and it stays pinned at the end.
    decoder = dec.MaskDecoder(tiny_config(num_blocks=2)).double()
    fill_params(decoder, seed=3, scale=0.2)
    rng = np.random.default_rng(9)
    grid = torch.from_numpy(rng.normal(0, 1, size=(3, 3, 8)))
    prompts = torch.from_numpy(rng.normal(0, 1, size=(5, 8)))
    perm = torch.from_numpy(np.array([3, 0, 4, 1, 2]))
    with torch.no_grad():
        a = decoder.compute_logits(dec.EmbeddingSet([grid], prompts, [(3, 3)]))[0]
        b = decoder.compute_logits(dec.EmbeddingSet([grid], prompts[perm], [(3, 3)]))[0]
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-6)


def test_single_view_token_count_independent_of_views():
    # The kv sequence feeding point->prompt attention is one view's tokens in
    # single_view scope and all views' tokens concatenated in full_view scope.
    decoder = dec.MaskDecoder(tiny_config(num_blocks=1))
    lengths = []
    decoder.blocks[0].cross_point_to_prompt.register_forward_hook(
        lambda mod, args, out: lengths.append(args[0].shape[0])
    )
    grids = [torch.zeros(2, 3, 8) for _ in range(3)]
    prompts = torch.zeros(2, 8)
    with torch.no_grad():
        decoder.compute_logits(dec.EmbeddingSet(grids, prompts, [(2, 3)] * 3))
    assert lengths == [6, 6, 6]
    lengths.clear()
    with torch.no_grad():
        decoder.compute_logits(
            dec.EmbeddingSet(grids, prompts, [(2, 3)] * 3), scope="full_view"
        )
    assert lengths == [18]


def test_decoder_gradient_matches_finite_differences():
    # d(sum of logits)/d(theta) for every decoder parameter, float64,
    # central differences, rel err <= 1e-4.
    torch.manual_seed(0)
    config = tiny_config()
    decoder = dec.MaskDecoder(config).double()
    fill_params(decoder, seed=13, scale=0.15)
    rng = np.random.default_rng(1)
    grid = torch.from_numpy(rng.normal(0, 0.7, size=(2, 2, 8)))
    prompts = torch.from_numpy(rng.normal(0, 0.7, size=(2, 8)))

    def objective():
        return decoder.compute_logits(dec.EmbeddingSet([grid], prompts, [(2, 2)]))[0].sum()

    loss = objective()
    decoder.zero_grad()
    loss.backward()

    h = 1e-5
    checked = 0
    for name, param in decoder.named_parameters():
        grad = param.grad.reshape(-1)
        flat = param.data.reshape(-1)
        # Every element of small tensors; strided sample of larger ones keeps
        # the runtime sane without losing per-module coverage.
        step = 1 if flat.numel() <= 64 else flat.numel() // 17
        for idx in range(0, flat.numel(), step):
            orig = flat[idx].item()
            flat[idx] = orig + h
            hi = objective().item()
            flat[idx] = orig - h
            lo = objective().item()
            flat[idx] = orig
            fd = (hi - lo) / (2 * h)
            auto = grad[idx].item()
            denom = max(abs(fd), abs(auto), 1e-8)
            # Near-zero gradients sit below finite-difference noise; an
            # absolute escape keeps the relative bound meaningful elsewhere.
            ok = abs(fd - auto) <= 1e-8 or abs(fd - auto) / denom <= 1e-4
            assert ok, f"{name}[{idx}]: fd={fd}, auto={auto}"
            checked += 1
    assert checked > 300


# ---------------------------------------------------------------------------
# Upsampling, thresholding, post-processing


def test_upsample_bilinear_hand_case():
    # f(y, x) = 2y + x is reproduced exactly by bilinear interpolation; with
    # half-pixel alignment the 4 output centers map to coords 0, .25, .75, 1.
    logits = torch.tensor([[0.0, 1.0], [2.0, 3.0]])
    up = dec.upsample_logits(logits, (4, 4)).numpy()
    coords = np.array([0.0, 0.25, 0.75, 1.0])
    expected = 2.0 * coords[:, None] + coords[None, :]
    np.testing.assert_allclose(up, expected, atol=1e-6)


def test_upsample_noop_when_sizes_match():
    logits = torch.rand(3, 3)
    assert dec.upsample_logits(logits, (3, 3)) is logits


def test_postprocess_area_cutoff_64():
    # 64x64 gives a 4.096-pixel cutoff: 4-pixel blobs die, 5-pixel blobs live.
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[2:4, 2:4] = 1          # 4 px
    mask[30, 10:15] = 1         # 5 px
    out = dec.postprocess(mask, 0.001)
    assert out[2:4, 2:4].sum() == 0
    assert out[30, 10:15].sum() == 5


def test_postprocess_eight_connectivity():
    # A diagonal chain is one component under 8-connectivity, so a 5-pixel
    # diagonal survives the 4.096 cutoff.
    mask = np.zeros((64, 64), dtype=np.uint8)
    for i in range(5):
        mask[10 + i, 10 + i] = 1
    out = dec.postprocess(mask, 0.001)
    assert out.sum() == 5


def test_postprocess_empty_and_large():
    empty = np.zeros((32, 32), dtype=np.uint8)
    assert dec.postprocess(empty).sum() == 0
    big = np.zeros((32, 32), dtype=np.uint8)
    big[:16, :] = 1
    assert np.array_equal(dec.postprocess(big), big)


def test_postprocess_keeps_holes():
    mask = np.ones((32, 32), dtype=np.uint8)
    mask[10:20, 10:20] = 0
    out = dec.postprocess(mask)
    assert np.array_equal(out, mask)


def test_decode_end_to_end_shapes():
    torch.manual_seed(1)
    config = tiny_config(num_blocks=1)
    decoder = dec.MaskDecoder(config)
    grid = torch.randn(4, 4, 8)
    prompts = torch.randn(2, 8)
    preds = dec.decode(dec.EmbeddingSet([grid], prompts, [(16, 16)]), config, decoder)
    assert len(preds) == 1
    assert preds[0].logits.shape == (4, 4)
    assert preds[0].binary.shape == (16, 16)
    assert preds[0].binary.dtype == np.uint8
    assert set(np.unique(preds[0].binary)) <= {0, 1}
