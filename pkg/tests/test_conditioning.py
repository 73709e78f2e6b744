import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dualflow.conditioning import (ConditionEncoder, ConditionInputs, cfg_mask, collate_inputs, condition_item,
                                   draw_drop_events, draw_drop_flags, encode_retrieved_sets, exemplar_rows,
                                   sinusoidal_encoding)
from dualflow.retrieval import CHANNELS, Encoders, RetrievalEntry, build_database


def make_encoder(positional=True, dtype=torch.float64):
    torch.manual_seed(0)
    enc = ConditionEncoder(latent_dim=16, text_dim=16, music_dim=32, frame_dim=262, vocab_size=97, n_heads=2,
                           dropout=0.0, music_positional=positional).to(dtype)
    return enc.eval()


def entries(clips, channel, picks):
    return [RetrievalEntry(clips[i].clip_id, 1.0, clips[i].n_frames, channel) for i in picks]


def sample_inputs(enc, rng, b=3, t=10, r=5):
    ids = torch.as_tensor(rng.integers(1, 97, size=(b, 4)))
    ids[0, 2:] = 0
    return ConditionInputs(ids, torch.as_tensor(rng.normal(size=(b, t, 32))),
                           torch.as_tensor(rng.normal(size=(b, r, 524))),
                           torch.arange(r).repeat(b, 1), torch.zeros(b, r, dtype=torch.long),
                           torch.ones(b, r, dtype=torch.bool))


# text -------------------------------------------------------------------------

def test_text_deterministic():
    enc = make_encoder()
    a = enc.encode_text(["closed hold, fast spin"], 0.3)
    b = enc.encode_text(["closed hold, fast spin"], 0.3)
    assert torch.equal(a, b)
    assert a.shape == (1, 16) and torch.isfinite(a).all()


def test_text_timestep_injected():
    enc = make_encoder()
    assert not torch.allclose(enc.encode_text("slow waltz", 0.0), enc.encode_text("slow waltz", 1.0))


def test_empty_text_is_null_plus_time():
    enc = make_encoder()
    t = torch.tensor([0.4], dtype=torch.float64)
    expected = enc.text.null + enc.time(t)[0]
    torch.testing.assert_close(enc.encode_text([""], t)[0], expected, rtol=0, atol=0)


def test_timestep_range_checked():
    enc = make_encoder()
    with pytest.raises(ValueError):
        enc.encode_text("x", 1.5)


def test_text_gradients_reach_parameters():
    enc = make_encoder()
    enc.encode_text(["fast spin", "open position"], 0.5).sum().backward()
    assert enc.text.embed.weight.grad is not None and enc.text.embed.weight.grad.abs().sum() > 0
    assert enc.text.proj.weight.grad.abs().sum() > 0


# music ------------------------------------------------------------------------

def test_music_shape_and_zero_determinism():
    enc = make_encoder()
    z = enc.encode_music(np.zeros((64, 32)))
    assert z.shape == (64, 16)
    assert torch.equal(z, enc.encode_music(np.zeros((64, 32))))


def test_music_dim_checked():
    with pytest.raises(ValueError):
        make_encoder().encode_music(np.zeros((8, 31)))


def test_music_permutation_equivariant_without_pe(rng):
    enc = make_encoder(positional=False)
    x = rng.normal(size=(12, 32))
    perm = rng.permutation(12)
    torch.testing.assert_close(enc.encode_music(x)[perm], enc.encode_music(x[perm]), rtol=1e-10, atol=1e-10)


def test_music_positional_breaks_equivariance(rng):
    enc = make_encoder(positional=True)
    x = rng.normal(size=(12, 32))
    perm = np.roll(np.arange(12), 1)
    assert not torch.allclose(enc.encode_music(x)[perm], enc.encode_music(x[perm]))


def test_sinusoid_shape_and_origin():
    enc = sinusoidal_encoding(torch.arange(5), 7)
    assert enc.shape == (5, 7)
    torch.testing.assert_close(enc[0, :3], torch.zeros(3, dtype=torch.float64))
    torch.testing.assert_close(enc[0, 3:6], torch.ones(3, dtype=torch.float64))


# retrieval latent ----------------------------------------------------------------

def test_empty_sets_sentinel(dataset):
    z = encode_retrieved_sets(make_encoder(), {}, dataset)
    assert z.shape == (0, 16)


def test_retrieved_row_count(dataset, clips):
    sets = {c: entries(clips, c, [0, 1]) for c in CHANNELS}
    z = encode_retrieved_sets(make_encoder(), sets, dataset)
    assert z.shape == (4 * 2 * 64, 16)


def test_channel_order_fixed(dataset, clips):
    forward = {c: entries(clips, c, [i]) for i, c in enumerate(CHANNELS)}
    reversed_insert = dict(reversed(list(forward.items())))
    _, _, chan = exemplar_rows(reversed_insert, dataset)
    np.testing.assert_array_equal(chan, np.repeat(np.arange(4), 64))
    enc = make_encoder()
    assert torch.equal(encode_retrieved_sets(enc, forward, dataset), encode_retrieved_sets(enc, reversed_insert, dataset))


def test_reorder_within_channel_swaps_blocks(dataset, clips):
    enc = make_encoder()
    a = encode_retrieved_sets(enc, {"S": entries(clips, "S", [0, 1]), "M": entries(clips, "M", [2])}, dataset)
    b = encode_retrieved_sets(enc, {"S": entries(clips, "S", [1, 0]), "M": entries(clips, "M", [2])}, dataset)
    assert torch.equal(a[:64], b[64:128])
    assert torch.equal(a[64:128], b[:64])
    assert torch.equal(a[128:], b[128:])


def test_missing_exemplar_named(dataset):
    bogus = [RetrievalEntry("clip_999999", 1.0, 64, "S")]
    with pytest.raises(KeyError, match="clip_999999"):
        exemplar_rows({"S": bogus}, dataset)


def test_condition_item_leave_one_out(dataset, clips):
    db = build_database(dataset, Encoders.default())
    c = clips[0]
    ids, music, (frames, pos, chan) = condition_item(c.text, c.decomposition, c.music_features, db, dataset,
                                                     Encoders.default(), None, 97, k=2, exclude_clip_id=c.clip_id)
    assert len(frames) == 4 * 2 * 64
    assert not any(np.array_equal(frames[i * 64:(i + 1) * 64], c.motion.concatenated()) for i in range(8))
    assert music.shape == c.music_features.shape and all(i >= 1 for i in ids)


# guidance masking -------------------------------------------------------------

def test_cfg_saturation(rng):
    enc = make_encoder()
    bundle = enc.bundle(sample_inputs(enc, rng))
    out = cfg_mask(bundle, enc, np.random.default_rng(0), p_both=1.0)
    assert out.drop_text.all() and out.drop_music.all()
    assert torch.equal(out.z_text, enc.text.null.expand_as(out.z_text))
    assert torch.equal(out.z_m, enc.music.null.expand_as(out.z_m))
    assert torch.equal(out.z_r, bundle.z_r)


def test_cfg_identity(rng):
    enc = make_encoder()
    bundle = enc.bundle(sample_inputs(enc, rng))
    out = cfg_mask(bundle, enc, np.random.default_rng(0), 0.0, 0.0, 0.0)
    assert torch.equal(out.z_text, bundle.z_text) and torch.equal(out.z_m, bundle.z_m)
    assert not out.drop_text.any() and not out.drop_music.any()


def test_dropped_path_ignores_input():
    enc = make_encoder()
    b1 = enc.bundle(sample_inputs(enc, np.random.default_rng(1)))
    b2 = enc.bundle(sample_inputs(enc, np.random.default_rng(2)))
    d1, d2 = enc.apply_drops(b1, True, True), enc.apply_drops(b2, True, True)
    assert torch.equal(d1.z_text, d2.z_text) and torch.equal(d1.z_m, d2.z_m)


def test_drop_rates_monte_carlo():
    both, text, music = draw_drop_events(np.random.default_rng(2024), 100_000)
    assert abs(both.mean() - 0.10) < 0.01
    assert abs(text[~both].mean() - 0.20) < 0.01
    assert abs(music[~both].mean() - 0.20) < 0.01
    # the combined flags follow from the two-stage rule
    dt, dm = draw_drop_flags(np.random.default_rng(2024), 100_000)
    assert abs(dt.mean() - (0.1 + 0.9 * 0.2)) < 0.01
    assert abs(dm.mean() - (0.1 + 0.9 * 0.2)) < 0.01


@given(st.integers(0, 2**32 - 1))
def test_drop_flags_deterministic(seed):
    a = draw_drop_flags(np.random.default_rng(seed), 16)
    b = draw_drop_flags(np.random.default_rng(seed), 16)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("bad", [dict(p_both=-0.1), dict(p_text=1.2), dict(p_music=float("nan"))])
def test_drop_probabilities_validated(bad):
    with pytest.raises(ValueError):
        draw_drop_flags(np.random.default_rng(0), 4, **bad)


def test_collate_pads(clips, dataset):
    rows = [exemplar_rows({}, dataset), exemplar_rows({"B": entries(clips, "B", [1])}, dataset)]
    batch = collate_inputs([[3, 4], []], [clips[0].music_features, clips[1].music_features], rows)
    assert batch.token_ids.tolist() == [[3, 4], [0, 0]]
    assert batch.exemplars.shape == (2, 64, 524)
    assert not batch.exemplar_valid[0].any() and batch.exemplar_valid[1].all()
    assert (batch.exemplar_channel[1] == 1).all()
