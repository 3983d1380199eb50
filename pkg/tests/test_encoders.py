import numpy as np
import pytest

from dictg2p.dictionary import HEADER, UNK_CHAR, parse_dictionary
from dictg2p.encoders import (
    EncoderConfig,
    KeyFile,
    PronunciationTable,
    attention_logits,
    build_key_store,
    char_vocab,
    encode_linguistic,
    encode_semantic,
    init_stack_params,
    key_store_rows,
    phoneme_vocab,
    pronunciation_embedding,
    read_key_file,
    relative_onehot,
    write_key_file,
)
from dictg2p.numerics import ShapeError, Tensor
from dictg2p.numerics.gradcheck import check_gradients
from dictg2p.synthcorpus import emit_oracle_dictionary, generate_spec

CFG = EncoderConfig(d_model=8, semantic_layers=2, linguistic_layers=1, heads=2, rel_clip=8)


def params_for(cfg, seed=0, vocab=12):
    rng = np.random.default_rng(seed)
    p = {"char_emb": rng.normal(size=(vocab, cfg.d_model))}
    p.update(init_stack_params(rng, "sem", cfg.semantic_layers, cfg))
    p.update(init_stack_params(rng, "ling", cfg.linguistic_layers, cfg))
    return p


def test_relative_onehot_clips():
    E = relative_onehot(12, 8)
    assert E.shape == (12, 17, 12)
    assert np.all(E.sum(axis=1) == 1)
    assert E[0, 16, 11] == 1  # offset 11 clipped to +8
    assert E[11, 0, 0] == 1  # offset -11 clipped to -8
    assert E[3, 8, 3] == 1


def test_prepended_padding_keeps_pairwise_logits():
    rng = np.random.default_rng(1)
    p = params_for(CFG)
    x = rng.normal(size=(1, 13, CFG.d_model))
    base, _, _ = attention_logits(Tensor(x), p, "sem.0.attn", CFG)
    for pad in (1, 4, 9):
        shifted = np.concatenate([np.zeros((1, pad, CFG.d_model)), x], axis=1)
        got, _, _ = attention_logits(Tensor(shifted), p, "sem.0.attn", CFG)
        np.testing.assert_allclose(got.data[:, :, pad:, pad:], base.data, rtol=1e-12, atol=1e-12)


def test_encoder_output_ignores_padding():
    rng = np.random.default_rng(2)
    p = params_for(CFG)
    ids = rng.integers(2, 12, size=11)
    z = encode_semantic(ids, p, CFG).z.data
    for pad in (1, 3):
        front = np.concatenate([np.zeros(pad, dtype=int), ids])
        mask = np.concatenate([np.zeros(pad, dtype=bool), np.ones(len(ids), dtype=bool)])
        zf = encode_semantic(front, p, CFG, mask).z.data
        np.testing.assert_allclose(zf[pad:], z, atol=1e-10)
        assert np.all(zf[:pad] == 0)
        back = np.concatenate([ids, np.zeros(pad, dtype=int)])
        zb = encode_semantic(back, p, CFG, mask[::-1]).z.data
        np.testing.assert_allclose(zb[: len(ids)], z, atol=1e-10)


def test_batched_matches_single():
    rng = np.random.default_rng(3)
    p = params_for(CFG)
    a, b = rng.integers(2, 12, size=5), rng.integers(2, 12, size=3)
    ids = np.zeros((2, 5), dtype=int)
    ids[0], ids[1, :3] = a, b
    mask = ids > 0
    z = encode_semantic(ids, p, CFG, mask).z.data
    np.testing.assert_allclose(z[0], encode_semantic(a, p, CFG).z.data, atol=1e-10)
    np.testing.assert_allclose(z[1, :3], encode_semantic(b, p, CFG).z.data, atol=1e-10)


def test_encoder_stack_gradients():
    cfg = EncoderConfig(d_model=4, semantic_layers=1, linguistic_layers=1, heads=2, conv_kernel=3, ffn_mult=2, rel_clip=2)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = params_for(cfg, seed, vocab=6)
        names = ["char_emb", "sem.0.attn.q.w", "sem.0.attn.rel_k", "sem.0.attn.rel_v", "sem.0.ffn.conv.w", "sem.0.ln1.g", "ling.0.attn.k.w", "ling.0.ffn.out.w"]
        ids = rng.integers(1, 6, size=(2, 5))
        mask = np.ones((2, 5), dtype=bool)
        mask[1, 3:] = False
        s = rng.normal(size=(2, 5, 4))
        w = rng.normal(size=(2, 5, 4))

        def fn(*ts):
            q = dict(p)
            q.update(zip(names, ts))
            z = encode_semantic(ids, q, cfg, mask).z
            return (encode_linguistic(z, s, q, cfg, mask) * w).sum()

        worst = max(worst, check_gradients(fn, [Tensor(p[n], requires_grad=True) for n in names], h=1e-5))
    assert worst < 1e-5


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(semantic_layers=0)
    assert EncoderConfig.full_scale().semantic_layers == 4


def test_linguistic_width_mismatch():
    p = params_for(CFG)
    with pytest.raises(ShapeError):
        encode_linguistic(np.zeros((3, 8)), np.zeros((3, 4)), p, CFG)


# -- pronunciations ----------------------------------------------------------

SMALL = parse_dictionary(
    [
        HEADER,
        '{"char": "长", "prons": [{"pron": "ZH ANG3", "gloss": "生长"}, {"pron": "CH ANG2", "gloss": "长短"}]}',
        '{"char": "生", "prons": [{"pron": "SH ENG1", "gloss": "出生"}]}',
    ]
)


def test_pronunciation_embedding_is_phoneme_mean():
    ph = phoneme_vocab(SMALL)
    table = Tensor(np.random.default_rng(0).normal(size=(len(ph), 4)))
    pron = SMALL.lookup("长").prons[0]
    got = pronunciation_embedding(pron, table, ph).data
    np.testing.assert_allclose(got, (table.data[ph.id("ZH")] + table.data[ph.id("ANG3")]) / 2)
    pt = PronunciationTable.build(SMALL, ph)
    np.testing.assert_allclose((pt.averaging @ table.data)[pt.id(pron)], got)


# -- key store ---------------------------------------------------------------


def toy_keys(sigma=0.05, seed=4):
    spec = generate_spec(24, 4, 3, seed=seed, d_model=16)
    d, kf = emit_oracle_dictionary(spec, key_sigma=sigma)
    return spec, d, kf


def test_oracle_keys_equal_class_vectors_without_noise():
    spec, d, kf = toy_keys(sigma=0.0)
    store = build_key_store(d, "imported", kf)
    for ch in d.chars:
        rec = d.lookup(ch)
        for r, (j, k) in zip(range(store.row_slice(ch).start, store.row_slice(ch).stop), store.index_map(ch)):
            tok = rec.glosses[j].tokens[k]
            cls = spec.char_class[spec.char_index[tok]]
            np.testing.assert_array_equal(store.vectors[r], spec.class_vectors[cls].astype(np.float32))


def test_oracle_key_noise_level():
    spec, d, kf = toy_keys(sigma=0.05)
    store = build_key_store(d, "imported", kf)
    resid = []
    for ch in d.chars:
        rec = d.lookup(ch)
        for r, (j, k) in zip(range(store.row_slice(ch).start, store.row_slice(ch).stop), store.index_map(ch)):
            cls = spec.char_class[spec.char_index[rec.glosses[j].tokens[k]]]
            resid.append(store.vectors[r] - spec.class_vectors[cls])
    assert abs(np.std(np.concatenate(resid)) - 0.05) < 0.01


def test_key_file_round_trip(tmp_path):
    _, d, kf = toy_keys()
    store = build_key_store(d, "imported", kf)
    write_key_file(tmp_path / "k.bin", store.d_model, key_store_rows(store))
    back = build_key_store(d, "imported", read_key_file(tmp_path / "k.bin"))
    np.testing.assert_array_equal(back.vectors, store.vectors)
    assert back.index_maps == store.index_maps and back.offsets == store.offsets


def test_unknown_record_has_zero_key_row():
    _, d, kf = toy_keys()
    store = build_key_store(d, "imported", kf)
    assert np.all(store.matrix("不在词典").data == 0)
    assert store.row_slice("不在词典") == store.row_slice(UNK_CHAR)


def test_imported_rows_are_read_only():
    _, d, kf = toy_keys()
    store = build_key_store(d, "imported", kf)
    with pytest.raises(ValueError):
        store.vectors[0, 0] = 1.0


def test_missing_and_misshaped_key_rows():
    _, d, kf = toy_keys()
    partial = KeyFile(kf.d_model, dict(list(kf.rows.items())[1:]))
    with pytest.raises(KeyError):
        build_key_store(d, "imported", partial)
    with pytest.raises(ShapeError):
        build_key_store(d, "imported", kf, d_model=32)
    with pytest.raises(ShapeError):
        write_key_file("/dev/null", 4, [("a", 0, 0, np.zeros(3))])


def test_trainable_store_uses_gloss_token_ids():
    store = build_key_store(SMALL, "trainable", d_model=4)
    vocab = char_vocab(SMALL)
    sl = store.row_slice("长")
    assert [vocab.symbols[i] for i in store.token_ids[sl]] == list("生长长短")
    table = Tensor(np.arange(len(vocab) * 4, dtype=float).reshape(-1, 4))
    np.testing.assert_array_equal(store.matrix("长", table).data, table.data[store.token_ids[sl]])
