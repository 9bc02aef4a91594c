import hashlib
import struct

import numpy as np
import pytest

from jointpercept.adapt import AdaptConfig, prompt_tune
from jointpercept.checkpoint import (MAGIC, CompatibilityError, IntegrityError, content_hash, decode_checkpoint,
                                     load_model, read_checkpoint, save_checkpoint, save_delta)
from jointpercept.evaluate import evaluate
from jointpercept.pretrain import OptimizerState, adamw_step
from jointpercept.tasks import generate_synthetic


def test_round_trip_is_bit_exact(tmp_path, fresh_model):
    h = save_checkpoint(tmp_path / "m.ckpt", fresh_model, step=7, meta={"note": "x"})
    loaded, ck = load_model(tmp_path / "m.ckpt")
    assert ck.hash == h == content_hash(tmp_path / "m.ckpt")
    assert ck.step == 7 and ck.meta == {"note": "x"} and ck.kind == "full"
    assert list(loaded.params) == list(fresh_model.params)
    for n, t in fresh_model.params.items():
        assert loaded.params[n].data.dtype == np.float32
        assert loaded.params[n].data.tobytes() == t.data.tobytes()
    assert loaded.config.to_dict() == fresh_model.config.to_dict()
    assert loaded.vocab.dumps() == fresh_model.vocab.dumps()


def test_saving_twice_gives_the_same_bytes(tmp_path, fresh_model):
    save_checkpoint(tmp_path / "a.ckpt", fresh_model)
    save_checkpoint(tmp_path / "b.ckpt", fresh_model)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_file_layout(tmp_path, fresh_model):
    save_checkpoint(tmp_path / "m.ckpt", fresh_model)
    data = (tmp_path / "m.ckpt").read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", data)
    assert magic == MAGIC and version == 1
    assert hashlib.sha256(data[:-32]).hexdigest() == content_hash(tmp_path / "m.ckpt")
    blob = len(data) - 32 - 20 - hlen
    assert blob == 4 * fresh_model.n_params()


def test_optimizer_state_round_trip(tmp_path, fresh_model):
    st = OptimizerState()
    grads = {n: np.full_like(t.data, 0.01) for n, t in fresh_model.params.items()}
    adamw_step(fresh_model.params, grads, st, lr=1e-3, wd=0.0)
    save_checkpoint(tmp_path / "m.ckpt", fresh_model, st, step=1)
    back = read_checkpoint(tmp_path / "m.ckpt").optimizer_state()
    assert back.step == 1 and set(back.m) == set(st.m)
    for n in st.m:
        np.testing.assert_array_equal(back.m[n], st.m[n].astype(np.float32))
        np.testing.assert_array_equal(back.v[n], st.v[n].astype(np.float32))
    save_checkpoint(tmp_path / "n.ckpt", fresh_model)
    assert read_checkpoint(tmp_path / "n.ckpt").optimizer_state() is None


@pytest.mark.parametrize("where", ["header", "blob", "digest"])
def test_tampered_byte_is_detected(tmp_path, fresh_model, where):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, fresh_model)
    data = bytearray(p.read_bytes())
    pos = {"header": 30, "blob": len(data) - 100, "digest": len(data) - 1}[where]
    data[pos] ^= 0x01
    p.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        read_checkpoint(p)


def test_truncated_and_missing_files(tmp_path, fresh_model):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, fresh_model)
    with pytest.raises(IntegrityError):
        decode_checkpoint(p.read_bytes()[:-10])
    with pytest.raises(IntegrityError):
        decode_checkpoint(b"short")
    with pytest.raises(IntegrityError):
        read_checkpoint(tmp_path / "absent.ckpt")


def test_unknown_format_version(tmp_path, fresh_model):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, fresh_model)
    body = bytearray(p.read_bytes()[:-32])
    struct.pack_into("<I", body, 8, 99)
    with pytest.raises(CompatibilityError):
        decode_checkpoint(bytes(body) + hashlib.sha256(body).digest())


def test_evaluation_is_invariant_under_save_and_load(tmp_path, fresh_model, ctx):
    ds = generate_synthetic("image-text-pairs", 4, 64)
    save_checkpoint(tmp_path / "m.ckpt", fresh_model)
    loaded, _ = load_model(tmp_path / "m.ckpt")
    for kind in ("image_text_retrieval", "captioning"):
        a = evaluate(fresh_model, kind, ds, ctx, n_batches=3)
        b = evaluate(loaded, kind, ds, ctx, n_batches=3)
        assert a == b


@pytest.fixture
def tuned(tmp_path, fresh_model, ctx):
    base_hash = save_checkpoint(tmp_path / "base.ckpt", fresh_model)
    ds = generate_synthetic("image-class", 2, 32)
    model, _ = prompt_tune(fresh_model, "image_classification", ds, ctx, AdaptConfig(steps=2, lr=1e-2))
    h = save_delta(tmp_path / "delta.ckpt", model, model.trainable(), base_hash, {"base_path": "base.ckpt"})
    return model, base_hash, h


def test_delta_applies_to_its_base(tmp_path, tuned):
    model, base_hash, h = tuned
    ck = read_checkpoint(tmp_path / "delta.ckpt")
    assert ck.kind == "delta" and ck.base_hash == base_hash and ck.hash == h
    assert set(ck.params) == set(model.trainable())
    loaded, _ = load_model(tmp_path / "delta.ckpt")
    assert set(loaded.params) == set(model.params)
    for n, t in model.params.items():
        assert loaded.params[n].data.tobytes() == t.data.tobytes()


def test_delta_against_the_wrong_base(tmp_path, tuned, vocab, toy_config):
    from jointpercept.model import Model
    save_checkpoint(tmp_path / "other.ckpt", Model(toy_config, vocab, seed=1))
    with pytest.raises(CompatibilityError):
        load_model(tmp_path / "delta.ckpt", tmp_path / "other.ckpt")
    (tmp_path / "base.ckpt").unlink()
    with pytest.raises(IntegrityError):
        load_model(tmp_path / "delta.ckpt")
