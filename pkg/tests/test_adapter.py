import numpy as np
import pytest

from helpers import central_diff, rel_err
from ualign import checkpoint
from ualign.adapter import (
    AdapterConfig,
    TapeError,
    adapter_backward,
    adapter_forward,
    adapter_init,
    checkpoint_load,
    checkpoint_save,
    ctc_logits,
    ctc_logits_backward,
)
from ualign.losses import CtcSetup, ctc_backward, ctc_forward, dtw_backward, dtw_forward
from ualign.numerics import cosine_distance_matrix, make_rng

TINY = AdapterConfig(in_dim=6, hidden_dim=7, out_dim=8, mlp_hidden=9, conv_layers=2)


def test_init_deterministic_and_bounded():
    a, b = adapter_init(TINY, 4), adapter_init(TINY, 4)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
    assert np.array_equal(a.tensors["ln_gain"], np.ones(6))
    bound = np.sqrt(6 / (6 * 3 + 7 * 3))
    assert np.max(np.abs(a.tensors["conv0_w"])) <= bound
    assert np.max(np.abs(a.tensors["mlp1_w"])) <= np.sqrt(6 / (7 + 9))
    assert not np.array_equal(adapter_init(TINY, 5).tensors["mlp1_w"], a.tensors["mlp1_w"])


def test_output_length_arithmetic():
    cfg = AdapterConfig(conv_layers=2, conv_kernel=3, conv_stride=2)
    # (9-3)//2+1 = 4, then (4-3)//2+1 = 1
    assert cfg.output_length(9) == 1
    # (13-3)//2+1 = 6, then (6-3)//2+1 = 2
    assert cfg.output_length(13) == 2
    # (6-3)//2+1 = 2 leaves too few frames for the second layer
    assert cfg.output_length(7) == 1 and cfg.output_length(6) == 0
    assert cfg.min_input_length() == 7
    p = adapter_init(AdapterConfig(in_dim=4, conv_layers=2), 0)
    with pytest.raises(ValueError, match="T=7"):
        adapter_forward(p, np.ones((5, 4)))


def test_constant_frames_layernorm_zero():
    p = adapter_init(TINY, 0)
    x = np.full((12, 6), 3.0)
    H, tape = adapter_forward(p, x)
    assert not np.any(tape.xhat)


def test_layernorm_rows_standardised():
    p = adapter_init(TINY, 0)
    x = make_rng(0, "ln").standard_normal((12, 6)) * 4 + 1
    _, tape = adapter_forward(p, x)
    assert np.max(np.abs(tape.xhat.mean(axis=1))) < 1e-9
    assert np.max(np.abs(tape.xhat.var(axis=1) - 1)) < 1e-9


def test_no_cross_sample_coupling():
    p = adapter_init(TINY, 0)
    x = make_rng(1, "dup").standard_normal((12, 6))
    a, _ = adapter_forward(p, x)
    b, _ = adapter_forward(p, x.copy())
    assert np.array_equal(a, b)


def test_zero_upstream_gradient():
    p = adapter_init(TINY, 0)
    x = make_rng(2, "z").standard_normal((12, 6))
    H, tape = adapter_forward(p, x)
    adapter_backward(p, tape, np.zeros_like(H))
    assert all(not np.any(g) for g in p.grads.values())


def test_tape_reuse_is_an_error():
    p = adapter_init(TINY, 0)
    H, tape = adapter_forward(p, make_rng(2, "z").standard_normal((12, 6)))
    adapter_backward(p, tape, np.ones_like(H))
    with pytest.raises(TapeError):
        adapter_backward(p, tape, np.ones_like(H))


def test_gradients_accumulate():
    p = adapter_init(TINY, 0)
    x = make_rng(3, "acc").standard_normal((12, 6))
    H, tape = adapter_forward(p, x)
    adapter_backward(p, tape, np.ones_like(H))
    once = {k: g.copy() for k, g in p.grads.items()}
    H, tape = adapter_forward(p, x)
    adapter_backward(p, tape, np.ones_like(H))
    for k in once:
        assert np.array_equal(p.grads[k], 2 * once[k])


def test_dtw_through_adapter_finite_differences():
    p = adapter_init(TINY, 3)
    rng = make_rng(0, "chain")
    x = rng.standard_normal((12, 6))
    E = rng.standard_normal((3, 8))

    def loss():
        H, _ = adapter_forward(p, x)
        return dtw_forward(cosine_distance_matrix(H, E)).loss

    H, tape = adapter_forward(p, x)
    r = dtw_forward(cosine_distance_matrix(H, E))
    gx = adapter_backward(p, tape, dtw_backward(r, H, E))
    for name, t in p.tensors.items():
        if name in ("blank_vector", "logit_scale"):
            continue
        assert rel_err(p.grads[name], central_diff(loss, t)) < 1e-4, name
    assert rel_err(gx, central_diff(loss, x)) < 1e-4


def test_ctc_logits_examples():
    p = adapter_init(AdapterConfig(out_dim=4), 0)
    table = np.eye(4)
    H = np.array([[0.0, 0.0, 1.0, 0.0]])
    lg = ctc_logits(p, H, table)
    assert lg.shape == (1, 5)
    assert lg[0, 2] == pytest.approx(10.0)
    assert np.argmax(lg[0, :4]) == 2 and np.all(np.delete(lg[0, :4], 2) < 10)
    p.tensors["logit_scale"] = np.array(0.0)
    assert not np.any(ctc_logits(p, H, table))
    with pytest.raises(ValueError):
        ctc_logits(p, H, np.eye(5))


def test_ctc_head_finite_differences():
    cfg = AdapterConfig(in_dim=6, hidden_dim=7, out_dim=8, mlp_hidden=9)
    p = adapter_init(cfg, 1)
    rng = make_rng(2, "ctchead")
    H = rng.standard_normal((5, 8))
    table = rng.standard_normal((4, 8))
    labels = [1, 3]

    def loss():
        return ctc_forward(CtcSetup.from_logits(ctc_logits(p, H, table), 4), labels)[0]

    setup = CtcSetup.from_logits(ctc_logits(p, H, table), 4)
    gH = ctc_logits_backward(p, H, table, ctc_backward(setup, labels))
    assert rel_err(gH, central_diff(loss, H)) < 1e-5
    assert rel_err(p.grads["logit_scale"], central_diff(loss, p.tensors["logit_scale"])) < 1e-5
    assert rel_err(p.grads["blank_vector"], central_diff(loss, p.tensors["blank_vector"])) < 1e-5


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    p = adapter_init(TINY, 7)
    a, b = tmp_path / "a.ualn", tmp_path / "b.ualn"
    checkpoint_save(p, a)
    q = checkpoint_load(a)
    checkpoint_save(q, b)
    assert a.read_bytes() == b.read_bytes()
    for k in p.tensors:
        assert np.array_equal(p.tensors[k], q.tensors[k])
    assert q.config == TINY


def test_checkpoint_edited_dimension_rejected(tmp_path):
    p = adapter_init(TINY, 7)
    path = tmp_path / "a.ualn"
    checkpoint_save(p, path)
    blob = path.read_bytes()
    edited = blob.replace(b'"in_dim":6', b'"in_dim":5')
    assert edited != blob
    path.write_bytes(edited)
    with pytest.raises(checkpoint.CheckpointError, match="expected shape"):
        checkpoint_load(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint_load(path)
