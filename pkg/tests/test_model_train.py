import dataclasses
import json
import math
import struct

import numpy as np
import pytest

from mlip import align, checkpoint as ck
from mlip.config import (GuideConfig, ModelConfig, RunConfig, TextConfig, TrainConfig,
                         gradcheck, parse_schedule, tiny)
from mlip.data import END_ID, PAD_ID, generate_pairs, pad_captions, stack
from mlip.model import (ModelInputError, encode_image, encode_text, forward_losses,
                        gradcheck_model, init_model, parameter_count)
from mlip.tensor import Tensor, no_grad
from mlip.train import (AdamState, NonFiniteLossError, OptimizerError, lr_schedule,
                        optimizer_step, parse_metrics_line, train_step)


@pytest.fixture(scope="module")
def tiny_state():
    return init_model(tiny().model, 0)


@pytest.fixture(scope="module")
def batch():
    return stack(generate_pairs(8, 3), 16)


# ------------------------------------------------------------------ encoders
def test_image_shapes_and_norms(tiny_state, batch):
    with no_grad():
        enc = encode_image(batch[0], tiny_state)
    assert enc.freq_tokens.shape == (8, 64, 64)
    assert enc.history.mergeable_counts == [64, 64, 32, 16]
    assert enc.spatial.count == 17
    for y in (enc.y_fre, enc.y_spa):
        assert np.abs(np.linalg.norm(y.data.astype(np.float64), axis=1) - 1).max() <= 1e-5


def test_identical_images_identical_outputs(tiny_state, batch):
    with no_grad():
        a = encode_image(np.repeat(batch[0][:1], 2, axis=0), tiny_state)
    assert a.y_spa.data[0].tobytes() == a.y_spa.data[1].tobytes()
    assert a.spatial.tokens.data[0].tobytes() == a.spatial.tokens.data[1].tobytes()


def test_image_resolution_checked(tiny_state):
    with pytest.raises(ModelInputError):
        encode_image(np.zeros((1, 16, 16, 3)), tiny_state)


def test_text_lengths_and_norm(tiny_state):
    ids = pad_captions([(5, END_ID), (2, 8, 11, 13, END_ID)], 16)
    with no_grad():
        enc = encode_text(ids, tiny_state)
    assert enc.lengths.tolist() == [2, 5]
    assert np.abs(np.linalg.norm(enc.z.data.astype(np.float64), axis=1) - 1).max() <= 1e-5


def test_padding_never_reaches_token_losses(tiny_state):
    ids = pad_captions([(5, END_ID), (2, 8, 11, 13, END_ID)], 16)
    with no_grad():
        enc = encode_text(ids, tiny_state)
        garbage = enc.b.data.copy()
        garbage[0, 2:] = 1e3  # padded slots of sample 0
        a = Tensor(np.random.default_rng(0).standard_normal((2, 4, 64)))
        clean = align.one_to_many_align(a, enc.b, enc.lengths)
        dirty = align.one_to_many_align(a, Tensor(garbage), enc.lengths)
    assert float(clean.data) == float(dirty.data)


def test_causal_text_encoder_ignores_padding_content(tiny_state):
    ids = pad_captions([(5, 9, END_ID)], 16)
    other = ids.copy()
    other[0, 5:] = 7  # not padding anymore, but after the end marker
    with no_grad():
        za = encode_text(ids, tiny_state).z.data
        zb = encode_text(other, tiny_state).z.data
    np.testing.assert_array_equal(za, zb)


def test_token_id_overflow(tiny_state):
    with pytest.raises(ModelInputError):
        encode_text(np.array([[99, END_ID]]), tiny_state)


# ----------------------------------------------------------- parameter count
@pytest.mark.parametrize("cfg", [
    tiny().model,
    gradcheck().model,
    ModelConfig(freq_blocks=0, spatial_schedule=parse_schedule("mhsa, mhsa")),
    ModelConfig(lego_pieces=3, spatial_schedule=parse_schedule("mhsa, acc:0.75, mhsa, acc:0.5"),
                guide=GuideConfig(patch_size=4, width=16, depth=1, heads=1),
                text=TextConfig(context_length=8, width=32, depth=3, heads=2)),
])
def test_parameter_count_closed_form(cfg):
    assert init_model(cfg, 0).num_parameters() == parameter_count(cfg)


def test_gradcheck_preset_is_small():
    assert parameter_count(gradcheck().model) <= 5000


def test_parameter_names_unique_and_hierarchical(tiny_state):
    names = list(tiny_state.params)
    assert len(names) == len(set(names))
    assert all(n == "log_tau" or n.split(".")[0] in ("image", "text") for n in names)


def test_init_is_seeded():
    a, b, c = (init_model(gradcheck().model, s) for s in (1, 1, 2))
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.params)
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a.params)
    assert a.tau == pytest.approx(0.07)


# ---------------------------------------------------------------- schedule
def test_lr_schedule_endpoints():
    assert lr_schedule(0, 3e-4, 100, 240) == 0
    assert lr_schedule(100, 3e-4, 100, 240) == pytest.approx(3e-4)
    assert lr_schedule(240, 3e-4, 100, 240) == pytest.approx(0, abs=1e-18)


def test_lr_schedule_continuous_at_knee():
    left = lr_schedule(100 - 1e-9, 3e-4, 100, 240)
    right = lr_schedule(100 + 1e-9, 3e-4, 100, 240)
    assert left == pytest.approx(3e-4, rel=1e-9) and right == pytest.approx(3e-4, rel=1e-9)


def test_lr_schedule_monotone_pieces():
    lrs = [lr_schedule(s, 1.0, 10, 50) for s in range(51)]
    assert all(b > a for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(b <= a for a, b in zip(lrs[10:], lrs[11:]))


# ---------------------------------------------------------------- optimizer
def _toy_state():
    from mlip.model import ModelState

    params = {"w.weight": Tensor(np.full((3,), 2.0), requires_grad=True, name="w.weight"),
              "n.gain": Tensor(np.ones(3), requires_grad=True, name="n.gain"),
              "log_tau": Tensor(np.array(math.log(0.07)), requires_grad=True, name="log_tau")}
    return ModelState(gradcheck().model, params)


def test_zero_gradient_zero_decay_is_noop():
    state = _toy_state()
    before = {n: p.data.copy() for n, p in state.params.items()}
    opt = AdamState(weight_decay=0.0)
    optimizer_step({n: np.zeros(p.shape) for n, p in state.params.items()}, state, opt, 1e-3)
    for n, p in state.params.items():
        np.testing.assert_array_equal(p.data, before[n])


def test_constant_gradient_step_tends_to_lr():
    state = _toy_state()
    opt = AdamState(weight_decay=0.0)
    lr = 1e-3
    grads = {n: np.full(p.shape, 0.5) for n, p in state.params.items()}
    for _ in range(200):
        before = state["w.weight"].data.astype(np.float64).copy()
        optimizer_step(grads, state, opt, lr)
    step = before - state["w.weight"].data.astype(np.float64)
    assert step == pytest.approx(np.full(3, lr), rel=1e-3)


def test_decay_only_shrinks_weights_not_gains():
    state = _toy_state()
    lr = 0.01
    optimizer_step({n: np.zeros(p.shape) for n, p in state.params.items()}, state, AdamState(), lr)
    np.testing.assert_allclose(state["w.weight"].data, 2.0 * (1 - lr * 0.1), rtol=1e-6)
    np.testing.assert_array_equal(state["n.gain"].data, 1.0)


def test_missing_gradient():
    state = _toy_state()
    with pytest.raises(OptimizerError, match="n.gain"):
        optimizer_step({"w.weight": np.zeros(3), "log_tau": np.zeros(())}, state, AdamState(), 0.1)


def test_tau_clamped():
    state = _toy_state()
    grads = {n: np.zeros(p.shape) for n, p in state.params.items()}
    grads["log_tau"] = np.array(1.0)
    for _ in range(50):
        optimizer_step(grads, state, AdamState(weight_decay=0), 1.0)
    assert state.tau == pytest.approx(0.01, rel=1e-5)


# -------------------------------------------------------------- train step
def test_spatial_only_mix_is_plain_info_nce(batch):
    cfg = gradcheck().model
    cfg = dataclasses.replace(cfg, image_size=32, patch_size=4)
    state = init_model(cfg, 0)
    images, ids = stack(generate_pairs(4, 1), cfg.text.context_length)
    fwd = forward_losses(images, ids, state, (0, 1, 0, 0))
    assert fwd.losses["ins_fre"] == 0.0 and fwd.losses["tok_spa"] == 0.0
    alone = align.info_nce(fwd.image.y_spa, fwd.text.z, math.exp(float(state["log_tau"].data)))
    assert float(fwd.total.data) == pytest.approx(float(alone.data), abs=1e-6)


def test_plain_clip_degenerate_model():
    cfg = ModelConfig(image_size=16, patch_size=4, width=16, heads=2, freq_blocks=0,
                      spatial_schedule=parse_schedule("mhsa, mhsa"), proj_dim=8,
                      text=TextConfig(context_length=8, width=16, depth=1, heads=2))
    state = init_model(cfg, 0)
    assert not any(n.startswith(("image.guide", "image.fourier")) for n in state.params)
    images, ids = stack(generate_pairs(4, 1, size=16), 8)
    m = train_step((images, ids), state, AdamState(), 0, 1e-3, (0, 1, 0, 0))
    assert m.losses["ins_spa"] > 0
    assert [m.losses[k] for k in ("ins_fre", "tok_fre", "tok_spa")] == [0.0, 0.0, 0.0]


def test_two_runs_bit_identical():
    cfg = gradcheck().model
    cfg = dataclasses.replace(cfg, image_size=32, patch_size=4)
    images, ids = stack(generate_pairs(4, 2), cfg.text.context_length)
    results = []
    for _ in range(2):
        state = init_model(cfg, 5)
        opt = AdamState()
        lines = [train_step((images, ids), state, opt, s, 1e-3, cfg.mix).line() for s in range(2)]
        results.append((lines, b"".join(p.data.tobytes() for p in state.params.values())))
    assert results[0] == results[1]


def test_non_finite_loss_names_component():
    cfg = dataclasses.replace(gradcheck().model, image_size=32, patch_size=4)
    state = init_model(cfg, 0)
    state["image.proj_fre.weight"].data[0, 0] = np.nan
    images, ids = stack(generate_pairs(4, 2), cfg.text.context_length)
    with pytest.raises(NonFiniteLossError) as info:
        train_step((images, ids), state, AdamState(), 0, 1e-3, cfg.mix)
    assert info.value.component == "ins_fre"


def test_batch_of_one_rejected():
    cfg = dataclasses.replace(gradcheck().model, image_size=32, patch_size=4)
    images, ids = stack(generate_pairs(1, 2), cfg.text.context_length)
    with pytest.raises(ValueError):
        train_step((images, ids), init_model(cfg, 0), AdamState(), 0, 1e-3, cfg.mix)


def test_metrics_line_format():
    from mlip.train import StepMetrics

    line = StepMetrics(3, 1.5, dict(ins_fre=1.0, ins_spa=2.0, tok_fre=-0.5, tok_spa=0.0), 1e-4, [32, 16]).line()
    assert line.startswith("step=3 loss_total=1.5 loss_ins_fre=1 loss_ins_spa=2 ")
    assert line.endswith(" tokens=32,16")
    parsed = parse_metrics_line(line)
    assert parsed["tokens"] == [32, 16] and parsed["lr"] == 1e-4


def test_first_hundred_desk_steps_finite(tiny_run):
    result = tiny_run[1]
    assert len(result.metrics) >= 100
    for m in result.metrics[:100]:
        assert math.isfinite(m.total) and all(math.isfinite(v) for v in m.losses.values())


# ---------------------------------------------------------------- gradcheck
def test_full_model_gradcheck_width_16():
    cfg = gradcheck()
    cfg.model.width = 16
    cfg.model.proj_dim = 16
    cfg.model.text.width = 16
    cfg.model.guide.width = 8
    cfg.model.guide.heads = 2
    report = gradcheck_model(cfg, seed=11, max_entries=6)
    assert report.max_rel_error <= 1e-3, report.summary()


def test_gradcheck_refuses_wide_models():
    with pytest.raises(ModelInputError):
        gradcheck_model(tiny(), seed=0)


# --------------------------------------------------------------- checkpoints
def test_save_load_save_identical(tmp_path):
    state = init_model(gradcheck().model, 3)
    ck.save_checkpoint(state, tmp_path / "a.ckpt")
    loaded = ck.load_checkpoint(tmp_path / "a.ckpt")
    ck.save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.config == state.config
    for n, p in state.params.items():
        assert loaded[n].data.tobytes() == p.data.tobytes() and loaded[n].shape == p.shape


def test_truncated_checkpoint(tmp_path):
    ck.save_checkpoint(init_model(gradcheck().model, 0), tmp_path / "a.ckpt")
    blob = (tmp_path / "a.ckpt").read_bytes()
    for cut in (3, 10, 40, len(blob) - 20):
        (tmp_path / "t.ckpt").write_bytes(blob[:cut])
        expected = ck.MagicMismatchError if cut < len(ck.MAGIC) else ck.TruncatedCheckpointError
        with pytest.raises(expected):
            ck.load_checkpoint(tmp_path / "t.ckpt")


def test_magic_mismatch(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTMLIP" + bytes(64))
    with pytest.raises(ck.MagicMismatchError):
        ck.load_checkpoint(tmp_path / "x.ckpt")


def test_checksum_mismatch(tmp_path):
    ck.save_checkpoint(init_model(gradcheck().model, 0), tmp_path / "a.ckpt")
    blob = bytearray((tmp_path / "a.ckpt").read_bytes())
    blob[-12] ^= 0xFF
    (tmp_path / "a.ckpt").write_bytes(bytes(blob))
    with pytest.raises(ck.ChecksumError):
        ck.load_checkpoint(tmp_path / "a.ckpt")


def test_name_collision(tmp_path):
    entries = [{"name": "w", "shape": [1], "offset": 0}, {"name": "w", "shape": [1], "offset": 4}]
    manifest = json.dumps({"config": {}, "params": entries}).encode()
    payload = np.zeros(2, "<f4").tobytes()
    blob = ck.MAGIC + struct.pack("<Q", len(manifest)) + manifest + payload \
        + struct.pack("<Q", ck._checksum(payload))
    with pytest.raises(ck.NameCollisionError):
        ck.decode(blob)


def test_shape_mismatch_names_first_parameter(tmp_path):
    ck.save_checkpoint(init_model(gradcheck().model, 0), tmp_path / "a.ckpt")
    other = gradcheck().model
    other.width = 16
    with pytest.raises(ck.ShapeMismatchError, match="image.patch.weight"):
        ck.load_checkpoint(tmp_path / "a.ckpt", expected=other)


def test_distinct_error_types():
    kinds = {ck.MagicMismatchError, ck.TruncatedCheckpointError, ck.NameCollisionError,
             ck.ChecksumError, ck.ShapeMismatchError}
    assert len(kinds) == 5 and all(issubclass(k, ck.CheckpointError) for k in kinds)
