import math
from types import SimpleNamespace

import numpy as np
import pytest

from dilseg.autodiff.tensor import Tensor
from dilseg.io import FormatError
from dilseg.model import forward, init_model
from dilseg.netspec import preset
from dilseg.synthdata import SceneConfig, generate_scene, sample_patches
from dilseg.training import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    batch_indices,
    checkpoint_bytes,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    train,
    write_loss_log,
)

from oracles import adam_scalar


def scalar_model(x0):
    return SimpleNamespace(params={"x": Tensor(np.array([x0], dtype=np.float64))})


@pytest.fixture(scope="module")
def patches():
    scenes = [generate_scene(SceneConfig(extent=128, count=(20, 35), seed=i)) for i in range(2)]
    return sample_patches(scenes, 32, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


def test_adam_zero_gradient_leaves_parameters():
    model = scalar_model(1.5)
    state = OptimizerState.for_model(model)
    for _ in range(3):
        adam_step(model, {"x": np.zeros(1)}, state, TrainConfig())
    assert model.params["x"].data[0] == 1.5
    assert state.step == 3


def test_adam_zero_gradient_decays_moments():
    # with momentum already built up the parameter keeps moving; moments shrink
    model = scalar_model(1.5)
    state = OptimizerState.for_model(model)
    state.m["x"][:] = 0.4
    state.v["x"][:] = 0.2
    adam_step(model, {"x": np.zeros(1)}, state, TrainConfig())
    assert state.m["x"][0] == pytest.approx(0.36) and state.v["x"][0] == pytest.approx(0.1998)


def test_adam_quadratic_matches_scalar_oracle():
    model = scalar_model(0.0)
    state = OptimizerState()
    cfg = TrainConfig(lr=0.1)
    for _ in range(500):
        x = model.params["x"].data[0]
        adam_step(model, {"x": np.array([2 * (x - 3)])}, state, cfg)
    x = model.params["x"].data[0]
    assert abs(x - 3) < 1e-3
    assert x == pytest.approx(adam_scalar(lambda v: 2 * (v - 3), 0.0, 0.1, 500), abs=1e-12)
    assert state.step == 500


def test_adam_errors():
    model = scalar_model(0.0)
    with pytest.raises(KeyError):
        adam_step(model, {}, OptimizerState(), TrainConfig())
    with pytest.raises(ValueError, match="shape"):
        adam_step(model, {"x": np.zeros(2)}, OptimizerState(), TrainConfig())


def test_nonzero_gradient_changes_parameters(patches):
    model = init_model(preset("front-s-d", "micro"))
    before = {k: t.data.copy() for k, t in model.params.items()}
    _, grads = loss_and_grads(model, *patches.batch(range(4)), 16)
    adam_step(model, grads, OptimizerState.for_model(model), TrainConfig())
    assert any(not np.array_equal(before[k], t.data) for k, t in model.params.items())


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(10, 4, s, seed=1) for s in range(5)])
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:20]) == list(range(10))
    assert np.array_equal(batch_indices(10, 4, 3, 1), batch_indices(10, 4, 3, 1))


def test_step_zero_loss_near_ln2_on_random_labels():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(8, 3, 76, 76)).astype(np.float32)
    lab = rng.random((8, 16, 16)) < 0.5
    y = np.stack([~lab, lab], axis=1).astype(np.float32)
    for name in ("front-s", "front-s-d", "front-s-d-lfe"):
        loss, _ = loss_and_grads(init_model(preset(name, "micro")), x, y, 16)
        assert abs(loss - math.log(2)) < 0.1, name


def test_masked_loss_ignores_labels_outside_centre(patches):
    model = init_model(preset("front-s-d", "micro"))
    x, y = patches.batch([0, 1, 2])
    base, _ = loss_and_grads(model, x, y, 16)
    # change the scene's labels everywhere except the supervised centre windows
    scenes = [type(s)(s.image, s.instance_map.copy(), s.resolution_scale, s.scene_id) for s in patches.scenes]
    keep = [np.zeros_like(s.instance_map, bool) for s in scenes]
    for i in range(3):
        p = patches.provenance(i)
        oy, ox = p["offset"]
        keep[p["scene"]][oy + 30: oy + 46, ox + 30: ox + 46] = True
    for s, k in zip(scenes, keep):
        s.instance_map[~k] = 1 - np.sign(s.instance_map[~k])
    altered = type(patches)(scenes, patches.draw)
    x2, y2 = altered.batch([0, 1, 2])
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)
    assert loss_and_grads(model, x2, y2, 16)[0] == base


def test_train_history_and_determinism(patches):
    cfg = TrainConfig(steps=3, batch=4, seed=2)
    m1, l1, s1 = train(init_model(preset("front-s-d", "micro")), patches, cfg)
    m2, l2, s2 = train(init_model(preset("front-s-d", "micro")), patches, cfg)
    assert len(l1) == 3 and s1.step == 3
    assert l1 == l2
    assert checkpoint_bytes(m1, s1) == checkpoint_bytes(m2, s2)


def test_resume_equals_uninterrupted(patches, tmp_path):
    full_cfg = TrainConfig(steps=4, batch=4, seed=3)
    _, full_losses, full_state = train(init_model(preset("front-s-d", "micro")), patches, full_cfg)
    model, first, state = train(init_model(preset("front-s-d", "micro")), patches, TrainConfig(steps=2, batch=4, seed=3))
    save_checkpoint(model, state, tmp_path / "half.ckpt")
    model, state = load_checkpoint(tmp_path / "half.ckpt")
    model, second, state = train(model, patches, full_cfg, state=state)
    assert first + second == full_losses
    assert state.step == 4


def test_overfit_moving_average_decreases(patches):
    model = init_model(preset("front-s-d", "micro"))
    _, losses, _ = train(model, patches.subset(range(8)), TrainConfig(steps=150, batch=8, seed=0))
    ma = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert ma[-1] < ma[0]
    assert np.all(np.diff(ma[::25]) < 0)


def test_divergence_reports_step(patches):
    model = init_model(preset("front-s-d", "micro"))
    model.params["head.2.weight"].data[...] = np.inf
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(model, patches, TrainConfig(steps=1, batch=2))


def test_region_mismatch_rejected(patches):
    with pytest.raises(ValueError, match="loss region"):
        train(init_model(preset("front-s-d", "micro")), patches, TrainConfig(steps=1, region=8))


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(patches, tmp_path):
    model = init_model(preset("front-s-d-lfe", "micro"), seed=4)
    _, _, state = train(model, patches, TrainConfig(steps=1, batch=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, state, path)
    loaded, lstate = load_checkpoint(path)
    assert loaded.spec == model.spec and loaded.seed == 4
    assert lstate.step == 1
    for k in model.params:
        assert loaded.params[k].data.tobytes() == model.params[k].data.tobytes()
        assert lstate.m[k].tobytes() == state.m[k].tobytes()
        assert lstate.v[k].tobytes() == state.v[k].tobytes()
    x = patches.batch([0])[0]
    assert forward(loaded, x)[0].data.tobytes() == forward(model, x)[0].data.tobytes()
    assert checkpoint_bytes(loaded, lstate) == path.read_bytes()


def test_checkpoint_without_state(tmp_path):
    model = init_model(preset("front-s", "micro"))
    save_checkpoint(model, None, tmp_path / "m.ckpt")
    _, state = load_checkpoint(tmp_path / "m.ckpt")
    assert state is None


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    model = init_model(preset("front-s-d", "micro"))
    save_checkpoint(model, None, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(tmp_path / "long.ckpt")


def test_checkpoint_rejects_double_precision(tmp_path):
    model = init_model(preset("front-s-d", "micro")).astype(np.float64)
    with pytest.raises(ValueError):
        save_checkpoint(model, None, tmp_path / "m.ckpt")


def test_loss_log(tmp_path):
    write_loss_log(tmp_path / "l.csv", [0.5, 0.25], first_step=3)
    assert (tmp_path / "l.csv").read_text() == "step,loss\n3,0.5\n4,0.25\n"
