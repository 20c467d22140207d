import json
import math

import numpy as np
from scipy import ndimage
import pytest
from PIL import Image

from conformer import Conformer, ops
from conformer.checkpoint import load_checkpoint
from conformer.config import ConfigurationError
from conformer.datasets import (Dataset, DatasetError, load_image_folder, normalize, rotate_images, synth_dataset,
                                synth_split)
from conformer.tensor import ContractError, Tape, Tensor, precision
from conformer.training import (TrainConfig, TrainingDiverged, Transform, adamw_step, cosine_lr, dual_loss,
                                epoch_order, evaluate, rng_from_bytes, rng_state_bytes, train)


@pytest.fixture(scope="module")
def shapes():
    return synth_dataset(classes=4, size=64, count=160, seed=11)


# loss


def test_dual_loss_uniform_logits_closed_form():
    logits = np.zeros((3, 10))
    with precision("f64"):
        loss = dual_loss(Tensor(logits), Tensor(logits), np.array([0, 4, 9]))
    assert float(loss.data) == pytest.approx(2 * math.log(10), abs=1e-12)
    assert 2 * math.log(10) == pytest.approx(4.60517, abs=1e-5)


def test_dual_loss_identical_logits_doubles(rng):
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 1, 2, 3])
    with precision("f64"):
        one = float(ops.cross_entropy(Tensor(logits), labels).data)
        both = float(dual_loss(Tensor(logits), Tensor(logits), labels).data)
    assert both == pytest.approx(2 * one, rel=1e-14)


def test_dual_loss_weights_select_a_branch(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    labels = np.array([1, 1, 0, 4])
    with precision("f64"):
        only_cnn = float(dual_loss(Tensor(a), Tensor(b), labels, (1, 0)).data)
        ce = float(ops.cross_entropy(Tensor(a), labels).data)
        assert only_cnn == ce
        with pytest.raises(ContractError):
            dual_loss(None, Tensor(b), labels, (1, 0))


# optimizer


def test_adamw_zero_grads_no_decay_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adamw_step(p, {"w": np.zeros(2)}, None, 1, 1e-3, 0.0)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adamw_decay_only_scales():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    new, _ = adamw_step(p, {"w": np.zeros(3)}, None, 1, 1e-3, 0.05)
    np.testing.assert_allclose(new["w"], p["w"] * (1 - 5e-5), rtol=1e-15)


def test_adamw_first_step_by_hand():
    new, moments = adamw_step({"w": np.array(1.0)}, {"w": np.array(1.0)}, None, 1, 1e-3, 0.0)
    # bias-corrected m/sqrt(v) is exactly 1 on the first step
    assert new["w"] == pytest.approx(1.0 - 1e-3 / (1 + 1e-8), abs=1e-12)
    assert round(float(new["w"]), 6) == 0.999
    np.testing.assert_allclose(moments["w"], (0.1, 0.001))


def test_adamw_decay_contracts_monotonically():
    p = {"w": np.array([3.0, -1.5])}
    moments = None
    mags = [np.abs(p["w"])]
    for step in range(1, 6):
        p, moments = adamw_step(p, {"w": np.zeros(2)}, moments, step, 1e-2, 0.1)
        mags.append(np.abs(p["w"]))
    assert all((b < a).all() for a, b in zip(mags, mags[1:]))


def test_adamw_decay_selector():
    p = {"w": np.ones(2), "bn.weight": np.ones(2)}
    g = {k: np.zeros(2) for k in p}
    new, _ = adamw_step(p, g, None, 1, 1e-3, 0.05, decay=lambda name: not name.startswith("bn"))
    np.testing.assert_array_equal(new["bn.weight"], np.ones(2))
    assert (new["w"] < 1).all()


def test_adamw_rejects_step_zero():
    with pytest.raises(ContractError):
        adamw_step({"w": np.ones(1)}, {"w": np.ones(1)}, None, 0, 1e-3, 0.0)


# schedule


def test_cosine_schedule_examples():
    assert cosine_lr(10, 100, 1e-3, warmup_steps=10) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == 0.0
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, rel=1e-12)
    assert cosine_lr(5, 100, 1e-3, warmup_steps=10) == pytest.approx(5e-4)
    assert cosine_lr(0, 100, 1e-3) == 1e-3


# config


@pytest.mark.parametrize("kwargs,field", [({"lr": 0.0}, "lr"), ({"epochs": 0}, "epochs"),
                                          ({"loss_weights": (1.0, -1.0)}, "loss_weights"),
                                          ({"batch_size": 0}, "batch_size")])
def test_train_config_validation(kwargs, field):
    with pytest.raises(ConfigurationError) as err:
        TrainConfig(**kwargs)
    assert err.value.field == field


def test_steps_drop_trailing_partial_batch():
    c = TrainConfig(epochs=3, batch_size=64)
    assert c.steps_per_epoch(4096) == 64 and c.steps_per_epoch(100) == 1
    assert c.total_steps(4096) == 192
    assert TrainConfig(epochs=40, max_steps=2000).total_steps(4096) == 2000


# training loop


def test_memorization_reduces_loss(micro_config, shapes):
    small = shapes.subset(slice(0, 32))
    model = Conformer.create(micro_config, 0)
    res = train(model, TrainConfig(epochs=50, batch_size=32, lr=1e-3), small, echo=False)
    assert len(res.metrics) == 50
    assert res.metrics[-1]["loss"] < res.metrics[0]["loss"]


def test_metric_records_follow_schedule(micro_config, shapes, tmp_path):
    model = Conformer.create(micro_config, 0)
    cfg = TrainConfig(epochs=2, batch_size=32, lr=2e-3, warmup_steps=2)
    res = train(model, cfg, shapes, metrics_path=tmp_path / "m.jsonl", echo=False)
    total = cfg.total_steps(len(shapes))
    assert [r["step"] for r in res.metrics] == list(range(1, total + 1))
    assert [r["lr"] for r in res.metrics] == [cosine_lr(s, total, 2e-3, 2) for s in range(total)]
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert lines == res.metrics
    assert set(lines[0]) == {"step", "epoch", "lr", "loss", "acc_cnn", "acc_trans", "acc_sum"}


def test_metric_stream_goes_to_stdout(micro_config, shapes, capsys):
    model = Conformer.create(micro_config, 0)
    train(model, TrainConfig(epochs=1, batch_size=80), shapes)
    out = capsys.readouterr().out.splitlines()
    assert [json.loads(x)["step"] for x in out] == [1, 2]


@pytest.mark.parametrize("resume_at", [3, 4, 6])
def test_resume_reproduces_the_remaining_run(micro_config, shapes, tmp_path, resume_at):
    data = shapes.subset(slice(0, 128))
    cfg = TrainConfig(epochs=3, batch_size=32, seed=5, snapshot_interval=1, max_steps=9)
    full = train(Conformer.create(micro_config, 0), cfg, data, echo=False, snapshot_dir=tmp_path)
    snap = load_checkpoint(tmp_path / f"step{resume_at:06d}.cfmr")
    assert snap.step == resume_at
    again = train(Conformer.create(micro_config, 1), cfg, data, echo=False, resume=snap)
    assert again.metrics == full.metrics[resume_at:]
    assert again.checkpoint.params.equal(full.checkpoint.params)
    assert again.checkpoint.rng_state == full.checkpoint.rng_state


def test_resume_rejects_other_model(micro_config, shapes, tmp_path):
    data = shapes.subset(slice(0, 64))
    res = train(Conformer.create(micro_config, 0), TrainConfig(batch_size=32), data, echo=False)
    other = Conformer.create(micro_config.replace(sampling="maxpool"), 0)
    with pytest.raises(ConfigurationError):
        train(other, TrainConfig(batch_size=32), data, echo=False, resume=res.checkpoint)


def test_training_is_deterministic(micro_config, shapes):
    data = shapes.subset(slice(0, 64))
    cfg = TrainConfig(epochs=2, batch_size=32, seed=3)
    a = train(Conformer.create(micro_config, 0), cfg, data, echo=False)
    b = train(Conformer.create(micro_config, 0), cfg, data, echo=False)
    assert a.metrics == b.metrics
    assert a.checkpoint.params.equal(b.checkpoint.params)


def test_nan_loss_names_first_bad_tensor(micro_config, shapes):
    model = Conformer.create(micro_config, 0)
    model.params["trans.block03.mlp.fc1.weight"].data[0, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="block03"):
        train(model, TrainConfig(batch_size=32), shapes.subset(slice(0, 32)), echo=False)


def test_training_rejects_mismatched_dataset(micro_config, shapes):
    with pytest.raises(ConfigurationError):
        train(Conformer.create(micro_config.replace(num_classes=5), 0), TrainConfig(batch_size=32), shapes,
              echo=False)


def test_rng_state_round_trip():
    bg = np.random.PCG64(42)
    epoch_order(bg, 10)
    blob = rng_state_bytes(bg)
    assert len(blob) == 32
    np.testing.assert_array_equal(epoch_order(rng_from_bytes(blob), 50), epoch_order(bg, 50))


# evaluation


def test_rotation_zero_equals_none(micro_model, shapes):
    a = evaluate(micro_model, shapes, "none")
    b = evaluate(micro_model, shapes, "rotate:0")
    assert (a.acc_cnn, a.acc_trans, a.acc_sum) == (b.acc_cnn, b.acc_trans, b.acc_sum)
    assert b.transform == "rotate:0" and a.count == len(shapes)


def test_half_turn_is_index_reversal(shapes):
    x = shapes.images[:4]
    np.testing.assert_array_equal(rotate_images(x, 180), x[..., ::-1, ::-1])
    np.testing.assert_array_equal(rotate_images(x, 90), np.rot90(x, k=1, axes=(2, 3)))


def test_rotation_fills_corners_with_zero(shapes):
    y = rotate_images(shapes.images[:1], 45)
    assert not y[..., 0, 0].any()


def test_resize_evaluation(micro_model, shapes):
    res = evaluate(micro_model, shapes.subset(slice(0, 8)), "resize:96")
    assert res.count == 8 and 0.0 <= res.acc_sum <= 1.0
    with pytest.raises(ConfigurationError):
        evaluate(micro_model, shapes, "resize:80")
    with pytest.raises(ValueError):
        evaluate(micro_model, shapes, "resize:9.5")


def test_resize_with_positional_embeddings_is_refused(micro_config, shapes):
    model = Conformer.create(micro_config.replace(positional_embeddings=True), 0)
    with pytest.raises(ConfigurationError, match="nterpolat"):
        evaluate(model, shapes, "resize:96")


@pytest.mark.parametrize("text", ["flip", "rotate:", "resize"])
def test_unknown_transform(text):
    with pytest.raises(ValueError):
        Transform.parse(text)


# data


def test_synthetic_data_is_deterministic():
    a = synth_dataset(count=24, seed=7)
    b = synth_dataset(count=24, seed=7)
    assert a.images.tobytes() == b.images.tobytes() and (a.labels == b.labels).all()
    assert a.images.tobytes() != synth_dataset(count=24, seed=8).images.tobytes()


def test_synthetic_data_statistics(shapes):
    assert shapes.images.shape == (160, 3, 64, 64) and shapes.images.dtype == np.float32
    np.testing.assert_allclose(shapes.images.mean(axis=(2, 3)), 0.5, atol=1e-5)
    np.testing.assert_allclose(shapes.images.std(axis=(2, 3)), 0.25, atol=1e-4)
    assert set(shapes.labels) == {0, 1, 2, 3}
    x0, y0, x1, y1 = shapes.boxes.T
    assert (x0 < x1).all() and (y0 < y1).all() and (x0 >= 0).all() and (x1 <= 64).all()


def test_split_is_one_draw():
    tr, te = synth_split(train=20, test=6, seed=7)
    full = synth_dataset(count=26, seed=7)
    assert tr.images.tobytes() == full.images[:20].tobytes()
    assert te.images.tobytes() == full.images[20:].tobytes()
    assert (tr.split, te.split) == ("train", "test")


def test_synthetic_validation():
    with pytest.raises(DatasetError):
        synth_dataset(kind="digits", count=2)
    with pytest.raises(DatasetError):
        synth_dataset(classes=9, count=2)


def _write_png(path, size=8, value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), value, dtype=np.uint8)).save(path)


def test_image_folder_loading(tmp_path):
    for cls in ("b", "a"):
        for i in range(3):
            _write_png(tmp_path / cls / f"{i}.png", value=40 * i + (cls == "b"))
    ds = load_image_folder(tmp_path)
    assert len(ds) == 6 and ds.class_names == ["a", "b"]
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.images.shape == (6, 3, 8, 8)


def test_image_folder_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    _write_png(tmp_path / "full" / "x.png")
    with pytest.raises(DatasetError, match="no PNG"):
        load_image_folder(tmp_path)
    other = tmp_path / "mixed"
    _write_png(other / "a" / "x.png", size=8)
    _write_png(other / "b" / "y.png", size=16)
    with pytest.raises(DatasetError, match="resiz"):
        load_image_folder(other)
    rect = tmp_path / "rect" / "a"
    rect.mkdir(parents=True)
    Image.fromarray(np.zeros((8, 6, 3), dtype=np.uint8)).save(rect / "r.png")
    with pytest.raises(DatasetError, match="square"):
        load_image_folder(tmp_path / "rect")
    with pytest.raises(DatasetError):
        load_image_folder(tmp_path / "missing")


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0, 2]), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 3, 4, 5), np.float32), np.array([0, 1]), 2)


def test_normalize_constant_image_is_finite():
    out = normalize(np.ones((3, 4, 4)))
    assert np.isfinite(out).all()


def test_two_layer_baseline_separates_the_shapes():
    """Generator sanity probe: a small two-layer network on shape-outline features reaches 90%."""
    tr, te = synth_split(train=1536, test=256, seed=7)

    def features(ds, bins=16):
        # foreground mask, then radial profile about its centroid; invariant to pose and scale
        gray = ds.images.mean(axis=1)
        yy, xx = np.mgrid[0:gray.shape[1], 0:gray.shape[2]]
        out = np.empty((len(ds), bins + 1))
        for i, g in enumerate(gray):
            sm = ndimage.uniform_filter(g, 3)
            m = sm > 0.5 * (np.quantile(sm, 0.05) + np.quantile(sm, 0.99))
            r = np.hypot(yy[m] - yy[m].mean(), xx[m] - xx[m].mean())
            rmax = np.quantile(r, 0.99)
            out[i, :bins] = np.histogram(np.minimum(r / rmax, 1.0), bins=bins, range=(0, 1))[0] / m.sum()
            out[i, bins] = m.sum() / (np.pi * rmax ** 2)
        return out

    xtr, xte = features(tr), features(te)
    rng = np.random.default_rng(0)
    with precision("f64"):
        p = {"w1": Tensor(rng.standard_normal((xtr.shape[1], 256)) * 0.3, requires_grad=True),
             "b1": Tensor(np.zeros(256), requires_grad=True),
             "w2": Tensor(rng.standard_normal((256, 4)) * 0.05, requires_grad=True),
             "b2": Tensor(np.zeros(4), requires_grad=True)}
        moments = None
        step = 0
        for epoch in range(20):
            order = rng.permutation(len(xtr))
            for i in range(0, len(order), 128):
                idx = order[i:i + 128]
                step += 1
                with Tape() as tape:
                    h = ops.relu(ops.linear(Tensor(xtr[idx]), p["w1"], p["b1"]))
                    loss = ops.cross_entropy(ops.linear(h, p["w2"], p["b2"]), tr.labels[idx])
                g = tape.backward(loss)
                new, moments = adamw_step({k: v.data for k, v in p.items()}, {k: g[v] for k, v in p.items()},
                                          moments, step, 2e-3, 1e-4)
                for k in p:
                    p[k].data = new[k]
        h = np.maximum(xte @ p["w1"].data + p["b1"].data, 0)
        acc = float(np.mean(np.argmax(h @ p["w2"].data + p["b2"].data, axis=1) == te.labels))
    assert acc >= 0.90, acc
