import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from shipdet.geometry import canonicalize
from shipdet.io import DataError
from shipdet.synth import render_box
from shipdet.tensor import CheckpointError, load_checkpoint, save_checkpoint
from shipdet.trainer import Trainer, flip_sample, load_detector


@pytest.fixture
def data(scene):
    img, boxes = scene
    return [img, img[::-1].copy()], [boxes, flip_sample(img, boxes, "v")[1]]


box_st = st.tuples(
    st.floats(5, 59), st.floats(5, 59), st.floats(4, 40), st.floats(2, 40), st.floats(-np.pi / 2, np.pi / 2 - 1e-6)
)


@settings(max_examples=60, deadline=None)
@given(box_st, st.sampled_from(["h", "v"]))
def test_flip_twice_restores_boxes(box, mode):
    img = np.arange(64 * 48, dtype=np.float32).reshape(48, 64)
    b = canonicalize(np.array([box]))
    img2, b2 = flip_sample(*flip_sample(img, b, mode), mode)
    np.testing.assert_array_equal(img2, img)
    # the angle passes through negation and canonicalization twice
    np.testing.assert_allclose(b2, b, atol=1e-9)


@pytest.mark.parametrize("mode", ["h", "v"])
def test_flipped_annotation_matches_flipped_pixels(mode):
    box = np.array([30.0, 20.0, 36.0, 9.0, 0.4])
    mask = np.zeros((48, 64))
    render_box(mask, box, 1.0)
    fmask, fboxes = flip_sample(mask, box[None], mode)
    redrawn = np.zeros_like(mask)
    render_box(redrawn, fboxes[0], 1.0)
    np.testing.assert_allclose(redrawn, fmask, atol=1e-9)


def test_unknown_flip_rejected():
    with pytest.raises(ValueError):
        flip_sample(np.zeros((4, 4)), np.zeros((0, 5)), "d")


def test_flips_triple_the_training_pool(data):
    tr = Trainer(tiny_config(), *data)
    assert len(tr.items) == 3 * len(data[0])
    assert len(Trainer(tiny_config(flip=False), *data).items) == len(data[0])
    # every item appears once per pass over the pool
    seen = [tuple(it) for _ in range(3) for it in tr._next_items()]
    assert sorted(seen) == sorted(tr.items)


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        Trainer(tiny_config(), [], [])


def test_identical_steps_are_identical(data):
    a = Trainer(tiny_config(), *data)
    b = Trainer(tiny_config(), *data)
    for _ in range(2):
        assert a.train_step() == b.train_step()
    for (name, p), q in zip(a.model.params().items(), b.model.params().values()):
        np.testing.assert_array_equal(p.value, q.value, err_msg=name)


def test_resume_reproduces_next_step(tmp_path, data):
    tr = Trainer(tiny_config(), *data)
    for _ in range(3):
        tr.train_step()
    tr.save(tmp_path / "ck")
    expected = [tr.train_step() for _ in range(2)]
    again = Trainer.resume(tmp_path / "ck", *data)
    assert again.step == 3
    assert [again.train_step() for _ in range(2)] == expected


def test_run_writes_log_and_checkpoint(tmp_path, data):
    tr = Trainer(tiny_config(steps=4, checkpoint_every=2), *data, out_dir=str(tmp_path))
    hist = tr.run()
    assert len(hist) == 4
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    assert {"step", "cls", "reg1", "reg2", "total"} <= set(rows[0])
    model = load_detector(tmp_path / "checkpoint.ckpt")
    for name, p in model.params().items():
        np.testing.assert_array_equal(p.value, tr.model.params()[name].value)
    # a resumed run appends to the same log
    tr2 = Trainer.resume(tmp_path / "checkpoint.ckpt", *data, out_dir=str(tmp_path))
    tr2.run(steps=5)
    with open(tmp_path / "train_log.csv") as fh:
        assert [int(r["step"]) for r in csv.DictReader(fh)] == [1, 2, 3, 4, 5]


def test_checkpoint_with_missing_entry_is_named(tmp_path, data):
    tr = Trainer(tiny_config(), *data)
    tr.save(tmp_path / "ck")
    arrays, meta = load_checkpoint(tmp_path / "ck")
    del arrays["p/fc1.weight"]
    save_checkpoint(tmp_path / "bad", arrays, meta)
    with pytest.raises(CheckpointError, match="fc1.weight"):
        load_detector(tmp_path / "bad")
