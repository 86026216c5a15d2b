import numpy as np
import pytest

from shipdet.config import DetectorConfig


def tiny_config(**overrides):
    """A few-thousand-parameter detector for fast structural tests."""
    base = dict(
        image_short_side=64,
        backbone_widths=(4, 4, 6, 6, 8),
        arf_filters=3,
        rpn_hidden=8,
        anchor_scales=(16, 32),
        pooled_channels=4,
        fc_dim=16,
        rpn_batch=32,
        det_batch=8,
        rpn_pre_nms_train=200,
        rpn_pre_nms_test=200,
        rpn_post_nms_train=50,
        rpn_post_nms_test=50,
        checkpoint_every=0,
        log_every=0,
    )
    base.update(overrides)
    return DetectorConfig.desk(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def scene():
    """A 64x64 image with two bright ships and their boxes."""
    from shipdet.synth import render_box

    img = np.full((64, 64), 60.0)
    boxes = np.array([[20.0, 22.0, 30.0, 8.0, 0.3], [44.0, 44.0, 26.0, 7.0, -0.9]])
    for b in boxes:
        render_box(img, b, 200.0)
    return img.astype(np.float32), boxes


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record ``(criterion, passed, detail)``; one summary line per criterion is printed at the end."""

    def record(criterion, passed, detail=""):
        ok, notes = _ACCEPTANCE.get(criterion, (True, []))
        _ACCEPTANCE[criterion] = (ok and bool(passed), notes + [detail] if detail else notes)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE):
        ok, notes = _ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {'; '.join(notes)}")
