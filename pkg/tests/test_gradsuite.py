import numpy as np

from sttrack import gradsuite
from sttrack.engine import Parameter
from sttrack.engine.tensor import relu


def test_every_op_case_passes():
    cases = gradsuite.run(seed=0, include_model=False)
    assert len(cases) >= 20
    bad = {c.name: c.worst for c in cases if not c.ok}
    assert not bad


def test_op_cases_cover_the_box_pipeline():
    names = set(gradsuite.op_cases(0))
    for needed in ("soft_argmax", "localization_loss", "softmax", "conv2d", "layer_norm", "attention"):
        assert any(needed in n for n in names), needed


def test_kink_crossing_is_detected():
    x = Parameter(np.array([0.0004, 1.0, -1.0]), dtype=np.float64)
    errors, _, crossings = gradsuite.check_smooth(lambda: relu(x).sum(), [("x", x)])
    assert crossings == 1  # only the -h stencil of the entry near zero switches branch
    assert errors["x"] > gradsuite.TOLERANCE


def test_smooth_function_has_no_crossings():
    x = Parameter(np.array([0.3, 2.0, -1.5]), dtype=np.float64)
    errors, _, crossings = gradsuite.check_smooth(lambda: (relu(x) * x).sum(), [("x", x)])
    assert crossings == 0 and errors["x"] <= 1e-9


def test_case_verdict():
    ok = gradsuite.GradCase("a", {"w": 5e-5}, {"w": 1e-3}, 0.0)
    assert ok.ok and ok.worst == 5e-5
    assert not gradsuite.GradCase("b", {"w": 5e-5}, {}, 0.0, kink_crossings=1).ok
    assert not gradsuite.GradCase("c", {"w": 2e-4}, {}, 0.0).ok
