import numpy as np

from convcut import gradcheck, ops
from convcut.gradcheck import check_gradients, check_model, run_suite
from convcut.tensor import Tensor, record


def test_correct_rule_passes():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    res = check_gradients(lambda: ops.sum(ops.gelu(x)), [x], names=["x"])
    assert res.passed() and res.checked == 3
    assert res.worst.startswith("x[")


def test_wrong_rule_is_located():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)

    def square_with_bad_rule(t):
        rule = lambda g: (g * 2 * t.data + (np.arange(3) == 2) * 5.0,)  # noqa: E731
        return record("square", t.data * t.data, (t,), rule)

    res = check_gradients(lambda: ops.sum(square_with_bad_rule(x)), [x], names=["x"], name="square")
    assert not res.passed()
    assert res.worst == "x[2]"
    assert res.name == "square"


def test_inputs_restored_after_check():
    x = Tensor(np.array([0.5, 0.25]), requires_grad=True)
    before = x.data.copy()
    check_gradients(lambda: ops.sum(ops.mul(x, x)), [x])
    assert x.data.dtype == np.float32
    np.testing.assert_array_equal(x.data, before)


def test_sampling_limits_checked_elements():
    x = Tensor(np.random.default_rng(0).standard_normal(50), requires_grad=True)
    res = check_gradients(lambda: ops.sum(ops.gelu(x)), [x], sample=7)
    assert res.checked == 7


def test_full_model_check_passes():
    res = check_model(seed=0)
    assert res.passed(), res
    assert res.checked > 32 * 10


def test_suite_is_deterministic_and_complete():
    a = run_suite(seed=2, instances=1, include_model=False)
    b = run_suite(seed=2, instances=1, include_model=False)
    assert [(r.name, r.max_error, r.worst) for r in a] == [(r.name, r.max_error, r.worst) for r in b]
    assert {r.name for r in a} == set(gradcheck.OP_CASES) | set(gradcheck.BLOCK_CASES)
    assert all(r.passed() for r in a)
