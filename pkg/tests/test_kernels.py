import numpy as np
import pytest

from caqa import kernels
from caqa.errors import ConfigError
from caqa.kernels import _ref


def _case(dtype, f=5, m=9, c=4, h=6, seed=0):
    rng = np.random.default_rng(seed)
    widths = (1, 3, 5)
    return dict(
        seq=rng.standard_normal((f, m)).astype(dtype),
        ws=[(rng.standard_normal((c, w * f)) * 0.4).astype(dtype) for w in widths],
        bs=[(rng.standard_normal((c, 1)) * 0.2).astype(dtype) for _ in widths],
        widths=widths,
        wx=(rng.standard_normal((4 * h, f)) * 0.4).astype(dtype),
        wh=(rng.standard_normal((4 * h, h)) * 0.4).astype(dtype),
        b=(rng.standard_normal((4 * h, 1)) * 0.2).astype(dtype),
        g_conv=rng.standard_normal((3 * c, m)).astype(dtype),
        g_lstm=rng.standard_normal((h, m)).astype(dtype),
    )


compiled = pytest.mark.skipif(
    "compiled" not in kernels.available(), reason="compiled backend not built"
)


def test_numpy_backend_always_available():
    assert "numpy" in kernels.available()
    assert kernels.use("numpy").NAME == "numpy"


def test_unknown_backend_rejected():
    with pytest.raises(ConfigError):
        kernels.use("cuda")


@compiled
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 5e-6)])
def test_conv_backend_parity(dtype, tol):
    c = _case(dtype)
    fast = kernels.use("compiled")
    try:
        o_ref, cache_ref = _ref.conv_bank_forward(c["seq"], c["ws"], c["bs"], c["widths"])
        o_fast, cache_fast = fast.conv_bank_forward(c["seq"], c["ws"], c["bs"], c["widths"])
        np.testing.assert_allclose(o_fast, o_ref, atol=tol)
        d_ref = _ref.conv_bank_backward(c["g_conv"], cache_ref)
        d_fast = fast.conv_bank_backward(c["g_conv"], cache_fast)
        np.testing.assert_allclose(d_fast[0], d_ref[0], atol=tol)
        for a, b in zip(d_fast[1], d_ref[1]):
            np.testing.assert_allclose(a, b, atol=tol)
        for a, b in zip(d_fast[2], d_ref[2]):
            np.testing.assert_allclose(a, b, atol=tol)
    finally:
        kernels.use("auto")


@compiled
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 5e-6)])
def test_lstm_backend_parity(dtype, tol):
    c = _case(dtype)
    fast = kernels.use("compiled")
    try:
        o_ref, cache_ref = _ref.lstm_forward(c["seq"], c["wx"], c["wh"], c["b"])
        o_fast, cache_fast = fast.lstm_forward(c["seq"], c["wx"], c["wh"], c["b"])
        np.testing.assert_allclose(o_fast, o_ref, atol=tol)
        d_ref = _ref.lstm_backward(c["g_lstm"], cache_ref)
        d_fast = fast.lstm_backward(c["g_lstm"], cache_fast)
        for a, b in zip(d_fast, d_ref):
            np.testing.assert_allclose(a, b, atol=tol * 20)
    finally:
        kernels.use("auto")


@compiled
def test_parity_on_short_sequences():
    # width larger than the sequence: padding covers everything
    for m in (1, 2):
        c = _case(np.float64, m=m)
        fast = kernels.use("compiled")
        try:
            o_ref, _ = _ref.conv_bank_forward(c["seq"], c["ws"], c["bs"], c["widths"])
            o_fast, _ = fast.conv_bank_forward(c["seq"], c["ws"], c["bs"], c["widths"])
            np.testing.assert_allclose(o_fast, o_ref, atol=1e-12)
            h_ref, _ = _ref.lstm_forward(c["seq"], c["wx"], c["wh"], c["b"])
            h_fast, _ = fast.lstm_forward(c["seq"], c["wx"], c["wh"], c["b"])
            np.testing.assert_allclose(h_fast, h_ref, atol=1e-12)
        finally:
            kernels.use("auto")


def test_env_override_selects_backend(monkeypatch):
    monkeypatch.setenv("CAQA_KERNELS", "numpy")
    kernels._active = None
    try:
        assert kernels.active().NAME == "numpy"
    finally:
        kernels._active = None  # let other tests re-select the default


def test_conv_single_width_no_concat():
    seq = np.arange(12, dtype=np.float64).reshape(3, 4)
    w = np.ones((2, 3))
    b = np.zeros((2, 1))
    out, _ = _ref.conv_bank_forward(seq, [w], [b], (1,))
    np.testing.assert_allclose(out, np.maximum(w @ seq, 0))


@compiled
def test_conv_relu_propagates_nan():
    # a flushed-to-zero NaN would defeat the training loop's divergence guard
    c = _case(np.float64)
    c["seq"][2, 4] = np.nan
    fast = kernels.use("compiled")
    try:
        o_ref, _ = _ref.conv_bank_forward(c["seq"], c["ws"], c["bs"], c["widths"])
        o_fast, _ = fast.conv_bank_forward(c["seq"], c["ws"], c["bs"], c["widths"])
        assert np.isnan(o_ref).any()
        np.testing.assert_array_equal(np.isnan(o_fast), np.isnan(o_ref))
    finally:
        kernels.use("auto")
