import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msdg import heads, nn
from msdg import tensor as T
from msdg.config import RunConfig
from msdg.metrics import metrics
from msdg.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(2, 6), st.integers(2, 6)).map(lambda s: (s[0], s[0])),
              elements=st.integers(0, 30)))
def test_metric_ranges(cm):
    if cm.sum() == 0 or (cm.sum(1) == 0).any():
        return
    s = metrics(cm)
    assert 0.0 <= s.oa <= 1.0 and 0.0 <= s.aa <= 1.0 and -1.0 <= s.kappa <= 1.0 + 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 7)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = nn.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3, 2), elements=st.floats(-5, 5)), arrays(np.float64, (3, 3, 2), elements=st.floats(-5, 5)))
def test_spar_takes_style_mean(content, style):
    out = nn.spar(Tensor(content), Tensor(style)).data
    np.testing.assert_allclose(out.mean(axis=(0, 1)), style.mean(axis=(0, 1)), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 4).flatmap(lambda r: st.tuples(*[st.integers(0, 3)] * r)),
              elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_serialization_round_trip(x):
    back, end = T.tensor_from_bytes(T.tensor_to_bytes(x))
    assert back.shape == x.shape and back.data.tobytes() == x.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-3, 3)))
def test_clamp_range(x):
    y = nn.clamp01(Tensor(x)).data
    assert y.min() >= 0 and y.max() <= 1
    inside = (x >= 0) & (x <= 1)
    np.testing.assert_array_equal(y[inside], x[inside])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 2, 4), elements=st.floats(-1, 1)))
def test_nearest_prototype_is_argmax_probability(d):
    cls, p = heads.prototype_predict(Tensor(d))
    # exp can merge distances closer than an ulp, so the winner need only attain the maximum
    np.testing.assert_array_equal(np.take_along_axis(p.data, cls[:, None], -1)[:, 0], p.data.max(-1))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(1, 50), st.booleans(), st.sampled_from([1, 3, 5, 13]))
def test_config_text_round_trip(alpha2, epochs, use_kmm, patch):
    cfg = RunConfig(alpha2=alpha2, epochs=epochs, t_pre=min(2, epochs), use_kmm=use_kmm, patch=patch)
    assert RunConfig.from_text(cfg.to_text()) == cfg
