import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from robust_smoothing.state_space import (
    AffineParams,
    Gaussian,
    MeasurementSequence,
    NonlinearSSM,
    TrajectoryEstimate,
    symmetrize_psd,
)


def test_symmetrize_identity():
    np.testing.assert_array_equal(symmetrize_psd(np.eye(3)), np.eye(3))


def test_symmetrize_averages_then_clips():
    out = symmetrize_psd([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_allclose(out, [[1.0, 1.0], [1.0, 1.0]], atol=1e-14)


def test_symmetrize_clips_tiny_negative_eigenvalue():
    np.testing.assert_allclose(symmetrize_psd(np.diag([1.0, -1e-12])), np.diag([1.0, 0.0]), atol=1e-15)


def test_symmetrize_clips_any_negative_eigenvalue():
    np.testing.assert_allclose(symmetrize_psd(np.diag([1.0, -1.0])), np.diag([1.0, 0.0]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-10, 10)))
def test_symmetrize_output_is_symmetric_psd(A):
    S = A @ A.T
    out = symmetrize_psd(S + 1e-13 * (A - A.T))
    np.testing.assert_array_equal(out, out.T)
    assert np.linalg.eigvalsh(out).min() >= -1e-9 * max(1.0, np.abs(S).max())


def test_gaussian_validation():
    with pytest.raises(ValueError):
        Gaussian(np.zeros(2), np.eye(3))
    g = Gaussian([1.0, 2.0], np.eye(2))
    assert g.dim == 2


def _toy(K=3):
    return NonlinearSSM.affine(
        np.stack([np.eye(2)] * (K - 1)), np.zeros((K - 1, 2)), np.stack([np.eye(2)] * (K - 1)),
        [np.eye(2)] * K, [np.zeros(2)] * K, [np.eye(2)] * K, Gaussian(np.zeros(2), np.eye(2)),
    )


def test_affine_model_shapes():
    m = _toy(4)
    assert m.horizon == 4 and m.state_dim == 2 and m.meas_dims == (2, 2, 2, 2)
    np.testing.assert_array_equal(m.motion_jac(np.ones(2), 0), np.eye(2))


def test_model_rejects_bad_noise():
    with pytest.raises(ValueError):
        NonlinearSSM.affine(
            np.eye(2)[None], np.zeros((1, 2)), -np.eye(2)[None],
            [np.eye(2)] * 2, [np.zeros(2)] * 2, [np.eye(2)] * 2, Gaussian(np.zeros(2), np.eye(2)),
        )


def test_measurement_sequence_allows_missing_steps():
    y = MeasurementSequence([np.ones(2), np.zeros(0), np.ones(1)])
    assert y.dims == (2, 0, 1)
    assert y.padded.shape == (3, 2)


def test_measurement_sequence_conformability():
    with pytest.raises(ValueError):
        MeasurementSequence([np.ones(1)] * 3).check_conformable(_toy(3))


def test_trajectory_estimate_indexing():
    t = TrajectoryEstimate.constant(np.zeros(2), np.eye(2), 5)
    assert len(t) == 5 and t.is_finite
    np.testing.assert_array_equal(t[3].cov, np.eye(2))


def test_affine_params_horizon():
    p = AffineParams(np.zeros((2, 2, 2)), np.zeros((2, 2)), np.zeros((2, 2, 2)),
                     (np.eye(2),) * 3, (np.zeros(2),) * 3, (np.zeros((2, 2)),) * 3)
    assert p.horizon == 3
