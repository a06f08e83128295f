import numpy as np
import pytest

from vimq.counters import PerfCounters
from vimq.ssm import (
    EXP_TABLE_RANGE,
    SsmConfig,
    SsmParams,
    discretize,
    exp_approx,
    fused_output,
    ssm_counters,
    ssm_forward,
    ssm_forward_reference,
    ssm_scan_oracle,
    state_project,
    state_update,
)


def _random_params(L, D, N, seed=0):
    rng = np.random.default_rng(seed)
    return SsmParams(
        u=rng.normal(0, 1, (L, D)).astype(np.float32),
        delta=rng.uniform(1e-3, 0.2, (L, D)).astype(np.float32),
        A=-rng.uniform(0.2, 8, (D, N)).astype(np.float32),
        B=rng.normal(0, 1, (L, N)).astype(np.float32),
        C=rng.normal(0, 1, (L, N)).astype(np.float32),
        d_skip=rng.normal(0, 1, D).astype(np.float32),
        z=rng.normal(0, 1, (L, D)).astype(np.float32),
    )


def _rel(got, want):
    return float(np.max(np.abs(got - want))) / max(float(np.max(np.abs(want))), 1e-30)


def test_engine_matches_doubling_scan():
    p = _random_params(64, 24, 16, seed=1)
    assert _rel(ssm_forward(p, SsmConfig(dtype="f32")), ssm_scan_oracle(p, SsmConfig(dtype="f32"))) <= 1e-5
    assert _rel(ssm_forward(p, SsmConfig(dtype="f64")), ssm_scan_oracle(p, SsmConfig(dtype="f64"))) <= 1e-12


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_reference_path_bit_equal(dtype):
    p = _random_params(20, 8, 16, seed=2)
    cfg = SsmConfig(dtype=dtype)
    assert np.array_equal(ssm_forward(p, cfg), ssm_forward_reference(p, cfg))


def test_state_tile_width_does_not_change_results():
    p = _random_params(12, 6, 16, seed=3)
    outs = [ssm_forward(p, SsmConfig(n_b=nb)) for nb in (1, 2, 4, 8, 16)]
    for o in outs[1:]:
        assert np.array_equal(outs[0], o)
    with pytest.raises(ValueError, match="does not divide"):
        ssm_forward(p, SsmConfig(n_b=5))


def test_state_project_fold_order():
    rng = np.random.default_rng(4)
    h = rng.normal(0, 1, (3, 16)).astype(np.float32)
    c = rng.normal(0, 1, 16).astype(np.float32)
    assert np.array_equal(state_project(h, c, 16), state_project(h, c, 4))


def test_stage_micro_ops():
    h = np.array([[1.0, 2.0]], np.float32)
    assert state_update(h, np.array([[0.5, 0.5]], np.float32), np.array([[1.0, 0.0]], np.float32)).tolist() == [[1.5, 1.0]]
    y = fused_output(
        np.array([2.0], np.float32), np.array([3.0], np.float32),
        np.array([2.0], np.float32), np.array([0.5], np.float32),
    )
    assert y.tolist() == [4.0]  # (2 + 3*2) * 0.5


def test_discretize_properties():
    delta = np.array([[0.0, 0.1]], np.float32)
    u = np.array([[1.0, 1.0]], np.float32)
    A = -np.ones((2, 3), np.float32)
    B = np.ones((1, 3), np.float32)
    abar, dbu = discretize(delta, u, A, B)
    assert np.all(abar[0, 0] == 1.0)  # exp(0)
    assert np.all(dbu[0, 0] == 0.0)  # delta 0 kills the input term
    assert np.all(abar <= 1.0)  # delta >= 0, A < 0


def test_exp_approx_accuracy():
    lo, hi = EXP_TABLE_RANGE
    xs = np.linspace(lo, hi, 40001).astype(np.float64)
    rel = np.abs(exp_approx(xs) - np.exp(xs)) / np.exp(xs)
    assert float(np.max(rel)) <= 1e-3
    # clamped outside the table domain
    assert exp_approx(np.array([lo - 5.0])) == exp_approx(np.array([lo]))
    assert exp_approx(np.array([2.0])) == 1.0


def test_exp_approx_mode_end_to_end():
    p = _random_params(16, 8, 16, seed=5)
    exact = ssm_forward(p, SsmConfig(exp_mode="exact"))
    approx = ssm_forward(p, SsmConfig(exp_mode="approx"))
    assert _rel(approx, exact) <= 5e-3


def test_non_finite_output_reports_coordinates():
    p = _random_params(4, 3, 16, seed=6)
    d_skip = p.d_skip.copy()
    d_skip[2] = np.inf
    bad = SsmParams(p.u, p.delta, p.A, p.B, p.C, d_skip, p.z)
    with pytest.raises(FloatingPointError, match=r"token 0, channel 2"):
        ssm_forward(bad)


def test_counters():
    p = _random_params(7, 5, 16, seed=7)
    pc = PerfCounters()
    ssm_forward(p, SsmConfig(), counters=pc, layer="blk.ssm")
    rec = pc.records[0]
    assert rec.layer == "blk.ssm" and rec.engine == "ssm"
    assert rec.state_updates == 7 * 5 * 16
    assert rec.macs == 2 * 7 * 5 * 16 + 2 * 7 * 5
    assert ssm_counters("x", 3, 4, 16).state_updates == 3 * 4 * 16


def test_empty_sequence():
    p = _random_params(0, 4, 16, seed=8)
    assert ssm_forward(p).shape == (0, 4)


def test_params_shape_validation():
    p = _random_params(4, 3, 16, seed=9)
    with pytest.raises(ValueError, match="delta/z"):
        SsmParams(p.u, p.delta[:2], p.A, p.B, p.C, p.d_skip, p.z).dims()
    with pytest.raises(ValueError, match="A/B/C"):
        SsmParams(p.u, p.delta, p.A, p.B[:, :8], p.C, p.d_skip, p.z).dims()
    with pytest.raises(ValueError, match="d_skip"):
        SsmParams(p.u, p.delta, p.A, p.B, p.C, p.d_skip[:1], p.z).dims()


def test_config_validation():
    with pytest.raises(ValueError):
        SsmConfig(exp_mode="table")
    with pytest.raises(ValueError):
        SsmConfig(dtype="f16")
    with pytest.raises(ValueError):
        SsmConfig(n_b=0)
