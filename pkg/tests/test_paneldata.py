import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eivsc.errors import CSVFormatError, DimensionError, EmptyInputError, NotPSDError
from eivsc.paneldata import (LayoutConfig, NoiseSpec, PanelObservation, SignalSpec,
                             aggregate_treated, estimate_noise_spec, generate_noise,
                             generate_panel, generate_signal, generate_truth, load_panel_csv,
                             psd_sqrt, write_panel_csv)


def _truth(n=30, p=6, rank=2, sigma=1.0, p_e=3, tau=0.5, seed=7, style="typical_row"):
    sv = tuple(float(x) for x in np.linspace(10, 5, rank))
    return generate_truth(SignalSpec(rank, sv, a_e_style=style),
                          NoiseSpec.iid_columns(n, p, sigma, p_e), tau, seed)


# ---------------------------------------------------------------------------
# signal


def test_rank_zero_signal():
    A, b, a_e, b_e = generate_signal(SignalSpec(0, ()), 5, 4, seed=1)
    assert not A.any() and not b.any() and not a_e.any() and b_e == 0.0


def test_rank_one_singular_values():
    A, *_ = generate_signal(SignalSpec(1, (6.0,)), 2, 3, seed=3)
    s = np.linalg.svd(A, compute_uv=False)
    assert abs(s[0] - 6.0) < 1e-10 and abs(s[1]) < 1e-10


def test_orthogonal_a_e():
    A, _, a_e, _ = generate_signal(SignalSpec(1, (4.0,), a_e_style="orthogonal_to_rowspace"), 6, 5, 2)
    v1 = np.linalg.svd(A)[2][0]
    assert abs(a_e @ v1) < 1e-10
    assert np.linalg.norm(a_e) > 0


def test_aligned_a_e():
    A, _, a_e, _ = generate_signal(SignalSpec(2, (4.0, 1.0), a_e_style="top_singular_aligned"), 6, 5, 2)
    v1 = np.linalg.svd(A)[2][0]
    assert abs(abs(a_e @ v1) - np.linalg.norm(a_e)) < 1e-10


def test_rank_too_large():
    with pytest.raises(DimensionError):
        generate_signal(SignalSpec(4, (3.0, 2.0, 1.0, 1.0)), 3, 5, 0)


def test_signal_is_exact_combination():
    A, b, a_e, b_e, th = generate_signal(SignalSpec(2, (5.0, 2.0)), 8, 4, 0, return_weights=True)
    assert np.allclose(b, A @ th) and abs(b_e - a_e @ th) < 1e-12
    assert th.min() >= 0 and abs(th.sum() - 1) < 1e-12


def test_common_trends_singular_values():
    A, *_ = generate_signal(SignalSpec(2, (7.0, 3.0), factor_style="common_trends"), 20, 6, 4)
    s = np.linalg.svd(A, compute_uv=False)
    assert np.allclose(s[:2], [7.0, 3.0]) and np.all(s[2:] < 1e-10)


def test_signal_spec_validation():
    with pytest.raises(ValueError):
        SignalSpec(2, (1.0, 2.0))
    with pytest.raises(DimensionError):
        SignalSpec(2, (1.0,))


# ---------------------------------------------------------------------------
# panels and noise


def test_zero_noise_panel_is_signal():
    truth = generate_truth(SignalSpec(2, (5.0, 2.0)), NoiseSpec.zero(10, 4), 0.0, 5)
    panel = generate_panel(truth, 11)
    assert np.array_equal(panel.X, truth.A) and np.array_equal(panel.y, truth.b)
    assert np.array_equal(panel.x_e, truth.a_e) and panel.y_e == truth.b_e


def test_zero_noise_treatment_cell():
    truth = generate_truth(SignalSpec(2, (5.0, 2.0)), NoiseSpec.zero(10, 4), 3.0, 5)
    panel = generate_panel(truth, 11)
    assert panel.y_e == truth.b_e + 3.0
    assert np.array_equal(panel.y, truth.b)


def test_tau_only_moves_treated_post_cell():
    t0, t1 = _truth(tau=0.0), _truth(tau=2.5)
    p0, p1 = generate_panel(t0, 3), generate_panel(t1, 3)
    diff = p1.full_matrix() - p0.full_matrix()
    assert abs(diff[-1, -1] - 2.5) < 1e-12
    diff[-1, -1] = 0.0
    assert not diff.any()


def test_panel_determinism():
    truth = _truth()
    a, b = generate_panel(truth, 99), generate_panel(truth, 99)
    assert np.array_equal(a.full_matrix(), b.full_matrix())
    assert np.array_equal(a.treated_series, b.treated_series)
    assert not np.array_equal(a.X, generate_panel(truth, 100).X)


def test_treated_series_reaggregates():
    panel = generate_panel(_truth(p_e=4), 1)
    y, y_e = aggregate_treated(panel.treated_series)
    assert np.array_equal(y, panel.y) and y_e == panel.y_e


def test_aggregate_examples():
    col = np.array([1.0, 2.0, 3.0])
    y, y_e = aggregate_treated(col[:, None])
    assert np.array_equal(np.append(y, y_e), col)
    y, y_e = aggregate_treated(np.array([[1.0, 3.0]] * 4))
    assert np.all(y == 2.0) and y_e == 2.0
    S = np.array([[1.0, -1.0, 2.0, -2.0]] * 5)
    y, y_e = aggregate_treated(S)
    assert not y.any() and y_e == 0.0
    with pytest.raises(EmptyInputError):
        aggregate_treated(np.zeros((3, 0)))


def test_noise_mean_zero():
    ns = NoiseSpec.iid_columns(5, 5, 2.0)
    acc = np.zeros((6, 5))
    reps = 10_000
    for s in range(reps):
        acc += generate_noise(ns, s)[0]
    mean = acc / reps
    assert np.all(np.abs(mean) <= 5 * 2.0 / np.sqrt(reps))


def test_row_covariance_converges():
    n, p = 10, 3
    ns = NoiseSpec.iid_columns(n, p, 1.0, sigma_col=np.linspace(0.5, 2.0, n))
    dists = []
    for reps in (50, 200, 800):
        acc = np.zeros((p, p))
        for s in range(reps):
            e = generate_noise(ns, s)[0][:n]
            acc += e.T @ e / n
        dists.append(np.linalg.norm(acc / reps - ns.sigma_row))
    assert dists[2] < dists[0]
    assert dists[2] < 0.1 * np.trace(ns.sigma_row)
    assert np.allclose(ns.sigma_row, np.linspace(0.5, 2.0, n).mean() * np.eye(p))


def test_rademacher_mixture_unit_variance():
    ns = NoiseSpec.iid_columns(200, 50, 1.5, distribution="scaled_rademacher_mixture")
    e = generate_noise(ns, 0)[0]
    assert abs(e.var() - 2.25) < 0.1


def test_ar1_columns_predictor():
    ns = NoiseSpec.ar1_columns(6, 2, 1.0, 0.7)
    assert abs(ns.psi_col[-1] - 0.7) < 1e-12 and np.allclose(ns.psi_col[:-1], 0, atol=1e-12)
    assert abs(ns.col_residual_sd - np.sqrt(1 - 0.49)) < 1e-12
    acc = []
    for s in range(4000):
        e = generate_noise(ns, s)[0]
        acc.append(e[-1, 0] - 0.7 * e[-2, 0])
    assert abs(np.std(acc) - np.sqrt(0.51)) < 0.03


def test_rows_mode_psi_relation():
    S = np.diag([1.0, 2.0])
    ns = NoiseSpec.iid_rows(50, S, psi=np.array([0.5, 0.0]), resid_var=0.0, p_e=3)
    truth = generate_truth(SignalSpec(1, (3.0,)), ns, 0.0, 1)
    panel = generate_panel(truth, 2)
    nu = panel.y - truth.b
    eps = panel.X - truth.A
    assert np.allclose(nu, eps @ ns.psi, atol=1e-12)


def test_psd_sqrt_and_rejection():
    M = np.array([[2.0, 1.0], [1.0, 2.0]])
    R = psd_sqrt(M)
    assert np.allclose(R @ R, M)
    with pytest.raises(NotPSDError):
        psd_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_noise_spec_validation():
    with pytest.raises(NotPSDError):
        NoiseSpec("columns", np.eye(2), np.array([[1.0, 2.0], [0.0, 1.0]]), np.ones(2),
                  np.zeros(2), np.zeros(2), 1.0)
    with pytest.raises(DimensionError):
        NoiseSpec("columns", np.eye(2), np.ones(3), np.ones(3), np.zeros(2), np.zeros(2), 1.0)


def test_panel_observation_validation():
    with pytest.raises(DimensionError):
        PanelObservation(np.zeros((3, 2)), np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        PanelObservation(np.zeros((2, 2)), np.zeros(2), np.zeros(2), 0.0,
                         treated_series=np.ones((3, 2)))


def test_transposed_roles():
    panel = generate_panel(_truth(), 4)
    t = panel.transposed()
    assert t.orientation == "rows_are_units"
    assert np.array_equal(t.X, panel.X.T) and np.array_equal(t.y, panel.x_e)
    assert np.array_equal(t.x_e, panel.y) and t.y_e == panel.y_e


# ---------------------------------------------------------------------------
# CSV


def test_csv_small_layout(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("a,b,t\n1,2,3\n4,5,6\n7,8,9\n")
    panel = load_panel_csv(f, LayoutConfig("t"))
    assert (panel.n, panel.p) == (2, 2)
    assert np.array_equal(panel.x_e, [7.0, 8.0]) and panel.y_e == 9.0


def test_csv_error_coordinates(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("a,b,t\n1,2,3\n4,5,6\n7,oops,9\n")
    with pytest.raises(CSVFormatError) as info:
        load_panel_csv(f, LayoutConfig("t"))
    assert (info.value.row, info.value.col) == (4, 2)
    assert "(4" in str(info.value) or "row 4" in str(info.value)


def test_csv_missing_column_and_short_file(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("a,b\n1,2\n3,4\n")
    with pytest.raises(CSVFormatError):
        load_panel_csv(f, LayoutConfig("t"))
    g = tmp_path / "q.csv"
    g.write_text("a,t\n1,2\n")
    with pytest.raises(CSVFormatError):
        load_panel_csv(g, LayoutConfig("t"))


def test_csv_roundtrip(tmp_path):
    panel = generate_panel(_truth(p_e=3), 8)
    layout = write_panel_csv(panel, tmp_path / "r.csv")
    back = load_panel_csv(tmp_path / "r.csv", layout)
    assert np.allclose(back.full_matrix(), panel.full_matrix(), rtol=0, atol=1e-12)
    assert np.allclose(back.treated_series, panel.treated_series, rtol=0, atol=1e-12)


def test_csv_rows_are_units(tmp_path):
    panel = generate_panel(_truth(p_e=1), 8)
    layout = write_panel_csv(panel, tmp_path / "r.csv")
    lay = LayoutConfig(layout.treated, layout.controls, layout.time_column, -1, "rows_are_units")
    back = load_panel_csv(tmp_path / "r.csv", lay)
    assert np.allclose(back.X, panel.X.T)


# ---------------------------------------------------------------------------
# noise estimation


def test_known_passthrough():
    ns = NoiseSpec.iid_columns(10, 3, 1.0)
    panel = generate_panel(generate_truth(SignalSpec(0, ()), ns, 0.0, 0), 0)
    assert estimate_noise_spec(panel, "known", ns) is ns


def test_residual_plugin_recovers_variance():
    ests = []
    for seed in range(5):
        ns = NoiseSpec.iid_columns(2000, 4, 2.0)
        panel = generate_panel(generate_truth(SignalSpec(0, ()), ns, 0.0, seed), seed)
        ests.append(estimate_noise_spec(panel).sigma ** 2)
        d = np.diff(panel.X, axis=0)
        assert abs(ests[-1] - np.mean(d.var(axis=0, ddof=1)) / 2) < 1e-12
    assert abs(np.mean(ests) - 4.0) < 0.4


def test_residual_plugin_constant_columns():
    panel = PanelObservation(np.tile([1.0, 2.0, 3.0], (6, 1)), np.zeros(6), np.zeros(3), 0.0)
    assert estimate_noise_spec(panel).sigma == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_generated_panel_dimensions(p_e, seed):
    truth = _truth(n=8, p=3, p_e=p_e, seed=seed % 1000)
    panel = generate_panel(truth, seed)
    assert panel.X.shape == truth.A.shape and panel.p_e == p_e
    assert panel.treated_series.shape == (9, p_e)
