import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppdo.adversary import (
    AdversaryView,
    byte_entropy,
    count_gradient_dof,
    count_state_dof,
    eavesdropper_capture,
    run_estimation_trials,
    sample_factor_sequences,
    solve_trial,
    state_patterns,
    trial_residual,
)
from ppdo.admm import RunConfig, run_plaintext
from ppdo.codec import CodecConfig
from ppdo.presets import load_preset
from ppdo.protocol import run_encrypted


def test_state_dof_examples():
    assert count_state_dof(3, 1) == (4, 8)
    assert count_state_dof(0, 2) == (2, 3)
    assert [count_state_dof(k, 2).gap for k in range(5)] == [1, 2, 3, 4, 5]


def test_gradient_dof_examples():
    # 3KD + D + 1 with K=5, D=1
    assert count_gradient_dof(5, 1, True) == (5, 17)
    assert count_gradient_dof(1, 3, True) == (3, 13)
    multi = count_gradient_dof(4, 2, True)
    single = count_gradient_dof(4, 2, False)
    assert not multi.optimum_gradient_identifiable
    assert single.optimum_gradient_identifiable
    assert single.equations == multi.equations and single.unknowns < multi.unknowns


@given(st.integers(0, 200), st.integers(1, 10))
def test_state_system_always_underdetermined(K, D):
    eq, unk = count_state_dof(K, D)
    assert eq == (K + 1) * D and unk - eq == K + 1


@given(st.integers(1, 200), st.integers(1, 10), st.booleans())
def test_gradient_system_always_underdetermined(K, D, other):
    eq, unk = count_gradient_dof(K, D, other)
    assert eq == K * D and unk > eq
    if other:
        assert unk == 3 * K * D + D + 1


def test_dof_preconditions():
    with pytest.raises(ValueError):
        count_state_dof(-1, 1)
    with pytest.raises(ValueError):
        count_gradient_dof(0, 1, True)


def test_factor_sequences_follow_public_rule():
    b = sample_factor_sequences(np.random.default_rng(0), 500, 30, 0.65)
    assert b.shape == (500, 30)
    assert np.all(b >= 0) and np.all(b < 0.65)
    assert np.all(np.diff(b, axis=1) >= 0)


@pytest.fixture(scope="module")
def study():
    p = load_preset("two-agent-adversary")
    cfg = RunConfig(seed=4, b_bar=0.65, gamma_cap=1.69, max_iterations=2000)
    trace = run_plaintext(p, cfg)
    view = AdversaryView.from_trace(trace, p, 2, 1, 0.65)
    result = run_estimation_trials(view, 2000, np.random.default_rng(0), optimum=p.optimum())
    return p, trace, view, result


def test_view_holds_only_adversary_records(study):
    _, trace, view, _ = study
    K = view.rounds
    assert view.y.shape == (K, 1) and view.x_own.shape == (K + 1, 1)
    assert np.allclose(view.x_own[:, 0], [x[1, 0] for x in trace.x[:K + 1]])
    assert not view.target_has_other_neighbor


def test_trials_satisfy_their_own_equations(study):
    _, _, view, result = study
    assert len(result.trials) == 2000
    assert max(trial_residual(view, t) for t in result.trials) <= 1e-10


def test_true_values_are_one_consistent_trial(study):
    p, trace, view, _ = study
    K = view.rounds
    b_true = np.array(trace.b[(1, 2)][:K])
    trial = solve_trial(view, b_true, trace.gamma[0])
    x_true = np.array([x[0] for x in trace.x[:K]])
    assert np.max(np.abs(trial.x_hat - x_true)) <= 1e-9 * max(1.0, np.max(np.abs(x_true)))
    # target objective is (x - 2)^2 / 2, gradient x - 2
    grad_true = np.array([p.local(1).gradient(x[0]) for x in trace.x[1:K]])
    assert np.max(np.abs(trial.grad_hat - grad_true)) <= 1e-7
    assert trial.slope == pytest.approx([1.0], abs=1e-6)
    assert trial.intercept == pytest.approx([-2.0], abs=1e-6)


def test_spread_matches_state_equality(study):
    _, trace, view, result = study
    spread = np.array(result.summary["x_hat_spread"])
    x = np.array(trace.x[:view.rounds])[:, :, 0]
    equal = x[:, 0] == x[:, 1]
    assert equal[0]  # both agents start at zero
    assert np.all(spread[~equal] > 0)
    assert np.all(spread[equal] == 0)
    assert result.summary["observed_equal_rounds"] == np.flatnonzero(equal).tolist()


def test_equal_rounds_pin_the_estimate(study):
    _, _, view, result = study
    for t in result.trials:
        assert t.x_hat[0, 0] == view.x_own[0, 0]


def test_spread_tightens_as_states_converge(study):
    _, _, _, result = study
    spread = np.array(result.summary["x_hat_spread"])
    early, late = spread[1:11].max(), spread[-10:].max()
    assert late < 1e-3 * early


def test_fitted_minimizers_at_consensus_optimum(study):
    p, _, _, result = study
    assert result.summary["max_minimizer_error"] <= 1e-6
    assert all(np.allclose(t.minimizer, p.optimum(), atol=1e-6) for t in result.trials)


def test_fitted_models_differ_across_trials(study):
    _, _, _, result = study
    lo, hi = result.summary["slope_range"]
    assert hi[0] - lo[0] > 1e-3


def test_csv_and_summary(study):
    _, _, view, result = study
    lines = result.csv_text().splitlines()
    assert lines[0] == "trial,iteration,x_hat,grad_hat"
    assert len(lines) == 1 + 2000 * view.rounds
    assert lines[1].startswith("0,0,") and lines[1].endswith(",")
    assert '"trials": 2000' in result.summary_json()


def test_study_rejects_multi_neighbor_target():
    p = load_preset("fig2")
    tr = run_plaintext(p, RunConfig(b_bar=0.65, gamma=3.0, max_iterations=20))
    view = AdversaryView.from_trace(tr, p, 2, 1, 0.65)
    assert view.target_has_other_neighbor
    with pytest.raises(ValueError):
        run_estimation_trials(view, 10)


def test_entropy_oracle():
    assert byte_entropy(bytes(range(256)) * 4) == pytest.approx(8.0)
    assert byte_entropy(b"\x00" * 100) == 0.0
    assert byte_entropy(b"") == 0.0


def test_state_patterns_cover_both_signs():
    codec = CodecConfig()
    pats = state_patterns([np.array([1.0, 0.0])], codec)
    assert pats == {(10**6).to_bytes(8, "big"), ((1 << 64) - 10**6).to_bytes(8, "big")}


def test_eavesdropper_on_encrypted_capture():
    p = load_preset("comparison")
    tr = run_encrypted(p, RunConfig(max_iterations=40, stop_window=10**6))
    stats = eavesdropper_capture(tr.capture, tr.x)
    assert stats["malformed_frames"] == 0
    assert stats["repeated_ciphertexts"] == 0
    assert stats["leaked_patterns"] == []
    assert stats["ciphertext_bytes"] >= 100 * 1024
    assert stats["byte_entropy"] >= 7.5


def test_eavesdropper_finds_plaintext_leak():
    codec = CodecConfig()
    leaky = b"junk" + (2_500_000).to_bytes(8, "big")
    stats = eavesdropper_capture([leaky], [np.array([2.5])], codec)
    assert stats["malformed_frames"] == 1
    assert stats["leaked_patterns"] == [(2_500_000).to_bytes(8, "big").hex()]
