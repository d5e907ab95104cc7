import math

import numpy as np
import pytest

from dronpe import selection, simulators
from dronpe.errors import DomainError
from dronpe.objectives import TrainConfig
from dronpe.selection import EpsSearchConfig, conservative_criterion, gp_propose, select_epsilon

BOUNDS = (math.log(0.001), math.log(10.0))
MID = 0.5 * (BOUNDS[0] + BOUNDS[1])


def quadratic(center):
    return lambda le: (le - center) ** 2


# --------------------------------------------------------------------------
# conservative criterion
# --------------------------------------------------------------------------

@pytest.mark.parametrize("klcal, eps, gamma, expected", [
    (0.3, 0.5, 0.0, 0.3),
    (0.3, 0.001, 5.0, 0.3),
    (0.5, 10.0, 0.8, -0.3),
])
def test_conservative_criterion_examples(klcal, eps, gamma, expected):
    assert conservative_criterion(klcal, eps, gamma, BOUNDS) == pytest.approx(expected, abs=1e-12)


def test_conservative_criterion_is_linear_in_log_eps():
    val = conservative_criterion(0.0, math.exp(MID), 1.0, BOUNDS)
    assert val == pytest.approx(-0.5, abs=1e-12)


@pytest.mark.parametrize("eps", [1e-4, 11.0, 0.0, -1.0])
def test_conservative_criterion_out_of_bounds(eps):
    with pytest.raises(DomainError):
        conservative_criterion(0.1, eps, 1.0, BOUNDS)


# --------------------------------------------------------------------------
# GP expected improvement
# --------------------------------------------------------------------------

def test_expected_improvement_closed_form():
    ei = selection.expected_improvement(np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.0, 0.0]), 1.5)
    # 1.5 Phi(1.5) + phi(1.5)
    assert ei[0] == pytest.approx(1.5 * 0.9331927987311419 + 0.12951759566589174, abs=1e-12)
    assert ei[1] == pytest.approx(0.5)
    assert ei[2] == 0.0


def test_single_observation_at_midpoint_goes_to_an_endpoint():
    p = gp_propose([(MID, 1.0)], BOUNDS)
    assert p in (pytest.approx(BOUNDS[0]), pytest.approx(BOUNDS[1]))


def test_equal_observations_go_to_farthest_point():
    p = gp_propose([(BOUNDS[0], 0.5), (BOUNDS[1], 0.5)], BOUNDS)
    grid = np.linspace(*BOUNDS, selection.GRID_POINTS)
    farthest = grid[np.argmax(np.minimum(np.abs(grid - BOUNDS[0]), np.abs(grid - BOUNDS[1])))]
    assert p == pytest.approx(farthest)


def test_convex_quadratic_proposal_lands_in_bracket():
    f = quadratic(math.log(0.1))
    pts = [MID, BOUNDS[0], BOUNDS[1], -1.0, -4.0]
    obs = [(p, f(p)) for p in pts]
    p = gp_propose(obs, BOUNDS)
    # the two observations around the minimum at ln 0.1 = -2.30
    assert -4.0 <= p <= -1.0


def test_proposals_skip_evaluated_grid_points():
    grid = np.linspace(*BOUNDS, selection.GRID_POINTS)
    obs = [(g, 0.0) for g in grid[:-1]]
    assert gp_propose(obs, BOUNDS) == pytest.approx(grid[-1])


def test_fallback_on_exhausted_grid_is_flagged():
    grid = np.linspace(*BOUNDS, selection.GRID_POINTS)
    p, info = gp_propose([(g, float(i % 3)) for i, g in enumerate(grid)], BOUNDS, np.random.default_rng(0),
                         return_info=True)
    assert info["fallback"]
    assert BOUNDS[0] <= p <= BOUNDS[1]


def test_fallback_without_finite_values():
    p, info = gp_propose([(MID, math.inf)], BOUNDS, np.random.default_rng(0), return_info=True)
    assert info["fallback"]
    assert BOUNDS[0] <= p <= BOUNDS[1]


def test_fallback_on_degenerate_covariance(monkeypatch):
    def boom(*args, **kwargs):
        raise np.linalg.LinAlgError("not positive definite")

    monkeypatch.setattr(selection, "_log_marginal", boom)
    p, info = gp_propose([(MID, 1.0), (0.0, 2.0)], BOUNDS, np.random.default_rng(0), return_info=True)
    assert info["fallback"]
    assert BOUNDS[0] <= p <= BOUNDS[1]


def test_infinite_values_treated_as_worst():
    a = gp_propose([(MID, 1.0), (BOUNDS[0], math.inf), (BOUNDS[1], 3.0)], BOUNDS)
    b = gp_propose([(MID, 1.0), (BOUNDS[0], 3.0), (BOUNDS[1], 3.0)], BOUNDS)
    assert a == b


def test_gp_needs_an_observation():
    with pytest.raises(ValueError):
        gp_propose([], BOUNDS)


# --------------------------------------------------------------------------
# search loop on injected surfaces
# --------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_recovers_synthetic_minimizer(seed):
    res = select_epsilon(evaluate=quadratic(math.log(0.1)), search=EpsSearchConfig(seed=seed))
    assert abs(res.log_eps_star - math.log(0.1)) <= 0.3
    assert len(res.points) == 10


@pytest.mark.parametrize("center", [math.log(0.5), math.log(0.003), math.log(5.0)])
def test_recovers_shifted_minimizers(center):
    res = select_epsilon(evaluate=quadratic(center), search=EpsSearchConfig(seed=0))
    assert abs(res.log_eps_star - center) <= 0.3


def test_budget_one_returns_initial_point():
    calls = []

    def f(le):
        calls.append(le)
        return 1.0

    res = select_epsilon(evaluate=f, search=EpsSearchConfig(budget=1))
    assert calls == [pytest.approx(MID)]
    assert res.log_eps_star == pytest.approx(MID)


def test_conservative_large_gamma_picks_largest_evaluated():
    search = EpsSearchConfig(criterion="klcal_minus_gamma_eps", gamma=10.0, seed=0)

    def f(le):
        bounded = ((le - search.log_lo) / (search.log_hi - search.log_lo) - 0.5) ** 2
        return conservative_criterion(bounded, math.exp(le), search.gamma, search.bounds)

    res = select_epsilon(evaluate=f, search=search)
    assert res.log_eps_star == pytest.approx(max(p for p, _ in res.points))


def test_increasing_criterion_picks_smallest():
    res = select_epsilon(evaluate=lambda le: le, search=EpsSearchConfig(seed=3))
    assert res.log_eps_star == pytest.approx(min(p for p, _ in res.points))


def test_ties_go_to_smallest_eps():
    res = select_epsilon(evaluate=lambda le: 0.0, search=EpsSearchConfig(budget=4))
    assert res.log_eps_star == pytest.approx(min(p for p, _ in res.points))


def test_failed_evaluations_score_infinity():
    def f(le):
        if le > MID:
            raise FloatingPointError("diverged")
        return float("nan") if le < BOUNDS[0] + 1.0 else (le - MID) ** 2

    res = select_epsilon(evaluate=f, search=EpsSearchConfig(budget=5))
    values = dict(res.points)
    assert values[BOUNDS[1]] == math.inf
    assert values[BOUNDS[0]] == math.inf
    assert math.isfinite(res.eps_star)
    assert '"value": null' in res.to_json()


def test_search_is_deterministic():
    a = select_epsilon(evaluate=lambda le: math.sin(3 * le) + 0.1 * le, search=EpsSearchConfig(seed=4))
    b = select_epsilon(evaluate=lambda le: math.sin(3 * le) + 0.1 * le, search=EpsSearchConfig(seed=4))
    assert a.to_json() == b.to_json()


def test_result_is_argmin_of_trace():
    res = select_epsilon(evaluate=lambda le: math.cos(le), search=EpsSearchConfig(seed=1))
    assert min(v for _, v in res.points) == dict(res.points)[res.log_eps_star]


@pytest.mark.parametrize("kwargs", [dict(log_lo=1.0, log_hi=0.0), dict(budget=0), dict(criterion="auc"),
                                    dict(gamma=-1.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EpsSearchConfig(**kwargs)


def test_split_is_disjoint_and_covering():
    tr, va = selection.split_indices(1000, 0.1, 3)
    assert len(va) == 100
    assert np.intersect1d(tr, va).size == 0
    assert np.array_equal(np.union1d(tr, va), np.arange(1000))
    with pytest.raises(ValueError):
        selection.split_indices(1, 0.1, 0)


# --------------------------------------------------------------------------
# search loop with real training
# --------------------------------------------------------------------------

SMALL_FLOW = dict(kind="maf", hidden_width=8)
SHORT = TrainConfig(epochs=3, batch_size=64, seed=0)


@pytest.fixture(scope="module")
def small_data():
    return simulators.generate_dataset("gaussian_linear", 200, 0)


@pytest.mark.parametrize("criterion", ["klcal", "nlpd", "abs_miscoverage", "klcal_minus_gamma_eps"])
def test_training_search_runs(small_data, criterion):
    search = EpsSearchConfig(budget=3, criterion=criterion, gamma=0.5, M=100, seed=0)
    res = select_epsilon(small_data, SMALL_FLOW, SHORT, search)
    assert len(res.points) == 3
    assert all(math.isfinite(v) for _, v in res.points)
    assert np.intersect1d(res.train_index, res.val_index).size == 0
    assert res.model is not None and res.trace is not None


def test_training_search_is_deterministic(small_data):
    search = EpsSearchConfig(budget=4, criterion="nlpd", seed=2)
    a = select_epsilon(small_data, SMALL_FLOW, SHORT, search)
    b = select_epsilon(small_data, SMALL_FLOW, SHORT, search)
    assert a.to_json() == b.to_json()
    assert np.array_equal(a.model.params, b.model.params)


def test_distance_summary_search(small_data):
    search = EpsSearchConfig(budget=2, criterion="klcal", summary="distance", M=100, seed=0)
    res = select_epsilon(small_data, SMALL_FLOW, SHORT, search, theta0=np.zeros(1), refit=False)
    assert res.model is None
    assert all(math.isfinite(v) for _, v in res.points)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_aborted_training_scores_infinity(small_data):
    bad = TrainConfig(epochs=3, batch_size=64, seed=0, lr=1e12)
    search = EpsSearchConfig(budget=2, criterion="nlpd", seed=0)
    res = select_epsilon(small_data, SMALL_FLOW, bad, search, refit=False)
    assert [v for _, v in res.points] == [math.inf, math.inf]
