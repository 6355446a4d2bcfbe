import numpy as np
import pytest

from seqrejectron.mdp import Policy, PolicyClass, TabularMDP, enumerate_trajectory_distribution
from seqrejectron.scenarios import make_desk_chain
from seqrejectron.stopping import compile_policies

L, R = 0, 1


def random_mdp(rng: np.random.Generator, S: int, A: int, H: int, *, sparse: bool = True) -> TabularMDP:
    p0 = rng.dirichlet(np.ones(S))
    trans = rng.dirichlet(np.full(S, 0.5), size=(H - 1, S, A))
    if sparse and S > 1:
        # zero out some transitions so supports differ between instances
        mask = rng.random(trans.shape) < 0.3
        mask[..., 0] = False
        trans = np.where(mask, 0.0, trans)
        trans /= trans.sum(axis=-1, keepdims=True)
    costs = rng.random((H, S, A))
    return TabularMDP(p0, trans, costs, float(H))


def random_deterministic(rng: np.random.Generator, S: int, A: int, H: int) -> Policy:
    return Policy.deterministic(rng.integers(0, A, size=(H, S)), A)


def random_stochastic(rng: np.random.Generator, S: int, A: int, H: int, *, zeros: bool = True) -> Policy:
    tab = rng.dirichlet(np.ones(A), size=(H, S))
    if zeros and A > 1:
        # occasional point masses exercise the zero-row branches
        pm = rng.random((H, S)) < 0.25
        idx = rng.integers(0, A, size=(H, S))
        tab = np.where(pm[..., None], np.eye(A)[idx], tab)
    return Policy.stochastic(tab)


def random_class(rng: np.random.Generator, S: int, A: int, H: int, size: int, stochastic: bool = False) -> PolicyClass:
    make = random_stochastic if stochastic else random_deterministic
    return PolicyClass(tuple(make(rng, S, A, H) for _ in range(size)))


def prefix_coupling_gap(rng) -> float:
    """Largest pointwise gap between the stopped-prefix laws of pi and the expert at min(tau, tau_dev)."""
    S, A, H = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    mdp = random_mdp(rng, S, A, H)
    pi, expert = random_deterministic(rng, S, A, H), random_deterministic(rng, S, A, H)
    validators = [random_deterministic(rng, S, A, H) for _ in range(int(rng.integers(0, 3)))]
    # min(tau, tau_dev) is the rule with the expert added as one more validator
    rule = compile_policies(pi, validators + [expert], None)
    a = enumerate_trajectory_distribution(mdp, pi, rule)
    b = enumerate_trajectory_distribution(mdp, expert, rule)
    keys = set(a.probs) | set(b.probs)
    return max(abs(a.prob(k) - b.prob(k)) for k in keys)


@pytest.fixture
def desk():
    """Reference two-state chain; N blows R-from-0 back to 0 with probability 0.5."""
    return make_desk_chain(0.5)


@pytest.fixture
def desk_policies():
    H, S = 2, 2
    right = Policy.deterministic(np.full((H, S), R), 2)
    left = Policy.deterministic(np.full((H, S), L), 2)
    r_then_l = Policy.deterministic(np.array([[R, R], [L, L]]), 2)
    return {"R": right, "L": left, "RL": r_then_l}


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
