import math

import numpy as np
import pytest

from voidframe.centres import (
    AdaptiveScale,
    CentreSampler,
    GibbsCentres,
    GibbsState,
    MoveProbs,
    assignment_probabilities,
    gelman_rubin,
    log_posterior,
    log_prior_k,
    radial_energy,
    split_jacobian,
)
from voidframe.datasets import EmitterSet
from voidframe.geometry import Window
from voidframe.intensity import IntensityField
from voidframe.voidwalker import BirthProposal, VoidPriors

WIN = Window(0, 0, 1000, 1000)


def flat_priors(lambda_c=3.0, mu_r=50.0, sigma_r=5.0, centres=()):
    field = IntensityField(window=WIN, nx=16, ny=16,
                           eta_mean=np.full((16, 16), -9.0),
                           eta_var=np.full((16, 16), 1e-12), n_draws=4, draw_seed=0)
    centres = np.asarray(centres, float).reshape(-1, 2)
    birth = BirthProposal(field, centres, bandwidth=mu_r / 2,
                          w_lambda=0.5 if len(centres) else 1.0)
    return VoidPriors(lambda_c=lambda_c, mu_r=mu_r, sigma_r=sigma_r,
                      active_centres=centres, birth=birth)


def ring(centre, radius=50.0, n=8, phase=0.0):
    ang = phase + np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.asarray(centre) + radius * np.column_stack([np.cos(ang), np.sin(ang)])


class TestLogPosterior:
    def test_k_zero_prior_term(self):
        priors = flat_priors(lambda_c=4.0)
        state = GibbsState(ids=[], positions=np.empty((0, 2)), radius=50.0, next_id=0)
        lp = log_posterior(state, np.empty((0, 2)), priors, sigma_r=3.0,
                           r_bounds=(10, 100))
        # radius at the prior mean: only the Poisson mass at k=0 remains
        assert lp == pytest.approx(-4.0)
        assert log_prior_k(0, 4.0, 10) == pytest.approx(-4.0)

    def test_emitter_on_ring_zero_energy(self):
        c = np.array([[500.0, 500.0]])
        em = np.array([[550.0, 500.0]])
        assert radial_energy(c, em, radius=50.0, sigma_r=2.0) == 0.0

    def test_hard_core_violation_is_minus_inf(self):
        priors = flat_priors()
        state = GibbsState(ids=[0, 1],
                           positions=np.array([[300.0, 300.0], [330.0, 300.0]]),
                           radius=50.0, next_id=2)
        lp = log_posterior(state, np.empty((0, 2)), priors, sigma_r=3.0,
                           r_bounds=(10, 100))
        assert lp == -np.inf


class TestMoves:
    def sampler(self, emitters, centres, seed=0, move_probs=None):
        priors = flat_priors(centres=centres)
        em = np.asarray(emitters, float).reshape(-1, 2)
        return CentreSampler(em, WIN, priors, sigma_r=3.0, r_bounds=(10, 100),
                             move_probs=move_probs or MoveProbs(),
                             rng=np.random.default_rng(seed))

    def test_death_on_empty_state_rejected(self):
        s = self.sampler(np.empty((0, 2)), centres=[[500.0, 500.0]])
        s.state = GibbsState(ids=[], positions=np.empty((0, 2)), radius=50.0, next_id=0)
        s.logp = s._logp_of(s.state)
        assert s.move_death() is False

    def test_split_jacobian_factor(self):
        assert split_jacobian(2.0) == pytest.approx(8.0)
        assert 1.0 / split_jacobian(2.0) == pytest.approx(1.0 / 8.0)

    def test_persistent_id_bookkeeping(self):
        em = np.vstack([ring([300, 300]), ring([700, 700])])
        s = self.sampler(em, centres=[[300.0, 300.0], [700.0, 700.0]], seed=1)
        for _ in range(4000):
            before = set(s.state.ids)
            accepted, tag = s.step()
            after = set(s.state.ids)
            if not accepted or tag in ("shift", "radius"):
                assert after == before
            elif tag == "birth":
                assert len(after - before) == 1 and len(before - after) == 0
            elif tag == "death":
                assert len(before - after) == 1 and len(after - before) == 0
            elif tag == "split":
                assert len(before - after) == 1 and len(after - before) == 2
            elif tag == "merge":
                assert len(before - after) == 2 and len(after - before) == 1

    def test_hard_core_never_violated(self):
        em = np.vstack([ring([300, 300]), ring([700, 700])])
        s = self.sampler(em, centres=[[300.0, 300.0], [700.0, 700.0]], seed=2)
        for _ in range(2000):
            s.step()
            assert s.state.hard_core_ok()
            assert 10.0 <= s.state.radius <= 100.0


class TestAdaptation:
    def test_update_follows_formula(self):
        a = AdaptiveScale(scale=1.0, target=0.234, alpha=0.7, beta=0.7)
        rng = np.random.default_rng(0)
        for _ in range(50):
            old_scale = a.scale
            old_t, old_ahat = a.t, a.a_hat
            accepted = bool(rng.random() < 0.3)
            a.update(accepted)
            t = old_t + 1
            rho = t**-0.7
            a_hat = (1 - rho) * old_ahat + rho * accepted
            gamma = t**-0.7
            expected = np.clip(old_scale * math.exp(gamma * (a_hat - 0.234)), 1e-3, 1e3)
            assert a.a_hat == pytest.approx(a_hat)
            assert a.scale == pytest.approx(float(expected))

    def test_target_acceptance_keeps_scale(self):
        # exact fixed point: estimate equal to the target leaves the scale alone
        a = AdaptiveScale(scale=2.0, target=1.0)
        a.a_hat = 1.0
        for _ in range(10):
            a.update(True)
            assert a.a_hat == pytest.approx(1.0)
            assert a.scale == pytest.approx(2.0)

    def test_all_accept_increases_until_clamp(self):
        a = AdaptiveScale(scale=1.0, target=0.234, bounds=(1e-3, 4.0))
        prev = a.scale
        hit_clamp = False
        for _ in range(2000):
            a.update(True)
            assert a.scale >= prev - 1e-12
            prev = a.scale
            if a.scale == 4.0:
                hit_clamp = True
        assert hit_clamp

    def test_step_size_nonincreasing(self):
        a = AdaptiveScale(scale=1.0, target=0.234, bounds=(1e-6, 1e12))
        deltas = []
        last = math.log(a.scale)
        for _ in range(200):
            a.update(True)
            now = math.log(a.scale)
            deltas.append(now - last)
            last = now
        # once a_hat saturates near 1, increments shrink with t
        tail = deltas[20:]
        assert all(tail[i + 1] <= tail[i] + 1e-12 for i in range(len(tail) - 1))

    def test_dampen_halves_counts(self):
        a = AdaptiveScale(scale=1.0, target=0.234)
        for _ in range(100):
            a.update(True)
        t_before, ahat_before = a.t, a.a_hat
        a.dampen()
        assert a.t == t_before // 2
        assert a.a_hat == pytest.approx(0.5 * (ahat_before + 0.234))


class TestGelmanRubin:
    def test_identical_chains(self):
        x = np.tile(np.linspace(0, 1, 50), (3, 1))
        assert gelman_rubin(x) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_chains_flag(self):
        a = np.zeros(100)
        b = np.full(100, 1000.0)
        assert gelman_rubin(np.vstack([a + np.random.default_rng(0).normal(0, 1e-3, 100),
                                       b + np.random.default_rng(1).normal(0, 1e-3, 100)])) > 10

    def test_constant_identical_chains(self):
        assert gelman_rubin(np.ones((3, 20))) == 1.0

    def test_iid_normal_near_one(self):
        rng = np.random.default_rng(5)
        chains = rng.standard_normal((3, 10_000))
        assert gelman_rubin(chains) < 1.01

    def test_preconditions(self):
        with pytest.raises(ValueError):
            gelman_rubin(np.ones((1, 100)))
        with pytest.raises(ValueError):
            gelman_rubin(np.ones((3, 5)))


class TestAssignments:
    def test_equidistant_split(self):
        means = np.array([[400.0, 500.0], [600.0, 500.0]])
        covs = np.tile(4.0 * np.eye(2), (2, 1, 1))
        probs = assignment_probabilities(np.array([[500.0, 500.0]]), means, covs,
                                         sigma_loc=1.0, mean_r2=2500.0)
        assert probs[0, 0] == pytest.approx(0.5, abs=1e-9)
        assert probs[0, 1] == pytest.approx(0.5, abs=1e-9)

    def test_single_id_prob_one(self):
        means = np.array([[400.0, 500.0]])
        covs = np.tile(4.0 * np.eye(2), (1, 1, 1))
        probs = assignment_probabilities(np.array([[440.0, 500.0], [100.0, 100.0]]),
                                         means, covs, sigma_loc=1.0, mean_r2=2500.0)
        assert np.allclose(probs, 1.0)

    def test_rows_renormalise(self):
        rng = np.random.default_rng(7)
        means = rng.uniform(100, 900, size=(30, 2))
        covs = np.tile(9.0 * np.eye(2), (30, 1, 1))
        em = rng.uniform(100, 900, size=(50, 2))
        probs = assignment_probabilities(em, means, covs, sigma_loc=1.0, mean_r2=2500.0)
        assert np.allclose(probs.sum(axis=1), 1.0)


class TestSingleRingRecovery:
    def test_posterior_mode_k1_and_assignments(self):
        em = ring([500.0, 500.0], radius=50.0, phase=0.35)
        priors = flat_priors(lambda_c=1.0, mu_r=48.0, sigma_r=4.0,
                             centres=[[505.0, 495.0]])
        model = GibbsCentres(n_chains=2, n_iters=4000, burn_frac=0.5,
                             sigma_loc=1.0, r_bounds=(20, 80), seed=3)
        model.fit(EmitterSet(xy=em, cov=np.tile(np.eye(2), (8, 1, 1))), priors,
                  window=WIN)
        res = model.result_
        sel = res.chains[res.selected_chain]
        k_mode = int(np.bincount(sel.k_trace).argmax())
        assert k_mode == 1
        # all emitters share the dominant id with high confidence
        probs = [res.assignments.row_probs(n) for n in range(8)]
        top = [ids[np.argmax(w)] for ids, w in probs]
        assert len(set(top)) == 1
        assert all(w.max() > 0.99 for _, w in probs)
        assert abs(res.r_mean - 50.0) / 50.0 < 0.1


def test_lattice_detailed_balance():
    """Empirical stationary law of a lattice-restricted shift sampler matches
    the exactly enumerated posterior (total variation < 0.05)."""
    em = ring([500.0, 500.0], radius=50.0, n=3, phase=0.2)
    priors = flat_priors(lambda_c=1.0, mu_r=50.0, sigma_r=5.0)
    sigma_r = 25.0
    lattice = np.array([[460.0 + 20.0 * i, 460.0 + 20.0 * j]
                        for i in range(5) for j in range(5)])
    logp = np.array([
        log_posterior(GibbsState(ids=[0], positions=p[None, :], radius=50.0, next_id=1),
                      em, priors, sigma_r, (10, 100))
        for p in lattice
    ])
    target = np.exp(logp - logp.max())
    target /= target.sum()

    rng = np.random.default_rng(11)
    n_steps = 1_000_000
    proposals = rng.integers(0, 25, size=n_steps)
    log_u = np.log(rng.random(n_steps))
    visits = np.zeros(25)
    cur = 0
    for t in range(n_steps):
        nxt = proposals[t]
        if log_u[t] < logp[nxt] - logp[cur]:
            cur = nxt
        visits[cur] += 1
    emp = visits / visits.sum()
    tv = 0.5 * np.abs(emp - target).sum()
    assert tv < 0.05
