import itertools
import math

import numpy as np
import pytest
from scipy.integrate import quad

from voidframe.asmblr import (
    AsmblrConfig,
    AsmblrError,
    Clique,
    CliqueSamplingError,
    _Chain,
    build_assignment_space,
    count_assignments,
    folded_likelihood,
    p_within_radial,
    p_within_vw,
    pair_separation_prior,
    procrustes_align,
    run_asmblr,
    sample_cliques,
    separation_prior,
    validate_grid,
    validate_kfold,
)
from voidframe.validation import check_random_state


def make_cliques(point_sets, sigma=1.0, group=0):
    out = []
    for i, pts in enumerate(point_sets):
        pts = np.asarray(pts, float)
        out.append(Clique(members=tuple(range(i * len(pts), (i + 1) * len(pts))),
                          positions=pts, group=group, sigma=sigma))
    return out


class TestSampleCliques:
    def test_single_possible_clique(self):
        xy = np.arange(6, dtype=float).reshape(3, 2)
        labels = np.array([0, 0, 0])
        cliques = sample_cliques(xy, labels, k=3, n_samples=10, seed=0)
        assert len(cliques) == 1
        assert cliques[0].members == (0, 1, 2)

    def test_unassigned_dropped_and_small_groups_skipped(self):
        xy = np.zeros((6, 2))
        labels = np.array([-1, -1, 1, 1, 2, 2])
        cliques = sample_cliques(xy, labels, k=2, n_samples=100, seed=0)
        groups = {c.group for c in cliques}
        assert groups == {1, 2}

    def test_no_group_large_enough(self):
        with pytest.raises(CliqueSamplingError):
            sample_cliques(np.zeros((4, 2)), np.array([0, 0, 1, 1]), k=3, n_samples=5)

    def test_exhaustion_returns_all_distinct(self):
        xy = np.random.default_rng(0).random((5, 2))
        labels = np.zeros(5, dtype=int)
        cliques = sample_cliques(xy, labels, k=3, n_samples=500, seed=1)
        assert len(cliques) == math.comb(5, 3)
        assert len({c.members for c in cliques}) == len(cliques)

    def test_proposal_frequency_oracle(self):
        # two groups of sizes 4 and 5, k = 2: per-proposal probability of a
        # specific clique in group j is 1 / (2 * C(|G_j|, 2))
        rng = check_random_state(3)
        xy = np.zeros((9, 2))
        labels = np.array([0] * 4 + [1] * 5)
        groups = {0: np.arange(4), 1: np.arange(4, 9)}
        n_prop = 200_000
        counts = {}
        for _ in range(n_prop):
            g = int(rng.integers(2))
            pair = tuple(sorted(rng.choice(groups[g], size=2, replace=False)))
            counts[pair] = counts.get(pair, 0) + 1
        for g, size in ((0, 4), (1, 5)):
            expect = 1.0 / (2 * math.comb(size, 2))
            se = math.sqrt(expect * (1 - expect) / n_prop)
            for pair in itertools.combinations(groups[g], 2):
                freq = counts.get(tuple(int(v) for v in pair), 0) / n_prop
                assert abs(freq - expect) < 4 * se


class TestClosedForms:
    @pytest.mark.parametrize("k,expected", [
        (2, 0.509), (3, 0.339), (4, 0.212), (5, 0.121),
        (6, 0.061), (7, 0.024), (8, 0.006),
    ])
    def test_radial_purity_table(self, k, expected):
        assert p_within_radial(k, 8, 3) == pytest.approx(expected, abs=5e-4)

    def test_radial_no_contamination(self):
        for k in range(9):
            assert p_within_radial(k, 8, 0) == 1.0

    def test_radial_k_exceeds_s(self):
        assert p_within_radial(9, 8, 3) == 0.0

    def test_vw_guided(self):
        assert p_within_vw(3, 0.9) == pytest.approx(0.729)
        assert p_within_vw(8, 0.9) == pytest.approx(0.9**8)

    def test_count_assignments_known_value(self):
        assert count_assignments(4, 3) == 73

    def test_count_assignments_minimal(self):
        assert count_assignments(1, 1) == 2

    def test_count_matches_bruteforce(self):
        for n in range(1, 7):
            for m in range(1, min(n, 4) + 1):
                brute = 0
                for vec in itertools.product(range(n + 1), repeat=m):
                    nz = [v for v in vec if v > 0]
                    if len(nz) == len(set(nz)):
                        brute += 1
                assert count_assignments(n, m) == brute, (n, m)

    def test_count_rejects_m_gt_n(self):
        with pytest.raises(ValueError):
            count_assignments(3, 4)


class TestPriorsAndLikelihoods:
    def test_separation_prior_boundaries(self):
        rho = 30.0
        assert separation_prior(0.0, rho) == 0.0
        assert separation_prior(2 * rho, rho) == pytest.approx(0.0, abs=1e-12)

    def test_separation_prior_normalised(self):
        rho = 25.0
        val, err = quad(lambda r: separation_prior(r, rho), 0, 2 * rho, limit=200)
        assert abs(val - 1.0) < 1e-6

    def test_pair_prior_clutter_uniform(self):
        r_max = 100.0
        assert pair_separation_prior(40.0, 0, 3, r_max) == pytest.approx(1 / r_max)
        assert pair_separation_prior(150.0, 0, 3, r_max) == 0.0

    def test_folded_at_zero(self):
        sigma = 1.3
        assert folded_likelihood(0.0, 0.0, sigma) == pytest.approx(
            2.0 / math.sqrt(2 * math.pi * sigma**2))

    def test_folded_is_sum_of_gaussians(self):
        s, r, sigma = 2.7, 1.1, 0.8
        phi = lambda x: math.exp(-x**2 / (2 * sigma**2)) / math.sqrt(2 * math.pi * sigma**2)
        assert folded_likelihood(s, r, sigma) == pytest.approx(phi(s - r) + phi(s + r))

    def test_folded_normalised(self):
        val, err = quad(lambda s: folded_likelihood(s, 3.0, 1.0), 0, np.inf, limit=200)
        assert abs(val - 1.0) < 1e-6


class TestAssignmentSpace:
    def test_space_size_nup_case(self):
        space = build_assignment_space(8, 3)
        # pure vectors (8*7*6) plus the all-clutter vector
        assert space.n_vectors == 8 * 7 * 6 + 1

    def test_m2_keeps_pairs(self):
        space = build_assignment_space(2, 2)
        assert space.n_vectors == 3  # (1,2), (2,1), all-clutter

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    @pytest.mark.parametrize("n,m", [(4, 3), (8, 3), (6, 4), (9, 5), (2, 2)])
    def test_prior_sums_to_one(self, p, n, m):
        space = build_assignment_space(n, m)
        total = np.exp(space.log_prior(p)).sum()
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_pair_index_consistency(self):
        # m=5 keeps vectors with up to two clutter entries
        space = build_assignment_space(5, 5)
        row = np.flatnonzero((space.vectors == [1, 0, 3, 0, 5]).all(axis=1))[0]
        idx = space.pair_index[row]
        iu, ju = np.triu_indices(5, k=1)
        vec = space.vectors[row]
        for p, (i, j) in enumerate(zip(iu, ju)):
            if vec[i] > 0 and vec[j] > 0:
                assert idx[p] < space.n_model_pairs
            else:
                assert idx[p] == space.n_model_pairs

    def test_collapsed_vectors_excluded(self):
        space = build_assignment_space(4, 3)
        # for m=3 any clutter entry collapses, so only pure vectors remain
        assert np.all((space.clutter_counts == 0) | (space.clutter_counts == 3))


class TestSampler:
    def test_two_vertex_separation_recovery(self):
        d_true = 40.0
        rng = np.random.default_rng(0)
        sets = []
        for _ in range(200):
            ang = rng.uniform(0, 2 * np.pi)
            base = rng.uniform(-5, 5, 2)
            p1 = base
            p2 = base + d_true * np.array([np.cos(ang), np.sin(ang)])
            sets.append(np.vstack([p1, p2]))
        cliques = make_cliques(sets, sigma=0.5)
        cfg = AsmblrConfig(n_vertices=2, r_max=120.0, iters=3000, n_chains=2,
                           burn_frac=0.5, thin=5, sigma_structural=0.5, seed=1)
        res = run_asmblr(cliques, cfg)
        d_post = np.linalg.norm(res.vertex_means[0] - res.vertex_means[1])
        assert abs(d_post - d_true) < 2.0
        assert res.p_clutter_mean < 0.1

    def test_pure_clutter_concentrates_high(self):
        rng = np.random.default_rng(1)
        sets = [rng.uniform(-50, 50, size=(3, 2)) for _ in range(120)]
        cliques = make_cliques(sets, sigma=0.5)
        cfg = AsmblrConfig(n_vertices=4, r_max=300.0, iters=2500, n_chains=2,
                           burn_frac=0.5, sigma_structural=0.5, seed=2)
        res = run_asmblr(cliques, cfg)
        assert res.p_clutter_mean > 0.5

    def test_equivariance_under_rigid_motion(self):
        rng = np.random.default_rng(2)
        sets = []
        for _ in range(60):
            tri = np.array([[0.0, 0.0], [30.0, 0.0], [15.0, 25.0]])
            tri = tri + rng.normal(0, 0.5, tri.shape)
            sets.append(tri)
        ang = 1.1
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        moved = [s @ rot.T + np.array([500.0, -200.0]) for s in sets]
        c1 = make_cliques(sets, sigma=0.5)
        c2 = make_cliques(moved, sigma=0.5)
        cfg = AsmblrConfig(n_vertices=3, r_max=120.0, iters=800, n_chains=1,
                           burn_frac=0.5, sigma_structural=0.5, seed=3)
        r1 = run_asmblr(c1, cfg)
        r2 = run_asmblr(c2, cfg)
        # identical separation data implies identical chains
        d1 = np.sort(np.linalg.norm(
            r1.vertex_means[:, None] - r1.vertex_means[None, :], axis=-1).ravel())
        d2 = np.sort(np.linalg.norm(
            r2.vertex_means[:, None] - r2.vertex_means[None, :], axis=-1).ravel())
        assert np.allclose(d1, d2)

    def test_topk_matches_enumeration(self):
        rng = np.random.default_rng(4)
        sets = [rng.normal(0, 1, (3, 2)) + [[0, 0], [20, 0], [10, 15]]
                for _ in range(5)]
        cliques = make_cliques(sets, sigma=1.0)
        cfg = AsmblrConfig(n_vertices=4, r_max=150.0, iters=10, n_chains=1, seed=5)
        space = build_assignment_space(4, 3)
        chain = _Chain(cliques, space, cfg, check_random_state(6))
        logw = chain._vector_logweights(np.array([0]))[0]
        probs = np.exp(logw - logw.max())
        probs /= probs.sum()

        draws_exact, draws_topk = [], []
        n_rep = 4000
        for _ in range(n_rep):
            g = -np.log(-np.log(chain.rng.random(len(logw)) + 1e-300) + 1e-300)
            draws_exact.append(int(np.argmax(logw + g)))
        chain.cfg.enumeration_cap = 0  # force the truncated path
        chain.cfg.top_k = space.n_vectors  # full coverage: must match exact Gibbs
        for _ in range(n_rep):
            chain._topk_assignments(np.array([0]), logw[None, :])
            draws_topk.append(int(chain.k_idx[0]))
        f_exact = np.bincount(draws_exact, minlength=len(logw)) / n_rep
        f_topk = np.bincount(draws_topk, minlength=len(logw)) / n_rep
        top = np.argsort(-probs)[:5]
        for t in top:
            se = math.sqrt(probs[t] * (1 - probs[t]) / n_rep)
            assert abs(f_exact[t] - probs[t]) < 5 * se + 1e-3
            assert abs(f_topk[t] - probs[t]) < 5 * se + 1e-3

    def test_preconditions(self):
        cliques = make_cliques([np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 5.0]])])
        with pytest.raises(AsmblrError, match="r_max"):
            run_asmblr(cliques, AsmblrConfig(n_vertices=4, r_max=5.0, iters=10))
        with pytest.raises(AsmblrError, match="exceeds model size"):
            run_asmblr(cliques, AsmblrConfig(n_vertices=2, r_max=100.0, iters=10))


class TestProcrustes:
    def test_alignment_recovers_rotation_translation_permutation(self):
        rng = np.random.default_rng(5)
        target = rng.uniform(-30, 30, (6, 2))
        ang = 0.7
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        perm = rng.permutation(6)
        x = (target @ rot.T + [12.0, -4.0])[perm]
        aligned = procrustes_align(x, target)
        assert np.allclose(aligned, target, atol=1e-8)


class TestValidation:
    def ring(self, k=8, radius=50.0, theta=0.3):
        ang = theta + 2 * np.pi * np.arange(k) / k
        return 50.0 * 0 + np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])

    def test_perfect_ring(self):
        means = self.ring()
        covs = np.tile(np.eye(2), (8, 1, 1))
        rep = validate_kfold(means, covs, n_perm=2000, seed=0)
        assert np.allclose(rep.d2, 0.0, atol=1e-12)
        assert np.allclose(rep.p_values, 1.0)
        assert rep.fisher_f == pytest.approx(0.0, abs=1e-9)
        assert rep.p_fisher == pytest.approx(1.0)
        assert rep.p_perm < 0.05
        assert rep.tier == "Strongly Supported"
        assert rep.fitted["radius"] == pytest.approx(50.0)

    def test_p_perm_zero_displayed_as_bound(self):
        means = self.ring()
        covs = np.tile(0.25 * np.eye(2), (8, 1, 1))
        rep = validate_kfold(means, covs, n_perm=500, seed=1)
        if rep.p_perm == 0:
            assert rep.p_perm_display() == "< 0.002"

    def test_bonferroni_monotone_in_alpha(self):
        rng = np.random.default_rng(6)
        means = self.ring() + rng.normal(0, 3.0, (8, 2))
        covs = np.tile(4.0 * np.eye(2), (8, 1, 1))
        passes = {}
        for alpha in (0.2, 0.05, 0.01):
            rep = validate_kfold(means, covs, n_perm=300, alpha=alpha, seed=2)
            passes[alpha] = set(np.flatnonzero(rep.passes))
        # smaller alpha -> easier to pass -> superset
        assert passes[0.2] <= passes[0.05] <= passes[0.01]

    def test_grid_exact_recovery(self):
        offs = np.array([(i, j) for j in (1, 0, -1) for i in (-1, 0, 1)], dtype=float)
        means = offs * 25.0 + [400.0, 300.0]
        covs = np.tile(np.eye(2), (9, 1, 1))
        rep = validate_grid(means, covs, spacing_hypothesis=25.0, n_perm=1000, seed=3)
        assert rep.fitted["spacing"] == pytest.approx(25.0, rel=1e-3)
        assert rep.fitted["spacing_rel_error"] < 1e-3
        assert rep.n_pass == 9
        assert rep.p_perm < 0.05

    def test_grid_rotation_recovered(self):
        offs = np.array([(i, j) for j in (1, 0, -1) for i in (-1, 0, 1)], dtype=float)
        theta = 0.35
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        means = (offs * 25.0) @ rot.T
        covs = np.tile(np.eye(2), (9, 1, 1))
        rep = validate_grid(means, covs, n_perm=500, seed=4)
        recovered = rep.fitted["theta"] % (np.pi / 2)
        assert min(abs(recovered - theta), abs(recovered - theta + np.pi / 2),
                   abs(recovered - theta - np.pi / 2)) < 0.01

    def test_wrong_vertex_count(self):
        with pytest.raises(ValueError):
            validate_grid(np.zeros((8, 2)), np.tile(np.eye(2), (8, 1, 1)))
