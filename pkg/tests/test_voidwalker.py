import numpy as np
import pytest
from scipy.stats import chi2 as chi2_dist

from voidframe.datasets import EmitterSet
from voidframe.geometry import Window
from voidframe.intensity import IntensityField, fit_lgcp
from voidframe.voidwalker import (
    BirthProposal,
    SeedingError,
    Void,
    VoidWalker,
    calibrate_voids,
    derive_priors,
    grow_void,
    seed_voids,
    thin_voids,
)

WIN = Window(0, 0, 1000, 1000)


def flat_field(c=1e-4, res=25, n_draws=30):
    return IntensityField(
        window=WIN, nx=res, ny=res,
        eta_mean=np.full((res, res), np.log(c)),
        eta_var=np.full((res, res), 1e-12),
        n_draws=n_draws, draw_seed=0,
    )


def as_emitters(xy):
    xy = np.asarray(xy, float).reshape(-1, 2)
    return EmitterSet(xy=xy, cov=np.tile(np.eye(2), (len(xy), 1, 1)))


class TestSeeding:
    def test_guard_keeps_distance(self):
        field = flat_field()
        em = as_emitters([[500.0, 500.0]])
        voids = seed_voids(field, em, n_seeds=300, rho_x=10.0, seed=0)
        for v in voids:
            assert np.linalg.norm(v.centre - [500, 500]) >= 10.0

    def test_seeds_empty_by_construction(self):
        rng = np.random.default_rng(1)
        em = as_emitters(WIN.sample(rng, 40))
        field = flat_field()
        voids = seed_voids(field, em, n_seeds=200, seed=2)
        for v in voids:
            d = np.linalg.norm(em.xy - v.centre, axis=1)
            assert np.all(d >= v.radius)

    def test_uniform_seeding_on_flat_field(self):
        field = flat_field()
        voids = seed_voids(field, as_emitters(np.empty((0, 2))), n_seeds=10_000,
                           rho_x=0.0, rho_bw=0.0, seed=3)
        pos = np.array([v.centre for v in voids])
        # chi-square uniformity over 4x4 super-cells
        ix = np.clip((pos[:, 0] / 250).astype(int), 0, 3)
        iy = np.clip((pos[:, 1] / 250).astype(int), 0, 3)
        counts = np.bincount(iy * 4 + ix, minlength=16)
        expected = len(pos) / 16
        stat = float(np.sum((counts - expected) ** 2 / expected))
        assert stat < chi2_dist.ppf(0.99, df=15)

    def test_saturated_window_raises(self):
        field = flat_field()
        em = as_emitters([[500.0, 500.0]])
        with pytest.raises(SeedingError):
            seed_voids(field, em, n_seeds=10, rho_x=2000.0, seed=0)


class TestGrowth:
    def test_no_emitters_grows_to_cap(self):
        v = Void(centre=[500.0, 500.0], radius=1.0)
        grown = grow_void(v, as_emitters(np.empty((0, 2))), WIN, r_max=75.0)
        assert grown.radius == pytest.approx(75.0)

    def test_boundary_limits_growth(self):
        v = Void(centre=[30.0, 500.0], radius=1.0)
        grown = grow_void(v, as_emitters(np.empty((0, 2))), WIN, r_max=400.0, step=5.0)
        # walks inward away from the boundary until the cap or stalls; always inside
        assert grown.radius <= WIN.boundary_distance(grown.centre[None, :])[0] + 1e-9

    def test_equilateral_triangle(self):
        centre = np.array([500.0, 500.0])
        r_circ = 60.0
        ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + 0.3
        tri = centre + r_circ * np.column_stack([np.cos(ang), np.sin(ang)])
        step = 2.0
        v = Void(centre=centre + [1.0, -0.5], radius=1.0)
        grown = grow_void(v, as_emitters(tri), WIN, r_max=200.0, step=step)
        assert np.linalg.norm(grown.centre - centre) <= step + 1e-9
        assert abs(grown.radius - r_circ) <= 2 * step

    def test_grown_void_empty_and_inside(self):
        rng = np.random.default_rng(4)
        xy = WIN.sample(rng, 60)
        em = as_emitters(xy)
        field = flat_field()
        for v in seed_voids(field, em, n_seeds=50, seed=5):
            g = grow_void(v, em, WIN, r_max=75.0)
            d = np.linalg.norm(xy - g.centre, axis=1)
            assert np.all(d >= g.radius - 1e-9)
            assert WIN.boundary_distance(g.centre[None, :])[0] >= g.radius - 1e-9


class TestThinning:
    def test_duplicates_collapse(self):
        v = Void(centre=[100.0, 100.0], radius=30.0)
        dup = Void(centre=[100.0, 100.0], radius=30.0)
        assert len(thin_voids([v, dup], r_min=10.0)) == 1

    def test_distant_voids_kept(self):
        a = Void(centre=[100.0, 100.0], radius=30.0)
        b = Void(centre=[300.0, 300.0], radius=30.0)
        assert len(thin_voids([a, b], r_min=10.0)) == 2

    def test_small_voids_dropped(self):
        a = Void(centre=[100.0, 100.0], radius=5.0)
        assert thin_voids([a], r_min=10.0) == []

    def test_survivors_pairwise_non_suppressing(self):
        rng = np.random.default_rng(6)
        voids = [
            Void(centre=WIN.sample(rng, 1)[0], radius=float(rng.uniform(10, 60)))
            for _ in range(200)
        ]
        out = thin_voids(voids, r_min=12.0, nms_pos_tol=6.0, nms_rad_tol=3.0)
        again = thin_voids(out, r_min=12.0, nms_pos_tol=6.0, nms_rad_tol=3.0)
        assert len(again) == len(out)


class TestCalibration:
    def make_ring_field(self, seed=0):
        """Rings of emitters with empty interiors on a moderate background."""
        rng = np.random.default_rng(seed)
        centres = np.array([[250.0, 250.0], [750.0, 250.0], [250.0, 750.0], [750.0, 750.0],
                            [500.0, 500.0]])
        pts = []
        for c in centres:
            ang = rng.uniform(0, 2 * np.pi) + np.linspace(0, 2 * np.pi, 8, endpoint=False)
            pts.append(c + 50.0 * np.column_stack([np.cos(ang), np.sin(ang)]))
        xy = np.vstack(pts)
        return as_emitters(xy), centres

    def test_observed_equal_expected_zero_z(self):
        # flat field with analytic annulus mass 4: placing 4 emitters in the
        # annulus gives z ~ 0 up to quadrature error
        mu_target = 4.0
        area = np.pi * (130.0**2 - 100.0**2)
        c = mu_target / area
        field = flat_field(c=c, res=20)
        ang = np.linspace(0, 2 * np.pi, 4, endpoint=False)
        ring = np.array([500.0, 500.0]) + 115.0 * np.column_stack([np.cos(ang), np.sin(ang)])
        v = Void(centre=[500.0, 500.0], radius=100.0)
        voids, _ = calibrate_voids([v], field, as_emitters(ring),
                                   f_r=0.3, n_sims=120, seed=0)
        assert voids[0].z == pytest.approx(0.0, abs=0.1)

    def test_empty_annulus_negative_z(self):
        field = flat_field(c=1e-4, res=20)
        v = Void(centre=[500.0, 500.0], radius=100.0)
        voids, _ = calibrate_voids([v], field, as_emitters(np.empty((0, 2))),
                                   f_r=0.3, n_sims=120, seed=0)
        mu = np.pi * (130.0**2 - 100.0**2) * 1e-4
        assert voids[0].z == pytest.approx(-np.sqrt(mu), rel=0.03)

    def test_structured_voids_activate(self):
        em, centres = self.make_ring_field()
        field = fit_lgcp(em.xy, window=WIN, grid_res=24, n_draws=40, seed=1)
        seeds = [Void(centre=c, radius=1.0) for c in centres]
        grown = [grow_void(v, em, WIN, r_max=75.0) for v in seeds]
        voids, _ = calibrate_voids(grown, field, em, n_sims=200, seed=2)
        assert sum(v.active for v in voids) >= 4

    def test_csr_few_actives(self):
        rng = np.random.default_rng(7)
        em = as_emitters(WIN.sample(rng, 150))
        field = fit_lgcp(em.xy, window=WIN, grid_res=24, n_draws=40, seed=3)
        walker = VoidWalker(n_seeds=400, r_max=75.0, n_sims=200, alpha=0.05, seed=4)
        walker.fit(em, field)
        n = len(walker.voids_)
        frac = sum(v.active for v in walker.voids_) / max(n, 1)
        assert frac <= 0.12  # ~alpha with binomial slack

    def test_null_cdf_monotone_activation(self):
        em, centres = self.make_ring_field(seed=1)
        field = fit_lgcp(em.xy, window=WIN, grid_res=24, n_draws=40, seed=1)
        seeds = [Void(centre=c, radius=1.0) for c in centres]
        grown = [grow_void(v, em, WIN, r_max=75.0) for v in seeds]
        voids, _ = calibrate_voids(grown, field, em, n_sims=150, seed=5)
        scored = [v for v in voids if not np.isnan(v.z)]
        zs = np.array([v.z for v in scored])
        act = np.array([v.active for v in scored])
        if act.any():
            z_active_min = zs[act].min()
            assert np.all(act[zs >= z_active_min])


class TestPriors:
    def fake_voids(self, radii, active=True):
        rng = np.random.default_rng(8)
        return [
            Void(centre=WIN.sample(rng, 1)[0], radius=float(r), z=3.0, p=0.01, active=active)
            for r in radii
        ]

    def test_identical_radii(self):
        field = flat_field()
        voids = self.fake_voids([40.0] * 6)
        priors = derive_priors(voids, field)
        assert priors.mu_r == pytest.approx(40.0)
        assert priors.sigma_r == pytest.approx(1.0)  # floor
        assert priors.lambda_c == 6

    def test_outlier_excluded(self):
        radii = [40.0, 41.0, 39.0, 40.5, 39.5, 40.2, 39.8, 70.0]
        field = flat_field()
        priors = derive_priors(self.fake_voids(radii), field)
        assert priors.lambda_c == 7
        assert priors.mu_r == pytest.approx(np.mean(radii[:-1]), abs=0.2)

    def test_fallback_warns(self):
        field = flat_field()
        with pytest.warns(UserWarning):
            priors = derive_priors(self.fake_voids([40.0], active=False), field)
        assert priors.fallback
        assert priors.lambda_c == 1.0

    def test_birth_mixture_normalised(self):
        rng = np.random.default_rng(9)
        em = as_emitters(WIN.sample(rng, 100))
        field = fit_lgcp(em.xy, window=WIN, grid_res=20, n_draws=10, seed=0)
        centres = np.array([[300.0, 300.0], [700.0, 600.0]])
        birth = BirthProposal(field, centres, bandwidth=25.0, w_lambda=0.5)
        # quadrature on a fine grid
        n = 200
        xs = np.linspace(WIN.xmin, WIN.xmax, n, endpoint=False) + WIN.width / n / 2
        ys = np.linspace(WIN.ymin, WIN.ymax, n, endpoint=False) + WIN.height / n / 2
        total = 0.0
        for y in ys:
            for x in xs:
                total += birth.pdf([x, y])
        total *= (WIN.width / n) * (WIN.height / n)
        assert total == pytest.approx(1.0, abs=0.01)

    def test_birth_sampling_matches_density(self):
        field = flat_field()
        centres = np.array([[500.0, 500.0]])
        birth = BirthProposal(field, centres, bandwidth=50.0, w_lambda=0.5)
        rng = np.random.default_rng(10)
        pts = np.array([birth.sample(rng) for _ in range(4000)])
        # half the mass concentrates near the kernel centre
        near = np.linalg.norm(pts - [500, 500], axis=1) < 100.0
        frac_near = near.mean()
        assert 0.4 < frac_near < 0.65


def test_walker_deterministic():
    rng = np.random.default_rng(11)
    em = as_emitters(WIN.sample(rng, 80))
    field = fit_lgcp(em.xy, window=WIN, grid_res=20, n_draws=20, seed=0)
    a = VoidWalker(n_seeds=100, n_sims=120, seed=5).fit(em, field)
    b = VoidWalker(n_seeds=100, n_sims=120, seed=5).fit(em, field)
    za = [v.to_dict() for v in a.voids_]
    zb = [v.to_dict() for v in b.voids_]
    assert za == zb
