import numpy as np
import pytest

from voidframe.geometry import Annulus, Disc, Window
from voidframe.intensity import (
    FitError,
    IntensityField,
    LgcpIntensity,
    expected_count,
    fit_lgcp,
    sample_ppp,
)

WIN = Window(0, 0, 1000, 1000)


def csr_points(n, rng, window=WIN):
    return window.sample(rng, n)


@pytest.fixture(scope="module")
def flat_field():
    rng = np.random.default_rng(0)
    pts = csr_points(500, rng)
    return fit_lgcp(pts, window=WIN, grid_res=24, n_draws=50, seed=1), pts


class TestFit:
    def test_homogeneous_input_is_flat(self, flat_field):
        field, _ = flat_field
        lam = field.lambda_hat
        # central 90% cells: trim two cells per border
        core = lam[2:-2, 2:-2]
        assert core.max() / core.min() < 2.0

    def test_integral_matches_count(self, flat_field):
        field, pts = flat_field
        n = len(pts)
        assert abs(field.integral() - n) / n < 0.15

    def test_doubling_counts_doubles_intensity(self):
        rng = np.random.default_rng(2)
        pts = csr_points(400, rng)
        f1 = fit_lgcp(pts, window=WIN, grid_res=24, seed=0)
        f2 = fit_lgcp(np.vstack([pts, pts]), window=WIN, grid_res=24, seed=0)
        ratio = f2.lambda_hat[3:-3, 3:-3] / f1.lambda_hat[3:-3, 3:-3]
        assert np.all(np.abs(ratio - 2.0) < 0.2 * 2.0)

    def test_posterior_variance_positive(self, flat_field):
        field, _ = flat_field
        assert np.all(field.eta_var > 0)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            fit_lgcp(np.zeros((5, 2)), window=WIN)
        with pytest.raises(ValueError):
            fit_lgcp(np.random.default_rng(0).random((50, 2)) * 100, grid_res=8)

    def test_nonconvergence_reports_gradient(self):
        rng = np.random.default_rng(3)
        pts = csr_points(200, rng)
        with pytest.raises(FitError, match="gradient"):
            fit_lgcp(pts, window=WIN, grid_res=16, max_iter=1, tol=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(4)
        pts = csr_points(300, rng)
        shift = np.array([5000.0, -3000.0])
        f1 = fit_lgcp(pts, window=WIN, grid_res=20, seed=0)
        f2 = fit_lgcp(
            pts + shift,
            window=Window(WIN.xmin + shift[0], WIN.ymin + shift[1],
                          WIN.xmax + shift[0], WIN.ymax + shift[1]),
            grid_res=20, seed=0,
        )
        assert np.allclose(f1.lambda_hat, f2.lambda_hat, rtol=1e-8)

    def test_renormalised_field_sums_to_one(self, flat_field):
        field, _ = flat_field
        assert field.seeding_probabilities().sum() == pytest.approx(1.0, abs=1e-12)


class TestExpectedCount:
    def flat(self, c=1e-3):
        f = IntensityField(window=WIN, nx=32, ny=32,
                           eta_mean=np.full((32, 32), np.log(c)),
                           eta_var=np.zeros((32, 32)), n_draws=1, draw_seed=0)
        return f

    def test_full_window(self):
        c = 1e-3
        f = self.flat(c)
        mu = expected_count(f, Disc(500, 500, 2000))
        assert mu == pytest.approx(c * WIN.area, rel=1e-9)

    def test_empty_region_warns(self):
        f = self.flat()
        with pytest.warns(UserWarning):
            mu = expected_count(f, Disc(-500, -500, 10))
        assert mu == 0.0

    def test_disc_area(self):
        c = 2e-3
        f = self.flat(c)
        r = 200.0
        mu = expected_count(f, Disc(500, 500, r))
        # grid discretisation error: boundary cells
        boundary_cells = 2 * np.pi * r / (WIN.width / 32)
        tol = c * 2 * boundary_cells * f.cell_area
        assert abs(mu - c * np.pi * r**2) <= tol

    def test_annulus_excludes_inner_circle(self):
        f = self.flat(1.0)
        ann = Annulus(500, 500, 100, 200)
        disc_out = expected_count(f, Disc(500, 500, 200))
        disc_in = expected_count(f, Disc(500, 500, 100))
        assert expected_count(f, ann) == pytest.approx(disc_out - disc_in, rel=1e-9)


class TestSamplePpp:
    def test_zero_intensity_empty(self):
        f = IntensityField(window=WIN, nx=16, ny=16,
                           eta_mean=np.zeros((16, 16)), eta_var=np.zeros((16, 16)),
                           n_draws=1, draw_seed=0)
        pts = sample_ppp(f, np.zeros((16, 16)), seed=0)
        assert len(pts) == 0

    def test_poisson_mean(self):
        c = 100.0 / WIN.area
        f = IntensityField(window=WIN, nx=16, ny=16,
                           eta_mean=np.full((16, 16), np.log(c)),
                           eta_var=np.zeros((16, 16)), n_draws=1, draw_seed=0)
        lam = np.full((16, 16), c)
        counts = [len(sample_ppp(f, lam, seed=s)) for s in range(1000)]
        se = np.sqrt(100.0 / 1000)
        assert abs(np.mean(counts) - 100.0) < 3 * se

    def test_subrectangle_counts(self):
        c = 500.0 / WIN.area
        f = IntensityField(window=WIN, nx=16, ny=16,
                           eta_mean=np.full((16, 16), np.log(c)),
                           eta_var=np.zeros((16, 16)), n_draws=1, draw_seed=0)
        lam = np.full((16, 16), c)
        rng_counts = []
        for s in range(300):
            pts = sample_ppp(f, lam, seed=s)
            inside = (pts[:, 0] < 500) & (pts[:, 1] < 500)
            rng_counts.append(inside.sum())
        mean = np.mean(rng_counts)
        expect = 500.0 / 4
        se = np.sqrt(expect / 300)
        assert abs(mean - expect) < 4 * se

    def test_deterministic_under_seed(self):
        f = IntensityField(window=WIN, nx=16, ny=16,
                           eta_mean=np.full((16, 16), -9.0), eta_var=np.zeros((16, 16)),
                           n_draws=1, draw_seed=0)
        lam = np.exp(f.eta_mean)
        a = sample_ppp(f, lam, seed=7)
        b = sample_ppp(f, lam, seed=7)
        assert np.array_equal(a, b)


class TestSerialisation:
    def test_roundtrip_and_draw_regeneration(self, flat_field, tmp_path):
        field, _ = flat_field
        p = tmp_path / "field.json"
        field.to_json(p)
        loaded = IntensityField.from_json(p)
        assert np.array_equal(field.eta_mean, loaded.eta_mean)
        assert np.array_equal(field.eta_var, loaded.eta_var)
        assert np.array_equal(field.draws, loaded.draws)
        assert np.all(field.draws > 0)


class TestEstimator:
    def test_estimator_api(self):
        rng = np.random.default_rng(5)
        pts = csr_points(200, rng)
        est = LgcpIntensity(grid_res=16, n_draws=10, seed=0)
        assert est.get_params()["grid_res"] == 16
        est.fit(pts, window=WIN)
        lam = est.predict([[500.0, 500.0]])
        assert lam.shape == (1,)
        assert lam[0] > 0
