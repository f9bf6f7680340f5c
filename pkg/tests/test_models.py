import math

import numpy as np
import pytest

from consensus_mp import models
from consensus_mp.expfam import Bernoulli, Gaussian, MvGaussian
from consensus_mp.models import (CircleFeatures, CircleSpec, FaceSpec, LightFeatures,
                                 ReflectanceFeatures, SideLengthFeatures,
                                 SquareColourFeatures, SquareSpec, SpecError)


def circle_context(points, var=1e-4):
    return [MvGaussian.from_mean_cov(p, var * np.eye(2)) for p in points]


def kasa_fit(P):
    """Algebraic least-squares circle fit; returns the centre."""
    A = np.column_stack([2 * P, np.ones(len(P))])
    b = (P ** 2).sum(axis=1)
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    return sol[:2]


class TestSamplers:
    @pytest.mark.parametrize("spec", [CircleSpec(), SquareSpec(), FaceSpec(), models.ChainSpec()])
    def test_seed_determinism(self, spec):
        a = models.sample(spec, 17)[1]
        b = models.sample(spec, 17)[1]
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_circle_noise_free_point(self):
        spec = CircleSpec(noise_var=1e-300)
        lat, obs = models.sample_circle(spec, 0, center=(0.0, 0.0), radius=1.0,
                                        angles=np.full(spec.n_points, math.pi / 2))
        np.testing.assert_allclose(obs["x[0]"], [1.0, 0.0], atol=1e-12)

    def test_circle_points_near_radius(self):
        spec = CircleSpec()
        bound = 3 * math.sqrt(spec.noise_var) * math.sqrt(2)
        inside = []
        for seed in range(300):
            lat, obs = models.sample(spec, seed)
            d = [np.linalg.norm(np.asarray(obs[f"x[{i}]"]) - lat["c"]) for i in range(10)]
            inside.extend(abs(np.array(d) - lat["r"]) <= bound)
        assert np.mean(inside) >= 0.99

    def test_square_centre_pixel_is_foreground(self):
        spec = SquareSpec(noise_var=1e-300)
        for seed in range(20):
            lat, obs = models.sample(spec, seed)
            j, i = (int(math.floor(v)) for v in lat["c"])
            if 0 <= i < spec.height and 0 <= j < spec.width:
                assert lat["s"][i, j] == 1.0
                assert obs[f"x[{i}][{j}]"] == pytest.approx(lat["fg"])

    def test_square_pixel_count_matches_side(self):
        spec = SquareSpec(width=64, height=64, center_var=1.0)
        for seed in range(20):
            lat, _ = models.sample(spec, seed)
            l = lat["l"]
            assert abs(lat["s"].sum() - l * l) <= 2 * (l + 1)

    def test_square_never_empty(self):
        for seed in range(50):
            lat, _ = models.sample(SquareSpec(), seed)
            assert 0 < lat["s"].sum() < lat["s"].size

    def test_face_generative_equation(self):
        spec = FaceSpec(noise_var=1e-300)
        lat, obs = models.sample(spec, 3)
        np.testing.assert_allclose(np.linalg.norm(lat["n"], axis=-1), 1.0)
        s = lat["n"] @ lat["l"]
        np.testing.assert_allclose(lat["s"], s)
        np.testing.assert_allclose(lat["z"], s * lat["r"])
        x = np.array([[obs[f"x[{i}][{j}]"] for j in range(spec.width)]
                      for i in range(spec.height)])
        np.testing.assert_allclose(x, lat["z"], atol=1e-12)

    def test_face_odd_width_rejected(self):
        with pytest.raises(SpecError):
            FaceSpec(width=15)

    def test_template_normals_unit(self):
        n = FaceSpec().template_normals()
        np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0)
        assert (n[..., 2] > 0).all()


class TestSpecJson:
    def test_round_trip(self):
        for spec in (CircleSpec(n_points=5), SquareSpec(width=8, height=8), FaceSpec()):
            assert models.spec_from_dict(models.spec_to_dict(spec)) == spec

    def test_nested_sections(self):
        spec = models.spec_from_dict({"model": "square", "dimensions": {"width": 8, "height": 8},
                                      "noiseVariances": {"noise_var": 0.02}, "seed": 3})
        assert spec.width == 8 and spec.noise_var == 0.02

    def test_unknown_field(self):
        with pytest.raises(SpecError, match="unknown"):
            models.spec_from_dict({"model": "circle", "bogus": 1})
        with pytest.raises(SpecError):
            models.spec_from_dict({"model": "hexagon"})


class TestCircleFeatures:
    def test_exact_circle_centroid(self):
        ang = np.linspace(0, 2 * math.pi, 10, endpoint=False)
        P = np.column_stack([np.sin(ang), np.cos(ang)]) + [0.3, -0.2]
        T, R = CircleFeatures("c")(circle_context(P))
        np.testing.assert_allclose(T[0, :2], [0.3, -0.2], atol=1e-12)
        np.testing.assert_allclose(R[0, :2], [0.3, -0.2], atol=1e-12)
        np.testing.assert_allclose(kasa_fit(P), [0.3, -0.2], atol=1e-12)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(0)
        P = rng.normal(size=(10, 2))
        t = np.array([1.5, -4.0])
        T0, R0 = CircleFeatures("c")(circle_context(P))
        T1, R1 = CircleFeatures("c")(circle_context(P + t))
        np.testing.assert_allclose(T1[0, :2] - T0[0, :2], t, atol=1e-12)
        np.testing.assert_allclose(R1[0, :2] - R0[0, :2], t, atol=1e-12)
        # eigenvalues and variance feature are translation invariant
        np.testing.assert_allclose(T1[0, 2:4], T0[0, 2:4], atol=1e-12)

    def test_order_invariance(self):
        P = np.random.default_rng(1).normal(size=(10, 2))
        a = CircleFeatures("c")(circle_context(P))
        b = CircleFeatures("c")(circle_context(P[::-1]))
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)


class TestSquareFeatures:
    def test_uniform_image_clusters_equal(self):
        ctx = [Gaussian.from_mean_var(0.4, 0.01)] * 16
        T, R = SquareColourFeatures(4, 4)(ctx)
        assert R[0, 0] == pytest.approx(R[0, 1])

    def test_two_level_image_clusters(self):
        img = np.full((8, 8), 0.2)
        img[2:5, 2:5] = 0.9
        ctx = [Gaussian.from_mean_var(v, 0.01) for v in img.ravel()]
        T, R = SquareColourFeatures(8, 8)(ctx)
        np.testing.assert_allclose(R[0, :2], [0.2, 0.9])
        np.testing.assert_allclose(T[0, :64], img.ravel())

    @pytest.mark.parametrize("l", [1, 3, 6])
    def test_exact_segmentation_counts_side(self, l):
        seg = np.zeros((8, 8))
        seg[1:1 + l, 2:2 + l] = 1
        ctx = [Bernoulli(math.inf if v else -math.inf) for v in seg.ravel()]
        T, R = SideLengthFeatures(8, 8)(ctx)
        np.testing.assert_allclose(R[0], [l])
        assert T[0, 0] == pytest.approx(l * l)
        assert T[0, -1] == pytest.approx(1.0)

    def test_clipped_square_keeps_longest_edge(self):
        seg = np.zeros((8, 8))
        seg[2:7, 0:3] = 1       # a 5-wide square cut by the left border
        ctx = [Bernoulli(math.inf if v else -math.inf) for v in seg.ravel()]
        T, R = SideLengthFeatures(8, 8)(ctx)
        assert R[0, 0] == 5
        np.testing.assert_allclose(T[0, 6:9], [3, 5, 5])

    def test_undecided_pixels_do_not_count(self):
        ctx = [Bernoulli(0.0)] * 64
        T, R = SideLengthFeatures(8, 8)(ctx)
        assert R[0, 0] == 0 and T[0, 9] == 0
        assert T[0, -1] == 0


class TestFaceFeatures:
    def test_light_features_constant_map(self):
        ctx = [Gaussian.from_mean_var(0.37, 0.01)] * 256
        T, R = LightFeatures(16, 16)(ctx)
        np.testing.assert_allclose(T, 0.37)
        np.testing.assert_allclose(R, 0.37)
        assert T.shape == (1, 16)

    def test_reflectance_rows_per_pixel(self):
        rng = np.random.default_rng(0)
        ctx = [Gaussian.from_mean_var(v, 0.01) for v in rng.uniform(size=64)]
        T, R = ReflectanceFeatures(8, 8)(ctx)
        assert T.shape[0] == R.shape[0] == 64
        assert np.isfinite(T).all() and np.isfinite(R).all()

    def test_desk_scale_sizes(self):
        assert models.patch_half_width(16) == 2     # 5x5 patch
        assert models.block_grid(16) == 4


class TestAttachments:
    def test_default_attachments_validate(self):
        for spec in (CircleSpec(), SquareSpec(width=6, height=6), FaceSpec(width=6, height=6)):
            g = models.build(spec)
            atts = models.make_attachments(spec, g)
            g.with_predictors(atts)
        face = models.build(FaceSpec(width=6, height=6))
        att_r = models.make_attachments(FaceSpec(width=6, height=6), face)[0]
        assert att_r.per_variable and len(att_r.targets) == 36
