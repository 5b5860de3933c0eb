import numpy as np
import pytest

from atlasmatch.imagekit import AffineTransform, GrayImage, make_affine, warp_affine
from atlasmatch.register import (
    DimensionMismatch,
    PyramidConfig,
    identify_by_mi,
    marginal_entropy,
    mutual_information,
    predict_affine,
    random_search,
    register_affine,
    sample_search_config,
    train_regressor,
    trial_seed,
)
from atlasmatch.synthatlas import AtlasSpec, generate_atlas


def entropy_oracle(pixels, bins):
    """Brute-force marginal entropy: count bins by hand."""
    idx = np.minimum((pixels.ravel() * bins).astype(int), bins - 1)
    h = 0.0
    n = idx.size
    for b in range(bins):
        c = int((idx == b).sum())
        if c:
            h -= (c / n) * np.log(c / n)
    return h


class TestMutualInformation:
    def test_self_mi_equals_entropy(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            img = GrayImage(rng.random((9, 7)))
            mi = mutual_information(img, img, bins=16)
            assert mi == pytest.approx(entropy_oracle(img.pixels, 16), abs=1e-12)
            assert mi == marginal_entropy(img, 16)  # exact by construction

    def test_independent_two_by_two(self):
        # joint uniform over 4 cells with uniform marginals: MI = 0
        fixed = GrayImage(np.array([[0.0, 0.0], [1.0, 1.0]]))
        moving = GrayImage(np.array([[0.0, 1.0], [0.0, 1.0]]))
        assert mutual_information(fixed, moving, bins=2) == pytest.approx(0.0, abs=1e-15)

    def test_identical_two_by_two_ln2(self):
        img = GrayImage(np.array([[0.0, 1.0], [0.0, 1.0]]))
        assert mutual_information(img, img, bins=2) == pytest.approx(np.log(2), abs=1e-15)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = GrayImage(rng.random((6, 6)))
            b = GrayImage(rng.random((6, 6)))
            assert mutual_information(a, b) == mutual_information(b, a)

    def test_constant_image_zero_mi(self):
        rng = np.random.default_rng(2)
        a = GrayImage(rng.random((8, 8)))
        c = GrayImage(np.full((8, 8), 0.6))
        assert mutual_information(a, c) == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = GrayImage(rng.random((5, 9)))
            b = GrayImage(rng.random((5, 9)))
            assert mutual_information(a, b) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            mutual_information(GrayImage(np.zeros((4, 4))), GrayImage(np.zeros((5, 4))))


@pytest.fixture(scope="module")
def plate64():
    return generate_atlas(AtlasSpec(num_plates=4, image_size=64, seed=2))[1]


@pytest.fixture(scope="module")
def plate128():
    return generate_atlas(AtlasSpec(num_plates=4, image_size=128, seed=2))[1]


def corner_error(t_est: AffineTransform, t_true: AffineTransform, size: int) -> float:
    """Mean displacement of the image corners under the two forward maps."""
    c = (size - 1) / 2.0
    corners = np.array([[0, 0], [size - 1, 0], [0, size - 1], [size - 1, size - 1]],
                       dtype=np.float64)
    def fwd(t, pts):
        rel = pts - c
        lin = rel @ t.matrix().T
        return lin + c + np.array([t.tx * size, t.ty * size])
    return float(np.linalg.norm(fwd(t_est, corners) - fwd(t_true, corners),
                                axis=1).mean())


class TestRegisterAffine:
    def test_self_registration_near_identity(self, plate64):
        cfg = PyramidConfig(num_resolutions=2, max_iterations=200, samples=2048)
        res = register_affine(plate64, plate64, cfg, seed=0)
        diff = np.abs(res.transform.params() - np.array([1, 0, 0, 1, 0, 0]))
        assert diff.max() <= 0.02
        h = marginal_entropy(plate64)
        assert res.final_mi >= 0.98 * h

    def test_traces_nondecreasing(self, plate64):
        moved = warp_affine(plate64, make_affine(5.0, 1.02, 0.02, -0.01))
        cfg = PyramidConfig(num_resolutions=2, max_iterations=200, samples=1024)
        res = register_affine(plate64, moved, cfg, seed=1)
        for trace in res.traces:
            assert all(b >= a for a, b in zip(trace, trace[1:]))

    def test_improves_on_identity(self, plate64):
        t = make_affine(8.0, 1.05, 0.04, 0.03)
        fixed = warp_affine(plate64, t)
        cfg = PyramidConfig(num_resolutions=2, max_iterations=400, samples=2048)
        res = register_affine(fixed, plate64, cfg, seed=2)
        mi_identity = mutual_information(fixed, plate64)
        assert res.final_mi >= mi_identity

    def test_small_recovery(self, plate128):
        t_true = make_affine(rotation_deg=10.0, scale=1.0, tx=0.05, ty=0.0)
        fixed = warp_affine(plate128, t_true)
        cfg = PyramidConfig(num_resolutions=3, max_iterations=600, samples=4096)
        res = register_affine(fixed, plate128, cfg, seed=3)
        err = corner_error(res.transform, t_true, 128)
        assert err <= 2.0, f"corner error {err}"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PyramidConfig(num_resolutions=0)
        with pytest.raises(ValueError):
            PyramidConfig(max_iterations=250)
        with pytest.raises(ValueError):
            PyramidConfig(pyramid="gaussian")

    @pytest.mark.parametrize("kind", ["recursive", "shrinking", "smoothing"])
    def test_pyramid_kinds_run(self, plate64, kind):
        cfg = PyramidConfig(num_resolutions=2, max_iterations=200, samples=512,
                            pyramid=kind)
        res = register_affine(plate64, plate64, cfg, seed=4)
        assert np.isfinite(res.final_mi)


class TestRandomSearch:
    def test_single_trial_matches_direct_run(self, plate64):
        rng = np.random.default_rng([7, 60])
        config = sample_search_config(rng)
        best, log = random_search(plate64, plate64, trials=1, seed=7, samples=256)
        assert log[0]["config"] == config
        cfg = PyramidConfig(num_resolutions=config["num_resolutions"],
                            max_iterations=config["max_iterations"],
                            samples=256,
                            random_sample_region=config["random_sample_region"],
                            pyramid=config["pyramid"])
        direct = register_affine(plate64, plate64, cfg, seed=trial_seed(7, 0))
        assert best.final_mi == direct.final_mi
        np.testing.assert_array_equal(best.transform.params(),
                                      direct.transform.params())

    def test_monotone_in_trials(self):
        img = generate_atlas(AtlasSpec(num_plates=2, image_size=32, seed=5))[0]
        moved = warp_affine(img, make_affine(6.0, 1.03, 0.03, 0.0))
        best5, log5 = random_search(img, moved, trials=5, seed=3, samples=128)
        best10, log10 = random_search(img, moved, trials=10, seed=3, samples=128)
        # same seed stream: first five trials identical, argmax over a superset
        assert [l["final_mi"] for l in log10[:5]] == [l["final_mi"] for l in log5]
        assert best10.final_mi >= best5.final_mi

    def test_sampled_configs_respect_grids(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            c = sample_search_config(rng)
            assert c["num_resolutions"] in range(1, 8)
            assert c["max_iterations"] % 200 == 0
            assert 200 <= c["max_iterations"] <= 3000
            assert c["pyramid"] in ("recursive", "shrinking", "smoothing")
            assert isinstance(c["automatic_parameter_estimation"], bool)


class TestIdentifyByMi:
    def test_exact_copy_ranked_first(self):
        atlas = generate_atlas(AtlasSpec(num_plates=4, image_size=48, seed=6))
        cfg = PyramidConfig(num_resolutions=1, max_iterations=200, samples=256)
        ranking, results = identify_by_mi(atlas[2], atlas, cfg, seed=0,
                                          ground_truth=2)
        assert ranking.order[0] == 2
        assert ranking.ground_truth_rank == 0
        assert sorted(ranking.order.tolist()) == [0, 1, 2, 3]
        assert len(results) == 4

    def test_wall_time_linear_in_plates(self):
        import time
        atlas = generate_atlas(AtlasSpec(num_plates=16, image_size=32, seed=7))
        cfg = PyramidConfig(num_resolutions=1, max_iterations=200, samples=256)
        t0 = time.perf_counter()
        identify_by_mi(atlas[0], atlas[:8], cfg, seed=0)
        t8 = time.perf_counter() - t0
        t0 = time.perf_counter()
        identify_by_mi(atlas[0], atlas, cfg, seed=0)
        t16 = time.perf_counter() - t0
        assert 1.5 <= t16 / t8 <= 2.5, f"ratio {t16 / t8}"


class TestRegressor:
    def test_untrained_predicts_identity(self, plate128):
        result = train_regressor([plate128], pretrain_iterations=0,
                                 finetune_iterations=0, seed=0)
        t = predict_affine(result.checkpoint, plate128, plate128)
        np.testing.assert_array_equal(t.params(), [1, 0, 0, 1, 0, 0])

    def test_initial_loss_is_negative_identity_mi(self, plate128):
        fixed = warp_affine(plate128, make_affine(5.0, 1.0, 0.03, 0.0))
        result = train_regressor([plate128], [(fixed, plate128)],
                                 pretrain_iterations=0, finetune_iterations=1,
                                 seed=0)
        expected = -mutual_information(fixed, plate128)
        assert result.finetune_losses[0] == pytest.approx(expected, abs=1e-9)

    def test_prediction_deterministic(self, plate128):
        result = train_regressor([plate128], pretrain_iterations=2,
                                 finetune_iterations=0, seed=1)
        a = predict_affine(result.checkpoint, plate128, plate128)
        b = predict_affine(result.checkpoint, plate128, plate128)
        np.testing.assert_array_equal(a.params(), b.params())

    def test_finetune_keeps_best_mi(self, plate128):
        moved = warp_affine(plate128, make_affine(4.0, 1.02, 0.02, -0.02))
        result = train_regressor([plate128], [(moved, plate128)],
                                 pretrain_iterations=5, finetune_iterations=10,
                                 seed=2)
        # returned parameters correspond to the best observed pair MI
        t = predict_affine(result.checkpoint, plate128, moved)
        mi_final = mutual_information(
            moved, warp_affine(plate128, t, 128, 128))
        assert mi_final == pytest.approx(result.finetune_best_mi, abs=1e-9)

    def test_inference_under_one_second(self, plate128):
        import time
        result = train_regressor([plate128], pretrain_iterations=0,
                                 finetune_iterations=0, seed=0)
        predict_affine(result.checkpoint, plate128, plate128)  # warm
        t0 = time.perf_counter()
        predict_affine(result.checkpoint, plate128, plate128)
        assert time.perf_counter() - t0 < 1.0
