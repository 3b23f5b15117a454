import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aberray.dff import (
    DepthMetrics,
    FocusProbability,
    compute_metrics,
    estimate_depth,
    psnr,
    radial_error_map,
    radial_ratio,
    sharpness_volume,
    synthesize_aif,
)
from aberray.render import FocalStack, RgbdImage, simulate_stack


def checker(h, w, period=4):
    yy, xx = np.mgrid[0:h, 0:w]
    return (((yy // period) + (xx // period)) % 2).astype(np.float64)


def stack_from_frames(frames, distances):
    return FocalStack(np.asarray(frames, dtype=np.float64),
                      np.asarray(distances, dtype=np.float64),
                      lens_name="test", psf_source="gaussian")


def textured_two_plane(fifty, h=96, w=128, near=0.45, far=0.75, seed=0):
    # near-range planes: at this toy resolution (0.25 mm pixels) the blur
    # only spans several pixels for close, strongly defocused objects.
    # Corner patches at 0.3 / 1.0 m stretch the stack's focus range so both
    # planes sit interior to it (no one-sided frame ties at the range ends).
    rng = np.random.default_rng(seed)
    rgb = np.repeat(checker(h, w)[:, :, None], 3, axis=2) * 0.7 + 0.15
    rgb += rng.uniform(-0.1, 0.1, rgb.shape)
    depth = np.full((h, w), near)
    depth[:, w // 2 :] = far
    depth[:2, :2] = 0.3
    depth[-2:, -2:] = 1.0
    return RgbdImage(np.clip(rgb, 0, 1), depth, fifty, name="two-plane")


class TestSharpness:
    def test_constant_frame_scores_zero(self):
        frames = np.full((3, 16, 16, 3), 0.4)
        stack = stack_from_frames(frames, [1.0, 2.0, 3.0])
        for measure in ("modified_laplacian", "gradient_magnitude"):
            sharp = sharpness_volume(stack, measure=measure)
            assert np.array_equal(sharp, np.zeros_like(sharp))

    def test_blur_reduces_edge_sharpness(self):
        edge = np.zeros((20, 20, 3))
        edge[:, 10:] = 1.0
        blurred = edge.copy()
        # 5x5 box blur (replicate padding)
        pad = np.pad(edge, ((2, 2), (2, 2), (0, 0)), mode="edge")
        for c in range(3):
            blurred[:, :, c] = np.mean(
                [pad[i : i + 20, j : j + 20, c] for i in range(5) for j in range(5)],
                axis=0,
            )
        stack = stack_from_frames([edge, blurred], [1.0, 2.0])
        sharp = sharpness_volume(stack, window=9)
        on_edge = sharp[:, 10, 10]
        assert on_edge[0] > on_edge[1]

    def test_impulse_modified_laplacian_stencil(self):
        img = np.zeros((9, 9, 3))
        img[4, 4] = 1.0
        stack = stack_from_frames([img], [1.0])
        sharp = sharpness_volume(stack, window=3)[0]
        # hand-computed: ML at the impulse = |2*1| + |2*1| = 4, at the direct
        # neighbors |0-1| + |2*0| = 1 each; a 3x3 window sum averages them
        assert sharp[4, 4] == sharp.max()
        raw_center = 4.0
        raw_neighbor = 1.0
        expected = (raw_center + 4 * raw_neighbor) / 9.0
        assert sharp[4, 4] == pytest.approx(expected)

    def test_even_window_rejected(self):
        stack = stack_from_frames(np.zeros((1, 8, 8, 3)), [1.0])
        with pytest.raises(ValueError):
            sharpness_volume(stack, window=4)


class TestEstimateDepth:
    def frame_with_texture_at(self, s, total, h=12, w=12):
        frames = np.full((total, h, w, 3), 0.5)
        frames[s] += (checker(h, w, 2)[:, :, None] - 0.5) * 0.8
        return frames

    def test_one_hot_probability_selects_distance(self):
        distances = [1.0, 1.7, 2.6]
        stack = stack_from_frames(self.frame_with_texture_at(1, 3), distances)
        depth, prob = estimate_depth(stack, temperature=0.0)
        assert np.all(depth == 1.7)
        assert prob.volume[1].min() == 1.0

    def test_uniform_probability_gives_mean(self):
        distances = [1.0, 2.0, 6.0]
        stack = stack_from_frames(np.full((3, 8, 8, 3), 0.3), distances)
        depth, prob = estimate_depth(stack)
        assert depth == pytest.approx(np.full((8, 8), 3.0))
        assert prob.volume == pytest.approx(np.full((3, 8, 8), 1 / 3))

    def test_argmax_tie_breaks_low_index(self):
        frames = np.stack([self.frame_with_texture_at(0, 1)[0]] * 2)
        stack = stack_from_frames(frames, [1.0, 2.0])
        depth, _ = estimate_depth(stack, temperature=0.0)
        assert np.all(depth == 1.0)

    def test_depth_within_distance_range(self, rng):
        frames = rng.random((4, 10, 10, 3))
        stack = stack_from_frames(frames, [0.5, 1.0, 2.0, 4.0])
        depth, _ = estimate_depth(stack)
        assert depth.min() >= 0.5 and depth.max() <= 4.0

    def test_argmax_invariant_under_scaling(self, rng):
        frames = rng.random((4, 10, 10, 3))
        stack = stack_from_frames(frames, [0.5, 1.0, 2.0, 4.0])
        d1, _ = estimate_depth(stack, temperature=0.0)
        bright = stack_from_frames(frames * 0.37, [0.5, 1.0, 2.0, 4.0])
        d2, _ = estimate_depth(bright, temperature=0.0)
        assert np.array_equal(d1, d2)

    def test_two_plane_scene_end_to_end(self, fifty):
        img = textured_two_plane(fifty)
        stack = simulate_stack(img, size=10, perturb_frac=0.0, seed=0,
                               provider="gaussian")
        depth, _ = estimate_depth(stack)
        spacing = np.diff(stack.focus_distances_m).mean()
        near = np.median(depth[:, : img.width // 3])
        far = np.median(depth[:, -img.width // 3 :])
        assert abs(near - 0.45) < spacing
        assert abs(far - 0.75) < spacing


class TestSynthesizeAif:
    def test_single_frame_identity(self, rng):
        frames = rng.random((1, 6, 6, 3))
        stack = stack_from_frames(frames, [1.5])
        prob = FocusProbability(np.ones((1, 6, 6)))
        assert np.array_equal(synthesize_aif(stack, prob), frames[0])

    def test_one_hot_selection(self, rng):
        frames = rng.random((3, 5, 5, 3))
        stack = stack_from_frames(frames, [1.0, 2.0, 3.0])
        vol = np.zeros((3, 5, 5))
        vol[2] = 1.0
        assert np.array_equal(synthesize_aif(stack, FocusProbability(vol)), frames[2])

    def test_two_plane_aif_beats_single_frames(self, fifty):
        img = textured_two_plane(fifty)
        stack = simulate_stack(img, size=8, perturb_frac=0.0, seed=0,
                               provider="gaussian")
        depth, prob = estimate_depth(stack)
        aif = synthesize_aif(stack, prob)
        ours = psnr(aif, img.rgb)
        best_single = max(psnr(f, img.rgb) for f in stack.frames)
        assert ours > best_single

    def test_dims_validated(self, rng):
        stack = stack_from_frames(rng.random((2, 4, 4, 3)), [1.0, 2.0])
        with pytest.raises(ValueError):
            synthesize_aif(stack, FocusProbability(np.ones((1, 4, 4))))


class TestMetrics:
    def test_perfect_prediction(self):
        gt = np.linspace(0.5, 4.0, 16).reshape(4, 4)
        m = compute_metrics(gt, gt)
        assert (m.mae, m.mse, m.rmse, m.abs_rel, m.sqr_rel) == (0, 0, 0, 0, 0)
        assert (m.delta1, m.delta2, m.delta3) == (1, 1, 1)

    def test_uniform_20_percent_overestimate(self):
        gt = np.linspace(0.5, 4.0, 16).reshape(4, 4)
        m = compute_metrics(1.2 * gt, gt)
        assert abs(m.abs_rel - 0.2) < 1e-12
        assert m.delta1 == 1.0  # 1.2 < 1.25

    def test_uniform_30_percent_overestimate(self):
        gt = np.linspace(0.5, 4.0, 16).reshape(4, 4)
        m = compute_metrics(1.3 * gt, gt)
        assert m.delta1 == 0.0  # 1.3 >= 1.25
        assert m.delta2 == 1.0  # 1.3 < 1.5625

    def test_scale_invariance_of_relative_metrics(self, rng):
        gt = rng.uniform(0.5, 10.0, (6, 6))
        pred = gt * rng.uniform(0.8, 1.2, (6, 6))
        a = compute_metrics(pred, gt)
        b = compute_metrics(3.7 * pred, 3.7 * gt)
        assert b.abs_rel == pytest.approx(a.abs_rel, rel=1e-12)
        assert (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)

    def test_delta_symmetry(self, rng):
        gt = rng.uniform(0.5, 10.0, (8, 8))
        pred = gt * rng.uniform(0.6, 1.6, (8, 8))
        a = compute_metrics(pred, gt)
        b = compute_metrics(gt, pred)
        assert (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)

    def test_rmse_is_sqrt_mse(self, rng):
        gt = rng.uniform(0.5, 10.0, (8, 8))
        pred = gt + rng.normal(0, 0.3, (8, 8))
        m = compute_metrics(np.abs(pred), gt)
        assert m.rmse**2 == pytest.approx(m.mse, abs=1e-9)

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_deltas_monotone(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0.1, 10.0, (5, 5))
        pred = rng.uniform(0.1, 10.0, (5, 5))
        m = compute_metrics(pred, gt)
        assert m.delta1 <= m.delta2 <= m.delta3

    def test_mask_and_errors(self):
        gt = np.ones((3, 3))
        with pytest.raises(ValueError, match="mask"):
            compute_metrics(gt, gt, mask=np.zeros((3, 3), dtype=bool))
        bad = gt.copy()
        bad[1, 1] = 0.0
        with pytest.raises(ValueError, match="> 0"):
            compute_metrics(gt, bad)


class TestRadialAnalysis:
    def test_single_zero_map(self):
        out = radial_error_map([np.zeros((8, 8))])
        assert np.array_equal(out, np.zeros((8, 8)))

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            radial_error_map([])

    def test_mean_of_absolute_errors(self):
        a = np.full((4, 4), 1.0)
        b = np.full((4, 4), -3.0)
        out = radial_error_map([a, b])
        assert out == pytest.approx(np.full((4, 4), 2.0))

    def test_radial_ratio_detects_corner_errors(self):
        h, w = 40, 60
        yy, xx = np.mgrid[0:h, 0:w]
        r = np.hypot(yy + 0.5 - h / 2, xx + 0.5 - w / 2)
        err = (r / r.max()) ** 2
        assert radial_ratio(err) > 2.0
        assert radial_ratio(np.ones((h, w))) == pytest.approx(1.0)


class TestPsnr:
    def test_identical_images_infinite(self):
        img = np.full((4, 4, 3), 0.3)
        assert psnr(img, img) == np.inf

    def test_known_value(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)
