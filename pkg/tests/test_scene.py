import math

import numpy as np
import pytest

import oracles
from handover_sim.geometry import CameraIntrinsics, Pose
from handover_sim.pgm import depth_to_millimeters, read_pgm, write_class_pgm, write_depth_pgm
from handover_sim.scene import (
    BACKGROUND,
    BODY,
    HAND,
    OBJECT,
    BoxShape,
    CapsuleShape,
    GraspOutcome,
    InvalidWidthError,
    Primitive,
    SceneModel,
    SceneSnapshot,
    SphereShape,
    grasp_outcome,
    min_human_distance,
    render,
    scene_at,
)

INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=40.0, cy=30.0, width=80, height=60)


def snap(*prims) -> SceneSnapshot:
    return SceneSnapshot(tuple(prims), Pose.identity())


def obj_sphere(center, radius=0.03, oid=1):
    return Primitive(SphereShape(center, radius), OBJECT, oid)


class TestSceneAt:
    def test_static_scene_any_time(self):
        scene = SceneModel([obj_sphere([0, 0, 1.0])])
        for t in (0.0, 0.5, 12.0):
            s = scene_at(scene, t)
            assert np.allclose(s.primitives[0].shape.center, [0, 0, 1.0])

    def test_linear_interpolation_midpoint(self):
        scene = SceneModel(
            [obj_sphere([0, 0, 0])],
            trajectories={
                0: [(0.0, Pose(position=[0, 0, 0])), (1.0, Pose(position=[0.1, 0, 0]))]
            },
        )
        s = scene_at(scene, 0.5)
        assert np.allclose(s.primitives[0].shape.center, [0.05, 0, 0], atol=1e-12)

    def test_clamp_past_last_keyframe(self):
        scene = SceneModel(
            [obj_sphere([0, 0, 0])],
            trajectories={
                0: [(0.0, Pose(position=[0, 0, 0])), (1.0, Pose(position=[0.1, 0, 0]))]
            },
        )
        s = scene_at(scene, 2.0)
        assert np.allclose(s.primitives[0].shape.center, [0.1, 0, 0])

    def test_nonincreasing_keyframes_rejected(self):
        with pytest.raises(ValueError):
            SceneModel(
                [obj_sphere([0, 0, 0])],
                trajectories={0: [(1.0, Pose()), (1.0, Pose())]},
            )


class TestRender:
    def test_empty_scene(self):
        out = render(snap(), Pose.identity(), INTR)
        assert not out.depth.data.any()
        assert (out.class_image == BACKGROUND).all()
        assert (out.object_ids == -1).all()

    def test_sphere_through_principal_point(self):
        # Analytic: camera at origin, sphere center (0,0,1), r=0.1 -> depth 0.9.
        out = render(snap(obj_sphere([0, 0, 1.0], 0.1)), Pose.identity(), INTR)
        assert abs(out.depth.data[30, 40] - 0.9) < 1e-9
        assert out.class_image[30, 40] == OBJECT
        assert out.object_ids[30, 40] == 1

    def test_box_behind_far_clip(self):
        box = Primitive(BoxShape([0, 0, 10.0], [0.5, 0.5, 0.5]), OBJECT, 1)
        out = render(snap(box), Pose.identity(), INTR)
        assert (out.class_image == BACKGROUND).all()
        assert not out.depth.data.any()

    def test_blind_spot_keeps_label(self):
        hand = Primitive(CapsuleShape([0, -0.02, 0.08], [0, 0.02, 0.08], 0.02), HAND)
        out = render(snap(hand), Pose.identity(), INTR)
        assert out.depth.data[30, 40] == 0.0
        assert out.class_image[30, 40] == HAND

    def test_blind_occluder_hides_valid_object(self):
        hand = Primitive(CapsuleShape([0, -0.02, 0.08], [0, 0.02, 0.08], 0.02), HAND)
        out = render(snap(hand, obj_sphere([0, 0, 1.0], 0.1)), Pose.identity(), INTR)
        assert out.depth.data[30, 40] == 0.0
        assert out.class_image[30, 40] == HAND

    def _random_prims(self, rng, k=3):
        prims = []
        for i in range(k):
            kind = rng.integers(0, 3)
            center = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.25, 0.25), rng.uniform(0.2, 2.5)])
            label, oid = [(OBJECT, i), (HAND, -1), (BODY, -1)][rng.integers(0, 3)]
            if kind == 0:
                shape = SphereShape(center, rng.uniform(0.02, 0.2))
            elif kind == 1:
                axis = rng.normal(size=3) * 0.15
                shape = CapsuleShape(center - axis, center + axis, rng.uniform(0.02, 0.1))
            else:
                q = rng.normal(size=4)
                shape = BoxShape(center, rng.uniform(0.02, 0.2, size=3), q / np.linalg.norm(q))
            prims.append(Primitive(shape, label, oid if label == OBJECT else -1))
        return prims

    def test_depth_matches_independent_intersectors(self, rng):
        # Oracle: alternative closed-form intersectors, pixel by pixel.
        cam = Pose(position=[0.02, -0.03, -0.1], orientation=[0.99, 0.01, 0.05, 0.02])
        for _ in range(8):
            prims = self._random_prims(rng)
            out = render(snap(*prims), cam, INTR)
            us, vs = np.meshgrid(np.arange(80, dtype=float), np.arange(60, dtype=float))
            dirs_cam = np.stack(
                [(us - INTR.cx) / INTR.fx, (vs - INTR.cy) / INTR.fy, np.ones_like(us)], axis=-1
            ).reshape(-1, 3)
            dirs = dirs_cam @ cam.rotation_matrix().T
            best = np.full(dirs.shape[0], np.inf)
            for p in prims:
                best = np.minimum(best, oracles.ray_first_hit(cam.position, dirs, p.shape))
            best = best.reshape(60, 80)
            in_range = np.isfinite(best) & (best >= INTR.min_depth) & (best <= INTR.max_depth)
            assert np.all(np.abs(out.depth.data[in_range] - best[in_range]) < 1e-9)
            assert not out.depth.data[~in_range].any()

    def test_monotonic_occlusion_and_label_consistency(self, rng):
        cam = Pose.identity()
        for _ in range(6):
            prims = self._random_prims(rng, k=4)
            partial = render(snap(*prims[:3]), cam, INTR)
            full = render(snap(*prims), cam, INTR)
            # Adding a primitive never increases any pixel's oracle hit depth;
            # rendered artifacts must track the per-pixel nearest hit.
            us, vs = np.meshgrid(np.arange(80, dtype=float), np.arange(60, dtype=float))
            dirs = np.stack(
                [(us - INTR.cx) / INTR.fx, (vs - INTR.cy) / INTR.fy, np.ones_like(us)], axis=-1
            ).reshape(-1, 3)
            hits = np.stack([oracles.ray_first_hit(cam.position, dirs, p.shape) for p in prims])
            s3 = hits[:3].min(axis=0)
            s4 = hits.min(axis=0)
            assert np.all(s4 <= s3 + 1e-12)
            nearest = hits.argmin(axis=0).reshape(60, 80)
            s4g = s4.reshape(60, 80)
            valid = np.isfinite(s4g) & (s4g >= INTR.min_depth) & (s4g <= INTR.max_depth)
            expected_labels = np.array([p.label for p in prims])[nearest]
            assert (full.class_image[valid] == expected_labels[valid]).all()
            del partial

    def test_capsule_first_hit_penetration_scan(self, rng):
        cap = CapsuleShape([-0.1, 0.02, 0.8], [0.15, -0.05, 1.1], 0.07)
        out = render(snap(Primitive(cap, HAND)), Pose.identity(), INTR)
        hit_pixels = np.argwhere(out.depth.data > 0)[::37]
        for v, u in hit_pixels:
            d = np.array([(u - INTR.cx) / INTR.fx, (v - INTR.cy) / INTR.fy, 1.0])
            oracles.capsule_penetration_scan(
                np.zeros(3), d, cap, float(out.depth.data[v, u])
            )

    def test_window_render_matches_full_frame(self, rng):
        prims = self._random_prims(rng)
        cam = Pose(position=[0.01, 0.0, -0.05])
        full = render(snap(*prims), cam, INTR)
        roi = render(snap(*prims), cam, INTR, window=(17, 9, 31, 23))
        assert np.array_equal(roi.depth.data, full.depth.data[9:32, 17:48])
        assert np.array_equal(roi.class_image, full.class_image[9:32, 17:48])


class TestGraspOutcome:
    def test_sphere_at_grasp_point_secured(self):
        s = snap(obj_sphere([0.5, 0, 0.4], 0.02))
        out = grasp_outcome(s, [0.5, 0, 0.4], [0, 1, 0], 0.05)
        assert out.kind == GraspOutcome.OBJECT_SECURED
        assert out.object_id == 1

    def test_human_pinch_dominates_object(self):
        s = snap(
            obj_sphere([0.5, 0, 0.4], 0.02),
            Primitive(CapsuleShape([0.5, -0.05, 0.4], [0.5, 0.05, 0.4], 0.01), HAND),
        )
        out = grasp_outcome(s, [0.5, 0, 0.4], [0, 1, 0], 0.05)
        assert out.kind == GraspOutcome.HUMAN_PINCH

    def test_wide_box_rejected(self):
        # 0.10 m extent along the closing axis: chord exceeds the 0.07 stroke.
        box = Primitive(BoxShape([0.5, 0, 0.4], [0.02, 0.05, 0.02]), OBJECT, 3)
        out = grasp_outcome(snap(box), [0.5, 0, 0.4], [0, 1, 0], 0.07)
        assert out.kind == GraspOutcome.OBJECT_TOO_WIDE

    def test_chord_boundary_exactly_stroke_wide(self):
        box = Primitive(BoxShape([0.5, 0, 0.4], [0.02, 0.035, 0.02]), OBJECT, 3)
        out = grasp_outcome(snap(box), [0.5, 0, 0.4], [0, 1, 0], 0.07)
        assert out.kind == GraspOutcome.OBJECT_SECURED

    def test_empty_close(self):
        s = snap(obj_sphere([0.5, 0, 0.4], 0.02))
        out = grasp_outcome(s, [0.5, 0, 0.9], [0, 1, 0], 0.05)
        assert out.kind == GraspOutcome.EMPTY_CLOSE

    @pytest.mark.parametrize("width", [0.0, -0.01, 0.0701])
    def test_invalid_width(self, width):
        with pytest.raises(InvalidWidthError):
            grasp_outcome(snap(), [0, 0, 0], [0, 1, 0], width)

    def test_order_independent(self, rng):
        prims = [
            obj_sphere([0.5, 0, 0.4], 0.02, oid=1),
            obj_sphere([0.5, 0.01, 0.4], 0.025, oid=2),
            Primitive(CapsuleShape([0.5, -0.2, 0.38], [0.5, 0.2, 0.38], 0.015), HAND),
            Primitive(BoxShape([0.8, 0, 0.4], [0.1, 0.1, 0.1]), BODY),
        ]
        base = grasp_outcome(snap(*prims), [0.5, 0, 0.4], [0, 1, 0], 0.06)
        for _ in range(10):
            perm = list(rng.permutation(len(prims)))
            shuffled = grasp_outcome(
                snap(*[prims[i] for i in perm]), [0.5, 0, 0.4], [0, 1, 0], 0.06
            )
            assert shuffled == base

    def test_tangent_contact_is_deterministic_secure(self):
        # Grasp point exactly on the surface, closing tangentially: the
        # contact tolerance keeps this from being a coin flip.
        s = snap(obj_sphere([0.5, 0, 0.42], 0.02))
        out = grasp_outcome(s, [0.5, 0, 0.40], [0, 1, 0], 0.05)
        assert out.kind == GraspOutcome.OBJECT_SECURED

    def test_min_human_distance(self):
        s = snap(Primitive(CapsuleShape([0, 0, 0.5], [0, 0, 0.7], 0.05), HAND))
        d = min_human_distance(s, np.array([0.2, 0, 0.6]), np.array([0.3, 0, 0.6]))
        assert abs(d - 0.15) < 1e-9
        assert math.isinf(min_human_distance(snap(), np.zeros(3), np.ones(3)))


class TestPgm:
    def test_depth_round_trip_16bit_big_endian(self, tmp_path):
        from handover_sim.geometry import DepthImage

        data = np.array([[0.0, 0.1234], [1.5, 0.105]])
        img = DepthImage(2, 2, data)
        path = tmp_path / "depth.pgm"
        write_depth_pgm(path, img)
        back = read_pgm(path)
        assert back.dtype == np.uint16
        expected = np.floor(data * 1000.0 + 0.5).astype(np.uint16)
        assert np.array_equal(back, expected)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 2\n65535\n")
        # big-endian: 1500 mm = 0x05DC
        assert raw[-4:-2] == b"\x05\xdc"

    def test_class_image_8bit_codes(self, tmp_path):
        arr = np.array([[BACKGROUND, OBJECT], [HAND, BODY]], dtype=np.uint8)
        path = tmp_path / "class.pgm"
        write_class_pgm(path, arr)
        back = read_pgm(path)
        assert back.dtype == np.uint8
        assert np.array_equal(back, arr)

    def test_depth_quantization_half_up(self):
        from handover_sim.geometry import DepthImage

        img = DepthImage(3, 1, np.array([[0.0005, 0.0014, 0.0015]]))
        assert list(depth_to_millimeters(img)[0]) == [1, 1, 2]
