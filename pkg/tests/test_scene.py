import numpy as np
import pytest

from conftest import moving_box_bundle, rigid_bundle, spec_bundle
from motionparse.errors import DomainError, FormatError
from motionparse.geometry import PoseSE3
from motionparse.scene import SceneRenderer, SceneSpec, random_scene_spec, synthesize_scene


def test_static_scene_has_zero_flow_and_full_visibility():
    b = spec_bundle()
    assert np.max(np.abs(b.flow_fwd)) < 1e-12
    assert b.visibility.all()
    assert b.segment.any() and set(np.unique(b.segment)) == {0.0, 1.0}
    assert np.array_equal(b.image_t, b.image_s)


def test_box_translation_flow_is_fx_dx_over_z():
    b = spec_bundle(fx=200.0, fy=200.0, box_depth=5.0, box_motion=(0.1, 0.0, 0.0), box_width=1.0, box_height=0.8)
    on_box = (b.segment > 0) & b.flow_fwd_valid
    assert np.allclose(b.flow_fwd[on_box], [4.0, 0.0], atol=1e-9)


def test_forward_camera_motion_leaves_principal_point_fixed():
    b = spec_bundle(cx=64.0, cy=48.0, camera_twist=(0.0, 0.0, 0.3, 0.0, 0.0, 0.0), has_box=0)
    assert np.allclose(b.flow_fwd[48, 64], 0.0, atol=1e-12)


def test_depth_is_positive_and_plane_depth_exact():
    b = spec_bundle(has_box=0, bg_depth=7.5)
    assert np.allclose(b.depth_t, 7.5)


def test_box_outside_frustum_is_rejected():
    with pytest.raises(DomainError):
        SceneRenderer(SceneSpec(box_center_x=5.0))


def test_invalid_spec_values():
    with pytest.raises(DomainError):
        SceneSpec(box_depth=20.0)
    with pytest.raises(DomainError):
        SceneSpec(stereo_baseline=-1.0)


def test_spec_text_round_trip(tmp_path):
    spec = random_scene_spec(7, box_motion=(0.1, 0.0, 0.02))
    path = tmp_path / "scene.txt"
    spec.save(path)
    assert SceneSpec.load(path) == spec
    with pytest.raises(FormatError):
        SceneSpec.from_text("unknown_key=1\n")


def test_rendering_is_deterministic():
    a = SceneRenderer(random_scene_spec(3)).bundle()
    b = SceneRenderer(random_scene_spec(3)).bundle()
    assert np.array_equal(a.image_t, b.image_t) and np.array_equal(a.image_s, b.image_s)


def test_flow_is_consistent_with_pose_and_depth():
    b = rigid_bundle(1)
    from motionparse.geometry import rigid_flow_2d
    flow, _ = rigid_flow_2d(b.depth_t, b.pose_ts, b.intrinsics)
    assert np.nanmax(np.abs(flow - b.flow_fwd)) < 1e-9


def test_multi_frame_sequence():
    bundles = synthesize_scene(SceneSpec(frames=3, camera_twist=(0.05, 0, 0, 0, 0, 0)))
    assert [b.frame_index for b in bundles] == [0, 1]
    assert np.allclose(bundles[0].depth_s, bundles[1].depth_t)


def test_stereo_partner_is_a_baseline_shift():
    b = spec_bundle(stereo_baseline=0.2)
    assert isinstance(b.pose_tc, PoseSE3)
    assert np.allclose(b.pose_tc.translation, [-0.2, 0.0, 0.0])
    assert b.image_c.shape == b.image_t.shape



def test_dynamic_motion_truth_on_static_camera_is_the_translation():
    b = moving_box_bundle(2, box_motion=(0.1, 0.0, 0.0), static_camera=True)
    on = b.segment > 0
    assert np.allclose(b.extras["dynamic_motion"][on], [0.1, 0.0, 0.0], atol=1e-12)
