import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from voxhand.augment import BvhDocument, parse_bvh, pose_to_bvh, rescale_bones
from voxhand.augment.bvh import parse_bvh_document
from voxhand.errors import ChannelMismatch, DimensionMismatch, InvalidScale, ParseError
from voxhand.kinematics import HandPose, default_skeleton, forward_kinematics

NYU = default_skeleton("nyu")


def random_poses(n, seed, model=NYU):
    rng = np.random.default_rng(seed)
    return [model.random_pose(rng, rng.uniform(-100, 100, 3) + [0, 0, 500],
                              Rotation.random(random_state=int(rng.integers(2 ** 31))).as_matrix())
            for _ in range(n)]


MINIMAL = """HIERARCHY
ROOT Palm
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Tip
  {
    OFFSET 0 0 30
    CHANNELS 1 Xrotation
    End Site
    {
      OFFSET 0 0 0
    }
  }
}
MOTION
Frames: 1
Frame Time: 0.033333
1 2 3 0 0 0 45
"""


def test_minimal_document():
    model, poses = parse_bvh(MINIMAL)
    assert model.names == ("Palm", "Tip")
    assert model.joints[1].offset == (0.0, 0.0, 30.0)
    assert len(model.links()) == 1
    np.testing.assert_array_equal(poses[0].root_position, [1, 2, 3])
    assert poses[0].angles[0] == pytest.approx(np.pi / 4)


def test_rest_pose_row():
    doc = pose_to_bvh(NYU, [NYU.rest_pose((1.5, -2.0, 400.0))])
    row = doc.frames[0]
    np.testing.assert_allclose(row[:3], [1.5, -2.0, 400.0])
    assert np.all(row[3:] == 0)
    assert doc.joints[0].channels == ("Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation")


def test_empty_pose_list():
    text = pose_to_bvh(NYU, []).dumps()
    assert "Frames: 0" in text
    model, poses = parse_bvh(text)
    assert poses == [] and model.names == NYU.names


def test_round_trip_100_poses():
    poses = random_poses(100, 0)
    model, back = parse_bvh(pose_to_bvh(NYU, poses).dumps(), NYU)
    assert model.names == NYU.names
    assert [j.parent for j in model.joints] == [j.parent for j in NYU.joints]
    assert [j.dofs for j in model.joints] == [j.dofs for j in NYU.joints]
    for a, b in zip(model.joints, NYU.joints):
        assert np.max(np.abs(np.subtract(a.offset, b.offset))) < 1e-6
    for p, q in zip(poses, back):
        assert np.max(np.abs(p.root_position - q.root_position)) < 1e-6
        assert np.max(np.abs(p.root_orientation - q.root_orientation)) < 1e-6
        assert np.max(np.abs(p.angles - q.angles)) < 1e-6


def test_round_trip_keeps_template_metadata():
    model, _ = parse_bvh(pose_to_bvh(NYU, []).dumps(), NYU)
    assert model.annotation == NYU.annotation and model.frame == NYU.frame
    np.testing.assert_allclose(model.limits, NYU.limits)


def test_wrong_pose_dimension():
    with pytest.raises(DimensionMismatch):
        pose_to_bvh(NYU, [HandPose(np.zeros(3), np.eye(3), np.zeros(3))])


def test_channel_mismatch_names_row():
    text = MINIMAL.replace("1 2 3 0 0 0 45\n", "1 2 3 0 0 0 45\n1 2 3 0 0 0\n").replace("Frames: 1", "Frames: 2")
    with pytest.raises(ChannelMismatch, match="row 1"):
        parse_bvh(text)


@pytest.mark.parametrize("bad", [
    MINIMAL.replace("OFFSET 0 0 30", "OFFSET 0 zero 30"),
    MINIMAL.replace("Xrotation\n    End", "Wrotation\n    End"),
    MINIMAL.replace("Frames: 1", "Frames: 3"),
    MINIMAL.replace("45\n", "nan\n"),
    MINIMAL.replace("CHANNELS 6 Xposition", "CHANNELS 5 Xposition"),
    MINIMAL.replace("HIERARCHY", "HIERARCHX"),
])
def test_malformed_documents(bad):
    with pytest.raises(ParseError):
        parse_bvh(bad)


def test_parse_error_carries_line_and_token():
    with pytest.raises(ParseError) as e:
        parse_bvh(MINIMAL.replace("OFFSET 0 0 30", "OFFSET 0 zero 30"))
    assert e.value.line == 8 and e.value.token == "zero"


FULL = pose_to_bvh(NYU, random_poses(2, 1)).dumps()


@settings(max_examples=150, deadline=None)
@given(st.integers(0, len(FULL) - 1))
def test_truncations_are_rejected(cut):
    with pytest.raises(ParseError):
        parse_bvh(FULL[:cut])


def test_whitespace_is_free_form():
    squashed = "\n".join(" ".join(l.split()) for l in MINIMAL.splitlines()) + "\n"
    spaced = MINIMAL.replace(" ", "  \t")
    for text in (squashed, spaced):
        assert np.allclose(parse_bvh(text)[1][0].angles, np.pi / 4)


# ---------------------------------------------------------------- rescaling

def test_rescale_identity():
    doc = pose_to_bvh(NYU, random_poses(3, 2))
    assert rescale_bones(doc, 1.0).dumps() == doc.dumps()


def test_rescale_global_scales_links_keeps_motion():
    poses = random_poses(20, 3)
    doc = pose_to_bvh(NYU, poses)
    big = rescale_bones(doc, 1.2)
    np.testing.assert_array_equal(big.frames, doc.frames)
    model, back = parse_bvh(big.dumps(), NYU)
    for p in poses:
        a = forward_kinematics(NYU, p)
        b = forward_kinematics(doc.skeleton(NYU).scaled(1.2), p)
        for parent, child in NYU.links():
            la = np.linalg.norm(a[child] - a[parent])
            lb = np.linalg.norm(b[child] - b[parent])
            assert abs(lb - 1.2 * la) < 1e-9
    for j, k in zip(model.joints[1:], NYU.joints[1:]):
        np.testing.assert_allclose(j.offset, np.multiply(k.offset, 1.2), atol=1e-6)


def test_rescale_commutes_with_encoding():
    poses = random_poses(5, 4)
    a = rescale_bones(pose_to_bvh(NYU, poses), 1.1)
    b = pose_to_bvh(NYU.scaled(1.1), poses)
    assert a.dumps() == b.dumps()


def test_rescale_per_joint():
    doc = pose_to_bvh(NYU, [])
    out = rescale_bones(doc, {"I2": 2.0})
    i = [j.name for j in doc.joints].index("I2")
    np.testing.assert_allclose(out.joints[i].offset, np.multiply(doc.joints[i].offset, 2))
    assert out.joints[i + 1].offset == doc.joints[i + 1].offset


@pytest.mark.parametrize("bad", [0.0, -1.0, {"I2": 0.0}, {"Nope": 1.1}])
def test_rescale_invalid(bad):
    with pytest.raises(InvalidScale):
        rescale_bones(pose_to_bvh(NYU, []), bad)


def test_document_frame_shape():
    doc = parse_bvh_document(MINIMAL)
    assert isinstance(doc, BvhDocument) and doc.frames.shape == (1, 7) and doc.num_channels == 7
