import numpy as np
import pytest

from unimlvg import scenesim
from unimlvg.errors import GenerationError, ValidationError
from unimlvg.geometry import project_points
from unimlvg.scenesim import NIGHT_FACTOR, SceneSpec, actor_id_map, export_annotations, generate_scene, render_frame


def test_generation_is_deterministic():
    a = generate_scene(5, SceneSpec(horizon=3))
    b = generate_scene(5, SceneSpec(horizon=3))
    assert scenesim.world_to_meta(a) == scenesim.world_to_meta(b)
    assert np.array_equal(render_frame(a, a.rig(), 1, 2), render_frame(b, b.rig(), 1, 2))


def test_identity_colours_are_distinct(world):
    cols = [tuple(a.color) for a in world.actors]
    assert len(set(cols)) == len(cols) == 4


@pytest.mark.parametrize("spec", [SceneSpec(n_actors=99), SceneSpec(horizon=0), SceneSpec(attributes=("dusk", "sunny"))])
def test_unrealisable_specs(spec):
    with pytest.raises(GenerationError):
        generate_scene(0, spec)


def test_box_centres_project_onto_actor_pixels(world):
    rig = world.rig(frames=range(3))
    ann = export_annotations(world, rig)
    hits = same = 0
    for t in range(3):
        for v in range(rig.num_views):
            ids = actor_id_map(world, rig, t, v)
            uv, depth = project_points(ann.boxes[t, :, :3], rig, t, v)
            for i in range(len(ann.actor_ids)):
                u, w = uv[i]
                if depth[i] > 2 and 0 <= u < 80 and 0 <= w < 48:
                    hits += 1
                    assert ids[int(w), int(u)] >= 0  # this actor or a nearer one
                    same += ids[int(w), int(u)] == i
    assert hits > 0 and same >= 0.8 * hits


def test_tokens_count_visible_vehicles(world):
    rig = world.rig(frames=range(2))
    ann = export_annotations(world, rig)
    assert ann.tokens[0][0][:3] == ["front", "day", "sunny"]
    assert ann.tokens[1][3][0] == "back"
    assert all(row[v][3].startswith("vehicles_") for row in ann.tokens for v in range(6))


def test_night_scales_every_pixel(world, night_world):
    day = render_frame(world, world.rig(), 0, 0)
    night = render_frame(night_world, night_world.rig(), 0, 0)
    assert np.allclose(night, day * NIGHT_FACTOR, atol=1e-6)


def test_dashed_interior_lines():
    w = generate_scene(3, SceneSpec(curvature=0.0, dash=(3.0, 6.0)))
    inner = w.lane_boundaries[1]
    s = np.arange(0.0, 18.0, 0.5)
    painted = w.painted(s, np.full_like(s, inner))
    assert painted[s % 9.0 < 3.0].all() and not painted[s % 9.0 >= 3.0].any()
    edge = np.full_like(s, w.lane_boundaries[0])
    assert w.painted(s, edge).all()


def test_arc_length_on_a_curve():
    w = generate_scene(3, SceneSpec(curvature=0.01))
    x, y, _ = w.road_point(np.array([0.0, 25.0, 80.0]), np.array([0.0, 1.5, -3.0]))
    assert np.allclose(w.arc_length(x, y), [0.0, 25.0, 80.0])


def test_rig_anchor_per_clip(world):
    rig = world.rig(frames=range(4, 8))
    assert np.array_equal(rig.extrinsics[0, 0], np.eye(4))
    assert rig.frame_ids == [4, 5, 6, 7]
    with pytest.raises(ValidationError):
        world.rig(frames=[world.horizon])


def test_dataset_roundtrip(tmp_path):
    spec = SceneSpec(horizon=2, n_actors=2, supersample=1)
    paths = scenesim.write_dataset(tmp_path, 4, 3, spec, attributes=[("night", "rainy"), ("day", "snowy")])
    assert len(paths) == 3
    scenes = scenesim.read_dataset(tmp_path)
    assert [w.attributes[0] for w, _ in scenes] == [("night", "rainy"), ("day", "snowy"), ("night", "rainy")]
    w0, f0 = scenes[0]
    assert f0.shape == (2, 6, 48, 80, 3)
    assert np.array_equal(f0, scenesim.render_clip(w0, w0.rig()))
    with pytest.raises(ValidationError):
        scenesim.read_dataset(tmp_path / "missing")
