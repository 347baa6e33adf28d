import math

import numpy as np
import pytest

from mvak import vocab
from mvak.geometry import (
    CAMERA_GUIDED,
    FILM_EXTENT,
    GEOMETRY_GUIDED,
    ANCHOR,
    Primitive,
    Scene,
    camera_set,
    compute_raymap,
    epipolar_row_property,
    generate_scene,
    make_camera,
    rasterize,
)
from mvak.numerics import DomainError, Rng


def spherical_forward(elevation, azimuth):
    """Independent oracle: unit vector from camera toward the origin."""
    e, a = math.radians(elevation), math.radians(azimuth)
    cam = np.array([math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
    return -cam / np.linalg.norm(cam)


def sphere_first_hit(origin, direction, center, radius):
    """Independent quadratic-formula intersector used as the cross-view oracle."""
    o = np.asarray(origin) - np.asarray(center)
    d = np.asarray(direction)
    a = d @ d
    b = 2 * o @ d
    c = o @ o - radius * radius
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    t = (-b - math.sqrt(disc)) / (2 * a)
    if t <= 1e-9:
        return None
    return np.asarray(origin) + t * d


class TestMakeCamera:
    def test_front_view_convention(self):
        _, _, forward, _ = make_camera(0, 0).frame()
        assert np.allclose(forward, [0, 0, -1], atol=1e-12)

    def test_back_view_negates_forward(self):
        f0 = make_camera(0, 0).frame()[2]
        f180 = make_camera(0, 180).frame()[2]
        assert np.allclose(f180, -f0, atol=1e-12)

    def test_oblique_view_matches_spherical_oracle(self):
        cam = make_camera(30, 45)
        _, _, forward, _ = cam.frame()
        assert np.allclose(forward, spherical_forward(30, 45), atol=1e-9)
        assert abs(np.linalg.norm(forward) - 1) < 1e-9

    def test_frames_orthonormal(self):
        for elev in (-90, -45, 0, 30, 90):
            for az in (0, 17, 90, 200, 359):
                right, up, forward, _ = make_camera(elev, az).frame()
                for v in (right, up, forward):
                    assert abs(np.linalg.norm(v) - 1) < 1e-9
                assert abs(right @ up) < 1e-9
                assert abs(right @ forward) < 1e-9
                assert abs(up @ forward) < 1e-9

    def test_elevation_domain(self):
        with pytest.raises(DomainError):
            make_camera(91, 0)

    def test_azimuth_normalized(self):
        assert make_camera(0, -45).azimuth == 315.0
        assert make_camera(0, 405).azimuth == 45.0


class TestCameraSet:
    def test_camera_guided(self):
        views = camera_set(CAMERA_GUIDED)
        assert len(views) == 6
        assert all(v.elevation == 0 for v in views)
        assert [v.azimuth for v in views] == [0, 45, 90, 180, 270, 315]

    def test_geometry_guided_has_top_and_bottom(self):
        views = camera_set(GEOMETRY_GUIDED)
        assert len(views) == 6
        poles = [v for v in views if abs(v.elevation) == 90]
        assert len(poles) == 2
        assert {v.elevation for v in poles} == {90, -90}

    def test_anchor_rings(self):
        views = camera_set(ANCHOR)
        assert len(views) == 8
        assert sum(1 for v in views if v.elevation == 0) == 4
        assert sum(1 for v in views if v.elevation == 30) == 4
        assert sorted(v.azimuth for v in views) == [45.0 * k for k in range(8)]


class TestRaymap:
    def test_orthographic_direction_constancy_and_grid(self):
        cam = make_camera(0, 0)
        rm = compute_raymap(cam, 8, 8)
        dirs = rm[3:]
        assert np.allclose(dirs, dirs[:, :1, :1], atol=0)
        origins = rm[:3]
        dx = np.diff(origins[0], axis=1)
        assert np.allclose(dx, FILM_EXTENT / 8, atol=1e-12)
        dy = np.diff(origins[1], axis=0)
        assert np.allclose(dy, -FILM_EXTENT / 8, atol=1e-12)

    def test_perspective_origin_constancy(self):
        cam = make_camera(20, 110, projection="perspective")
        rm = compute_raymap(cam, 6, 6)
        origins = rm[:3]
        assert np.allclose(origins, origins[:, :1, :1], atol=0)

    def test_directions_unit_norm(self):
        for proj in ("orthographic", "perspective"):
            cam = make_camera(25, 70, projection=proj)
            rm = compute_raymap(cam, 7, 5)
            norms = np.linalg.norm(rm[3:], axis=0)
            assert np.abs(norms - 1).max() < 1e-6

    def test_perspective_center_pixel_is_forward(self):
        cam = make_camera(35, 200, projection="perspective")
        rm = compute_raymap(cam, 9, 7)
        center_dir = rm[3:, 4, 3]
        forward = cam.frame()[2]
        assert np.abs(center_dir - forward).max() < 1e-6


def single_primitive_scene(kind, half_extent=0.5, center=(0, 0, 0), rotation=None):
    slots = {"cube": 6, "sphere": 4, "cylinder": 6}[kind]
    names = vocab.COLORS[:slots]
    albedos = np.array([vocab.COLOR_RGB[n] for n in names])
    prim = Primitive(
        kind=kind,
        center=np.asarray(center, dtype=np.float64),
        half_extent=half_extent,
        rotation=np.eye(3) if rotation is None else rotation,
        albedos=albedos,
        color_names=names,
    )
    return Scene([prim], vocab.caption_for([(names[0], kind)]))


class TestRasterize:
    def test_cube_front_view_square(self):
        scene = single_primitive_scene("cube", half_extent=0.5)
        maps = rasterize(scene, make_camera(0, 0), 64, 64)
        mask = maps.mask[0] > 0
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        # 1.0 wide cube on a 2.2 film at 64 px: ~29 px, centered.
        assert 27 <= rows.size <= 31 and 27 <= cols.size <= 31
        assert abs((rows[0] + rows[-1]) / 2 - 31.5) < 1.0
        assert abs((cols[0] + cols[-1]) / 2 - 31.5) < 1.0
        # Front face: z constant at +0.5, x/y vary linearly with the pixel grid.
        z = maps.position[2][mask]
        assert np.abs(z - 0.5).max() < 1e-9
        xs = maps.position[0][32, cols]
        assert np.allclose(np.diff(xs), FILM_EXTENT / 64, atol=1e-9)

    def test_sphere_normals_match_identity(self):
        scene = single_primitive_scene("sphere", half_extent=0.4, center=(0.1, -0.05, 0.2))
        maps = rasterize(scene, make_camera(33, 120), 48, 48)
        mask = maps.mask[0] > 0
        assert mask.sum() > 50
        pos = maps.position.transpose(1, 2, 0)[mask]
        nrm = maps.normal.transpose(1, 2, 0)[mask]
        expected = pos - np.array([0.1, -0.05, 0.2])
        expected /= np.linalg.norm(expected, axis=1, keepdims=True)
        assert np.abs(nrm - expected).max() < 1e-5
        assert np.abs(np.linalg.norm(nrm, axis=1) - 1).max() < 1e-5

    def test_background_white_and_zero_maps(self):
        scene = single_primitive_scene("sphere", half_extent=0.3)
        maps = rasterize(scene, make_camera(0, 0), 32, 32)
        bg = maps.mask[0] == 0
        assert bg.any()
        assert np.all(maps.rgb[:, bg] == 1.0)
        assert np.all(maps.position[:, bg] == 0.0)
        assert np.all(maps.normal[:, bg] == 0.0)
        assert np.all(np.isinf(maps.depth[0][bg]))

    def test_positions_inside_unit_sphere(self):
        rng = Rng(42)
        for _ in range(5):
            scene = generate_scene(rng)
            maps = rasterize(scene, make_camera(10, 75), 32, 32)
            mask = maps.mask[0] > 0
            if not mask.any():
                continue
            pos = maps.position.transpose(1, 2, 0)[mask]
            assert np.linalg.norm(pos, axis=1).max() <= 1.0 + 1e-9

    def test_cross_view_position_consistency_sphere_oracle(self):
        # A surface point from view A, re-intersected along view B's ray through
        # that point, must land back on itself whenever it is visible from B.
        center = np.array([0.15, 0.1, -0.2])
        radius = 0.45
        scene = single_primitive_scene("sphere", half_extent=radius, center=center)
        cam_a = make_camera(0, 0)
        maps_a = rasterize(scene, cam_a, 32, 32)
        mask = maps_a.mask[0] > 0
        pts = maps_a.position.transpose(1, 2, 0)[mask]
        for cam_b in (make_camera(0, 45), make_camera(0, 315), make_camera(0, 90)):
            _, _, fwd_b, _ = cam_b.frame()
            visible = 0
            for p in pts[:: max(1, len(pts) // 60)]:
                hit = sphere_first_hit(p - 3.0 * fwd_b, fwd_b, center, radius)
                assert hit is not None
                if np.linalg.norm(hit - p) < 1e-4:
                    visible += 1
                else:
                    # Occluded from B: p must then be the *far* intersection.
                    far = sphere_first_hit(p + 1e-6 * fwd_b, fwd_b, center, radius)
                    assert far is None or np.linalg.norm(far - p) < 1e-4
            assert visible > 10

    def test_rasterizer_agrees_with_oracle_ray_cast(self):
        # Production position maps vs the test's own quadratic intersector.
        center = np.array([0.0, 0.05, 0.1])
        radius = 0.5
        scene = single_primitive_scene("sphere", half_extent=radius, center=center)
        for cam in (make_camera(0, 0), make_camera(0, 45), make_camera(25, 310)):
            maps = rasterize(scene, cam, 24, 24)
            rm = compute_raymap(cam, 24, 24)
            mask = maps.mask[0] > 0
            for r, c in zip(*np.where(mask)):
                o = rm[:3, r, c]
                d = rm[3:, r, c]
                hit = sphere_first_hit(o, d, center, radius)
                assert hit is not None
                assert np.linalg.norm(maps.position[:, r, c] - hit) < 1e-4

    def test_rotated_cube_positions_still_on_surface(self):
        rot = Rng(3)
        from mvak.geometry import _random_rotation

        rotation = _random_rotation(rot)
        scene = single_primitive_scene("cube", half_extent=0.4, rotation=rotation)
        maps = rasterize(scene, make_camera(15, 60), 32, 32)
        mask = maps.mask[0] > 0
        pos = maps.position.transpose(1, 2, 0)[mask]
        local = pos @ rotation
        assert np.abs(np.abs(local).max(axis=1) - 0.4).max() < 1e-7


class TestEpipolarRowProperty:
    def test_same_camera_always_true(self):
        cam = make_camera(0, 90)
        rng = Rng(1)
        for _ in range(10):
            p = rng.normal(size=3) * 0.4
            assert epipolar_row_property(cam, cam, p)

    def test_holds_across_azimuths(self):
        cams = [make_camera(0, az) for az in (0, 90, 270)]
        rng = Rng(5)
        scene = single_primitive_scene("sphere", half_extent=0.5)
        maps = rasterize(scene, cams[0], 32, 32)
        mask = maps.mask[0] > 0
        pts = maps.position.transpose(1, 2, 0)[mask]
        idx = rng.choice(len(pts), size=min(40, len(pts)), replace=False)
        for i in idx:
            for ca in cams:
                for cb in cams:
                    assert epipolar_row_property(ca, cb, pts[i])

    def test_elevated_camera_rejected(self):
        with pytest.raises(DomainError):
            epipolar_row_property(make_camera(0, 0), make_camera(10, 0), np.zeros(3))

    def test_perspective_rejected(self):
        with pytest.raises(DomainError):
            epipolar_row_property(
                make_camera(0, 0, projection="perspective"), make_camera(0, 0), np.zeros(3)
            )


class TestGenerateScene:
    def test_deterministic(self):
        s1 = generate_scene(Rng(0))
        s2 = generate_scene(Rng(0))
        assert s1.caption_tokens == s2.caption_tokens
        assert len(s1.primitives) == len(s2.primitives)
        for a, b in zip(s1.primitives, s2.primitives):
            assert a.kind == b.kind
            assert np.array_equal(a.center, b.center)
            assert np.array_equal(a.rotation, b.rotation)

    def test_primitives_inside_unit_sphere(self):
        for seed in range(1000):
            scene = generate_scene(Rng(seed))
            assert 1 <= len(scene.primitives) <= 3
            for p in scene.primitives:
                assert np.linalg.norm(p.center) + p.bounding_radius() <= 1.0 + 1e-9

    def test_caption_decodes_to_scene_contents(self):
        for seed in range(50):
            scene = generate_scene(Rng(seed))
            words = vocab.decode_ids(scene.caption_tokens)
            chunks = " ".join(words).split(" and ")
            assert len(chunks) == len(scene.primitives)
            for chunk, prim in zip(chunks, scene.primitives):
                color, kind = chunk.split()
                assert kind == prim.kind
                assert color in prim.color_names
