import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from wildcode import codec, rotmath
from wildcode import scenegen as sg
from wildcode import scenelang as sl
from wildcode.assets import CATEGORIES, ORIENTABLE

SMALL = {"embed_dim": 16, "feature_dim": 64}


@pytest.fixture(scope="module")
def cfg():
    return sg.GenConfig(**SMALL)


@pytest.fixture(scope="module")
def pool(cfg):
    return sg.get_pool(cfg)


def scene_with(instances, cfg, pool, cam_pos=(-20.0, 0.0, 1.5), cam_yaw=0.0):
    cam = sg.Camera(np.array(cam_pos), rotmath.rot_z(cam_yaw))
    layout = (tuple(instances), 0, {k: (lo + hi) / 2 for k, (lo, hi) in sg.ATTRIBUTE_RANGES.items()})
    return sg.make_view(layout, cam, 50.0, pool)


def inst(x, y, h=2.0, aspect=1.0, aid=0, cat="boulder"):
    return sg.Instance(aid, cat, np.array([x, y, 0.0]), h, np.eye(3), aspect)


def test_pool_shape(pool, cfg):
    assert len(pool.index) == 60 * 8
    assert all(len(pool.by_category[c]) == 10 for c in CATEGORIES)
    ids = sorted(a for c in CATEGORIES for a in pool.by_category[c])
    assert ids == list(range(60))
    # ids are shuffled, so categories are not contiguous id blocks
    assert sorted(pool.by_category["boulder"]) != list(range(10))


def test_empty_counts(cfg, pool):
    c = dataclasses.replace(cfg, counts={k: 0 for k in CATEGORIES})
    s = sg.sample_scene(c, np.random.default_rng(0), pool)
    assert s.instances == ()
    prog, meta = sg.scene_to_program(s, pool, c)
    assert prog.objects == () and meta == []


def test_sample_scene_deterministic(cfg, pool):
    a = sg.sample_scene(cfg, np.random.default_rng(5), pool)
    b = sg.sample_scene(cfg, np.random.default_rng(5), pool)
    assert len(a.instances) == len(b.instances)
    for x, y in zip(a.instances, b.instances):
        assert x.asset_id == y.asset_id
        np.testing.assert_array_equal(x.position, y.position)
        np.testing.assert_array_equal(x.rotation, y.rotation)
    np.testing.assert_array_equal(a.camera.position, b.camera.position)
    assert sl.emit_program(sg.scene_to_program(a, pool, cfg)[0]) == sl.emit_program(sg.scene_to_program(b, pool, cfg)[0])


def test_category_counts(cfg, pool):
    c = dataclasses.replace(cfg, counts={"boulder": 2, "bush": 0, "tree": 1, "carnivore": 3, "herbivore": 1, "bird": 4})
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        layout = sg.sample_layout(c, rng, pool)
        got = {k: 0 for k in CATEGORIES}
        for i in layout[0]:
            got[i.category] += 1
            assert pool.asset(i.asset_id).category == i.category
        assert got == c.counts


def test_instancing_repeats_assets(cfg, pool):
    rng = np.random.default_rng(2)
    s = sg.sample_scene(cfg, rng, pool)
    assert len({i.asset_id for i in s.instances}) < len(s.instances)


def test_raster_bounds(cfg, pool):
    s = scene_with([inst(0.0, 0.0)], cfg, pool)
    n = sg.rasterize_counts(s, 128)[0]
    assert 0 < n <= 128 * 128
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = sg.sample_scene(cfg, rng, pool)
        counts = sg.rasterize_counts(s, 128)
        assert counts.sum() <= 128 * 128 and counts.min() >= 0


def test_raster_offscreen_and_behind(cfg, pool):
    s = scene_with([inst(-40.0, 0.0), inst(0.0, 60.0)], cfg, pool)
    assert list(sg.rasterize_counts(s, 64)) == [0, 0]


def test_raster_occlusion(cfg, pool):
    s = scene_with([inst(0.0, 0.0, h=1.0), inst(-10.0, 0.0, h=4.0, aspect=2.0)], cfg, pool)
    counts = sg.rasterize_counts(s, 128)
    assert counts[0] == 0 and counts[1] > 0


def test_raster_disjoint_matches_solo(cfg, pool):
    a, b = inst(0.0, 5.0, h=1.5), inst(0.0, -5.0, h=1.5)
    both = sg.rasterize_counts(scene_with([a, b], cfg, pool), 128)
    solo_a = sg.rasterize_counts(scene_with([a], cfg, pool), 128)
    solo_b = sg.rasterize_counts(scene_with([b], cfg, pool), 128)
    assert both[0] == solo_a[0] > 0 and both[1] == solo_b[0] > 0


def test_raster_ellipse_area(cfg, pool):
    # a large unoccluded ellipse covers about pi*a*b pixels
    s = scene_with([inst(0.0, 0.0, h=6.0, aspect=1.0)], cfg, pool, cam_pos=(-20.0, 0.0, 3.0))
    f = (128 / 2) / math.tan(math.radians(30))
    r = f * 3.0 / 20.0
    assert sg.rasterize_counts(s, 128)[0] == pytest.approx(math.pi * r * r, rel=0.02)


def test_program_is_saliency_ordered_and_valid(cfg, pool):
    rng = np.random.default_rng(4)
    for _ in range(30):
        s = sg.sample_scene(cfg, rng, pool)
        prog, _meta = sg.scene_to_program(s, pool, cfg)
        assert sl.validate(prog) == []
        counts = sg.rasterize_counts(s, cfg.resolution, cfg.fov_deg)
        assert [o.pixels for o in prog.objects] == sorted((int(c) for c in counts if c > 0), reverse=True)[:25]
        assert sl.order_by_saliency(prog).objects == prog.objects


def test_non_orientables_have_zero_camera_yaw(cfg, pool):
    rng = np.random.default_rng(5)
    s = sg.sample_scene(cfg, rng, pool)
    counts = sg.rasterize_counts(s)
    for o in sg.view_objects(s, counts):
        if o.category not in ORIENTABLE:
            # program rotations are camera-local; their yaw about world up is zero
            assert abs(rotmath.euler_zyx(o.rotation)[0]) < 1e-9


def test_truncates_to_max_objects(cfg, pool):
    c = dataclasses.replace(cfg, counts={k: 8 for k in CATEGORIES})
    rng = np.random.default_rng(6)
    for _ in range(5):
        prog, _ = sg.scene_to_program(sg.sample_scene(c, rng, pool), pool, c)
        assert len(prog.objects) <= 25


def test_fuzz_zero_is_identity(cfg, pool):
    a = sg.sample_scene(cfg, np.random.default_rng(7), pool).attributes
    assert sg.fuzz_attributes(a, np.random.default_rng(0), 0.0) is a


def fuzz_deviation(x, y, name):
    if name == "sun_rotation":
        d = abs(y - x) % 360.0
        return min(d, 360.0 - d)
    return abs(y - x)


def test_fuzz_bound_and_ground_untouched(cfg, pool):
    a = sg.sample_scene(cfg, np.random.default_rng(8), pool).attributes
    rng = np.random.default_rng(9)
    for _ in range(2000):
        b = sg.fuzz_attributes(a, rng, 0.005)
        assert b.ground is a.ground
        for k in sl.SCALAR_SETTERS:
            assert fuzz_deviation(getattr(a, k), getattr(b, k), k) <= 0.005 * abs(getattr(a, k)) + 1e-12


def test_fuzz_uniform():
    a = sl.SceneAttributes(*([1.0] * 10))
    rng = np.random.default_rng(10)
    u = np.array([sg.fuzz_attributes(a, rng, 0.005).scalars()[0] - 1.0 for _ in range(20_000)])
    assert stats.kstest(u, stats.uniform(loc=-0.005, scale=0.01).cdf).pvalue > 0.01


def test_features_deterministic_and_order_invariant(cfg, pool):
    s = sg.sample_scene(cfg, np.random.default_rng(11), pool)
    f1 = sg.forward_features(s, pool, 1, cfg)
    f2 = sg.forward_features(s, pool, 1, cfg)
    np.testing.assert_array_equal(f1, f2)
    assert f1.shape == (sg.feature_dim(cfg),)
    perm = dataclasses.replace(s, instances=s.instances[::-1])
    np.testing.assert_allclose(sg.forward_features(perm, pool, 1, cfg), f1, atol=1e-10)
    assert not np.allclose(sg.forward_features(s, pool, 2, cfg), f1)


def test_features_separate_asset_ids(cfg, pool):
    rng = np.random.default_rng(12)
    checked = 0
    while checked < 1000:
        s = sg.sample_scene(cfg, rng, pool)
        counts = sg.rasterize_counts(s)
        visible = [i for i, n in enumerate(counts) if n > 0]
        if not visible:
            continue
        k = visible[int(rng.integers(len(visible)))]
        old = s.instances[k]
        other = [a for a in pool.by_category[old.category] if a != old.asset_id]
        new = dataclasses.replace(old, asset_id=int(rng.choice(other)))
        t = dataclasses.replace(s, instances=s.instances[:k] + (new,) + s.instances[k + 1:])
        d = np.linalg.norm(sg.forward_features(s, pool, 1, cfg) - sg.forward_features(t, pool, 1, cfg))
        assert d > 0
        checked += 1


def test_emit_one(tmp_path, cfg):
    m = sg.emit_dataset(cfg, 1, 1, tmp_path)
    assert len(m.records) == 1
    rec = m.records[0]
    text = m.path(rec, "program").read_text()
    prog = sl.parse_program(text)
    assert sl.emit_program(prog) == text
    s = codec.read_stream(m.path(rec, "stream"))
    assert sl.emit_program(codec.decode(s)) == text
    assert np.load(m.path(rec, "features")).shape == (sg.feature_dim(cfg),)
    again = sg.Manifest.load(tmp_path)
    assert again.records == m.records and again.config == cfg


def test_emit_reproducible(tmp_path, cfg):
    sg.emit_dataset(cfg, 3, 2, tmp_path / "a")
    sg.emit_dataset(cfg, 3, 2, tmp_path / "b", jobs=2)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


def test_emit_corpus_validates(tmp_path, cfg):
    m = sg.emit_dataset(cfg, 100, 10, tmp_path)
    assert len(m.records) == 1000
    assert len(m.split("heldout")) == 100
    index = sg.get_pool(cfg).index
    for rec in m.records:
        prog = codec.decode(codec.read_stream(m.path(rec, "stream")))
        assert sl.validate(prog) == []
        assert len(prog.objects) == len(rec["objects"])
        for o, meta in zip(prog.objects, rec["objects"]):
            # stored embedding retrieves the recorded asset
            assert index.query(o.appearance, k=1)[0][0].asset_id == meta["asset_id"]
