import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vln3d import tensor as T
from vln3d.errors import ConfigurationError, ContractViolation
from vln3d.pretext import (
    AugmentParams,
    PretextConfig,
    PretextModel,
    PretextScene,
    PretextTrainConfig,
    QuerySample,
    RegionQuery,
    answer_query,
    augment_cloud,
    augmented_scene,
    balance_samples,
    build_pretext_scene,
    encode_query,
    query_oracle,
    sample_regions,
    scene_samples,
    train_pretext,
)
from vln3d.reconstruct import DESK_VOXELS, SemanticPointCloud, voxelize
from vln3d.rng import make_rng
from vln3d.sparse_conv import EncoderConfig

SMALL = PretextConfig(EncoderConfig.desk(16), heads=2, class_embed=4)


@pytest.fixture(scope="module")
def scenes():
    return [build_pretext_scene(s) for s in range(6)]


def _brute(points, classes, q):
    for p, c in zip(points, classes):
        if c == q.c and all(q.lo[i] <= p[i] <= q.hi[i] for i in range(3)):
            return True
    return False


def test_empty_scene_is_always_false():
    grid = voxelize(SemanticPointCloud.empty(), DESK_VOXELS)
    q = RegionQuery(-4, -4, -2, 4, 4, 2, 3)
    assert not query_oracle(grid, q) and not query_oracle(SemanticPointCloud.empty(), q)
    assert sample_regions(grid, 10, make_rng(0)) == []


def test_full_range_finds_present_classes(scenes):
    g = scenes[0].grid
    for c in range(12):
        q = RegionQuery(-4, -4, -2, 4, 4, 2, c)
        assert query_oracle(g, q) == bool(g.labels[:, c].any())


def test_degenerate_box_rejected():
    with pytest.raises(ContractViolation):
        RegionQuery(1, 0, 0, 0, 1, 1, 0)


def test_cloud_and_grid_oracles_agree_up_to_boundary_voxels(scenes):
    rng = make_rng(1)
    s = np.asarray(DESK_VOXELS.voxel_size)
    r = np.asarray(DESK_VOXELS.half_range)
    disagreements = 0
    for i in range(1000):
        sc = scenes[i % len(scenes)]
        cloud = sc.cloud
        lo = rng.uniform(-4, 3, size=3) * [1, 1, 0.5]
        q = RegionQuery(*lo, *(lo + rng.uniform(0.1, 3.0, size=3)), int(rng.integers(0, 12)))
        a, b = query_oracle(cloud, q), query_oracle(sc.grid, q)
        assert a == _brute(cloud.points, cloud.classes, q) if i < 50 else True
        if a == b:
            continue
        disagreements += 1
        pts = cloud.points[cloud.classes == q.c]
        centers = (np.floor((pts + r) / s) + 0.5) * s - r
        inside_pt = np.all((pts >= q.lo) & (pts <= q.hi), axis=1)
        inside_ctr = np.all((centers >= q.lo) & (centers <= q.hi), axis=1)
        # every disagreement comes from points and their voxel centres on opposite sides of a face
        assert np.any(inside_pt != inside_ctr)
    assert disagreements < 300


def test_sampled_regions_contain_occupied_voxels(scenes):
    g = scenes[1].grid
    centers = g.voxel_centers()
    smp = sample_regions(g, 300, make_rng(2))
    assert len(smp) == 300 and sample_regions(g, 0, make_rng(2)) == []
    for x in smp:
        q = x.query
        assert np.any(np.all((centers >= q.lo) & (centers <= q.hi), axis=1))
        assert x.answer == query_oracle(g, q)


def test_sampling_deterministic(scenes):
    g = scenes[2].grid
    assert sample_regions(g, 50, make_rng(3)) == sample_regions(g, 50, make_rng(3))


def test_positives_are_rare_before_balancing(scenes):
    pos = sum(x.answer for sc in scenes for x in sample_regions(sc.grid, 2000, make_rng(4)))
    assert pos < 0.4 * 6 * 2000


def test_balance_truncates_negatives():
    q = lambda c: RegionQuery(0, 0, 0, 1, 1, 1, c)
    smp = [QuerySample(q(0), True)] * 10 + [QuerySample(q(0), False)] * 50 + [QuerySample(q(1), False)] * 7
    out = balance_samples(smp, make_rng(0))
    assert sum(s.answer for s in out) == 10 and sum(not s.answer for s in out) == 10
    assert all(s.query.c == 0 for s in out)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), max_size=60), st.integers(0, 2**32 - 1))
def test_balance_equal_counts(pairs, seed):
    smp = [QuerySample(RegionQuery(0, 0, 0, 1, 1, 1, c), a, i) for i, (c, a) in enumerate(pairs)]
    out = balance_samples(smp, make_rng(seed))
    for c in range(6):
        pos = sum(1 for s in out if s.query.c == c and s.answer)
        neg = sum(1 for s in out if s.query.c == c and not s.answer)
        src_pos = sum(1 for cc, a in pairs if cc == c and a)
        src_neg = sum(1 for cc, a in pairs if cc == c and not a)
        assert pos == neg == min(src_pos, src_neg)
    assert len({s.scene_id for s in out}) == len(out)  # no duplicates


def test_augment_identity_and_translation(scenes):
    cloud = scenes[0].cloud
    same = augment_cloud(cloud, make_rng(0), AugmentParams.identity())
    assert np.array_equal(same.points, cloud.points) and np.array_equal(same.classes, cloud.classes)
    shift = AugmentParams((1.0, 1.0), 0.0, (0.3, 0.3, 0.3), 0.0)
    moved = augment_cloud(cloud, make_rng(5), shift)
    g = make_rng(5)
    t = np.array([g.uniform(-0.3, 0.3) for _ in range(3)])  # the draws augment_cloud makes
    np.testing.assert_allclose(moved.points - cloud.points, np.broadcast_to(t, cloud.points.shape), atol=1e-12)


def test_augmented_labels_regenerated(scenes):
    rng = make_rng(6)
    for sc in scenes[:3]:
        aug = augmented_scene(sc, rng, AugmentParams())
        assert np.array_equal(np.bincount(aug.cloud.classes, minlength=12), np.bincount(sc.cloud.classes, minlength=12))
        for x in scene_samples(aug, PretextTrainConfig(regions_per_scene=64), rng):
            assert x.answer == query_oracle(aug.grid, x.query)


def test_augment_needs_cloud(scenes):
    with pytest.raises(ConfigurationError):
        augmented_scene(PretextScene(0, scenes[0].grid), make_rng(0), AugmentParams())


def test_query_encoding_class_only_through_embedding():
    m = PretextModel(SMALL, make_rng(0))
    a, b = RegionQuery(-1, -1, 0, 1, 1, 1, 2), RegionQuery(-1, -1, 0, 1, 1, 1, 5)
    m.class_embed.data[5] = m.class_embed.data[2]
    assert np.array_equal(encode_query(a, m).data, encode_query(b, m).data)
    with pytest.raises(ContractViolation):
        encode_query(RegionQuery(0, 0, 0, 1, 1, 1, 12), m)


def test_query_zero_weights_gives_bias():
    m = PretextModel(SMALL, make_rng(0))
    m.query_fc2.weight.data[...] = 0.0
    q1 = encode_query(RegionQuery(-1, -1, 0, 1, 1, 1, 2), m).data
    q2 = encode_query(RegionQuery(0, 0, 0, 3, 2, 1, 7), m).data
    assert np.array_equal(q1, m.query_fc2.bias.data) and np.array_equal(q1, q2)


def test_coordinate_order_is_encoder_order():
    q = RegionQuery(1, 2, 3, 4, 5, 6, 0)
    assert q.encoder_order() == (1, 4, 2, 5, 3, 6)
    coords, _ = PretextModel(SMALL).query_features([q])
    np.testing.assert_allclose(coords[0], [1 / 4, 4 / 4, 2 / 4, 5 / 4, 3 / 2, 6 / 2])


def test_query_grad_check():
    rng = make_rng(7)
    m = PretextModel(SMALL, rng)
    m.query_fc1.bias.data[...] = rng.normal(0, 0.1, size=m.query_fc1.bias.shape)
    qs = [RegionQuery(-1, -2, 0, 1, 1, 1, 2), RegionQuery(0, 0, -1, 2, 3, 1, 9)]
    f = lambda: T.square(m.encode_query(qs)).sum()
    assert T.grad_check(f, [m.class_embed, m.query_fc1.weight, m.query_fc2.weight], max_coords=10) < 1e-4


def test_pretext_model_grad_check(scenes):
    rng = make_rng(8)
    m = PretextModel(SMALL, rng)
    for name, p in m.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0, 0.1, size=p.shape)
    smp = scene_samples(scenes[0], PretextTrainConfig(regions_per_scene=32), make_rng(0))[:6]
    tgt = [int(x.answer) for x in smp]

    def f():
        from vln3d.sparse_conv import encode_scene
        q = m.encode_query([x.query for x in smp])
        return T.cross_entropy(m.logits(encode_scene(scenes[0].grid, m.encoder), q), tgt)

    params = [m.head_h.weight, m.head_q.weight, m.attn.parameters()[0], m.token_pos, m.class_embed,
              m.encoder.parameters()[-1], m.encoder.parameters()[0]]
    assert T.grad_check(f, params, max_coords=5) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5), st.integers(0, 11), st.floats(-4, 2), st.floats(0.1, 4))
def test_answer_is_a_probability_pair(i, c, lo, ext):
    m = PretextModel(SMALL, make_rng(i))
    grid = build_pretext_scene(i % 2, keep_cloud=False).grid
    p = answer_query(grid, RegionQuery(lo, lo, -1, lo + ext, lo + ext, 1, c), m).data
    assert p.shape == (2,) and np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


def test_swapping_output_rows_swaps_probabilities(scenes):
    m = PretextModel(SMALL, make_rng(9))
    q = RegionQuery(-1, -1, -1, 1, 1, 1, 3)
    p = answer_query(scenes[0].grid, q, m).data
    m.head_h.weight.data[...] = m.head_h.weight.data[:, ::-1].copy()
    m.head_q.weight.data[...] = m.head_q.weight.data[:, ::-1].copy()
    m.head_q.bias.data[...] = m.head_q.bias.data[::-1].copy()
    np.testing.assert_allclose(answer_query(scenes[0].grid, q, m).data, p[::-1], atol=1e-12)


def test_zero_visual_head_ignores_scene(scenes):
    m = PretextModel(SMALL, make_rng(10))
    m.head_h.weight.data[...] = 0.0
    q = RegionQuery(-1, -1, -1, 1, 1, 1, 3)
    assert np.array_equal(answer_query(scenes[0].grid, q, m).data, answer_query(scenes[3].grid, q, m).data)


def test_superset_of_positive_box_is_positive(scenes):
    g = scenes[0].grid
    for x in sample_regions(g, 200, make_rng(11)):
        if x.answer:
            q = x.query
            big = RegionQuery(q.x1 - 0.5, q.y1 - 0.5, q.z1 - 0.1, q.x2 + 0.3, q.y2, q.z2 + 1, q.c)
            assert query_oracle(g, big)
            # a box between voxel-centre planes holds no centre at all
            gap = RegionQuery(0.01, 0.01, 0.01, 0.1, 0.1, 0.1, q.c)
            assert not query_oracle(g, gap)


def test_empty_split_rejected(scenes):
    with pytest.raises(ConfigurationError):
        train_pretext(scenes[:2], [], PretextModel(SMALL), PretextTrainConfig(epochs=1))


def test_untrained_near_chance_and_lr_zero(scenes):
    cfg = PretextTrainConfig(epochs=2, lr=0.0, weight_decay=0.0, regions_per_scene=128)
    m = PretextModel(PretextConfig.desk(), make_rng(12))
    met = train_pretext(scenes[:4], scenes[4:], m, cfg)
    assert abs(met.val_acc[0] - met.val_acc[-1]) <= 0.02
    assert met.train_acc[0] == met.train_acc[-1]


def test_training_deterministic_and_learns(scenes):
    cfg = PretextTrainConfig(epochs=3, lr=3e-3, regions_per_scene=128, batch_scenes=2, seed=4)
    runs = [train_pretext(scenes[:4], scenes[4:], PretextModel(SMALL, make_rng(13)), cfg) for _ in range(2)]
    assert runs[0].as_rows() == runs[1].as_rows()
    assert runs[0].train_loss[-1] < runs[0].train_loss[0]
