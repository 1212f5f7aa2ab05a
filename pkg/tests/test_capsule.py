"""Capsule layer semantics: pooling, votes, EM routing, masking, coordinates."""

import numpy as np
import pytest

from capsnet3d import ConfigurationError, Tensor, UsageError
from capsnet3d import tensor as T
from capsnet3d.capsule import (
    CapsuleGrid,
    RoutingConfig,
    TransformBank,
    capsule_pool,
    cast_votes,
    class_capsules,
    conv_capsule_layer,
    coordinate_addition,
    count_votes,
    em_routing,
    mask_poses,
    naive_conv_capsule_layer,
    primary_capsules,
)


def make_grid(rng, extents=(4, 6, 6), types=4, identical=False):
    t, h, w = extents
    if identical:
        pose_one = rng.standard_normal((types, 4, 4))
        act_one = rng.uniform(0.2, 0.9, size=types)
        pose = np.broadcast_to(pose_one, (t, h, w, types, 4, 4)).copy()
        act = np.broadcast_to(act_one, (t, h, w, types)).copy()
    else:
        pose = rng.standard_normal((t, h, w, types, 4, 4))
        act = rng.uniform(0.05, 0.95, size=(t, h, w, types))
    return CapsuleGrid(pose=Tensor(pose), activation=Tensor(act))


def make_routing(types_out, iterations=3, rng=None, random_betas=False, temps=(1.0, 3.0)):
    if random_betas:
        beta_a = Tensor(rng.standard_normal(types_out) * 0.1)
        beta_u = Tensor(rng.standard_normal(types_out) * 0.1)
    else:
        beta_a = Tensor(np.zeros(types_out))
        beta_u = Tensor(np.zeros(types_out))
    return RoutingConfig(
        beta_a=beta_a,
        beta_u=beta_u,
        iterations=iterations,
        inv_temp_start=temps[0],
        inv_temp_end=temps[1],
    )


class TestCapsulePool:
    def test_identical_capsules_pool_exactly(self, rng):
        # exact up to summation rounding (a few ulp)
        grid = make_grid(rng, extents=(2, 4, 4), types=2, identical=True)
        pooled = capsule_pool(grid, rf=(2, 2, 2), stride=(1, 2, 2))
        np.testing.assert_allclose(
            pooled.pose.data[0, 0, 0], grid.pose.data[0, 0, 0], rtol=1e-14, atol=0
        )
        np.testing.assert_allclose(
            pooled.activation.data[0, 0, 0], grid.activation.data[0, 0, 0], rtol=1e-14, atol=0
        )

    def test_half_ones_activation(self):
        act = np.zeros((2, 2, 2, 1))
        act[0] = 1.0  # one temporal slab active, the other not
        pose = np.zeros((2, 2, 2, 1, 4, 4))
        grid = CapsuleGrid(pose=Tensor(pose), activation=Tensor(act))
        pooled = capsule_pool(grid, rf=(2, 2, 2), stride=(1, 1, 1))
        assert pooled.activation.data.reshape(()) == 0.5

    def test_matches_bruteforce_window_average(self, rng):
        grid = make_grid(rng, extents=(3, 5, 5), types=3)
        rf, stride = (2, 3, 3), (1, 2, 2)
        pooled = capsule_pool(grid, rf, stride)
        to, ho, wo = pooled.extents
        for t in range(to):
            for i in range(ho):
                for jj in range(wo):
                    block = grid.pose.data[
                        t : t + rf[0],
                        i * stride[1] : i * stride[1] + rf[1],
                        jj * stride[2] : jj * stride[2] + rf[2],
                    ]
                    np.testing.assert_allclose(
                        pooled.pose.data[t, i, jj], block.mean(axis=(0, 1, 2)), atol=1e-6
                    )


class TestVotes:
    def test_identity_bank_passthrough(self, rng):
        poses = Tensor(rng.standard_normal((5, 3, 4, 4)))
        bank = TransformBank(Tensor(np.broadcast_to(np.eye(4), (3, 2, 4, 4)).copy()))
        votes = cast_votes(poses, bank)
        for j in range(2):
            np.testing.assert_array_equal(votes.data[:, :, j], poses.data)

    def test_linearity_transform_of_mean(self, rng):
        # the premise of capsule-pooling: votes are linear in the pose
        poses = rng.standard_normal((8, 3, 4, 4))
        bank = TransformBank(Tensor(rng.standard_normal((3, 5, 4, 4))))
        mean_then_vote = cast_votes(Tensor(poses.mean(axis=0)), bank).data
        vote_then_mean = cast_votes(Tensor(poses), bank).data.mean(axis=0)
        np.testing.assert_allclose(mean_then_vote, vote_then_mean, atol=1e-6)

    def test_vote_count_formulas(self, rng):
        # full-preset numbers: pooled 32*32 votes vs naive 32*32*3*5*5 per position
        poses = Tensor(rng.standard_normal((32, 4, 4)))
        bank = TransformBank(Tensor(rng.standard_normal((32, 32, 4, 4))))
        with count_votes() as counter:
            cast_votes(poses, bank)
        assert counter.total == 32 * 32 == 1024
        kvol = 3 * 5 * 5
        window_poses = Tensor(rng.standard_normal((kvol * 32, 4, 4)))
        tiled = TransformBank(Tensor(np.tile(bank.weights.data, (kvol, 1, 1, 1))))
        with count_votes() as counter:
            cast_votes(window_poses, tiled)
        assert counter.total == 32 * 32 * kvol == 76800


class TestEMRouting:
    def test_identical_votes_fixed_point(self, rng):
        v = rng.standard_normal(16)
        votes = Tensor(np.broadcast_to(v, (8, 4, 16)).copy())
        acts = Tensor(np.ones(8))
        for iters in (1, 3):
            pose, act = em_routing(votes, acts, make_routing(4, iterations=iters))
            np.testing.assert_allclose(
                pose.data, np.broadcast_to(v.reshape(4, 4), (4, 4, 4)), rtol=1e-14, atol=1e-15
            )
            # perfect agreement saturates the activation at f64; bounds still hold
            assert np.all((act.data >= 0) & (act.data <= 1))

    def test_single_input_group(self, rng):
        votes = Tensor(rng.standard_normal((1, 3, 16)))
        acts = Tensor(np.array([0.7]))
        for iters in (1, 2, 4):
            pose, _ = em_routing(votes, acts, make_routing(3, iterations=iters))
            np.testing.assert_allclose(
                pose.data.reshape(3, 16), votes.data[0], rtol=0, atol=1e-14
            )

    def test_permutation_invariance(self, rng):
        votes = rng.standard_normal((10, 4, 16))
        acts = rng.uniform(0.1, 0.9, 10)
        cfg = make_routing(4, rng=rng, random_betas=True)
        pose_a, act_a = em_routing(Tensor(votes), Tensor(acts), cfg)
        perm = rng.permutation(10)
        pose_b, act_b = em_routing(Tensor(votes[perm]), Tensor(acts[perm]), cfg)
        np.testing.assert_allclose(pose_a.data, pose_b.data, atol=1e-6)
        np.testing.assert_allclose(act_a.data, act_b.data, atol=1e-6)

    def test_activations_strictly_inside_unit_interval(self, rng):
        votes = Tensor(rng.standard_normal((20, 5, 16)) * 3.0)
        acts = Tensor(rng.uniform(0.0, 1.0, 20))
        _, act = em_routing(votes, acts, make_routing(5, rng=rng, random_betas=True))
        assert np.all(act.data > 0.0) and np.all(act.data < 1.0)

    def test_degenerate_zero_activations(self, rng):
        votes = Tensor(rng.standard_normal((6, 3, 16)))
        acts = Tensor(np.zeros(6))
        cfg = make_routing(3)
        pose, act = em_routing(votes, acts, cfg)
        assert np.all(np.isfinite(pose.data)) and np.all(np.isfinite(act.data))
        # with zero evidence the cost term vanishes: activation <= sigmoid(lam * beta_a)
        lam_final = cfg.schedule()[-1]
        bound = 1.0 / (1.0 + np.exp(-lam_final * cfg.beta_a.data))
        assert np.all(act.data <= bound + 1e-12)
        # poses are uniform across output capsules
        assert np.ptp(pose.data, axis=0).max() == 0.0

    def test_batched_matches_loop(self, rng):
        votes = rng.standard_normal((3, 7, 4, 16))
        acts = rng.uniform(0.1, 0.9, (3, 7))
        cfg = make_routing(4, rng=rng, random_betas=True)
        pose_b, act_b = em_routing(Tensor(votes), Tensor(acts), cfg)
        for b in range(3):
            pose_s, act_s = em_routing(Tensor(votes[b]), Tensor(acts[b]), cfg)
            np.testing.assert_allclose(pose_b.data[b], pose_s.data, atol=1e-12)
            np.testing.assert_allclose(act_b.data[b], act_s.data, atol=1e-12)

    def test_deterministic(self, rng):
        votes = rng.standard_normal((9, 4, 16))
        acts = rng.uniform(0.2, 0.8, 9)
        cfg = make_routing(4)
        p1, a1 = em_routing(Tensor(votes), Tensor(acts), cfg)
        p2, a2 = em_routing(Tensor(votes), Tensor(acts), cfg)
        np.testing.assert_array_equal(p1.data, p2.data)
        np.testing.assert_array_equal(a1.data, a2.data)

    def test_gradient_through_routing(self, rng):
        votes = Tensor(rng.standard_normal((5, 3, 16)), requires_grad=True)
        acts_raw = Tensor(rng.standard_normal(5), requires_grad=True)
        cfg = make_routing(3, iterations=2)
        w_pose = rng.standard_normal((3, 4, 4))
        w_act = rng.standard_normal(3)

        def fn(points):
            pose, act = em_routing(points[0], T.sigmoid(points[1]), cfg)
            return T.tsum(pose * Tensor(w_pose)) + T.tsum(act * Tensor(w_act))

        from capsnet3d import grad_check

        err = grad_check(fn, [votes, acts_raw], step=1e-5)
        assert err < 1e-4


class TestCoordinateAddition:
    def test_single_position_half_offsets(self):
        votes = Tensor(np.zeros((1, 1, 1, 2, 3, 16)))
        out = coordinate_addition(votes, (1, 1, 1))
        np.testing.assert_array_equal(out.data[..., 13], 0.5)
        np.testing.assert_array_equal(out.data[..., 14], 0.5)
        np.testing.assert_array_equal(out.data[..., 15], 0.5)
        np.testing.assert_array_equal(out.data[..., :13], 0.0)

    def test_row_separation(self, rng):
        h = 5
        votes = Tensor(np.zeros((1, h, 1, 1, 1, 16)))
        out = coordinate_addition(votes, (1, h, 1))
        diff = out.data[0, -1, 0, 0, 0, 14] - out.data[0, 0, 0, 0, 0, 14]
        assert diff == pytest.approx((h - 1) / h)

    def test_only_last_three_indices_touched(self, rng):
        votes_np = rng.standard_normal((2, 3, 3, 2, 4, 16))
        out = coordinate_addition(Tensor(votes_np), (2, 3, 3))
        np.testing.assert_array_equal(out.data[..., :13], votes_np[..., :13])
        assert np.all(out.data[..., 13:] != votes_np[..., 13:])

    def test_disabled_passthrough(self, rng):
        votes_np = rng.standard_normal((2, 3, 3, 2, 4, 16))
        out = coordinate_addition(Tensor(votes_np), (2, 3, 3), enabled=False)
        np.testing.assert_array_equal(out.data, votes_np)


class TestConvCapsuleLayer:
    def test_output_extents(self, rng):
        grid = make_grid(rng, extents=(6, 10, 10), types=4)
        bank = TransformBank(Tensor(rng.standard_normal((4, 5, 4, 4)) * 0.2))
        out = conv_capsule_layer(grid, rf=(3, 3, 3), stride=(1, 2, 2), bank=bank, cfg=make_routing(5))
        assert out.extents == (4, 4, 4)
        assert out.types == 5

    def test_uniform_grid_gives_uniform_output(self, rng):
        grid = make_grid(rng, extents=(4, 6, 6), types=3, identical=True)
        bank = TransformBank(Tensor(rng.standard_normal((3, 4, 4, 4)) * 0.3))
        out = conv_capsule_layer(grid, rf=(2, 3, 3), stride=(1, 1, 1), bank=bank, cfg=make_routing(4))
        first = out.pose.data[0, 0, 0]
        for idx in np.ndindex(out.extents):
            np.testing.assert_allclose(out.pose.data[idx], first, atol=1e-10)

    def test_pooled_equals_naive_on_identical_windows(self, rng):
        # every receptive field holds identical capsules -> mean == member,
        # so pooled routing must coincide with all-votes routing
        grid = make_grid(rng, extents=(3, 4, 4), types=3, identical=True)
        bank = TransformBank(Tensor(rng.standard_normal((3, 4, 4, 4)) * 0.3))
        cfg = make_routing(4, rng=rng, random_betas=True)
        pooled = conv_capsule_layer(grid, (3, 3, 3), (1, 1, 1), bank, cfg)
        naive = naive_conv_capsule_layer(grid, (3, 3, 3), (1, 1, 1), bank, cfg)
        np.testing.assert_allclose(pooled.pose.data, naive.pose.data, atol=1e-5)
        np.testing.assert_allclose(pooled.activation.data, naive.activation.data, atol=1e-5)

    def test_singleton_window_equivalence_arbitrary_grid(self, rng):
        grid = make_grid(rng, extents=(3, 4, 4), types=4)
        bank = TransformBank(Tensor(rng.standard_normal((4, 4, 4, 4)) * 0.3))
        cfg = make_routing(4, rng=rng, random_betas=True)
        pooled = conv_capsule_layer(grid, (1, 1, 1), (1, 1, 1), bank, cfg)
        naive = naive_conv_capsule_layer(grid, (1, 1, 1), (1, 1, 1), bank, cfg)
        np.testing.assert_allclose(pooled.pose.data, naive.pose.data, atol=1e-6)
        np.testing.assert_allclose(pooled.activation.data, naive.activation.data, atol=1e-6)

    def test_vote_counters_per_position(self, rng):
        grid = make_grid(rng, extents=(3, 5, 5), types=3)
        bank = TransformBank(Tensor(rng.standard_normal((3, 4, 4, 4)) * 0.3))
        cfg = make_routing(4)
        rf, stride = (2, 3, 3), (1, 2, 2)
        positions = 2 * 2 * 2
        with count_votes() as pooled_counter:
            conv_capsule_layer(grid, rf, stride, bank, cfg)
        with count_votes() as naive_counter:
            naive_conv_capsule_layer(grid, rf, stride, bank, cfg)
        assert pooled_counter.total == positions * 3 * 4
        assert naive_counter.total == positions * 3 * 4 * (2 * 3 * 3)


class TestClassCapsules:
    def test_shapes_and_prediction_range(self, rng):
        # many input groups make the cost sum large; an interior activation
        # needs the inverse temperature scaled down accordingly
        grid = make_grid(rng, extents=(4, 4, 4), types=8)
        bank = TransformBank(Tensor(rng.standard_normal((8, 4, 4, 4)) * 0.2))
        poses, acts = class_capsules(grid, bank, make_routing(4, temps=(0.002, 0.004)))
        assert poses.shape == (4, 4, 4)
        assert acts.shape == (4,)
        assert np.all((acts.data > 0) & (acts.data < 1))

    def test_single_class(self, rng):
        grid = make_grid(rng, extents=(2, 3, 3), types=2)
        bank = TransformBank(Tensor(rng.standard_normal((2, 1, 4, 4)) * 0.2))
        poses, acts = class_capsules(grid, bank, make_routing(1, temps=(0.02, 0.05)))
        assert acts.shape == (1,)
        assert 0.0 < acts.data[0] < 1.0
        assert int(np.argmax(acts.data)) == 0

    def test_duplicated_grid_leaves_pose_unchanged(self, rng):
        # duplicating every input group must not move the routed mean
        grid = make_grid(rng, extents=(2, 3, 3), types=2)
        bank = TransformBank(Tensor(rng.standard_normal((2, 3, 4, 4)) * 0.2))
        cfg = make_routing(3, rng=rng, random_betas=True)
        votes = cast_votes(grid.pose, bank)
        votes = T.reshape(votes, votes.shape[:-2] + (16,))
        votes = coordinate_addition(votes, grid.extents)
        flat_votes = votes.data.reshape(-1, 3, 16)
        flat_acts = grid.activation.data.reshape(-1)
        pose_once, _ = em_routing(Tensor(flat_votes), Tensor(flat_acts), cfg)
        pose_twice, _ = em_routing(
            Tensor(np.concatenate([flat_votes, flat_votes], axis=0)),
            Tensor(np.concatenate([flat_acts, flat_acts])),
            cfg,
        )
        np.testing.assert_allclose(pose_once.data, pose_twice.data, atol=1e-6)


class TestMasking:
    def test_training_mask_target_block(self, rng):
        poses = Tensor(rng.standard_normal((4, 4, 4)) + 1.0)
        acts = Tensor(rng.uniform(0.1, 0.9, 4))
        out = mask_poses(poses, acts, target=2)
        assert out.shape == (64,)
        nonzero = np.flatnonzero(out.data)
        assert len(nonzero) == 16
        assert nonzero.min() >= 32 and nonzero.max() < 48

    def test_eval_mask_argmax(self, rng):
        poses = Tensor(np.ones((3, 4, 4)))
        acts = Tensor(np.array([0.1, 0.9, 0.3]))
        out = mask_poses(poses, acts)
        blocks = out.data.reshape(3, 16)
        np.testing.assert_array_equal(blocks[0], 0.0)
        np.testing.assert_array_equal(blocks[1], 1.0)
        np.testing.assert_array_equal(blocks[2], 0.0)

    def test_target_equals_argmax_matches_eval(self, rng):
        poses = Tensor(rng.standard_normal((4, 4, 4)))
        acts = Tensor(rng.uniform(0.0, 1.0, 4))
        t = int(np.argmax(acts.data))
        np.testing.assert_array_equal(
            mask_poses(poses, acts, target=t).data, mask_poses(poses, acts).data
        )

    def test_at_most_16_nonzero(self, rng):
        poses = Tensor(rng.standard_normal((2, 6, 4, 4)))
        acts = Tensor(rng.uniform(0.0, 1.0, (2, 6)))
        out = mask_poses(poses, acts, target=np.array([1, 4]))
        assert out.shape == (2, 96)
        for b in range(2):
            assert np.count_nonzero(out.data[b]) <= 16

    def test_target_out_of_range(self, rng):
        poses = Tensor(rng.standard_normal((4, 4, 4)))
        acts = Tensor(rng.uniform(0.0, 1.0, 4))
        with pytest.raises(UsageError):
            mask_poses(poses, acts, target=4)


class TestPrimaryCapsules:
    def test_zero_features_give_half_activation(self):
        feats = Tensor(np.zeros((4, 8, 8, 6)))
        types = 2
        pose_k = Tensor(np.zeros((3, 5, 5, 6, types * 16)))
        act_k = Tensor(np.zeros((3, 5, 5, 6, types)))
        grid = primary_capsules(
            feats, pose_k, Tensor(np.zeros(types * 16)), act_k, Tensor(np.zeros(types)), types
        )
        np.testing.assert_array_equal(grid.activation.data, 0.5)
        assert grid.extents == (2, 4, 4)

    def test_tiny_preset_extents(self, rng):
        feats = Tensor(rng.standard_normal((8, 14, 14, 16)) * 0.1)
        types = 8
        pose_k = Tensor(rng.standard_normal((3, 5, 5, 16, types * 16)) * 0.01)
        act_k = Tensor(rng.standard_normal((3, 5, 5, 16, types)) * 0.01)
        grid = primary_capsules(
            feats, pose_k, Tensor(np.zeros(types * 16)), act_k, Tensor(np.zeros(types)), types
        )
        assert grid.extents == (6, 10, 10)
        assert grid.types == 8

    def test_extent_underflow_is_config_error(self, rng):
        feats = Tensor(rng.standard_normal((2, 4, 4, 3)))
        pose_k = Tensor(rng.standard_normal((3, 9, 9, 3, 16)))
        act_k = Tensor(rng.standard_normal((3, 9, 9, 3, 1)))
        with pytest.raises(ConfigurationError):
            primary_capsules(feats, pose_k, Tensor(np.zeros(16)), act_k, Tensor(np.zeros(1)), 1)
