import numpy as np
import pytest
from scipy import stats

from sgswarm import nets
from sgswarm.features import ADVERSARIAL, FLOCKING, EnvFeature, TaskFeature
from sgswarm.marl import (
    PolicyBundle,
    ReplayBuffer,
    SkillRecord,
    TrainConfig,
    act,
    actor_gradients,
    critic_gradients,
    evaluate_skill,
    make_bundle,
    placeholder_skill,
    soft_update,
    train_skill,
    train_step,
)
from sgswarm.sim import GREEN, RED, LeaderPath, WorldConfig


def tiny_cfg(**kw):
    base = dict(episodes=2, episode_len=10, batch=8, buffer_capacity=1000,
                hidden_size=8, hidden_layers=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def flock_task():
    return TaskFeature(kind=FLOCKING, v_max=1.0, v_min=0.0, d_ref=0.4, r_perc=3.0)


def adve_task():
    return TaskFeature(kind=ADVERSARIAL, v_max=1.0, v_min=0.0, dh=1.0, n_o=3, r_atta=0.3)


def flock_world_cfg(n=4, seed=0):
    return WorldConfig(env=EnvFeature(y=1, L=6.0), tasks={GREEN: flock_task()},
                       n_per_team={GREEN: n}, seed=seed)


def adve_world_cfg(n=3, seed=0):
    t = adve_task()
    return WorldConfig(env=EnvFeature(y=1, L=6.0), tasks={GREEN: t, RED: t},
                       n_per_team={GREEN: n, RED: n}, seed=seed,
                       spawn={GREEN: {"cx": 1.5, "cy": 3.0, "half": 1.0},
                              RED: {"cx": 4.5, "cy": 3.0, "half": 1.0}})


class TestAct:
    def test_deterministic_without_noise(self):
        b = make_bundle(28, FLOCKING, tiny_cfg(), seed=1)
        o = np.random.default_rng(0).standard_normal(28)
        a1 = act(b, o, explore=False)
        a2 = act(b, o, explore=False)
        assert np.array_equal(a1, a2)

    def test_zero_weight_actor_outputs_zero(self):
        b = make_bundle(28, FLOCKING, tiny_cfg(), seed=1)
        for p in b.actor.params():
            p[...] = 0.0
        np.testing.assert_array_equal(act(b, np.ones(28)), [0.0, 0.0])

    def test_seeded_noise_reproducible(self):
        b = make_bundle(28, FLOCKING, tiny_cfg(), seed=1)
        o = np.zeros(28)
        base = act(b, o, explore=False)
        noisy = act(b, o, explore=True, sigma=0.8, rng=np.random.default_rng(42))
        draw = np.random.default_rng(42).normal(0.0, 0.8, size=2)
        np.testing.assert_allclose(noisy, np.clip(base + draw, -1, 1))
        assert np.all(noisy >= -1.0) and np.all(noisy <= 1.0)

    def test_dimension_mismatch(self):
        b = make_bundle(28, FLOCKING, tiny_cfg(), seed=1)
        with pytest.raises(ValueError):
            act(b, np.zeros(27))

    def test_local_critic_arity(self):
        b = make_bundle(28, ADVERSARIAL, tiny_cfg(), seed=1)
        assert b.critic_spec.input_dim == 28 + 2
        assert b.actor_spec.output_dim == 2


class TestReplayBuffer:
    def fill(self, n=64, obs_dim=4, seed=0):
        buf = ReplayBuffer(n, obs_dim, seed=seed)
        rng = np.random.default_rng(1)
        for i in range(n):
            buf.push(rng.standard_normal(obs_dim), rng.standard_normal(2),
                     float(i), rng.standard_normal(obs_dim), False)
        return buf

    def test_batch_without_replacement(self):
        buf = self.fill(32)
        idx = buf.sample_indices(32)
        assert len(set(idx.tolist())) == 32

    def test_insufficient_raises(self):
        buf = ReplayBuffer(10, 4)
        buf.push(np.zeros(4), np.zeros(2), 0.0, np.zeros(4), False)
        with pytest.raises(ValueError):
            buf.sample_indices(2)

    def test_ring_overwrite(self):
        buf = ReplayBuffer(4, 1)
        for i in range(6):
            buf.push([float(i)], np.zeros(2), float(i), [0.0], False)
        assert len(buf) == 4
        assert sorted(buf.r.tolist()) == [2.0, 3.0, 4.0, 5.0]

    def test_sampling_uniformity_chi2(self):
        buf = self.fill(50, seed=7)
        counts = np.zeros(50)
        for _ in range(400):
            for i in buf.sample_indices(10):
                counts[i] += 1
        _, p = stats.chisquare(counts)
        assert p > 0.01


class TestTrainStep:
    def test_insufficient_buffer_is_noop(self):
        cfg = tiny_cfg(batch=64)
        b = make_bundle(6, FLOCKING, cfg, seed=0)
        buf = ReplayBuffer(100, 6)
        before = b.actor.to_flat().copy()
        assert train_step(b, buf, cfg) is None
        assert np.array_equal(b.actor.to_flat(), before)

    def test_degenerate_regression_fits_constant(self):
        # gamma 0, one transition of reward 1: Q must converge to 1.
        cfg = tiny_cfg(batch=1, gamma=0.0, hidden_size=8, hidden_layers=2)
        b = make_bundle(4, FLOCKING, cfg, seed=3)
        buf = ReplayBuffer(8, 4, seed=3)
        o = np.array([0.1, -0.2, 0.3, 0.4])
        a = np.array([0.5, -0.5])
        buf.push(o, a, 1.0, o, False)
        for _ in range(2000):
            train_step(b, buf, cfg)
        q = nets.forward(b.critic_spec, b.critic, np.concatenate([o, a]))
        assert abs(q[0] - 1.0) < 0.05

    def test_tau_one_copies_targets(self):
        cfg = tiny_cfg(tau=1.0, batch=4)
        b = make_bundle(4, FLOCKING, cfg, seed=5)
        buf = ReplayBuffer(16, 4, seed=5)
        rng = np.random.default_rng(5)
        for _ in range(8):
            buf.push(rng.standard_normal(4), rng.uniform(-1, 1, 2), 0.5,
                     rng.standard_normal(4), False)
        train_step(b, buf, cfg)
        assert np.array_equal(b.actor_target.to_flat(), b.actor.to_flat())
        assert np.array_equal(b.critic_target.to_flat(), b.critic.to_flat())

    def test_target_drift_decreases_when_online_frozen(self):
        cfg = tiny_cfg(tau=0.1)
        b = make_bundle(4, FLOCKING, cfg, seed=6)
        for p in b.actor_target.params():
            p += 0.5
        drift = [np.linalg.norm(b.actor_target.to_flat() - b.actor.to_flat())]
        for _ in range(5):
            soft_update(b.actor_target, b.actor, cfg.tau)
            drift.append(np.linalg.norm(b.actor_target.to_flat() - b.actor.to_flat()))
        assert all(d1 < d0 for d0, d1 in zip(drift, drift[1:]))

    def test_actor_gradient_matches_finite_difference(self):
        cfg = tiny_cfg(hidden_size=4, hidden_layers=1)
        b = make_bundle(3, FLOCKING, cfg, seed=7)
        O = np.random.default_rng(7).standard_normal((5, 3))

        _, analytic = actor_gradients(b, O)

        def loss(actor_weights):
            A = nets.forward_batch(b.actor_spec, actor_weights, O)
            Q = nets.forward_batch(b.critic_spec, b.critic, np.hstack([O, A]))
            return float(-np.mean(Q))

        numeric = nets.finite_difference_gradient(loss, b.actor)
        a, n = analytic.to_flat(), numeric.to_flat()
        assert np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12) < 1e-3

    def test_critic_gradient_matches_finite_difference(self):
        cfg = tiny_cfg(hidden_size=4, hidden_layers=1)
        b = make_bundle(3, FLOCKING, cfg, seed=8)
        rng = np.random.default_rng(8)
        O = rng.standard_normal((5, 3))
        A = rng.uniform(-1, 1, (5, 2))
        R = rng.standard_normal(5)
        O2 = rng.standard_normal((5, 3))
        D = np.zeros(5)

        _, analytic = critic_gradients(b, O, A, R, O2, D, 0.9)

        def loss(critic_weights):
            A2 = nets.forward_batch(b.actor_spec, b.actor_target, O2)
            Q2 = nets.forward_batch(b.critic_spec, b.critic_target,
                                    np.hstack([O2, A2]))[:, 0]
            y = R + 0.9 * Q2
            Q = nets.forward_batch(b.critic_spec, critic_weights,
                                   np.hstack([O, A]))[:, 0]
            return float(np.mean((Q - y) ** 2))

        numeric = nets.finite_difference_gradient(loss, b.critic)
        a, n = analytic.to_flat(), numeric.to_flat()
        assert np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12) < 1e-4


class TestTrainSkill:
    def test_zero_episodes_returns_initial_weights(self):
        cfg = tiny_cfg(episodes=0)
        rec = train_skill(EnvFeature(y=1, L=6.0), flock_task(), flock_world_cfg(), cfg)
        fresh = make_bundle(28, FLOCKING, cfg, seed=cfg.seed)
        assert np.array_equal(rec.actor.to_flat(), fresh.actor.to_flat())
        assert rec.curve == []

    def test_mismatched_task_rejected(self):
        cfg = tiny_cfg()
        with pytest.raises(ValueError):
            train_skill(EnvFeature(y=1, L=6.0), adve_task(), flock_world_cfg(), cfg)

    def test_short_flocking_run_trains_and_is_deterministic(self):
        cfg = tiny_cfg(episodes=3, episode_len=15, batch=16)
        env = EnvFeature(y=1, L=6.0)
        r1 = train_skill(env, flock_task(), flock_world_cfg(), cfg)
        r2 = train_skill(env, flock_task(), flock_world_cfg(), cfg)
        assert len(r1.curve) == 3
        assert np.array_equal(r1.actor.to_flat(), r2.actor.to_flat())
        assert r1.curve == r2.curve

    def test_adversarial_run_with_scripted_red(self):
        cfg = tiny_cfg(episodes=2, episode_len=12, batch=16)
        env = EnvFeature(y=1, L=6.0)
        rec = train_skill(env, adve_task(), adve_world_cfg(), cfg)
        assert rec.task.kind == ADVERSARIAL
        assert len(rec.curve) == 2

    def test_warm_start_keeps_shapes_and_marks_provenance(self):
        cfg = tiny_cfg(episodes=1, episode_len=10, batch=16)
        env = EnvFeature(y=1, L=6.0)
        parent = train_skill(env, flock_task(), flock_world_cfg(), cfg, name="parent")
        child = train_skill(env, flock_task(), flock_world_cfg(),
                            tiny_cfg(episodes=0), name="child", init_from=parent)
        assert child.provenance == {"kind": "fine-tuned", "parent": "parent"}
        assert np.array_equal(child.actor.to_flat(), parent.actor.to_flat())

    def test_leaders_follow_paths_in_training(self):
        cfg = tiny_cfg(episodes=1, episode_len=10, batch=16)
        wc = flock_world_cfg()
        wc.leader_paths = {GREEN: [LeaderPath(waypoints=((5.0, 3.0),), speed=0.5)]}
        rec = train_skill(EnvFeature(y=1, L=6.0), flock_task(), wc, cfg)
        assert len(rec.curve) == 1


class TestEvaluate:
    def test_kind_mismatch_rejected(self):
        rec = placeholder_skill("s", EnvFeature(y=1, L=6.0), flock_task(), tiny_cfg())
        with pytest.raises(ValueError):
            evaluate_skill(rec, adve_world_cfg())

    def test_same_seed_identical_metrics(self):
        rec = placeholder_skill("s", EnvFeature(y=1, L=6.0), flock_task(), tiny_cfg())
        m1 = evaluate_skill(rec, flock_world_cfg(), n_episodes=2, seed=3, episode_len=20)
        m2 = evaluate_skill(rec, flock_world_cfg(), n_episodes=2, seed=3, episode_len=20)
        assert m1 == m2

    def test_untrained_adversarial_wins_nothing(self):
        rec = placeholder_skill("s", EnvFeature(y=1, L=6.0), adve_task(), tiny_cfg())
        m = evaluate_skill(rec, adve_world_cfg(), n_episodes=2, seed=1, episode_len=30)
        assert m["win_rate"] == 0.0


class TestSkillRecordIO:
    def test_roundtrip(self, tmp_path):
        rec = placeholder_skill("floc_demo", EnvFeature(y=0, L=6.0), flock_task(),
                                tiny_cfg(), seed=5)
        rec.curve = [[0, 1.0, 0.1, -0.2, 0.8, 0]]
        rec.save(tmp_path / "skill")
        back = SkillRecord.load(tmp_path / "skill")
        assert back.name == "floc_demo"
        assert back.env == rec.env
        assert back.task == rec.task
        assert np.array_equal(back.actor.to_flat(), rec.actor.to_flat())
        assert back.curve == [[0.0, 1.0, 0.1, -0.2, 0.8, 0.0]]

    def test_version_check(self, tmp_path):
        rec = placeholder_skill("s", EnvFeature(y=0, L=6.0), flock_task(), tiny_cfg())
        rec.save(tmp_path / "skill")
        meta = (tmp_path / "skill" / "skill.meta").read_text()
        (tmp_path / "skill" / "skill.meta").write_text(
            meta.replace('"format_version": 1', '"format_version": 9'))
        with pytest.raises(ValueError, match="version"):
            SkillRecord.load(tmp_path / "skill")
