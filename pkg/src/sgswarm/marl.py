"""Local-critic MADDPG: shared actor/critic per team with Q(o_i, a_i).

The critic sees only one robot's observation and action, never the joint
state, which keeps training cost independent of swarm size. All cooperative
robots in a team act through one weight instance and feed one replay buffer.
"""

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nets
from .features import ADVERSARIAL, FLOCKING, EnvFeature, TaskFeature
from .sim import GREEN, RED, World

SKILL_META_VERSION = 1
ACTION_DIM = 2


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    episodes: int = 300
    episode_len: int = 200
    batch: int = 512
    buffer_capacity: int = 500_000
    gamma: float = 0.99
    tau: float = 0.01
    noise_sigma: float = 0.8        # initial exploration std
    noise_floor_frac: float = 0.1   # sigma decays exponentially to this fraction
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    hidden_size: int = 128
    hidden_layers: int = 2
    train_every: int = 1
    pursuit_kp: float = 1.0         # scripted red team gains (adversarial)
    pursuit_kv: float = 2.0
    seed: int = 0

    def __post_init__(self):
        # gamma = 0 is allowed for degenerate single-step regression setups
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.batch < 1 or self.batch > self.buffer_capacity:
            raise ValueError("batch must fit in the buffer")

    def sigma_at(self, episode):
        if self.episodes <= 1:
            return self.noise_sigma
        frac = min(1.0, episode / (self.episodes - 1))
        return self.noise_sigma * self.noise_floor_frac ** frac

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ReplayBuffer:
    """Ring buffer of (o, a, r, o', done); uniform batches without replacement."""

    def __init__(self, capacity, obs_dim, seed=0):
        self.capacity = int(capacity)
        self.o = np.zeros((self.capacity, obs_dim))
        self.a = np.zeros((self.capacity, ACTION_DIM))
        self.r = np.zeros(self.capacity)
        self.o2 = np.zeros((self.capacity, obs_dim))
        self.done = np.zeros(self.capacity)
        self._next = 0
        self._size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self._size

    def push(self, o, a, r, o2, done):
        i = self._next
        self.o[i] = o
        self.a[i] = a
        self.r[i] = r
        self.o2[i] = o2
        self.done[i] = 1.0 if done else 0.0
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, batch):
        if batch > self._size:
            raise ValueError("not enough transitions buffered")
        return self.rng.choice(self._size, size=batch, replace=False)

    def sample(self, batch):
        idx = self.sample_indices(batch)
        return (self.o[idx], self.a[idx], self.r[idx], self.o2[idx], self.done[idx])


@dataclass
class PolicyBundle:
    """Shared actor/critic pair with target copies and optimizer state."""

    task_kind: str
    actor_spec: nets.NetSpec
    critic_spec: nets.NetSpec
    actor: nets.NetWeights
    critic: nets.NetWeights
    actor_target: nets.NetWeights
    critic_target: nets.NetWeights
    actor_opt: nets.OptimizerState
    critic_opt: nets.OptimizerState

    @property
    def obs_dim(self):
        return self.actor_spec.input_dim


def make_bundle(obs_dim, task_kind, cfg: TrainConfig, seed=0,
                init_actor=None, init_critic=None):
    actor_spec = nets.NetSpec(obs_dim, cfg.hidden_size, cfg.hidden_layers,
                              ACTION_DIM, output_activation="tanh")
    critic_spec = nets.NetSpec(obs_dim + ACTION_DIM, cfg.hidden_size,
                               cfg.hidden_layers, 1, output_activation="none")
    if init_actor is not None:
        actor = init_actor.copy()
        if not actor.matches(actor_spec):
            raise ValueError("warm-start actor weights do not match the spec")
    else:
        actor = nets.init_weights(actor_spec, "uniform-scaled", seed=seed)
    if init_critic is not None:
        critic = init_critic.copy()
        if not critic.matches(critic_spec):
            raise ValueError("warm-start critic weights do not match the spec")
    else:
        critic = nets.init_weights(critic_spec, "uniform-scaled", seed=seed + 1)
    return PolicyBundle(
        task_kind=task_kind,
        actor_spec=actor_spec, critic_spec=critic_spec,
        actor=actor, critic=critic,
        actor_target=actor.copy(), critic_target=critic.copy(),
        actor_opt=nets.make_optimizer("adam", cfg.actor_lr, actor),
        critic_opt=nets.make_optimizer("adam", cfg.critic_lr, critic),
    )


def act(bundle: PolicyBundle, obs, explore=False, sigma=0.0, rng=None):
    """Deterministic mu(o), optionally with clipped Gaussian exploration."""
    a = nets.forward(bundle.actor_spec, bundle.actor, obs)
    if explore:
        a = a + rng.normal(0.0, sigma, size=ACTION_DIM)
    return np.clip(a, -1.0, 1.0)


def act_batch(bundle: PolicyBundle, O, explore=False, sigma=0.0, rng=None):
    if len(O) == 0:
        return np.zeros((0, ACTION_DIM))
    A = nets.forward_batch(bundle.actor_spec, bundle.actor, O)
    if explore:
        A = A + rng.normal(0.0, sigma, size=A.shape)
    return np.clip(A, -1.0, 1.0)


def soft_update(target: nets.NetWeights, online: nets.NetWeights, tau):
    for t, o in zip(target.params(), online.params()):
        t *= 1.0 - tau
        t += tau * o


def critic_gradients(bundle: PolicyBundle, O, A, R, O2, D, gamma):
    """TD regression gradients: y = r + gamma * (1 - done) * Q'(o', mu'(o'))."""
    B = len(O)
    A2 = nets.forward_batch(bundle.actor_spec, bundle.actor_target, O2)
    Q2 = nets.forward_batch(bundle.critic_spec, bundle.critic_target,
                            np.hstack([O2, A2]))[:, 0]
    y = R + gamma * (1.0 - D) * Q2
    Q, cache = nets.forward_cached(bundle.critic_spec, bundle.critic,
                                   np.hstack([O, A]))
    diff = Q[:, 0] - y
    loss = float(np.mean(diff * diff))
    dQ = (2.0 / B) * diff[:, None]
    grads = nets.backward_cached(bundle.critic_spec, bundle.critic, Q, cache, dQ)
    return loss, grads


def actor_gradients(bundle: PolicyBundle, O):
    """Gradients of -mean Q(o, mu(o)) w.r.t. actor parameters (critic frozen);
    the chain runs through the critic's action-input gradient."""
    B = len(O)
    Apf, acache = nets.forward_cached(bundle.actor_spec, bundle.actor, O)
    Qp, pcache = nets.forward_cached(bundle.critic_spec, bundle.critic,
                                     np.hstack([O, Apf]))
    loss = float(-np.mean(Qp))
    dQp = np.full((B, 1), -1.0 / B)
    through = nets.backward_cached(bundle.critic_spec, bundle.critic, Qp, pcache, dQp)
    dA = through.dX[:, bundle.obs_dim:]
    grads = nets.backward_cached(bundle.actor_spec, bundle.actor, Apf, acache, dA)
    return loss, grads


def train_step(bundle: PolicyBundle, buffer: ReplayBuffer, cfg: TrainConfig):
    """One TD critic regression + deterministic policy-gradient actor ascent.

    Returns (critic_loss, actor_loss), or None when the buffer can't fill
    a batch yet.
    """
    if len(buffer) < cfg.batch:
        return None
    O, A, R, O2, D = buffer.sample(cfg.batch)
    critic_loss, cgrads = critic_gradients(bundle, O, A, R, O2, D, cfg.gamma)
    nets.optimizer_step(bundle.critic_opt, bundle.critic, cgrads)
    actor_loss, agrads = actor_gradients(bundle, O)
    nets.optimizer_step(bundle.actor_opt, bundle.actor, agrads)
    soft_update(bundle.actor_target, bundle.actor, cfg.tau)
    soft_update(bundle.critic_target, bundle.critic, cfg.tau)
    if not (np.isfinite(critic_loss) and np.isfinite(actor_loss)):
        raise TrainingDiverged(
            f"non-finite loss (critic={critic_loss}, actor={actor_loss})")
    return critic_loss, actor_loss


@dataclass
class SkillRecord:
    """A trained policy plus the feature vectors it was trained under."""

    name: str
    env: EnvFeature
    task: TaskFeature
    actor_spec: nets.NetSpec
    actor: nets.NetWeights
    critic_spec: nets.NetSpec
    critic: nets.NetWeights
    train_config: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)   # per-episode rows
    provenance: dict = field(default_factory=lambda: {"kind": "trained", "parent": None})

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nets.save_net(directory, "actor", self.actor_spec, self.actor)
        nets.save_net(directory, "critic", self.critic_spec, self.critic)
        with (directory / "curve.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "mean_reward", "critic_loss", "actor_loss",
                             "sigma", "win"])
            for row in self.curve:
                writer.writerow(row)
        meta = {
            "format_version": SKILL_META_VERSION,
            "name": self.name,
            "env": self.env.to_dict(),
            "task": self.task.to_dict(),
            "train_config": self.train_config,
            "provenance": self.provenance,
            "files": ["actor.netjson", "actor.netbin", "critic.netjson",
                      "critic.netbin", "curve.csv"],
        }
        (directory / "skill.meta").write_text(json.dumps(meta, indent=1))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "skill.meta").read_text())
        if meta.get("format_version") != SKILL_META_VERSION:
            raise ValueError(f"unsupported skill.meta version {meta.get('format_version')!r}")
        actor_spec, actor = nets.load_net(directory, "actor")
        critic_spec, critic = nets.load_net(directory, "critic")
        curve = []
        curve_path = directory / "curve.csv"
        if curve_path.exists():
            with curve_path.open() as fh:
                reader = csv.reader(fh)
                next(reader, None)
                curve = [[float(x) for x in row] for row in reader]
        return cls(name=meta["name"], env=EnvFeature.from_dict(meta["env"]),
                   task=TaskFeature.from_dict(meta["task"]),
                   actor_spec=actor_spec, actor=actor,
                   critic_spec=critic_spec, critic=critic,
                   train_config=meta.get("train_config", {}),
                   curve=curve, provenance=meta.get("provenance", {}))


def placeholder_skill(name, env, task, cfg: TrainConfig, obs_dim=28, seed=0):
    """Untrained skill record: graph construction only needs its features."""
    bundle = make_bundle(obs_dim, task.kind, cfg, seed=seed)
    return SkillRecord(name=name, env=env, task=task,
                       actor_spec=bundle.actor_spec, actor=bundle.actor,
                       critic_spec=bundle.critic_spec, critic=bundle.critic,
                       train_config=cfg.to_dict())


def _red_actions(world: World, cfg: TrainConfig):
    ids = world.living_ids(RED)
    if not ids:
        return np.zeros((0, ACTION_DIM))
    return np.stack([world.scripted_pursuit(i, cfg.pursuit_kp, cfg.pursuit_kv)
                     for i in ids])


def _green_actions(world, bundle, obs, ids, explore, sigma, rng):
    """Policy actions; leader agents follow their scripted paths instead."""
    A = act_batch(bundle, obs, explore=explore, sigma=sigma, rng=rng)
    for k, aid in enumerate(ids):
        if world.get(aid).is_leader:
            A[k] = world.leader_action(aid)
    return A


def rollout_episode(world: World, bundle: PolicyBundle, cfg: TrainConfig,
                    episode_len, explore, sigma, noise_rng,
                    buffer=None, train=False, trajectory=None):
    """Run one episode; optionally record transitions and run updates.

    Returns a summary dict (mean agent reward, steps, win flag, losses).
    """
    totals = {i: 0.0 for i in world.living_ids(GREEN)}
    closses, alosses = [], []
    win = False
    adversarial = bundle.task_kind == ADVERSARIAL
    for _ in range(episode_len):
        gids, gobs = world.observe_team(GREEN)
        if not gids:
            break
        g_act = _green_actions(world, bundle, gobs, gids, explore, sigma, noise_rng)
        r_act = _red_actions(world, cfg) if adversarial else np.zeros((0, ACTION_DIM))
        living = world.living_ids()
        acts = np.zeros((len(living), ACTION_DIM))
        gmap = dict(zip(gids, g_act))
        rmap = dict(zip(world.living_ids(RED), r_act))
        for k, aid in enumerate(living):
            acts[k] = gmap[aid] if aid in gmap else rmap[aid]
        rewards, events = world.step(acts)
        if trajectory is not None:
            trajectory.record(world, events)

        reds_left = len(world.living(RED))
        greens_left = len(world.living(GREEN))
        eliminated = adversarial and (reds_left == 0 or greens_left == 0)
        if adversarial and reds_left == 0 and greens_left > 0:
            win = True

        if buffer is not None:
            for k, aid in enumerate(gids):
                agent = world.get(aid)
                dead = not agent.alive
                done = dead or eliminated
                o2 = world.observe(aid) if agent.alive else np.zeros(bundle.obs_dim)
                buffer.push(gobs[k], g_act[k], rewards[aid], o2, done)
        for aid in gids:
            totals[aid] += rewards.get(aid, 0.0)

        if train and len(buffer) >= cfg.batch and world.tick % cfg.train_every == 0:
            out = train_step(bundle, buffer, cfg)
            if out is not None:
                closses.append(out[0])
                alosses.append(out[1])
        if eliminated:
            break
    return {
        "mean_reward": float(np.mean(list(totals.values()))) if totals else 0.0,
        "win": win,
        "critic_loss": float(np.mean(closses)) if closses else float("nan"),
        "actor_loss": float(np.mean(alosses)) if alosses else float("nan"),
    }


def train_skill(env: EnvFeature, task: TaskFeature, world_config, cfg: TrainConfig,
                name="skill", init_from: SkillRecord = None, progress=None):
    """Full training run; returns a SkillRecord with weights and curve.

    Adversarial tasks train green against the scripted pursuit red team;
    flocking trains a single team with its scripted leaders. Warm starts
    (`init_from`) keep the network shapes and seed the weights.
    """
    if world_config.tasks[GREEN] != task:
        raise ValueError("world config green task must equal the trained task feature")
    if world_config.env != env:
        raise ValueError("world config env must equal the environment feature")
    obs_dim = 4 + 4 * world_config.n_h
    init_a = init_from.actor if init_from is not None else None
    init_c = init_from.critic if init_from is not None else None
    bundle = make_bundle(obs_dim, task.kind, cfg, seed=cfg.seed,
                         init_actor=init_a, init_critic=init_c)
    buffer = ReplayBuffer(cfg.buffer_capacity, obs_dim, seed=cfg.seed + 101)
    noise_rng = np.random.default_rng(cfg.seed + 202)
    curve = []
    for ep in range(cfg.episodes):
        world = World(replace(world_config, seed=world_config.seed + ep))
        sigma = cfg.sigma_at(ep)
        summary = rollout_episode(world, bundle, cfg, cfg.episode_len,
                                  explore=True, sigma=sigma, noise_rng=noise_rng,
                                  buffer=buffer, train=True)
        curve.append([ep, summary["mean_reward"], summary["critic_loss"],
                      summary["actor_loss"], sigma, int(summary["win"])])
        if progress is not None:
            progress(ep, summary)
    prov = {"kind": "trained", "parent": None}
    if init_from is not None:
        prov = {"kind": "fine-tuned", "parent": init_from.name}
    return SkillRecord(name=name, env=env, task=task,
                       actor_spec=bundle.actor_spec, actor=bundle.actor,
                       critic_spec=bundle.critic_spec, critic=bundle.critic,
                       train_config=cfg.to_dict(), curve=curve, provenance=prov)


def evaluate_skill(record: SkillRecord, world_config, n_episodes=10, seed=0,
                   episode_len=200, pursuit_kp=1.0, pursuit_kv=2.0):
    """Noise-free rollouts; deterministic for a given seed.

    Returns mean reward, win rate (adversarial) and the mean relative
    neighbor-distance error over each episode's final 50 steps (flocking).
    """
    if world_config.tasks[GREEN].kind != record.task.kind:
        raise ValueError("skill kind does not match the world task")
    adversarial = record.task.kind == ADVERSARIAL
    red_cfg = TrainConfig(pursuit_kp=pursuit_kp, pursuit_kv=pursuit_kv)
    rewards, wins, dist_errs = [], [], []
    for ep in range(n_episodes):
        world = World(replace(world_config, seed=seed + 1000 * ep))
        totals = {i: 0.0 for i in world.living_ids(GREEN)}
        win = False
        tail_errs = []
        for t in range(episode_len):
            gids, gobs = world.observe_team(GREEN)
            if not gids:
                break
            g_act = np.clip(nets.forward_batch(record.actor_spec, record.actor, gobs),
                            -1.0, 1.0)
            for k, aid in enumerate(gids):
                if world.get(aid).is_leader:
                    g_act[k] = world.leader_action(aid)
            r_act = _red_actions(world, red_cfg) if adversarial else np.zeros((0, ACTION_DIM))
            living = world.living_ids()
            acts = np.zeros((len(living), ACTION_DIM))
            gmap = dict(zip(gids, g_act))
            rmap = dict(zip(world.living_ids(RED), r_act))
            for k, aid in enumerate(living):
                acts[k] = gmap[aid] if aid in gmap else rmap[aid]
            step_rewards, _ = world.step(acts)
            for aid in gids:
                totals[aid] += step_rewards.get(aid, 0.0)
            if not adversarial and t >= episode_len - 50:
                err = world.neighbor_distance_error(GREEN)
                if np.isfinite(err):
                    tail_errs.append(err)
            if adversarial:
                if len(world.living(RED)) == 0 and len(world.living(GREEN)) > 0:
                    win = True
                    break
                if len(world.living(GREEN)) == 0:
                    break
        rewards.append(float(np.mean(list(totals.values()))) if totals else 0.0)
        wins.append(win)
        if tail_errs:
            dist_errs.append(float(np.mean(tail_errs)))
    return {
        "mean_reward": float(np.mean(rewards)),
        "win_rate": float(np.mean(wins)),
        "dist_err": float(np.mean(dist_errs)) if dist_errs else float("nan"),
        "episodes": n_episodes,
    }
