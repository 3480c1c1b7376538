"""Deterministic 2-D multi-robot world: dynamics, perception, combat, rewards.

Point-mass robots driven by an active force (the policy action) and passive
Hooke contact forces, integrated with semi-implicit Euler inside a periodic
or fixed-boundary square arena. Adversarial tasks add directional attacks
and health; flocking tasks add distance/alignment shaping rewards.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import ADVERSARIAL, FLOCKING, EnvFeature, TaskFeature

GREEN = "green"
RED = "red"
TEAMS = (GREEN, RED)

EPS_SPEED = 1e-9   # below this an attack angle is undefined -> predicate false


@dataclass
class AgentState:
    id: int
    team: str
    p: np.ndarray
    v: np.ndarray
    hp: float
    alive: bool = True
    is_leader: bool = False


@dataclass(frozen=True)
class LeaderPath:
    waypoints: tuple          # ((x, y), ...)
    speed: float = 0.5        # m/s along the path
    gain: float = 2.0         # velocity-tracking gain
    tolerance: float = 0.1    # waypoint arrival radius, m

    @classmethod
    def from_dict(cls, d):
        return cls(waypoints=tuple(tuple(float(x) for x in wp) for wp in d["waypoints"]),
                   speed=float(d.get("speed", 0.5)),
                   gain=float(d.get("gain", 2.0)),
                   tolerance=float(d.get("tolerance", 0.1)))


@dataclass
class WorldConfig:
    env: EnvFeature
    tasks: dict                      # team -> TaskFeature
    n_per_team: dict                 # team -> int (0 allowed)
    robot_radius: float = 0.1
    mass: float = 1.0
    hp_max: float = 80.0
    regen_factor: float = 0.1        # hp regained per quiet step, in units of dh
    k_attack_i: float = 0.4          # attacker-heading cone, fraction of pi
    k_attack_ii: float = 0.4         # behind-the-target cone, fraction of pi
    k_surv: float = 5.0
    k_situ: float = 1.0
    k_attr: float = 1.0
    k_repl: float = 15.0
    k_alig: float = 2.0
    n_h: int = 6
    dt: float = 0.1
    f_max: float = 2.0               # |action| = 1 maps to this force, N
    spring_k: float = 25.0
    r_perc_combat: float = 3.0       # sensing radius during adversarial tasks, m
    seed: int = 0
    spawn: dict = field(default_factory=dict)    # team -> {cx, cy, half, v0}
    leader_paths: dict = field(default_factory=dict)  # team -> [LeaderPath, ...]

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_h < 2 or self.n_h % 2:
            raise ValueError("n_h must be a positive even count")
        for team in self.tasks:
            if team not in TEAMS:
                raise ValueError(f"unknown team {team!r}")
        for team, n in self.n_per_team.items():
            if team not in TEAMS:
                raise ValueError(f"unknown team {team!r}")
            if n > 0 and team not in self.tasks:
                raise ValueError(f"team {team!r} has agents but no task")


def wrap_delta(d, L, periodic):
    """Relative displacement under the boundary rule (minimum image if periodic)."""
    if not periodic:
        return d
    return d - L * np.round(d / L)


def attack_predicate(attacker: AgentState, target: AgentState, r_atta,
                     k_i=0.4, k_ii=0.4, L=None, periodic=False):
    """True iff attacker is behind the target, heading at it, and in range.

    With p_ki the target-relative offset, requires
    angle(p_ki, v_attacker) <= k_i*pi, angle(p_ki, v_target) <= k_ii*pi and
    |p_ki| < r_atta. Any near-zero speed makes the angles undefined and the
    predicate false.
    """
    if not (attacker.alive and target.alive) or attacker.team == target.team:
        return False
    d = target.p - attacker.p
    if L is not None:
        d = wrap_delta(d, L, periodic)
    dist = float(np.linalg.norm(d))
    if dist >= r_atta or dist < 1e-12:
        return False
    sa = float(np.linalg.norm(attacker.v))
    st = float(np.linalg.norm(target.v))
    if sa < EPS_SPEED or st < EPS_SPEED:
        return False
    cos_i = float(np.dot(d, attacker.v)) / (dist * sa)
    cos_ii = float(np.dot(d, target.v)) / (dist * st)
    theta_i = np.arccos(np.clip(cos_i, -1.0, 1.0))
    theta_ii = np.arccos(np.clip(cos_ii, -1.0, 1.0))
    return bool(theta_i <= k_i * np.pi and theta_ii <= k_ii * np.pi)


class World:
    """One simulation instance. Reproducible: config + seed fixes everything."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.tick = 0
        self.rng = np.random.default_rng(config.seed)
        self.agents = []
        self._leader_wp = {}             # agent id -> current waypoint index
        self._attackers_this_step = {}   # attacker id -> True, refreshed per step
        self._spawn_agents()

    # -- setup ---------------------------------------------------------------

    def _spawn_agents(self):
        cfg = self.config
        next_id = 0
        for team in TEAMS:
            n = int(cfg.n_per_team.get(team, 0))
            if n == 0:
                continue
            region = cfg.spawn.get(team, {})
            cx = float(region.get("cx", cfg.env.L / 2.0))
            cy = float(region.get("cy", cfg.env.L / 2.0))
            half = float(region.get("half", cfg.env.L / 2.0 - cfg.robot_radius))
            v0 = float(region.get("v0", 0.1))
            paths = cfg.leader_paths.get(team, [])
            for k in range(n):
                p = np.array([cx, cy]) + self.rng.uniform(-half, half, size=2)
                p = np.clip(p, cfg.robot_radius, cfg.env.L - cfg.robot_radius)
                v = self.rng.uniform(-v0, v0, size=2)
                agent = AgentState(id=next_id, team=team, p=p, v=v,
                                   hp=cfg.hp_max, is_leader=k < len(paths))
                if agent.is_leader:
                    self._leader_wp[agent.id] = 0
                self.agents.append(agent)
                next_id += 1

    # -- queries ---------------------------------------------------------------

    def get(self, agent_id) -> AgentState:
        return self.agents[agent_id]

    def living(self, team=None):
        return [a for a in self.agents
                if a.alive and (team is None or a.team == team)]

    def living_ids(self, team=None):
        return [a.id for a in self.living(team)]

    def team_task(self, team) -> TaskFeature:
        return self.config.tasks[team]

    def delta(self, frm, to):
        return wrap_delta(to - frm, self.config.env.L, self.config.env.periodic)

    def distance(self, a: AgentState, b: AgentState):
        return float(np.linalg.norm(self.delta(a.p, b.p)))

    def team_centroid(self, team):
        members = self.living(team)
        if not members:
            return None
        return np.mean([a.p for a in members], axis=0)

    def perceive(self, agent_id):
        """Neighbor ids (teammates, enemies) within r_perc, nearest first.

        Flocking caps teammates at n_h; adversarial caps both lists at
        n_h/2. Ties break on id.
        """
        me = self.get(agent_id)
        if not me.alive:
            raise ValueError(f"agent {agent_id} is dead")
        task = self.team_task(me.team)
        r_perc = task.r_perc if task.kind == FLOCKING else self._combat_r_perc(me.team)
        mates, foes = [], []
        for other in self.agents:
            if not other.alive or other.id == agent_id:
                continue
            d = self.distance(me, other)
            if d >= r_perc:
                continue
            (mates if other.team == me.team else foes).append((d, other.id))
        mates.sort()
        foes.sort()
        if task.kind == FLOCKING:
            cap_m = cap_e = self.config.n_h
        else:
            cap_m = cap_e = self.config.n_h // 2
        return [i for _, i in mates[:cap_m]], [i for _, i in foes[:cap_e]]

    def _combat_r_perc(self, team):
        # Adversarial task features carry no perception radius; it lives on
        # the world config instead.
        return self.config.r_perc_combat

    def observe(self, agent_id):
        """Fixed-length observation: own state then relative neighbor states.

        Layout (n_h = 6 -> 28 values): [p, v] then 6 neighbor slots of
        [dp, dv]; flocking fills them with teammates, adversarial with
        n_h/2 teammates then n_h/2 enemies. Missing slots stay zero.
        """
        me = self.get(agent_id)
        if not me.alive:
            raise ValueError(f"agent {agent_id} is dead")
        task = self.team_task(me.team)
        n_h = self.config.n_h
        obs = np.zeros(4 + 4 * n_h)
        obs[0:2] = me.p
        obs[2:4] = me.v
        mates, foes = self.perceive(agent_id)
        if task.kind == FLOCKING:
            blocks = [(mates, 4, n_h)]
        else:
            half = n_h // 2
            blocks = [(mates, 4, half), (foes, 4 + 4 * half, half)]
        for ids, base, cap in blocks:
            for slot, oid in enumerate(ids[:cap]):
                other = self.get(oid)
                off = base + 4 * slot
                obs[off:off + 2] = self.delta(me.p, other.p)
                obs[off + 2:off + 4] = other.v - me.v
        return obs

    def observe_team(self, team):
        ids = self.living_ids(team)
        if not ids:
            return ids, np.zeros((0, 4 + 4 * self.config.n_h))
        return ids, np.stack([self.observe(i) for i in ids])

    # -- scripted controllers ----------------------------------------------------

    def pursuit_force(self, agent_id, k_p=1.0, k_v=2.0):
        """Raw pursuit force toward the nearest living enemy (zero if none)."""
        me = self.get(agent_id)
        enemies = [a for a in self.living() if a.team != me.team]
        if not enemies:
            return np.zeros(2)
        target = min(enemies, key=lambda a: (self.distance(me, a), a.id))
        return k_p * self.delta(me.p, target.p) + k_v * (target.v - me.v)

    def scripted_pursuit(self, agent_id, k_p=1.0, k_v=2.0):
        """Pursuit force expressed as an action in [-1, 1]^2."""
        raw = self.pursuit_force(agent_id, k_p, k_v)
        return np.clip(raw / self.config.f_max, -1.0, 1.0)

    def leader_action(self, agent_id):
        """Waypoint-following velocity controller for leader agents."""
        me = self.get(agent_id)
        if not me.is_leader:
            raise ValueError(f"agent {agent_id} is not a leader")
        paths = self.config.leader_paths[me.team]
        leader_rank = sum(1 for a in self.agents
                          if a.team == me.team and a.is_leader and a.id < me.id)
        path = paths[leader_rank % len(paths)]
        wp_idx = self._leader_wp[agent_id]
        while wp_idx < len(path.waypoints):
            wp = np.array(path.waypoints[wp_idx])
            if float(np.linalg.norm(self.delta(me.p, wp))) > path.tolerance:
                break
            wp_idx += 1
        self._leader_wp[agent_id] = wp_idx
        if wp_idx >= len(path.waypoints):
            v_des = np.zeros(2)
        else:
            to_wp = self.delta(me.p, np.array(path.waypoints[wp_idx]))
            dist = float(np.linalg.norm(to_wp))
            v_des = path.speed * to_wp / dist if dist > 1e-12 else np.zeros(2)
        raw = path.gain * (v_des - me.v)
        return np.clip(raw / self.config.f_max, -1.0, 1.0)

    # -- stepping -----------------------------------------------------------------

    def step(self, actions):
        """Advance one tick.

        `actions` is (n_living, 2) in ascending id order over living agents,
        components in [-1, 1]. Returns (rewards, events) with rewards keyed
        by the ids that were alive at entry.
        """
        cfg = self.config
        movers = self.living()
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (len(movers), 2):
            raise ValueError(
                f"expected actions of shape ({len(movers)}, 2), got {actions.shape}")
        actions = np.clip(actions, -1.0, 1.0)

        forces = {a.id: actions[i] * cfg.f_max for i, a in enumerate(movers)}
        self._add_contact_forces(movers, forces)

        for a in movers:
            task = self.team_task(a.team)
            v = a.v + cfg.dt * forces[a.id] / cfg.mass
            speed = float(np.linalg.norm(v))
            if speed > task.v_max:
                v = v * (task.v_max / speed)
            elif 0.0 < speed < task.v_min:
                v = v * (task.v_min / speed)
            p = a.p + cfg.dt * v
            if cfg.env.periodic:
                p = np.mod(p, cfg.env.L)
            else:
                for ax in range(2):
                    if p[ax] < 0.0:
                        p[ax] = -p[ax]
                        v[ax] = -v[ax]
                    elif p[ax] > cfg.env.L:
                        p[ax] = 2.0 * cfg.env.L - p[ax]
                        v[ax] = -v[ax]
            a.v = v
            a.p = p

        events = self.resolve_combat(movers)
        rewards = self._rewards(movers, events)
        self.tick += 1
        return rewards, events

    def _add_contact_forces(self, movers, forces):
        cfg = self.config
        two_r = 2.0 * cfg.robot_radius
        for i, a in enumerate(movers):
            for b in movers[i + 1:]:
                d = self.delta(a.p, b.p)
                dist = float(np.linalg.norm(d))
                if dist >= two_r or dist < 1e-12:
                    continue
                push = cfg.spring_k * (two_r - dist) * (d / dist)
                forces[a.id] = forces[a.id] - push
                forces[b.id] = forces[b.id] + push
            if not cfg.env.periodic:
                wall = np.zeros(2)
                for ax in range(2):
                    if a.p[ax] < cfg.robot_radius:
                        wall[ax] += cfg.spring_k * (cfg.robot_radius - a.p[ax])
                    elif a.p[ax] > cfg.env.L - cfg.robot_radius:
                        wall[ax] -= cfg.spring_k * (a.p[ax] - (cfg.env.L - cfg.robot_radius))
                if wall.any():
                    forces[a.id] = forces[a.id] + wall

    def resolve_combat(self, movers=None):
        """Directional attacks, the n_o cap, regeneration, and deaths.

        Evaluates the attack predicate over the current (frozen) state for
        every opposing pair, damages each victim by dh per attacker with
        attackers capped at the n_o nearest, regenerates un-attacked robots
        by 0.1*dh up to hp_max, and emits one kill event per death crediting
        all of the victim's effective attackers.
        """
        cfg = self.config
        if movers is None:
            movers = self.living()
        self._attackers_this_step = {}
        combat_teams = [t for t, task in cfg.tasks.items() if task.kind == ADVERSARIAL]
        if not combat_teams:
            return []
        hits = {}                            # victim id -> [attacker ids]
        for a in movers:
            task = self.team_task(a.team)
            if task.kind != ADVERSARIAL:
                continue
            for b in movers:
                if b.team == a.team or self.team_task(b.team).kind != ADVERSARIAL:
                    continue
                if attack_predicate(a, b, task.r_atta, cfg.k_attack_i, cfg.k_attack_ii,
                                    L=cfg.env.L, periodic=cfg.env.periodic):
                    self._attackers_this_step[a.id] = True
                    hits.setdefault(b.id, []).append(a.id)

        events = []
        for a in movers:
            task = self.team_task(a.team)
            if task.kind != ADVERSARIAL:
                continue
            attackers = hits.get(a.id, [])
            if attackers:
                attackers.sort(key=lambda i: (self.distance(a, self.get(i)), i))
                attackers = attackers[:task.n_o]
                dmg = sum(self.team_task(self.get(i).team).dh for i in attackers)
                a.hp = max(0.0, a.hp - dmg)
                if a.hp <= 0.0:
                    a.alive = False
                    events.append({"type": "kill", "victim": a.id,
                                   "victim_team": a.team, "attackers": list(attackers)})
            else:
                a.hp = min(cfg.hp_max, a.hp + cfg.regen_factor * task.dh)
        return events

    def _rewards(self, movers, events):
        rewards = {}
        for a in movers:
            if self.team_task(a.team).kind == ADVERSARIAL:
                rewards[a.id] = self.adversarial_reward(a.id, events)
            else:
                rewards[a.id] = self.flocking_reward(a.id) if a.alive else 0.0
        return rewards

    def adversarial_reward(self, agent_id, events):
        """Survival reward (per kill credited / on death) plus the
        situational bonus for holding an attack position this step."""
        cfg = self.config
        r = 0.0
        for ev in events:
            if agent_id in ev["attackers"]:
                r += cfg.k_surv
            if ev["victim"] == agent_id:
                r -= cfg.k_surv
        if self._attackers_this_step.get(agent_id):
            r += cfg.k_situ
        return r

    def flocking_reward(self, agent_id):
        """Distance-shaping (attraction/repulsion, averaged over neighbors)
        plus alignment of normalized velocities."""
        me = self.get(agent_id)
        task = self.team_task(me.team)
        cfg = self.config
        mates, _ = self.perceive(agent_id)
        if not mates:
            return 0.0
        shaping = 0.0
        v_me = me.v / max(float(np.linalg.norm(me.v)), EPS_SPEED)
        mis = np.zeros(2)
        for oid in mates:
            other = self.get(oid)
            d = self.distance(me, other)
            if d > task.d_ref:
                shaping -= cfg.k_attr * (d - task.d_ref)
            elif d < task.d_ref:
                shaping -= cfg.k_repl * (task.d_ref - d)
            v_o = other.v / max(float(np.linalg.norm(other.v)), EPS_SPEED)
            mis += v_o - v_me
        shaping /= len(mates)
        align = -cfg.k_alig * float(np.linalg.norm(mis / len(mates)))
        return shaping + align

    # -- metrics / export -----------------------------------------------------------

    def neighbor_distance_error(self, team):
        """Mean |d_ij - d_ref| / d_ref over perceived teammate pairs."""
        task = self.team_task(team)
        errs = []
        for a in self.living(team):
            mates, _ = self.perceive(a.id)
            for oid in mates:
                errs.append(abs(self.distance(a, self.get(oid)) - task.d_ref) / task.d_ref)
        return float(np.mean(errs)) if errs else float("nan")

    def snapshot(self):
        return {
            "tick": self.tick,
            "agents": [
                {"id": a.id, "team": a.team, "p": [float(a.p[0]), float(a.p[1])],
                 "v": [float(a.v[0]), float(a.v[1])], "hp": float(a.hp),
                 "alive": bool(a.alive)}
                for a in self.agents
            ],
        }


class TrajectoryWriter:
    """JSONL export: one record per step with agent states and events."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w")

    def record(self, world: World, events):
        rec = world.snapshot()
        rec["events"] = events
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
