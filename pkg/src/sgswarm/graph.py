"""TransH skill graph: build facts over (environment, task, skill) entities,
learn their representations, and answer queries by scoring every skill.

Entities are feature vectors pushed through an environment or task encoder;
skills and relations are embedding rows. A triple (h, r, b) scores
exp(-lambda * ||proj(h) + d_r - proj(b)||) with proj the projection onto the
relation's hyperplane (normal w_r). Queries multiply the env-relation and
task-relation scores per skill and dispatch on two thresholds: reuse the top
skill, blend the mid-band, or fine-tune the best seed.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, nets
from .features import (
    ADVERSARIAL,
    ENV_VECTOR_LEN,
    FLOCKING,
    TASK_VECTOR_LEN,
    EnvFeature,
    TaskFeature,
    env_delta,
    task_delta,
)

GRAPH_META_VERSION = 1

R_ENV = 0    # environment -> skill
R_TASK = 1   # task -> skill
N_RELATIONS = 2

HEAD_ENV = 0
HEAD_TASK = 1
TAIL_SKILL = 2
TAIL_ENV = 3
TAIL_TASK = 4

POSITIVE = "positive"
NEGATIVE = "negative"
SOFT = "soft"


@dataclass
class GraphConfig:
    rep_dim: int = 96
    hidden_size: int = 256
    hidden_layers: int = 3
    lam: float = 3.0
    alpha_high: float = 0.95
    alpha_low: float = 0.85
    iterations: int = 500          # minibatch updates (M)
    batch: int = 256
    learning_rate: float = 1e-2    # Adam rate for the relation translations
    emb_lr: float = 5e-4           # skill embeddings: slow enough for the
                                   # encoders to track the geometry reshape
    normal_lr: float = 1e-4        # hyperplane normals rotate very slowly
    encoder_lr: float = 1e-3       # Adam rate for the (wide) encoders
    lr_decay: float = 0.02         # all rates decay to this fraction by the end
    lr_hold: float = 0.6           # fraction of the run at full rate before the
                                   # exponential decay phase starts
    lr_warmup: int = 50            # linear ramp; fresh-Adam steps are +-lr per
                                   # parameter and would wreck the warm start
    encoder_gain: float = 0.4      # init-scale multiplier for encoder layers
    emb_gain: float = 0.05         # scale of the orthogonal embedding jitter
    warm_init: bool = True         # seed embeddings/translations from the encoders
    warm_spread: float = 2.0       # embedding-cloud spread relative to the images
    warm_twin_squeeze: float = 0.5  # shrink factor for delta = 0 task twins
    delta_profile: str = "padded"
    negatives_per_positive: int = 4
    blend_cap: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha_low < self.alpha_high <= 1.0:
            raise ValueError("need 0 <= alpha_low < alpha_high <= 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.iterations < 1 or self.batch < 1:
            raise ValueError("iterations and batch must be >= 1")

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def transh_score(head_vec, relation, tail_vec, lam):
    """Score one triple: exp(-lam * ||proj(h) + d - proj(b)||).

    `relation` is the (w, d) pair. A non-unit hyperplane normal is
    normalized internally with a warning.
    """
    w, d = relation
    h = np.asarray(head_vec, dtype=np.float64)
    b = np.asarray(tail_vec, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    norm_w = float(np.linalg.norm(w))
    if abs(norm_w - 1.0) > 1e-6:
        warnings.warn("hyperplane normal is not unit; normalizing", stacklevel=2)
    w_hat = w / norm_w
    g = (h - np.dot(w_hat, h) * w_hat) + d - (b - np.dot(w_hat, b) * w_hat)
    return float(np.exp(-lam * np.linalg.norm(g)))


@dataclass(frozen=True)
class Triple:
    head_kind: int     # HEAD_ENV | HEAD_TASK
    head_idx: int      # row in the corresponding entity table
    relation: int      # R_ENV | R_TASK
    tail_kind: int     # TAIL_SKILL | TAIL_ENV | TAIL_TASK
    tail_idx: int
    kind: str          # POSITIVE | NEGATIVE | SOFT
    delta: float = 0.0


@dataclass
class SampleSet:
    env_entities: list          # EnvFeature, deduplicated
    task_entities: list         # TaskFeature, deduplicated
    skill_envs: list            # per skill: index into env_entities
    skill_tasks: list           # per skill: index into task_entities
    triples: list               # Triple

    def by_kind(self, kind):
        return [t for t in self.triples if t.kind == kind]

    @property
    def env_matrix(self):
        return np.stack([e.vector() for e in self.env_entities])

    @property
    def task_matrix(self):
        return np.stack([t.vector() for t in self.task_entities])


def build_samples(records, profile="padded", negatives_per_positive=4, seed=0):
    """Enumerate positives, negatives and softs from a skill library.

    Facts are (entity, relation, skill) pairs from training provenance.
    Corruptions give negatives: swapped relations, entity tails, and
    cross-kind task/skill pairings. Same-kind entity swaps give softs whose
    target plausibility is capped at 1 - delta. Deterministic for a given
    seed; negatives are capped per positive with a seeded subsample.
    """
    if not records:
        raise ValueError("empty skill library")
    if len(records) == 1:
        warnings.warn("single-skill library: no soft samples can be formed")
    env_entities, task_entities = [], []
    env_idx, task_idx = {}, {}
    skill_envs, skill_tasks = [], []
    for rec in records:
        ekey = tuple(rec.env.vector())
        if ekey not in env_idx:
            env_idx[ekey] = len(env_entities)
            env_entities.append(rec.env)
        tkey = tuple(rec.task.vector())
        if tkey not in task_idx:
            task_idx[tkey] = len(task_entities)
            task_entities.append(rec.task)
        skill_envs.append(env_idx[ekey])
        skill_tasks.append(task_idx[tkey])

    rng = np.random.default_rng(seed)
    triples = []
    seen = set()

    def add(t: Triple):
        key = (t.head_kind, t.head_idx, t.relation, t.tail_kind, t.tail_idx)
        if key not in seen:
            seen.add(key)
            triples.append(t)

    def cap_negatives(cands):
        if len(cands) <= negatives_per_positive:
            return cands
        # the relation swap (first candidate) always stays
        keep = [cands[0]]
        rest = cands[1:]
        pick = rng.choice(len(rest), size=negatives_per_positive - 1, replace=False)
        keep.extend(rest[i] for i in sorted(pick))
        return keep

    for i, rec in enumerate(records):
        ei, ti = skill_envs[i], skill_tasks[i]
        add(Triple(HEAD_ENV, ei, R_ENV, TAIL_SKILL, i, POSITIVE))
        add(Triple(HEAD_TASK, ti, R_TASK, TAIL_SKILL, i, POSITIVE))

        env_negs = [Triple(HEAD_ENV, ei, R_TASK, TAIL_SKILL, i, NEGATIVE)]
        env_negs += [Triple(HEAD_ENV, ei, R_ENV, TAIL_ENV, j, NEGATIVE)
                     for j in range(len(env_entities)) if j != ei]
        for t in cap_negatives(env_negs):
            add(t)

        task_negs = [Triple(HEAD_TASK, ti, R_ENV, TAIL_SKILL, i, NEGATIVE)]
        task_negs += [Triple(HEAD_TASK, ti, R_TASK, TAIL_TASK, j, NEGATIVE)
                      for j in range(len(task_entities)) if j != ti]
        task_negs += [Triple(HEAD_TASK, ti, R_TASK, TAIL_SKILL, j, NEGATIVE)
                      for j, other in enumerate(records)
                      if other.task.kind != rec.task.kind]
        for t in cap_negatives(task_negs):
            add(t)

        for j, env in enumerate(env_entities):
            if j != ei:
                add(Triple(HEAD_ENV, j, R_ENV, TAIL_SKILL, i, SOFT,
                           env_delta(env, records[i].env)))
        for j, task in enumerate(task_entities):
            if j != ti and task.kind == rec.task.kind:
                add(Triple(HEAD_TASK, j, R_TASK, TAIL_SKILL, i, SOFT,
                           task_delta(task, rec.task, profile)))

    return SampleSet(env_entities, task_entities, skill_envs, skill_tasks, triples)


class GraphModel:
    """Encoders, skill embeddings and relation parameters in one space."""

    def __init__(self, skill_names, cfg: GraphConfig):
        self.cfg = cfg
        self.skill_names = list(skill_names)
        n = len(self.skill_names)
        if n < 1:
            raise ValueError("graph needs at least one skill")
        dim = cfg.rep_dim
        self.env_spec = nets.NetSpec(ENV_VECTOR_LEN, cfg.hidden_size,
                                     cfg.hidden_layers, dim)
        self.task_spec = nets.NetSpec(TASK_VECTOR_LEN, cfg.hidden_size,
                                      cfg.hidden_layers, dim)
        self.env_enc = nets.init_weights(self.env_spec, "uniform-scaled",
                                         seed=cfg.seed, gain=cfg.encoder_gain)
        self.task_enc = nets.init_weights(self.task_spec, "uniform-scaled",
                                          seed=cfg.seed + 1, gain=cfg.encoder_gain)
        rng = np.random.default_rng(cfg.seed + 2)
        # orthogonal embedding rows, scaled so initial pair distances stay
        # well inside the live range of exp(-lam * d)
        base = nets.orthogonal_matrix(n, dim, rng) if n <= dim else \
            rng.standard_normal((n, dim)) / np.sqrt(dim)
        self.emb = cfg.emb_gain * base
        self.w = nets.orthogonal_matrix(N_RELATIONS, dim, rng)
        self.w /= np.linalg.norm(self.w, axis=1, keepdims=True)
        self.d = np.zeros((N_RELATIONS, dim))
        self.trained = False

    def warm_start(self, samples):
        """Anchor the free parameters to the encoders' initial geometry.

        Fully satisfiable graphs require every embedding to sit on a plane
        spanned by the two relation normals (each relation projects one of
        them out, which is how one environment or task can relate to many
        skills). Plain orthogonal embeddings start every pair ~sqrt(2)
        apart, where exp(-lam * d) gradients vanish and training collapses
        one relation side before the other can form. Instead: point the
        env-relation normal along the task images' principal spread, point
        the task-relation normal along the env images' separation, place
        embeddings on that plane at their entities' coordinates, and set
        each translation to the mean positive offset. Every loss term then
        starts in the live score range and training only refines.
        """
        task_reps = nets.forward_batch(self.task_spec, self.task_enc,
                                       samples.task_matrix)
        env_reps = nets.forward_batch(self.env_spec, self.env_enc,
                                      samples.env_matrix)
        c_task = task_reps.mean(axis=0)
        c_env = env_reps.mean(axis=0)
        # u: main task-image direction (the skill line lives along it)
        if len(task_reps) > 1:
            _, _, vt = np.linalg.svd(task_reps - c_task, full_matrices=False)
            u = vt[0]
        else:
            u = self.w[0] / np.linalg.norm(self.w[0])
        # v: env separation direction, orthogonal to u
        if len(env_reps) > 1:
            _, _, ve = np.linalg.svd(env_reps - c_env, full_matrices=False)
            v0 = ve[0]
        else:
            v0 = self.w[1] / np.linalg.norm(self.w[1])
        v = v0 - (v0 @ u) * u
        if np.linalg.norm(v) < 1e-9:
            v = self.w[1] - (self.w[1] @ u) * u
        v /= np.linalg.norm(v)
        self.w[0] = u
        self.w[1] = v
        alpha = (task_reps - c_task) @ u           # per-task line coordinate
        beta = (env_reps - c_env) @ v              # per-env cluster coordinate
        alpha_e = self.cfg.warm_spread * alpha
        # tasks whose delta is exactly 0 are indistinguishable to the loss;
        # start their skills close so near-miss queries between them land in
        # the blend band instead of drifting apart
        tasks = samples.task_entities
        squeeze = self.cfg.warm_twin_squeeze
        done = set()
        for i in range(len(tasks)):
            if i in done:
                continue
            twins = [j for j in range(len(tasks))
                     if j == i or (j not in done and tasks[j].kind == tasks[i].kind
                                   and task_delta(tasks[i], tasks[j],
                                                  self.cfg.delta_profile) == 0.0)]
            if len(twins) > 1:
                mean = alpha_e[twins].mean()
                alpha_e[twins] = mean + squeeze * (alpha_e[twins] - mean)
                done.update(twins)
        jitter = self.emb                          # scaled orthogonal rows
        self.emb = (c_task
                    + np.outer(alpha_e[samples.skill_tasks], u)
                    + self.cfg.warm_spread * np.outer(beta[samples.skill_envs], v)
                    + jitter)
        for r, heads, reps in ((R_ENV, samples.skill_envs, env_reps),
                               (R_TASK, samples.skill_tasks, task_reps)):
            w_hat = self.w[r] / np.linalg.norm(self.w[r])
            proj = lambda X: X - np.outer(X @ w_hat, w_hat)
            self.d[r] = (proj(self.emb) - proj(reps[heads])).mean(axis=0)

    @property
    def n_skills(self):
        return len(self.skill_names)

    def encode(self, feature):
        """Deterministic representation of an EnvFeature or TaskFeature."""
        if isinstance(feature, EnvFeature):
            return nets.forward(self.env_spec, self.env_enc, feature.vector())
        if isinstance(feature, TaskFeature):
            return nets.forward(self.task_spec, self.task_enc, feature.vector())
        raise TypeError(f"cannot encode {type(feature).__name__}")

    def relation(self, r):
        return self.w[r], self.d[r]

    # flat parameter view, used by the finite-difference gradient check
    def param_arrays(self):
        return (self.env_enc.params() + self.task_enc.params()
                + [self.emb, self.w, self.d])

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.param_arrays()])

    def set_flat_params(self, flat):
        i = 0
        for p in self.param_arrays():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size


def _score_rows(model: GraphModel, env_reps, task_reps, triples):
    """Vectorized scores for a list of triples given entity rep tables.

    Returns (S, geometry) where geometry carries the per-row tensors the
    backward pass needs.
    """
    n = len(triples)
    dim = model.cfg.rep_dim
    H = np.zeros((n, dim))
    T = np.zeros((n, dim))
    rel = np.array([t.relation for t in triples])
    for k, t in enumerate(triples):
        H[k] = env_reps[t.head_idx] if t.head_kind == HEAD_ENV else task_reps[t.head_idx]
        if t.tail_kind == TAIL_SKILL:
            T[k] = model.emb[t.tail_idx]
        elif t.tail_kind == TAIL_ENV:
            T[k] = env_reps[t.tail_idx]
        else:
            T[k] = task_reps[t.tail_idx]
    norm_w = np.linalg.norm(model.w, axis=1)
    w_hat = model.w / norm_w[:, None]
    Wh = w_hat[rel]
    Z = H - T
    zw = np.einsum("ij,ij->i", Z, Wh)
    G = Z - zw[:, None] * Wh + model.d[rel]
    norms = np.linalg.norm(G, axis=1)
    S = np.exp(-model.cfg.lam * norms)
    return S, {"G": G, "norms": norms, "Z": Z, "Wh": Wh, "zw": zw,
               "rel": rel, "norm_w": norm_w}


def _loss_terms(S, triples):
    """Per-triple squared/hinge losses and dL/dS (pre mean-scaling)."""
    loss = np.zeros(len(triples))
    dS = np.zeros(len(triples))
    for k, t in enumerate(triples):
        s = S[k]
        if t.kind == POSITIVE:
            loss[k] = (s - 1.0) ** 2
            dS[k] = 2.0 * (s - 1.0)
        elif t.kind == NEGATIVE:
            loss[k] = s * s
            dS[k] = 2.0 * s
        else:
            margin = s - 1.0 + t.delta
            loss[k] = max(0.0, margin)
            dS[k] = 1.0 if margin > 0.0 else 0.0
    return loss, dS


def graph_loss(model: GraphModel, samples: SampleSet, triples=None):
    """Mean loss over the given triples (all by default); pure function."""
    triples = list(samples.triples if triples is None else triples)
    env_reps = nets.forward_batch(model.env_spec, model.env_enc, samples.env_matrix)
    task_reps = nets.forward_batch(model.task_spec, model.task_enc, samples.task_matrix)
    S, _ = _score_rows(model, env_reps, task_reps, triples)
    loss, _ = _loss_terms(S, triples)
    return float(np.mean(loss))


def graph_loss_gradients(model: GraphModel, samples: SampleSet, triples):
    """Analytic gradients of the mean loss for one triple batch.

    Returns (loss, grads) with grads keyed like the model's parameters:
    env/task encoder Grads plus arrays for emb, w, d.
    """
    triples = list(triples)
    n = len(triples)
    env_x = samples.env_matrix
    task_x = samples.task_matrix
    env_reps, env_cache = nets.forward_cached(model.env_spec, model.env_enc, env_x)
    task_reps, task_cache = nets.forward_cached(model.task_spec, model.task_enc, task_x)
    S, geom = _score_rows(model, env_reps, task_reps, triples)
    loss_terms, dS = _loss_terms(S, triples)
    loss = float(np.mean(loss_terms))

    # dL/dG rows: dL/dS * dS/dnorm * dnorm/dG, with the mean's 1/n folded in
    lam = model.cfg.lam
    coeff = (dS / n) * (-lam * S)           # dL/dnorm per row
    norms = geom["norms"]
    safe = np.where(norms > 1e-15, norms, 1.0)
    U = (coeff / safe)[:, None] * geom["G"]
    U[norms <= 1e-15] = 0.0

    Wh = geom["Wh"]
    uw = np.einsum("ij,ij->i", U, Wh)
    PU = U - uw[:, None] * Wh               # projected row gradients

    d_env = np.zeros_like(env_reps)
    d_task = np.zeros_like(task_reps)
    d_emb = np.zeros_like(model.emb)
    for k, t in enumerate(triples):
        if t.head_kind == HEAD_ENV:
            d_env[t.head_idx] += PU[k]
        else:
            d_task[t.head_idx] += PU[k]
        if t.tail_kind == TAIL_SKILL:
            d_emb[t.tail_idx] -= PU[k]
        elif t.tail_kind == TAIL_ENV:
            d_env[t.tail_idx] -= PU[k]
        else:
            d_task[t.tail_idx] -= PU[k]

    # relation gradients: d gets U directly; w through the normalization
    d_d = np.zeros_like(model.d)
    d_what = np.zeros_like(model.w)
    rel = geom["rel"]
    zw = geom["zw"]
    Z = geom["Z"]
    for r in range(N_RELATIONS):
        mask = rel == r
        if not np.any(mask):
            continue
        d_d[r] = U[mask].sum(axis=0)
        d_what[r] = -(uw[mask][:, None] * Z[mask]).sum(axis=0) \
                    - (zw[mask][:, None] * U[mask]).sum(axis=0)
    norm_w = geom["norm_w"]
    w_hat = model.w / norm_w[:, None]
    ww = np.einsum("ij,ij->i", d_what, w_hat)
    d_w = (d_what - ww[:, None] * w_hat) / norm_w[:, None]

    env_grads = nets.backward_cached(model.env_spec, model.env_enc,
                                     env_reps, env_cache, d_env)
    task_grads = nets.backward_cached(model.task_spec, model.task_enc,
                                      task_reps, task_cache, d_task)
    return loss, {"env": env_grads, "task": task_grads,
                  "emb": d_emb, "w": d_w, "d": d_d}


class _ArrayAdam:
    """Adam over a list of raw arrays (embeddings and relation params)."""

    def __init__(self, arrays, lr):
        self.arrays = arrays
        self.lr = lr
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads):
        self.t += 1
        kernels.adam_step(self.arrays, grads, self.m, self.v, self.t,
                          self.lr, 0.9, 0.999, 1e-8)


def train_graph(model: GraphModel, samples: SampleSet, iterations=None,
                batch=None, seed=None, progress=None):
    """Minibatch optimization of the graph loss; returns the loss curve.

    Each update samples a triple minibatch, backpropagates through both
    encoders, the skill embeddings and the relation parameters, and
    re-normalizes every hyperplane normal. Reads nothing but feature
    vectors and skill identities.
    """
    cfg = model.cfg
    iterations = cfg.iterations if iterations is None else iterations
    batch = cfg.batch if batch is None else batch
    seed = cfg.seed if seed is None else seed
    if cfg.warm_init and not model.trained:
        model.warm_start(samples)
    rng = np.random.default_rng(seed + 7)
    # four speed groups: translations absorb bulk offsets fast; embeddings
    # move slowly enough for the encoders to track the geometry reshape;
    # hyperplane normals rotate very slowly (the whole projection geometry
    # hangs off them); the wide encoders take fine steps (a coherent Adam
    # update moves their outputs by ~lr * width).
    env_opt = nets.make_optimizer("adam", cfg.encoder_lr, model.env_enc)
    task_opt = nets.make_optimizer("adam", cfg.encoder_lr, model.task_enc)
    d_opt = _ArrayAdam([model.d], cfg.learning_rate)
    emb_opt = _ArrayAdam([model.emb], cfg.emb_lr)
    w_opt = _ArrayAdam([model.w], cfg.normal_lr)
    hold_until = int(cfg.lr_hold * iterations)
    tail = max(1, iterations - 1 - hold_until)
    decay = cfg.lr_decay ** (1.0 / tail)
    triples = samples.triples
    curve = []
    for it in range(iterations):
        scale = decay ** max(0, it - hold_until)
        if cfg.lr_warmup > 0 and it < cfg.lr_warmup:
            scale *= (it + 1) / cfg.lr_warmup
        env_opt.learning_rate = task_opt.learning_rate = cfg.encoder_lr * scale
        d_opt.lr = cfg.learning_rate * scale
        emb_opt.lr = cfg.emb_lr * scale
        w_opt.lr = cfg.normal_lr * scale
        take = min(batch, len(triples))
        idx = rng.choice(len(triples), size=take, replace=False)
        minibatch = [triples[i] for i in idx]
        loss, grads = graph_loss_gradients(model, samples, minibatch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"graph loss diverged at iteration {it}")
        nets.optimizer_step(env_opt, model.env_enc, grads["env"])
        nets.optimizer_step(task_opt, model.task_enc, grads["task"])
        d_opt.step([grads["d"]])
        emb_opt.step([grads["emb"]])
        w_opt.step([grads["w"]])
        model.w /= np.linalg.norm(model.w, axis=1, keepdims=True)
        curve.append(loss)
        if progress is not None:
            progress(it, loss)
    model.trained = True
    return curve


@dataclass
class ScoreRow:
    skill_id: int
    name: str
    s_env: float
    s_task: float
    s: float


class ScoreTable:
    """Skill scores for one query, sorted by combined score descending."""

    def __init__(self, rows):
        self.rows = sorted(rows, key=lambda r: (-r.s, r.skill_id))

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def top(self):
        return self.rows[0]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["skill", "S_env", "S_task", "S"])
            for r in self.rows:
                writer.writerow([r.name, f"{r.s_env:.6f}", f"{r.s_task:.6f}",
                                 f"{r.s:.6f}"])


def query(model: GraphModel, env: EnvFeature, task: TaskFeature) -> ScoreTable:
    """Score every skill against (env, task): S = S_task * S_env."""
    if not model.trained:
        warnings.warn("querying an untrained graph model")
    he = model.encode(env)
    ht = model.encode(task)
    rows = []
    lam = model.cfg.lam
    for i, name in enumerate(model.skill_names):
        s_env = transh_score(he, model.relation(R_ENV), model.emb[i], lam)
        s_task = transh_score(ht, model.relation(R_TASK), model.emb[i], lam)
        rows.append(ScoreRow(i, name, s_env, s_task, s_task * s_env))
    return ScoreTable(rows)


@dataclass
class DispatchDecision:
    band: str                    # "reuse" | "blend" | "finetune"
    skill_ids: list
    names: list
    weights: list = None         # blend only; positive, sums to 1

    def describe(self):
        if self.band == "blend":
            parts = [f"{n}:{w:.4f}" for n, w in zip(self.names, self.weights)]
            return f"blend[{', '.join(parts)}]"
        return f"{self.band}[{self.names[0]}]"


def dispatch(table: ScoreTable, alpha_high=0.95, alpha_low=0.85, blend_cap=4):
    """Map a score table to one decision band.

    S > alpha_high: reuse the top skill. Otherwise any score in
    (alpha_low, alpha_high] selects a normalized-score blend over that band
    (capped at blend_cap members). Otherwise fine-tune the top skill.
    """
    if len(table) == 0:
        raise ValueError("empty score table")
    top = table.top()
    if top.s > alpha_high:
        return DispatchDecision("reuse", [top.skill_id], [top.name])
    band = [r for r in table if alpha_low < r.s <= alpha_high][:blend_cap]
    if band:
        total = sum(r.s for r in band)
        return DispatchDecision("blend", [r.skill_id for r in band],
                                [r.name for r in band],
                                [r.s / total for r in band])
    return DispatchDecision("finetune", [top.skill_id], [top.name])


def blended_act(decision: DispatchDecision, records, obs):
    """Weighted combination of member-skill actions, clipped to [-1, 1]^2.

    `records` maps skill name -> SkillRecord; members must share task kind.
    """
    if decision.band != "blend":
        raise ValueError("blended_act needs a blend decision")
    members = [records[name] for name in decision.names]
    kinds = {m.task.kind for m in members}
    if len(kinds) != 1:
        raise ValueError("cannot blend skills of different task kinds")
    obs = np.asarray(obs, dtype=np.float64)
    out = np.zeros(2)
    for w, m in zip(decision.weights, members):
        out += w * nets.forward(m.actor_spec, m.actor, obs)
    return np.clip(out, -1.0, 1.0)


def finetune(decision: DispatchDecision, records, env, task, world_config,
             train_config, name=None, baseline=False):
    """Warm-start training from the decision's seed skill.

    Optionally trains a from-scratch baseline with the same budget for
    comparison. Returns (record, curves) where curves holds the fine-tune
    curve and, when requested, the scratch curve.
    """
    from . import marl
    if decision.band != "finetune":
        raise ValueError("finetune needs a finetune decision")
    seed_record = records[decision.names[0]]
    name = name or f"{seed_record.name}_ft"
    record = marl.train_skill(env, task, world_config, train_config, name=name,
                              init_from=seed_record)
    curves = {"finetune": record.curve}
    if baseline:
        scratch = marl.train_skill(env, task, world_config, train_config,
                                   name=f"{name}_scratch")
        curves["scratch"] = scratch.curve
    return record, curves


# -- bundle persistence ----------------------------------------------------------


def save_graph(model: GraphModel, directory, skills_index=None):
    """Write the graph bundle: encoder nets, embeddings, relations, metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nets.save_net(directory, "env_encoder", model.env_spec, model.env_enc)
    nets.save_net(directory, "task_encoder", model.task_spec, model.task_enc)
    model.emb.astype("<f8").tofile(directory / "embeddings.bin")
    np.concatenate([model.w.ravel(), model.d.ravel()]).astype("<f8").tofile(
        directory / "relations.bin")
    meta = {
        "format_version": GRAPH_META_VERSION,
        "config": model.cfg.to_dict(),
        "skill_names": model.skill_names,
        "trained": model.trained,
        "emb_shape": list(model.emb.shape),
        "rel_shape": [N_RELATIONS, model.cfg.rep_dim],
    }
    (directory / "graph.meta").write_text(json.dumps(meta, indent=1))
    if skills_index is not None:
        (directory / "skills.index").write_text(json.dumps(skills_index, indent=1))
    return directory


def load_graph(directory):
    """Load a bundle saved by save_graph; rejects unknown versions."""
    directory = Path(directory)
    meta = json.loads((directory / "graph.meta").read_text())
    if meta.get("format_version") != GRAPH_META_VERSION:
        raise ValueError(f"unsupported graph.meta version {meta.get('format_version')!r}")
    cfg = GraphConfig.from_dict(meta["config"])
    model = GraphModel(meta["skill_names"], cfg)
    _, model.env_enc = nets.load_net(directory, "env_encoder")
    _, model.task_enc = nets.load_net(directory, "task_encoder")
    emb = np.fromfile(directory / "embeddings.bin", dtype="<f8")
    model.emb = emb.reshape(meta["emb_shape"])
    rel = np.fromfile(directory / "relations.bin", dtype="<f8")
    n_rel, dim = meta["rel_shape"]
    model.w = rel[:n_rel * dim].reshape(n_rel, dim)
    model.d = rel[n_rel * dim:].reshape(n_rel, dim)
    model.trained = bool(meta.get("trained"))
    index = None
    index_path = directory / "skills.index"
    if index_path.exists():
        index = json.loads(index_path.read_text())
    return model, index
