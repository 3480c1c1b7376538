"""Skill registry: persistent library of skill records with provenance.

A registry is a directory holding skill record subdirectories plus a
registry.json index mapping ids to paths, feature vectors, provenance and
content hashes. Also defines the standard 16-task x 2-environment library
used by the graph experiments.
"""

import hashlib
import json
from pathlib import Path

from .features import ADVERSARIAL, FLOCKING, EnvFeature, TaskFeature
from .marl import SkillRecord, TrainConfig, placeholder_skill

REGISTRY_VERSION = 1


def default_train_config(kind, desk=False, **overrides):
    """Hyperparameters per task kind; `desk=True` shrinks the episode budget
    to laptop scale while keeping the update rule identical."""
    if kind == FLOCKING:
        base = dict(hidden_size=64, hidden_layers=3, episodes=1800)
    else:
        base = dict(hidden_size=128, hidden_layers=2, episodes=1200)
    base.update(episode_len=200, batch=512, buffer_capacity=500_000,
                gamma=0.99, tau=0.01, noise_sigma=0.8, noise_floor_frac=0.1,
                actor_lr=1e-4, critic_lr=1e-3)
    if desk:
        base.update(episodes=300 if kind == FLOCKING else 400,
                    episode_len=100, buffer_capacity=200_000)
    base.update(overrides)
    return TrainConfig(**base)


def standard_library_features():
    """The 32-skill library: 8 flocking + 8 adversarial tasks, each under a
    fixed and a periodic 6 m environment. Returns (name, env, task) rows."""
    envs = [("fixed", EnvFeature(y=1, L=6.0)), ("periodic", EnvFeature(y=0, L=6.0))]
    tasks = []
    for k in range(1, 9):
        tasks.append((f"floc_{k}", TaskFeature(
            kind=FLOCKING, v_max=1.0, v_min=0.0,
            d_ref=0.4 if k % 2 == 1 else 0.8, r_perc=float(2 + (k - 1) // 2))))
    for k in range(1, 9):
        tasks.append((f"adve_{k}", TaskFeature(
            kind=ADVERSARIAL, v_max=1.0, v_min=0.0, dh=1.0,
            n_o=2 + (k - 1) % 4, r_atta=0.3 if k <= 4 else 0.4)))
    return [(f"{tname}_{ename}", env, task)
            for tname, task in tasks for ename, env in envs]


def _hash_file(path: Path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RegistryError(RuntimeError):
    pass


class SkillRegistry:
    """Directory-backed index of skill records."""

    def __init__(self, root):
        self.root = Path(root)
        self.index_path = self.root / "registry.json"
        if self.index_path.exists():
            data = json.loads(self.index_path.read_text())
            if data.get("format_version") != REGISTRY_VERSION:
                raise RegistryError(
                    f"unsupported registry version {data.get('format_version')!r}")
            self.entries = data["skills"]
        else:
            self.entries = []

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {"format_version": REGISTRY_VERSION, "skills": self.entries}
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=1))
        tmp.replace(self.index_path)

    def names(self):
        return [e["name"] for e in self.entries]

    def find(self, name):
        for e in self.entries:
            if e["name"] == name:
                return e
        raise RegistryError(f"skill {name!r} not in registry")

    def add(self, record: SkillRecord, parent=None):
        """Store a record under the registry and index it with a fresh id."""
        if record.name in self.names():
            raise RegistryError(f"skill name {record.name!r} already registered")
        rel = Path("skills") / record.name
        directory = self.root / rel
        record.save(directory)
        hashes = {f.name: _hash_file(f) for f in sorted(directory.iterdir())}
        entry = {
            "id": len(self.entries),
            "name": record.name,
            "path": str(rel),
            "env": record.env.to_dict(),
            "task": record.task.to_dict(),
            "provenance": dict(record.provenance, parent=parent or
                               record.provenance.get("parent")),
            "sha256": hashes,
        }
        self.entries.append(entry)
        self.save()
        return entry["id"]

    def load_record(self, name) -> SkillRecord:
        entry = self.find(name)
        return SkillRecord.load(self.root / entry["path"])

    def load_all(self):
        return [self.load_record(n) for n in self.names()]

    def verify(self):
        """Re-hash every indexed file; raises naming the first corrupt skill."""
        for entry in self.entries:
            directory = self.root / entry["path"]
            for fname, expect in entry["sha256"].items():
                path = directory / fname
                if not path.exists():
                    raise RegistryError(f"skill {entry['name']!r}: missing {fname}")
                if _hash_file(path) != expect:
                    raise RegistryError(f"skill {entry['name']!r}: hash mismatch on {fname}")
        return len(self.entries)

    def provenance_chain(self, name):
        """Walk parent links back to a root skill."""
        chain = [name]
        seen = {name}
        entry = self.find(name)
        while entry["provenance"].get("parent"):
            parent = entry["provenance"]["parent"]
            if parent in seen:
                raise RegistryError(f"provenance cycle at {parent!r}")
            chain.append(parent)
            seen.add(parent)
            entry = self.find(parent)
        return chain

    def gc(self, dry_run=True):
        """List (and optionally remove) unreferenced skill directories."""
        skills_dir = self.root / "skills"
        if not skills_dir.exists():
            return []
        referenced = {str(Path(e["path"])) for e in self.entries}
        orphans = [p for p in sorted(skills_dir.iterdir())
                   if p.is_dir() and str(p.relative_to(self.root)) not in referenced]
        if not dry_run:
            import shutil
            for p in orphans:
                shutil.rmtree(p)
        return [str(p) for p in orphans]


def init_standard_library(root, seed=0):
    """Fill a registry with the 32 standard skills as placeholder records.

    Graph construction only reads features and identities, so the policy
    weights can stay untrained until someone trains them.
    """
    registry = SkillRegistry(root)
    for k, (name, env, task) in enumerate(standard_library_features()):
        cfg = default_train_config(task.kind, desk=True)
        record = placeholder_skill(name, env, task, cfg, seed=seed + k)
        registry.add(record)
    return registry
