"""Environment and task feature vectors plus their similarity measure.

Feature vectors describe entities numerically: an environment is
(boundary type, side length); a task is its physical parameter tuple.
Tasks are padded to a common length of 5 so a single task encoder can
serve both kinds. The weighted attribute-difference `delta` drives the
soft-sample targets in the graph loss.
"""

from dataclasses import dataclass

import numpy as np

FLOCKING = "flocking"
ADVERSARIAL = "adversarial"

TASK_VECTOR_LEN = 5
ENV_VECTOR_LEN = 2

# Weight profiles for the task delta. Adversarial tasks always use
# (0, 0, 0, 3, 1) over (v_max, v_min, dh, n_o, r_atta). For flocking the
# alignment of those five weights onto the 4-attribute vector is ambiguous,
# so both readings ship and configs pick one:
#   padded  -- weights applied to the zero-padded vector (3 on r_perc,
#              1 on the pad slot, which never differs),
#   shifted -- weights moved onto the informative slots (3 on d_ref,
#              1 on r_perc).
TASK_DELTA_WEIGHTS = (0.0, 0.0, 0.0, 3.0, 1.0)
FLOCKING_SHIFTED_WEIGHTS = (0.0, 0.0, 3.0, 1.0, 0.0)
ENV_DELTA_WEIGHTS = (0.95, 0.05)
DELTA_PROFILES = ("padded", "shifted")


@dataclass(frozen=True)
class EnvFeature:
    y: int       # 0 = periodic boundary, 1 = fixed boundary
    L: float     # side length, m

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError(f"boundary type must be 0 or 1, got {self.y}")
        if self.L <= 0:
            raise ValueError("side length must be positive")

    @property
    def periodic(self):
        return self.y == 0

    def vector(self):
        return np.array([float(self.y), float(self.L)])

    def to_dict(self):
        return {"y": self.y, "L": self.L}

    @classmethod
    def from_dict(cls, d):
        return cls(y=int(d["y"]), L=float(d["L"]))


@dataclass(frozen=True)
class TaskFeature:
    kind: str
    v_max: float
    v_min: float
    d_ref: float = 0.0    # flocking only
    r_perc: float = 0.0
    dh: float = 0.0       # adversarial only: hp lost per attacker per step
    n_o: int = 0          # adversarial only: max simultaneous attackers
    r_atta: float = 0.0   # adversarial only: attack radius, m

    def __post_init__(self):
        if self.kind not in (FLOCKING, ADVERSARIAL):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not (self.v_max > self.v_min >= 0):
            raise ValueError("need v_max > v_min >= 0")
        if self.kind == FLOCKING:
            if self.d_ref <= 0 or self.r_perc <= 0:
                raise ValueError("flocking needs d_ref > 0 and r_perc > 0")
        else:
            if self.dh <= 0 or self.n_o < 1 or self.r_atta <= 0:
                raise ValueError("adversarial needs dh > 0, n_o >= 1, r_atta > 0")

    def raw_values(self):
        """Attribute tuple in canonical order (4 flocking / 5 adversarial)."""
        if self.kind == FLOCKING:
            return (self.v_max, self.v_min, self.d_ref, self.r_perc)
        return (self.v_max, self.v_min, self.dh, float(self.n_o), self.r_atta)

    def vector(self):
        """Zero-padded 5-vector fed to the task encoder."""
        vals = list(self.raw_values())
        while len(vals) < TASK_VECTOR_LEN:
            vals.append(0.0)
        return np.array(vals)

    def to_dict(self):
        d = {"kind": self.kind, "v_max": self.v_max, "v_min": self.v_min}
        if self.kind == FLOCKING:
            d.update(d_ref=self.d_ref, r_perc=self.r_perc)
        else:
            d.update(dh=self.dh, n_o=self.n_o, r_atta=self.r_atta)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        if kind == FLOCKING:
            return cls(kind=kind, v_max=float(d["v_max"]), v_min=float(d["v_min"]),
                       d_ref=float(d["d_ref"]), r_perc=float(d["r_perc"]))
        return cls(kind=kind, v_max=float(d["v_max"]), v_min=float(d["v_min"]),
                   dh=float(d["dh"]), n_o=int(d["n_o"]), r_atta=float(d["r_atta"]))

    @classmethod
    def from_values(cls, vals):
        """Build from a raw value tuple; arity picks the kind (4 flocking,
        5 adversarial), matching the comma-separated CLI notation."""
        vals = [float(v) for v in vals]
        if len(vals) == 4:
            return cls(kind=FLOCKING, v_max=vals[0], v_min=vals[1],
                       d_ref=vals[2], r_perc=vals[3])
        if len(vals) == 5:
            return cls(kind=ADVERSARIAL, v_max=vals[0], v_min=vals[1],
                       dh=vals[2], n_o=int(round(vals[3])), r_atta=vals[4])
        raise ValueError(
            f"task feature needs 4 (flocking) or 5 (adversarial) values, got {len(vals)}")


def parse_env_str(s):
    parts = [p for p in s.split(",") if p.strip() != ""]
    if len(parts) != 2:
        raise ValueError(f"environment feature needs 2 values 'y,L', got {len(parts)}")
    return EnvFeature(y=int(float(parts[0])), L=float(parts[1]))


def parse_task_str(s):
    parts = [p for p in s.split(",") if p.strip() != ""]
    return TaskFeature.from_values(parts)


def env_delta(a: EnvFeature, b: EnvFeature):
    """Weighted absolute attribute difference between two environments."""
    diffs = np.abs(a.vector() - b.vector())
    w = np.array(ENV_DELTA_WEIGHTS)
    return min(1.0, float((w @ diffs) / w.sum()))


def task_delta(a: TaskFeature, b: TaskFeature, profile="padded"):
    """Weighted absolute attribute difference between two same-kind tasks."""
    if a.kind != b.kind:
        raise ValueError("delta is only defined between tasks of the same kind")
    if profile not in DELTA_PROFILES:
        raise ValueError(f"unknown delta profile {profile!r}")
    if a.kind == FLOCKING and profile == "shifted":
        w = np.array(FLOCKING_SHIFTED_WEIGHTS)
    else:
        w = np.array(TASK_DELTA_WEIGHTS)
    diffs = np.abs(a.vector() - b.vector())
    return min(1.0, float((w @ diffs) / w.sum()))
