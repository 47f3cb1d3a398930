"""Training datasets of (state, control, remaining-time) records.

Records carry their source trajectory id and knot index; that pair is the
identity used for deduplication.  For the replacement merge mode the dataset
also tracks, per trajectory, which root state it descends from and at what
absolute time along the root's timeline it starts, so a re-solved tail can
evict exactly the records it supersedes.
"""

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Dataset", "Record", "read_ndjson", "write_ndjson"]


@dataclass(frozen=True)
class Record:
    traj_id: str
    knot: int
    t_remaining: float
    x: tuple
    u: tuple


@dataclass(frozen=True)
class TrajectoryMeta:
    root_id: str
    t_start: float      # absolute time of the trajectory's first knot
    t_f: float          # the trajectory's own optimal horizon


@dataclass
class Dataset:
    records: list = field(default_factory=list)
    lineage: dict = field(default_factory=dict)   # traj_id -> TrajectoryMeta
    _keys: set = field(default_factory=set)

    def __post_init__(self):
        self._keys = {(r.traj_id, r.knot) for r in self.records}

    def __len__(self):
        return len(self.records)

    def add_trajectory(self, traj_id, states, controls, t_f,
                       root_id=None, t_start=0.0):
        """Append one solved trajectory's control knots as records.

        states has one more row than controls; the terminal state carries no
        control and contributes no record.
        """
        states = np.asarray(states, dtype=float)
        controls = np.asarray(controls, dtype=float)
        n = controls.shape[0]
        if states.shape[0] != n + 1:
            raise ValueError("states must have one more row than controls")
        if traj_id in self.lineage:
            raise ValueError(f"trajectory id {traj_id!r} already present")
        dt = t_f / n
        for k in range(n):
            rec = Record(
                traj_id=traj_id,
                knot=k,
                t_remaining=t_f - k * dt,
                x=tuple(float(v) for v in states[k]),
                u=tuple(float(v) for v in controls[k]),
            )
            self.records.append(rec)
            self._keys.add((traj_id, k))
        self.lineage[traj_id] = TrajectoryMeta(
            root_id=root_id if root_id is not None else traj_id,
            t_start=float(t_start),
            t_f=float(t_f),
        )

    def arrays(self):
        """(X, U, remaining) matrices over all records."""
        X = np.array([r.x for r in self.records], dtype=float)
        U = np.array([r.u for r in self.records], dtype=float)
        tf = np.array([r.t_remaining for r in self.records], dtype=float)
        return X, U, tf

    def copy(self):
        out = Dataset(records=list(self.records), lineage=dict(self.lineage))
        return out

    def absolute_time(self, rec: Record) -> float:
        meta = self.lineage[rec.traj_id]
        return meta.t_start + (meta.t_f - rec.t_remaining)

    def merge_union(self, other: "Dataset") -> "Dataset":
        """Records of both datasets; duplicate (traj_id, knot) keys keep the
        incumbent."""
        out = self.copy()
        for rec in other.records:
            key = (rec.traj_id, rec.knot)
            if key not in out._keys:
                out.records.append(rec)
                out._keys.add(key)
        for tid, meta in other.lineage.items():
            out.lineage.setdefault(tid, meta)
        return out

    def merge_replacement(self, other: "Dataset", cuts: dict) -> "Dataset":
        """Union, but for each root in cuts drop the incumbent records of
        that root's lineage at absolute times at or past the cut."""
        kept = []
        for rec in self.records:
            meta = self.lineage[rec.traj_id]
            cut = cuts.get(meta.root_id)
            if cut is not None and self.absolute_time(rec) >= cut - 1e-12:
                continue
            kept.append(rec)
        out = Dataset(records=kept, lineage=dict(self.lineage))
        return out.merge_union(other)


def write_ndjson(dataset: Dataset, path):
    with open(path, "w") as fh:
        for r in dataset.records:
            fh.write(json.dumps({
                "traj_id": r.traj_id,
                "knot": r.knot,
                "t_remaining": r.t_remaining,
                "x": list(r.x),
                "u": list(r.u),
            }) + "\n")


def read_ndjson(path) -> Dataset:
    """Read records and reconstruct lineage.

    The record schema carries no ancestry, so every trajectory is treated as
    its own root starting at absolute time zero; its horizon is recovered
    from the earliest knot present (knot 0 has t_remaining == t_f exactly).
    Exact for solver-generated root datasets; descendant files read back as
    independent roots.
    """
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(Record(
                traj_id=d["traj_id"],
                knot=int(d["knot"]),
                t_remaining=float(d["t_remaining"]),
                x=tuple(d["x"]),
                u=tuple(d["u"]),
            ))
    lineage = {}
    for rec in records:
        meta = lineage.get(rec.traj_id)
        if meta is None or rec.t_remaining > meta.t_f:
            lineage[rec.traj_id] = TrajectoryMeta(
                root_id=rec.traj_id, t_start=0.0, t_f=rec.t_remaining)
    return Dataset(records=records, lineage=lineage)
