"""Global-descriptor index over real keyframes and virtual views.

An exhaustive linear scan keeps retrieval exact and deterministic; the
corpora here stay well below 10^4 entries.  All descriptors are
whitened with one transform fitted on the union of real and virtual
vectors, then re-normalized, so real and virtual entries compete on
equal footing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCorpusError
from .features import WhiteningTransform, fit_whitening
from .geometry import Pose, pose_from_string, pose_to_string

_INDEX_MAGIC = b"VLIX"
_INDEX_VERSION = 1

KIND_REAL = "real"
KIND_VIRTUAL = "virtual"


@dataclass
class IndexEntry:
    id: str
    kind: str
    pose: Pose
    descriptor: np.ndarray  # (m,) float32, whitened + unit norm


@dataclass
class RetrievalIndex:
    entries: list[IndexEntry]
    whitening: WhiteningTransform

    def __len__(self) -> int:
        return len(self.entries)


def _whiten_unit(whitening: WhiteningTransform, v: np.ndarray) -> np.ndarray:
    w = whitening.apply(np.asarray(v, dtype=np.float64))
    n = np.linalg.norm(w)
    return (w / n if n > 0 else w)


def build_index(reals: list[tuple[str, Pose, np.ndarray]],
                virtuals: list[tuple[str, Pose, np.ndarray]]) -> RetrievalIndex:
    """Fit whitening on the union of descriptors, then index everything.

    `reals` and `virtuals` are (id, pose, raw global descriptor) tuples.
    """
    if not reals and not virtuals:
        raise EmptyCorpusError("no entries to index")
    raw = [np.asarray(g, dtype=np.float64) for _, _, g in reals]
    raw += [np.asarray(g, dtype=np.float64) for _, _, g in virtuals]
    stacked = np.stack(raw)
    if len(stacked) >= 2:
        whitening = fit_whitening(stacked)
    else:
        m = stacked.shape[1]
        whitening = WhiteningTransform(np.zeros(m), np.eye(m))

    entries = []
    for kind, items in ((KIND_REAL, reals), (KIND_VIRTUAL, virtuals)):
        for eid, pose, g in items:
            entries.append(IndexEntry(
                eid, kind, pose,
                _whiten_unit(whitening, g).astype(np.float32)))
    return RetrievalIndex(entries, whitening)


def query_topk(index: RetrievalIndex, query_desc: np.ndarray,
               k: int) -> list[tuple[str, float]]:
    """k nearest entries by Euclidean distance after whitening the query.

    Returns (id, distance) ascending; ties break by ascending id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not index.entries:
        raise EmptyCorpusError("retrieval index is empty")
    q = _whiten_unit(index.whitening, query_desc)
    mat = np.stack([e.descriptor.astype(np.float64) for e in index.entries])
    dist = np.linalg.norm(mat - q[None, :], axis=1)
    ids = [e.id for e in index.entries]
    order = sorted(range(len(ids)), key=lambda i: (dist[i], ids[i]))
    return [(ids[i], float(dist[i])) for i in order[:k]]


def entry_by_id(index: RetrievalIndex, eid: str) -> IndexEntry:
    for e in index.entries:
        if e.id == eid:
            return e
    raise KeyError(eid)


# -- persistence (index.vlix) ----------------------------------------------

def save_index(index: RetrievalIndex, path) -> None:
    m = index.whitening.mean.shape[0]
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<III", m, len(index.entries), _INDEX_VERSION))
        fh.write(index.whitening.mean.astype("<f8").tobytes())
        fh.write(index.whitening.projection.astype("<f8").tobytes())
        for e in index.entries:
            ident = e.id.encode("utf-8")
            pose = pose_to_string(e.pose).encode("ascii")
            fh.write(struct.pack("<HBH", len(ident),
                                 0 if e.kind == KIND_REAL else 1, len(pose)))
            fh.write(ident)
            fh.write(pose)
            fh.write(e.descriptor.astype("<f4").tobytes())


def load_index(path) -> RetrievalIndex:
    data = Path(path).read_bytes()
    if data[:4] != _INDEX_MAGIC:
        raise ValueError(f"not an index file: {path}")
    m, count, _version = struct.unpack("<III", data[4:16])
    pos = 16
    mean = np.frombuffer(data, dtype="<f8", count=m, offset=pos).copy()
    pos += m * 8
    proj = np.frombuffer(data, dtype="<f8", count=m * m, offset=pos)
    proj = proj.reshape(m, m).copy()
    pos += m * m * 8
    entries = []
    for _ in range(count):
        id_len, kind_code, pose_len = struct.unpack_from("<HBH", data, pos)
        pos += 5
        eid = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        pose = pose_from_string(data[pos:pos + pose_len].decode("ascii"))
        pos += pose_len
        desc = np.frombuffer(data, dtype="<f4", count=m, offset=pos).copy()
        pos += m * 4
        entries.append(IndexEntry(eid, KIND_REAL if kind_code == 0
                                  else KIND_VIRTUAL, pose, desc))
    return RetrievalIndex(entries, WhiteningTransform(mean, proj))
