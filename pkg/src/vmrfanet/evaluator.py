"""Single-query retrieval evaluation: CMC and mAP.

For each query, gallery entries that share both its identity and its camera
are removed before ranking.  Remaining entries are ordered by ascending
Euclidean distance with ties broken by gallery index.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ProtocolError


@dataclass
class GalleryIndex:
    embeddings: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64).reshape(-1)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64).reshape(-1)
        n = self.embeddings.shape[0]
        if self.embeddings.ndim != 2 or len(self.person_ids) != n or len(self.camera_ids) != n:
            raise DimensionError(
                f"index rows disagree: embeddings {self.embeddings.shape}, "
                f"{len(self.person_ids)} person ids, {len(self.camera_ids)} camera ids", (0,))

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    num_valid_queries: int

    def rank(self, k):
        return float(self.cmc[k - 1]) if k <= len(self.cmc) else float(self.cmc[-1])

    def format(self):
        lines = [f"rank-{k:<3d} {100 * self.rank(k):5.1f}" for k in (1, 5, 10)]
        lines.append(f"mAP      {100 * self.map:5.1f}")
        lines.append(f"queries  {self.num_valid_queries}")
        return "\n".join(lines)


def distance_matrix(queries, gallery):
    """Euclidean distances between unit-norm rows via ``d^2 = 2 - 2 q.g``."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"query dims {q.shape} and gallery dims {g.shape} disagree", (1,))
    return np.sqrt(np.maximum(2.0 - 2.0 * q @ g.T, 0.0))


def _ranked(dist_row, valid):
    idx = np.flatnonzero(valid)
    # stable sort keeps ascending gallery index among equal distances
    return idx[np.argsort(dist_row[idx], kind="stable")]


def _query_valid(queries, gallery, i):
    return ~((gallery.person_ids == queries.person_ids[i]) & (gallery.camera_ids == queries.camera_ids[i]))


def evaluate(queries, gallery, max_rank=50, dist=None):
    if dist is None:
        dist = distance_matrix(queries.embeddings, gallery.embeddings)
    hits = np.zeros(max_rank)
    aps = []
    any_gallery = False
    for i in range(len(queries)):
        valid = _query_valid(queries, gallery, i)
        if valid.any():
            any_gallery = True
        order = _ranked(dist[i], valid)
        match = gallery.person_ids[order] == queries.person_ids[i]
        if not match.any():
            continue
        positions = np.flatnonzero(match)  # 0-based ranks of correct matches
        first = positions[0]
        if first < max_rank:
            hits[first:] += 1
        precision = np.arange(1, len(positions) + 1) / (positions + 1)
        aps.append(precision.mean())
    if not any_gallery:
        raise ProtocolError("gallery is empty for every query after same-identity/same-camera exclusion")
    n = len(aps)
    cmc = hits / n if n else hits
    return EvalReport(cmc=cmc, map=float(np.mean(aps)) if n else 0.0, num_valid_queries=n)


def rank_list(queries, gallery, query_index, k, dist=None):
    """Top-k ``(gallery_index, distance, is_match)`` for one query; shorter if the gallery is."""
    if dist is None:
        d = distance_matrix(queries.embeddings[query_index:query_index + 1], gallery.embeddings)[0]
    else:
        d = dist[query_index]
    order = _ranked(d, _query_valid(queries, gallery, query_index))[:k]
    pid = queries.person_ids[query_index]
    return [(int(j), float(d[j]), bool(gallery.person_ids[j] == pid)) for j in order]
