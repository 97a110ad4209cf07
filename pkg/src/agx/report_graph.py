"""Report graphs: annotation documents -> adjacency matrices -> weak labels.

An annotation document lists entities (anatomy / observation mentions) and
typed relations between them. Only ``located_at`` edges from an observation
to an anatomy populate the matrix; observations with no such edge land on the
reserved ``unspecified`` row.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ENTITY_LABELS = ("ANAT-DP", "OBS-DP", "OBS-DA", "OBS-U")
RELATION_TYPES = ("located_at", "modify", "suggestive_of")

UNSPECIFIED = "unspecified"
OTHER_ANATOMIES = "other_anatomies"
OTHER_OBSERVATIONS = "other_observations"

# Cell codes. Precedence P > N > U is just ``max`` on these codes.
ABSENT, U, N, P = 0, 1, 2, 3
STATE_CHARS = {ABSENT: "", U: "U", N: "N", P: "P"}
CHAR_STATES = {v: k for k, v in STATE_CHARS.items()}
OBS_STATE = {"OBS-DP": P, "OBS-DA": N, "OBS-U": U}

# Weak label values; unlabeled is stored as -1.
POSITIVE, NEGATIVE, UNLABELED = 1, 0, -1


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation document."""


@dataclass(frozen=True)
class Entity:
    entity_id: str
    tokens: str
    label: str
    relations: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class AnnotationDocument:
    doc_id: str
    entities: dict[str, Entity]


@dataclass(frozen=True)
class Vocabulary:
    anatomy_tokens: tuple[str, ...]
    observation_tokens: tuple[str, ...]

    def __post_init__(self):
        anat = list(dict.fromkeys(_norm(t) for t in self.anatomy_tokens))
        for tok in (UNSPECIFIED, OTHER_ANATOMIES):
            if tok not in anat:
                anat.append(tok)
        obs = list(dict.fromkeys(_norm(t) for t in self.observation_tokens))
        if OTHER_OBSERVATIONS not in obs:
            obs.append(OTHER_OBSERVATIONS)
        object.__setattr__(self, "anatomy_tokens", tuple(anat))
        object.__setattr__(self, "observation_tokens", tuple(obs))
        object.__setattr__(self, "_anat_index", {t: i for i, t in enumerate(anat)})
        object.__setattr__(self, "_obs_index", {t: i for i, t in enumerate(obs)})

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.anatomy_tokens), len(self.observation_tokens)

    def anatomy_row(self, token: str) -> int:
        return self._anat_index.get(_norm(token), self._anat_index[OTHER_ANATOMIES])

    def observation_col(self, token: str) -> int:
        return self._obs_index.get(_norm(token), self._obs_index[OTHER_OBSERVATIONS])

    @classmethod
    def from_files(cls, anatomy_path, observation_path) -> "Vocabulary":
        return cls(_read_tokens(Path(anatomy_path)), _read_tokens(Path(observation_path)))

    @classmethod
    def default(cls) -> "Vocabulary":
        """Bundled vocabulary: 46 + 2 anatomy rows, 63 + 1 observation columns."""
        data = resources.files("agx") / "data"
        return cls(
            _split_tokens((data / "vocab_anatomy.txt").read_text("utf-8")),
            _split_tokens((data / "vocab_observation.txt").read_text("utf-8")),
        )


@dataclass
class AdjacencyMatrix:
    doc_id: str
    anatomy_tokens: tuple[str, ...]
    observation_tokens: tuple[str, ...]
    grid: np.ndarray = field(repr=False)  # int8 codes, rows=anatomy, cols=observation

    def __post_init__(self):
        shape = (len(self.anatomy_tokens), len(self.observation_tokens))
        if self.grid.shape != shape:
            raise ValueError(f"grid shape {self.grid.shape} does not match vocabulary {shape}")

    @classmethod
    def empty(cls, doc_id: str, vocab: Vocabulary) -> "AdjacencyMatrix":
        return cls(doc_id, vocab.anatomy_tokens, vocab.observation_tokens,
                   np.zeros(vocab.shape, dtype=np.int8))

    def cell(self, anatomy: str, observation: str) -> str:
        i = self.anatomy_tokens.index(anatomy)
        k = self.observation_tokens.index(observation)
        return STATE_CHARS[int(self.grid[i, k])]

    def __eq__(self, other):
        if not isinstance(other, AdjacencyMatrix):
            return NotImplemented
        return (self.doc_id == other.doc_id
                and self.anatomy_tokens == other.anatomy_tokens
                and self.observation_tokens == other.observation_tokens
                and np.array_equal(self.grid, other.grid))


@dataclass(frozen=True)
class WeakLabels:
    obs_labels: dict[str, int]
    anat_labels: dict[str, int]


@dataclass(frozen=True)
class CorpusStats:
    n_documents: int
    fractions: dict[str, dict[str, float]]
    counts: dict[str, dict[str, int]]
    top_anatomies: dict[str, list[tuple[str, float]]]

    def to_dict(self) -> dict:
        return {
            "n_documents": self.n_documents,
            "observations": {
                obs: {
                    **self.fractions[obs],
                    "counts": self.counts[obs],
                    "top_anatomies": [[a, pct] for a, pct in self.top_anatomies[obs]],
                }
                for obs in self.fractions
            },
        }


def _norm(token: str) -> str:
    return " ".join(token.strip().lower().split())


def _split_tokens(text: str) -> list[str]:
    return [line.strip() for line in text.splitlines() if line.strip()]


def _read_tokens(path: Path) -> list[str]:
    return _split_tokens(path.read_text("utf-8"))


def parse_annotations(document: str | bytes) -> AnnotationDocument:
    """Parse and validate one serialized annotation document."""
    if isinstance(document, bytes):
        document = document.decode("utf-8")
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed document at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc

    if not isinstance(raw, dict):
        raise AnnotationError("top level: expected an object")
    doc_id = raw.get("doc_id")
    if not isinstance(doc_id, str):
        raise AnnotationError("top level: 'doc_id' must be a string")
    ents = raw.get("entities", {})
    if not isinstance(ents, dict):
        raise AnnotationError(f"{doc_id}: 'entities' must be an object keyed by entity id")

    entities: dict[str, Entity] = {}
    for eid, body in ents.items():
        where = f"{doc_id}/entities/{eid}"
        if not isinstance(body, dict):
            raise AnnotationError(f"{where}: expected an object")
        tokens, label = body.get("tokens"), body.get("label")
        if not isinstance(tokens, str):
            raise AnnotationError(f"{where}: 'tokens' must be a string")
        if label not in ENTITY_LABELS:
            raise AnnotationError(f"{where}: label {label!r} not in {ENTITY_LABELS}")
        rels = body.get("relations", [])
        if not isinstance(rels, list):
            raise AnnotationError(f"{where}: 'relations' must be a list")
        parsed = []
        for n, rel in enumerate(rels):
            if (not isinstance(rel, (list, tuple)) or len(rel) != 2
                    or not all(isinstance(r, str) for r in rel)):
                raise AnnotationError(f"{where}/relations/{n}: expected [type, target_id]")
            if rel[0] not in RELATION_TYPES:
                raise AnnotationError(f"{where}/relations/{n}: unknown relation type {rel[0]!r}")
            parsed.append((rel[0], rel[1]))
        entities[eid] = Entity(eid, tokens, label, tuple(parsed))

    for ent in entities.values():
        for _, target in ent.relations:
            if target not in entities:
                raise AnnotationError(
                    f"{doc_id}: entity {ent.entity_id!r} relates to missing entity {target!r}")
    return AnnotationDocument(doc_id, entities)


def build_adjacency(doc: AnnotationDocument, vocab: Vocabulary) -> AdjacencyMatrix:
    A = AdjacencyMatrix.empty(doc.doc_id, vocab)
    unspecified = vocab.anatomy_row(UNSPECIFIED)
    for ent in doc.entities.values():
        state = OBS_STATE.get(ent.label)
        if state is None:
            continue
        col = vocab.observation_col(ent.tokens)
        rows = [vocab.anatomy_row(doc.entities[t].tokens)
                for rel, t in ent.relations
                if rel == "located_at" and doc.entities[t].label == "ANAT-DP"]
        for row in rows or [unspecified]:
            A.grid[row, col] = max(A.grid[row, col], state)
    return A


def derive_labels(A: AdjacencyMatrix) -> WeakLabels:
    has_p = (A.grid == P).any(axis=0)
    has_n = (A.grid == N).any(axis=0)
    obs = np.where(has_p, POSITIVE, np.where(has_n, NEGATIVE, UNLABELED))
    anat = (A.grid == P).any(axis=1).astype(int)
    return WeakLabels(
        obs_labels={t: int(v) for t, v in zip(A.observation_tokens, obs)},
        anat_labels={t: int(v) for t, v in zip(A.anatomy_tokens, anat)},
    )


def corpus_stats(matrices: Sequence[AdjacencyMatrix], top_k: int = 3) -> CorpusStats:
    if not matrices:
        raise ValueError("corpus_stats needs at least one matrix")
    anat, obs = matrices[0].anatomy_tokens, matrices[0].observation_tokens
    n = len(matrices)
    label_counts = {o: {"P": 0, "N": 0, "U": 0} for o in obs}
    p_cells = np.zeros((len(anat), len(obs)), dtype=np.int64)
    for A in matrices:
        if A.anatomy_tokens != anat or A.observation_tokens != obs:
            raise ValueError(f"{A.doc_id}: vocabulary differs from the rest of the corpus")
        for o, y in derive_labels(A).obs_labels.items():
            label_counts[o][{POSITIVE: "P", NEGATIVE: "N", UNLABELED: "U"}[y]] += 1
        p_cells += A.grid == P

    fractions, top = {}, {}
    for k, o in enumerate(obs):
        fractions[o] = {s: c / n for s, c in label_counts[o].items()}
        total = int(p_cells[:, k].sum())
        ranked = sorted((j for j in range(len(anat)) if p_cells[j, k]),
                        key=lambda j: (-p_cells[j, k], j))
        top[o] = [(anat[j], 100.0 * p_cells[j, k] / total) for j in ranked[:top_k]]
    return CorpusStats(n, fractions, label_counts, top)


def export_matrix(A: AdjacencyMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([A.doc_id, *A.observation_tokens])
    for tok, row in zip(A.anatomy_tokens, A.grid):
        w.writerow([tok, *(STATE_CHARS[int(v)] for v in row)])
    return buf.getvalue()


def import_matrix(text: str) -> AdjacencyMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty matrix file")
    doc_id, *obs = rows[0]
    anat, cells = [], []
    for r in rows[1:]:
        if len(r) != len(obs) + 1:
            raise ValueError(f"{doc_id}: row {r[:1]} has {len(r) - 1} cells, expected {len(obs)}")
        anat.append(r[0])
        try:
            cells.append([CHAR_STATES[c] for c in r[1:]])
        except KeyError as exc:
            raise ValueError(f"{doc_id}: invalid cell value {exc.args[0]!r}") from None
    grid = np.array(cells, dtype=np.int8).reshape(len(anat), len(obs))
    return AdjacencyMatrix(doc_id, tuple(anat), tuple(obs), grid)


def load_documents(paths: Iterable[Path]) -> list[AnnotationDocument]:
    return [parse_annotations(Path(p).read_bytes()) for p in paths]
