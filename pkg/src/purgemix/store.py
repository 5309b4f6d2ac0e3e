"""On-disk corpus model shared by every pipeline stage.

Responsibilities: JSONL ingestion with stable ids, embedding attachment
(JSONL or packed-f32 sidecar or an embeddings HTTP endpoint), and the
two-section ``### User`` / ``### Assistant`` marker serialization used by
the fusion output.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

USER_MARKER = "### User"
ASSISTANT_MARKER = "### Assistant"

NORM_TOL = 1e-6


class StoreError(ValueError):
    """Raised for malformed corpus files, embeddings, or marker text."""


@dataclass
class CorpusSample:
    """One (instruction, input, response) tuple; the unit of all processing."""

    id: str
    instruction: str
    input: str
    response: str
    source: str

    def __post_init__(self) -> None:
        if not self.instruction:
            raise StoreError(f"sample {self.id!r}: instruction must be nonempty")
        if not self.response:
            raise StoreError(f"sample {self.id!r}: response must be nonempty")

    def prompt_text(self) -> str:
        """Instruction plus optional input, as presented to downstream prompts."""
        if self.input:
            return f"{self.instruction}\n{self.input}"
        return self.instruction


@dataclass
class EmbeddedSample:
    """Sample id plus a unit-norm embedding and optional raw/corrected scores."""

    sample_id: str
    embedding: np.ndarray
    raw_score: int | None = None
    corrected_score: int | None = None

    def __post_init__(self) -> None:
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim != 1:
            raise StoreError(f"embedding for {self.sample_id!r} must be a vector")
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > NORM_TOL:
            raise StoreError(
                f"embedding for {self.sample_id!r} is not unit-norm (|x|={norm:.6g})"
            )


@dataclass(frozen=True)
class DatasetSplit:
    """Partition of scored ids into low-quality {0,1,2} and high-quality {3,4,5}."""

    lq_ids: frozenset[str]
    hq_ids: frozenset[str]

    def __post_init__(self) -> None:
        overlap = self.lq_ids & self.hq_ids
        if overlap:
            raise StoreError(f"lq/hq overlap: {sorted(overlap)[:5]}")


def _flatten_messages(messages: list, lineno: int) -> tuple[str, str]:
    """Flatten a multi-turn conversation into (instruction, response).

    All turns before the final assistant turn are joined with the marker
    format; the final assistant turn becomes the response.
    """
    if not isinstance(messages, list) or not messages:
        raise StoreError(f"line {lineno}: 'messages' must be a nonempty list")
    turns = []
    for m in messages:
        role = m.get("role")
        content = m.get("content", "")
        if role not in ("user", "assistant", "prompter"):
            raise StoreError(f"line {lineno}: unsupported message role {role!r}")
        turns.append(("user" if role != "assistant" else "assistant", content))
    if turns[-1][0] != "assistant":
        raise StoreError(f"line {lineno}: conversation must end with an assistant turn")
    response = turns[-1][1]
    parts = []
    for role, content in turns[:-1]:
        marker = USER_MARKER if role == "user" else ASSISTANT_MARKER
        parts.append(f"{marker}\n{content}")
    return "\n".join(parts), response


def load_jsonl(path: str | Path, source: str | None = None) -> list[CorpusSample]:
    """Load corpus samples from a JSONL file, in file order.

    Each line is an object with ``instruction``, optional ``input``, and
    ``response`` (alias ``output``), or a multi-turn ``messages`` list.
    Ids are synthesized as ``{source}:{line}`` when absent so reruns are
    stable; explicit ids must be unique.
    """
    path = Path(path)
    if not path.exists():
        raise StoreError(f"corpus file not found: {path}")
    default_source = source or path.stem
    samples: list[CorpusSample] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoreError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise StoreError(f"line {lineno}: expected a JSON object")
            src = obj.get("source") or default_source
            if "messages" in obj and "instruction" not in obj:
                instruction, response = _flatten_messages(obj["messages"], lineno)
                inp = ""
            else:
                instruction = obj.get("instruction")
                if not instruction:
                    raise StoreError(f"line {lineno}: missing 'instruction'")
                inp = obj.get("input") or ""
                response = obj.get("response", obj.get("output"))
                if not response:
                    raise StoreError(f"line {lineno}: missing 'response'")
            sample_id = obj.get("id") or f"{src}:{lineno}"
            if sample_id in seen:
                raise StoreError(f"line {lineno}: duplicate id {sample_id!r}")
            seen.add(sample_id)
            try:
                samples.append(
                    CorpusSample(
                        id=sample_id,
                        instruction=instruction,
                        input=inp,
                        response=response,
                        source=src,
                    )
                )
            except StoreError as exc:
                raise StoreError(f"line {lineno}: {exc}") from exc
    return samples


# --- embedding files -------------------------------------------------------


def read_embeddings_jsonl(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``{id, vector}`` JSONL into an id -> float64 vector map."""
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            vid, vec = obj.get("id"), obj.get("vector")
            if vid is None or vec is None:
                raise StoreError(f"{path}:{lineno}: expected fields 'id' and 'vector'")
            arr = np.asarray(vec, dtype=np.float64)
            if dim is None:
                dim = arr.shape[0]
            elif arr.shape[0] != dim:
                raise StoreError(
                    f"{path}:{lineno}: dimension {arr.shape[0]} != {dim}"
                )
            if vid in vectors:
                raise StoreError(f"{path}:{lineno}: duplicate id {vid!r}")
            vectors[vid] = arr
    return vectors


def _binary_paths(path: Path) -> tuple[Path, Path]:
    if path.suffix == ".f32":
        base = path.with_suffix("")
    elif path.name.endswith(".ids.json"):
        base = path.with_name(path.name[: -len(".ids.json")])
    else:
        base = path
    return base.with_name(base.name + ".ids.json"), base.with_name(base.name + ".f32")


def read_embeddings_binary(path: str | Path) -> dict[str, np.ndarray]:
    """Read the binary sidecar format: ``<base>.ids.json`` + ``<base>.f32``.

    The index file holds ``{"dim": d, "ids": [...]}``; the data file is a
    packed row-major little-endian float32 matrix in id order.
    """
    ids_path, data_path = _binary_paths(Path(path))
    if not ids_path.exists() or not data_path.exists():
        raise StoreError(f"binary embedding sidecar incomplete: {ids_path}, {data_path}")
    index = json.loads(ids_path.read_text(encoding="utf-8"))
    ids, dim = index["ids"], int(index["dim"])
    raw = np.fromfile(data_path, dtype="<f4")
    if raw.size != len(ids) * dim:
        raise StoreError(
            f"{data_path}: expected {len(ids) * dim} floats, found {raw.size}"
        )
    matrix = raw.reshape(len(ids), dim).astype(np.float64)
    return {vid: matrix[i] for i, vid in enumerate(ids)}


def write_embeddings_jsonl(path: str | Path, vectors: Mapping[str, np.ndarray]) -> None:
    rows = (
        {"id": vid, "vector": [float(x) for x in vec]} for vid, vec in vectors.items()
    )
    write_jsonl(path, rows)


def write_embeddings_binary(base: str | Path, vectors: Mapping[str, np.ndarray]) -> None:
    base = Path(base)
    ids = list(vectors)
    matrix = np.stack([np.asarray(vectors[v], dtype="<f4") for v in ids])
    ids_path, data_path = _binary_paths(base)
    ids_path.write_text(
        json.dumps({"dim": int(matrix.shape[1]), "ids": ids}), encoding="utf-8"
    )
    matrix.astype("<f4").tofile(data_path)


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Dispatch on suffix: ``.jsonl`` or the ``.ids.json``/``.f32`` sidecar pair."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return read_embeddings_jsonl(path)
    return read_embeddings_binary(path)


class EmbeddingEndpointClient:
    """Thin client for an OpenAI-style ``/embeddings`` endpoint.

    The embedding model itself is external; we only fetch vectors.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "BAAI/bge-large-en-v1.5",
        api_key_env: str = "PURGEMIX_API_KEY",
        timeout: float = 60.0,
        session=None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        headers = {}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        resp = self._session.post(
            f"{self.base_url}/embeddings",
            json={"model": self.model, "input": texts},
            headers=headers,
            timeout=self.timeout,
        )
        resp.raise_for_status()
        data = resp.json()["data"]
        return np.asarray([row["embedding"] for row in data], dtype=np.float64)


def attach_embeddings(
    samples: list[CorpusSample],
    source: str | Path | Mapping[str, np.ndarray] | EmbeddingEndpointClient,
) -> list[EmbeddedSample]:
    """Resolve every sample id to a vector and re-normalize to unit L2 norm.

    ``source`` may be an embedding file path, a preloaded id -> vector map,
    or an embeddings endpoint client (texts are the marker-flattened sample).
    """
    if isinstance(source, EmbeddingEndpointClient):
        matrix = source.embed_texts(
            [export_marker_format(s.prompt_text(), s.response) for s in samples]
        )
        vectors = {s.id: matrix[i] for i, s in enumerate(samples)}
    elif isinstance(source, Mapping):
        vectors = dict(source)
    else:
        vectors = load_embeddings(source)

    missing = [s.id for s in samples if s.id not in vectors]
    if missing:
        raise StoreError(
            f"{len(missing)} sample id(s) missing from embeddings: {missing[:20]}"
        )
    dims = {np.asarray(vectors[s.id]).shape[0] for s in samples}
    if len(dims) > 1:
        raise StoreError(f"inconsistent embedding dimensions: {sorted(dims)}")

    out: list[EmbeddedSample] = []
    for s in samples:
        vec = np.asarray(vectors[s.id], dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise StoreError(f"embedding for {s.id!r} is all zeros; cannot normalize")
        out.append(EmbeddedSample(sample_id=s.id, embedding=vec / norm))
    return out


# --- marker format ----------------------------------------------------------


def _contains_marker_line(text: str) -> bool:
    return any(
        line.rstrip("\r") in (USER_MARKER, ASSISTANT_MARKER)
        for line in text.split("\n")
    )


def export_marker_format(user: str, assistant: str) -> str:
    """Serialize the two sections as ``### User\\n{user}\\n### Assistant\\n{assistant}``.

    Section text containing a literal marker line is rejected so the format
    stays unambiguous; no trailing newline is added.
    """
    if not user.strip():
        raise StoreError("user section is empty")
    if not assistant.strip():
        raise StoreError("assistant section is empty")
    for name, text in (("user", user), ("assistant", assistant)):
        if _contains_marker_line(text):
            raise StoreError(f"{name} section contains a literal marker line")
    return f"{USER_MARKER}\n{user}\n{ASSISTANT_MARKER}\n{assistant}"


def parse_marker_format(text: str) -> tuple[str, str]:
    """Inverse of :func:`export_marker_format` (first separator occurrence wins)."""
    head = f"{USER_MARKER}\n"
    sep = f"\n{ASSISTANT_MARKER}\n"
    if not text.startswith(head):
        raise StoreError(f"text does not start with {USER_MARKER!r}")
    user, found, assistant = text[len(head):].partition(sep)
    if not found:
        raise StoreError(f"missing {ASSISTANT_MARKER!r} section")
    return user, assistant


# --- generic JSONL helpers --------------------------------------------------


def write_jsonl(path: str | Path, rows: Iterable[Mapping]) -> int:
    """Write rows as JSONL atomically (temp file + rename). Returns row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
                count += 1
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return count


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
