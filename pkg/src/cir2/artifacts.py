"""On-disk artifact formats and the provenance chain between them.

Three binary formats (checkpoints, candidate embeddings, cached text
features) share the same skeleton: an eight-byte magic, a version, a small
key=value header, then raw little-endian arrays.  Rankings and metric
reports are line-oriented key=value text.  Every derived artifact records
the sha256 of what it was computed from, and readers refuse to combine
artifacts whose hashes disagree.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, ParseError, ProvenanceError
from .evaluation import RankedList

MAGIC_CKPT = b"CIR2CKPT"
MAGIC_EMB = b"CIR2EMB\x00"
MAGIC_ZT = b"CIR2ZT\x00\x00"
FORMAT_VERSION = 1


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def check_same(kind: str, expected: str, actual: str) -> None:
    """Refuse to combine artifacts derived from different upstream runs."""
    if expected and actual and expected != actual:
        raise ProvenanceError(
            f"{kind} hash mismatch: expected {expected[:12]}.., got {actual[:12]}.."
        )


# -- key=value documents -------------------------------------------------------


def kv_render(pairs: Mapping[str, object]) -> str:
    lines = []
    for key, value in pairs.items():
        text = _kv_str(value)
        if "\n" in text or "=" in str(key):
            raise ContractError(f"field {key!r} cannot be serialized as key=value")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def _kv_str(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def kv_parse(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"line {n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        if key in out:
            raise ParseError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


# -- binary container ----------------------------------------------------------

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    code = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8",
            np.dtype(np.int64): "i8"}.get(arr.dtype)
    if code is None:
        raise ContractError(f"array {name!r} has unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(code.encode("ascii"))
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"file truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_block(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    code = _read_exact(fh, 2).decode("ascii")
    if code not in _DTYPES:
        raise ParseError(f"array {name!r} has unknown dtype code {code!r}")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    raw = _read_exact(fh, count * np.dtype(_DTYPES[code]).itemsize)
    arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    return name, arr


def _write_container(path, magic: bytes, header: Mapping[str, object],
                     arrays: Mapping[str, np.ndarray]) -> str:
    """Write magic/version/hash + header text + array blocks; returns the
    payload hash, which identifies the artifact downstream."""
    body = io.BytesIO()
    header_bytes = kv_render(header).encode("utf-8")
    body.write(struct.pack("<I", len(header_bytes)))
    body.write(header_bytes)
    body.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_block(body, name, np.asarray(arr))
    payload = body.getvalue()
    digest = sha256_bytes(payload)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(digest.encode("ascii"))
        fh.write(payload)
    return digest


def _read_container(path, magic: bytes) -> tuple[dict[str, str], dict[str, np.ndarray], str]:
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ParseError(
                f"{Path(path).name}: bad magic {got!r}, expected {magic!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise ParseError(f"{Path(path).name}: unsupported version {version}")
        digest = _read_exact(fh, 64).decode("ascii")
        payload = fh.read()
    if sha256_bytes(payload) != digest:
        raise ParseError(f"{Path(path).name}: payload does not match its hash")
    body = io.BytesIO(payload)
    (hlen,) = struct.unpack("<I", _read_exact(body, 4))
    header = kv_parse(_read_exact(body, hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(body, 4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = _read_block(body)
        if name in arrays:
            raise ParseError(f"{Path(path).name}: duplicate array {name!r}")
        arrays[name] = arr
    return header, arrays, digest


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    config: dict[str, str]
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    dataset_hash: str = ""
    content_hash: str = ""


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    header: dict[str, object] = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "opt_step": ckpt.opt_step,
        "dataset_hash": ckpt.dataset_hash,
    }
    for key, value in ckpt.config.items():
        header[f"config.{key}"] = value
    arrays: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        arrays[f"p!{name}"] = arr
    for name, arr in ckpt.opt_state.items():
        arrays[f"o!{name}"] = arr
    digest = _write_container(path, MAGIC_CKPT, header, arrays)
    ckpt.content_hash = digest
    return digest


def load_checkpoint(path) -> Checkpoint:
    header, arrays, digest = _read_container(path, MAGIC_CKPT)
    params: dict[str, np.ndarray] = {}
    opt_state: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith("p!"):
            params[name[2:]] = arr
        elif name.startswith("o!"):
            opt_state[name[2:]] = arr
        else:
            raise ParseError(f"checkpoint array {name!r} has no role prefix")
    try:
        return Checkpoint(
            stage=header["stage"],
            epoch=int(header["epoch"]),
            config={k[len("config."):]: v for k, v in header.items()
                    if k.startswith("config.")},
            params=params,
            opt_state=opt_state,
            opt_step=int(header.get("opt_step", "0")),
            dataset_hash=header.get("dataset_hash", ""),
            content_hash=digest,
        )
    except KeyError as exc:
        raise ParseError(f"checkpoint header is missing {exc.args[0]!r}") from None


# -- candidate embedding index ---------------------------------------------------


def save_embeddings(path, ids: np.ndarray, matrix: np.ndarray,
                    checkpoint_hash: str, dataset_hash: str,
                    split: str) -> str:
    ids = np.asarray(ids, dtype=np.int64)
    matrix = np.asarray(matrix, dtype=np.float32)
    if ids.ndim != 1 or matrix.ndim != 2 or len(ids) != len(matrix):
        raise ContractError(
            f"embedding table needs ids (M,) and matrix (M, d): "
            f"{ids.shape} vs {matrix.shape}"
        )
    header = {
        "count": len(ids),
        "dim": matrix.shape[1],
        "split": split,
        "checkpoint_hash": checkpoint_hash,
        "dataset_hash": dataset_hash,
    }
    return _write_container(path, MAGIC_EMB, header,
                            {"ids": ids, "matrix": matrix})


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray, dict[str, str]]:
    header, arrays, digest = _read_container(path, MAGIC_EMB)
    try:
        ids, matrix = arrays["ids"], arrays["matrix"]
    except KeyError as exc:
        raise ParseError(f"embedding file is missing array {exc.args[0]!r}") from None
    if int(header.get("count", -1)) != len(ids) \
            or int(header.get("dim", -1)) != matrix.shape[1]:
        raise ParseError(
            f"embedding header {header.get('count')}x{header.get('dim')} "
            f"disagrees with arrays {matrix.shape}"
        )
    header["content_hash"] = digest
    return ids, matrix, header


# -- cached query-aware text features --------------------------------------------


def save_zt_cache(path, features: Mapping[int, np.ndarray],
                  checkpoint_hash: str, dataset_hash: str,
                  triplets_hash: str, split: str) -> str:
    arrays = {}
    for qid in sorted(features):
        arr = np.asarray(features[qid], dtype=np.float32)
        if arr.ndim != 2:
            raise ContractError(
                f"query {qid} text feature must be (length, d), got {arr.shape}"
            )
        arrays[f"q{int(qid)}"] = arr
    header = {
        "count": len(arrays),
        "split": split,
        "checkpoint_hash": checkpoint_hash,
        "dataset_hash": dataset_hash,
        "triplets_hash": triplets_hash,
    }
    return _write_container(path, MAGIC_ZT, header, arrays)


def load_zt_cache(path) -> tuple[dict[int, np.ndarray], dict[str, str]]:
    header, arrays, digest = _read_container(path, MAGIC_ZT)
    feats: dict[int, np.ndarray] = {}
    for name, arr in arrays.items():
        if not name.startswith("q"):
            raise ParseError(f"text feature array {name!r} has no query id")
        try:
            feats[int(name[1:])] = arr
        except ValueError:
            raise ParseError(f"text feature array {name!r} has no query id") from None
    header["content_hash"] = digest
    return feats, header


# -- rankings --------------------------------------------------------------------


@dataclass
class RankingFile:
    """One stage's rankings over a query set plus their provenance."""

    stage: str
    k: int
    header: dict[str, str]
    lists: dict[int, RankedList]
    subset_scores: dict[int, dict[int, float]] = field(default_factory=dict)


def _floats_to_text(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_rankings(path, rf: RankingFile) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("format=cir2-rank\n")
        fh.write(f"version={FORMAT_VERSION}\n")
        fh.write(f"stage={rf.stage}\n")
        fh.write(f"k={rf.k}\n")
        for key in sorted(rf.header):
            fh.write(f"{key}={rf.header[key]}\n")
        fh.write(f"queries={len(rf.lists)}\n")
        for qid in sorted(rf.lists):
            rl = rf.lists[qid]
            ids = ",".join(str(i) for i in rl.ids)
            fh.write(f"rank query_id={qid} ids={ids} "
                     f"scores={_floats_to_text(rl.scores)}\n")
            if qid in rf.subset_scores:
                sub = rf.subset_scores[qid]
                sids = sorted(sub)
                fh.write(f"subset query_id={qid} "
                         f"ids={','.join(str(i) for i in sids)} "
                         f"scores={_floats_to_text(np.array([sub[i] for i in sids]))}\n")


def load_rankings(path) -> RankingFile:
    lists: dict[int, RankedList] = {}
    subset_scores: dict[int, dict[int, float]] = {}
    header: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("rank ") or line.startswith("subset "):
                kind, _, rest = line.partition(" ")
                fields = {}
                for part in rest.split():
                    key, eq, value = part.partition("=")
                    if not eq:
                        raise ParseError(f"line {n}: field {part!r} is not key=value")
                    fields[key] = value
                try:
                    qid = int(fields["query_id"])
                    ids = np.array([int(v) for v in fields["ids"].split(",")],
                                   dtype=np.int64)
                    scores = np.array([float(v) for v in fields["scores"].split(",")],
                                      dtype=np.float64)
                except (KeyError, ValueError):
                    raise ParseError(f"line {n}: malformed {kind} record") from None
                if kind == "rank":
                    if qid in lists:
                        raise ParseError(f"line {n}: duplicate ranking for query {qid}")
                    lists[qid] = RankedList(query_id=qid, ids=ids, scores=scores)
                else:
                    if qid in subset_scores:
                        raise ParseError(f"line {n}: duplicate subset for query {qid}")
                    subset_scores[qid] = {int(i): float(s)
                                          for i, s in zip(ids, scores)}
            else:
                if "=" not in line:
                    raise ParseError(f"line {n}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                if key in header:
                    raise ParseError(f"line {n}: duplicate header key {key!r}")
                header[key] = value
    if header.get("format") != "cir2-rank":
        raise ParseError(f"not a ranking file: format={header.get('format')!r}")
    if header.get("version") != str(FORMAT_VERSION):
        raise ParseError(f"unsupported ranking version {header.get('version')!r}")
    try:
        stage = header["stage"]
        k = int(header["k"])
        declared = int(header["queries"])
    except (KeyError, ValueError):
        raise ParseError("ranking header is missing stage/k/queries") from None
    if declared != len(lists):
        raise ParseError(
            f"ranking file declares {declared} queries but holds {len(lists)}"
        )
    return RankingFile(stage=stage, k=k, header=header, lists=lists,
                       subset_scores=subset_scores)


# -- metric reports ---------------------------------------------------------------


def report_render(metrics: Mapping[str, float], config: Mapping[str, object],
                  timing: Mapping[str, object]) -> str:
    from .evaluation import fmt_metric

    lines = ["format=cir2-report", f"version={FORMAT_VERSION}"]
    for key in sorted(config):
        lines.append(f"config.{key}={_kv_str(config[key])}")
    for key, value in metrics.items():
        lines.append(f"metric.{key}={fmt_metric(value)}")
    for key in sorted(timing):
        lines.append(f"timing.{key}={_kv_str(timing[key])}")
    return "\n".join(lines) + "\n"


def report_parse(text: str) -> tuple[dict[str, float], dict[str, str], dict[str, str]]:
    fields = kv_parse(text)
    if fields.pop("format", None) != "cir2-report":
        raise ParseError("not a metric report")
    fields.pop("version", None)
    metrics: dict[str, float] = {}
    config: dict[str, str] = {}
    timing: dict[str, str] = {}
    for key, value in fields.items():
        if key.startswith("metric."):
            try:
                metrics[key[len("metric."):]] = float(value)
            except ValueError:
                raise ParseError(f"metric {key!r} is not numeric") from None
        elif key.startswith("config."):
            config[key[len("config."):]] = value
        elif key.startswith("timing."):
            timing[key[len("timing."):]] = value
        else:
            raise ParseError(f"unknown report field {key!r}")
    return metrics, config, timing


def report_stable_text(text: str) -> str:
    """A report with its timing block stripped; used to compare runs that
    must agree on everything except wall-clock measurements."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("timing.")]
    return "\n".join(lines) + "\n"
