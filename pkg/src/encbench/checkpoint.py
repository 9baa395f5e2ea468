"""Checkpoint access: hub fetch with a local cache, safetensors parsing,
dtype widening, config loading, and mapping published weight names onto the
encoder's parameter slots.

The container format handled here is the flat safetensors layout: bytes 0-7
hold the metadata length N as unsigned little-endian 64-bit, bytes 8..8+N a
UTF-8 JSON object mapping tensor names to ``{"dtype", "shape",
"data_offsets"}`` (plus an optional ``"__metadata__"`` string map), and the
rest is the data region addressed by ``data_offsets``. Checkpoints are read
straight from the downloaded file; weights are renamed and widened in
memory, never converted on disk.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import DType, Tensor

log = logging.getLogger(__name__)

HUB_URL_ENV = "ENCBENCH_HUB_URL"
CACHE_DIR_ENV = "ENCBENCH_CACHE_DIR"
OFFLINE_ENV = "ENCBENCH_OFFLINE"

DEFAULT_HUB_URL = "https://huggingface.co"
DEFAULT_CACHE_DIR = "~/.cache/encbench"

# the standard hub repositories for the supported model sizes
CANONICAL_REPOS = (
    "bert-base-uncased",
    "bert-large-uncased",
    "roberta-base",
    "xlm-roberta-base",
)


class CheckpointError(Exception):
    """Base for everything that can go wrong below."""


class TruncatedCheckpointError(CheckpointError):
    pass


class MetadataError(CheckpointError):
    pass


class TensorRangeError(CheckpointError):
    pass


class UnknownDTypeError(CheckpointError):
    pass


class ConfigError(CheckpointError):
    pass


class WeightMappingError(CheckpointError):
    pass


class HubError(CheckpointError):
    def __init__(self, message: str, status: int | None = None, url: str | None = None):
        super().__init__(message)
        self.status = status
        self.url = url


class OfflineCacheMissError(HubError):
    pass


class DownloadIntegrityError(HubError):
    pass


# ---------------------------------------------------------------------------
# safetensors container
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {"F32": DType.F32, "F16": DType.F16, "BF16": DType.BF16, "I64": DType.I64}


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


@dataclass
class CheckpointIndex:
    records: dict[str, TensorRecord]
    data: memoryview
    metadata: dict[str, str] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.records)

    def payload(self, name: str) -> memoryview:
        rec = self.records[name]
        return self.data[rec.byte_range[0]:rec.byte_range[1]]

    def tensor(self, name: str) -> Tensor:
        """Widened F32 tensor for a float record, I64 for index records."""
        rec = self.records[name]
        if rec.dtype is DType.I64:
            arr = np.frombuffer(self.payload(name), dtype=np.int64).reshape(rec.shape).copy()
            return Tensor.from_array(arr, DType.I64)
        return widen(self.payload(name), rec.dtype, rec.shape)


def _parse_record(name: str, entry, data_len: int) -> TensorRecord:
    if not isinstance(entry, dict):
        raise MetadataError(f"record {name!r} is not an object")
    try:
        tag = entry["dtype"]
        shape = entry["shape"]
        offsets = entry["data_offsets"]
    except (KeyError, TypeError):
        raise MetadataError(f"record {name!r} is missing dtype/shape/data_offsets")
    if tag not in _DTYPE_TAGS:
        raise UnknownDTypeError(f"record {name!r} has unknown dtype tag {tag!r}")
    dtype = _DTYPE_TAGS[tag]
    if (not isinstance(shape, list) or not shape
            or any(not isinstance(e, int) or e < 1 for e in shape)):
        raise MetadataError(f"record {name!r} has invalid shape {shape!r}")
    if (not isinstance(offsets, list) or len(offsets) != 2
            or any(not isinstance(o, int) or o < 0 for o in offsets)):
        raise MetadataError(f"record {name!r} has invalid data_offsets {offsets!r}")
    begin, end = offsets
    expected = math.prod(shape) * dtype.itemsize
    if end - begin != expected:
        raise TensorRangeError(
            f"record {name!r}: range [{begin},{end}) holds {end - begin} bytes, "
            f"expected {expected} for shape {shape} {tag}"
        )
    if end > data_len:
        raise TensorRangeError(
            f"record {name!r}: range [{begin},{end}) exceeds data region of {data_len} bytes"
        )
    return TensorRecord(name, dtype, tuple(shape), (begin, end))


def parse_safetensors(raw: bytes | bytearray | memoryview) -> CheckpointIndex:
    """Parse a safetensors container held in memory."""
    raw = memoryview(raw)
    if len(raw) < 8:
        raise TruncatedCheckpointError(f"file of {len(raw)} bytes cannot hold a header")
    header_len = int.from_bytes(raw[:8], "little")
    if 8 + header_len > len(raw):
        raise TruncatedCheckpointError(
            f"metadata claims {header_len} bytes but only {len(raw) - 8} follow the header"
        )
    try:
        meta = json.loads(bytes(raw[8:8 + header_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MetadataError(f"metadata is not valid UTF-8 JSON: {e}")
    if not isinstance(meta, dict):
        raise MetadataError("metadata must be a JSON object")

    data = raw[8 + header_len:]
    extra: dict[str, str] = {}
    records: dict[str, TensorRecord] = {}
    for name, entry in meta.items():
        if name == "__metadata__":
            if not isinstance(entry, dict) or any(
                    not isinstance(k, str) or not isinstance(v, str) for k, v in entry.items()):
                raise MetadataError("__metadata__ must map strings to strings")
            extra = dict(entry)
            continue
        records[name] = _parse_record(name, entry, len(data))

    ordered = sorted(records.values(), key=lambda r: r.byte_range)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.byte_range[0] < prev.byte_range[1]:
            raise TensorRangeError(
                f"records {prev.name!r} and {cur.name!r} overlap: "
                f"{prev.byte_range} vs {cur.byte_range}"
            )
    return CheckpointIndex(records, data, extra)


def load_safetensors(path: str | Path) -> CheckpointIndex:
    return parse_safetensors(Path(path).read_bytes())


def write_safetensors(tensors: Mapping[str, tuple[str, tuple[int, ...], bytes]],
                      metadata: Mapping[str, str] | None = None) -> bytes:
    """Serialize ``name -> (dtype tag, shape, payload bytes)`` to container bytes.

    Fixture and test helper; the engine itself never writes checkpoints.
    """
    header: dict = {}
    if metadata:
        header["__metadata__"] = dict(metadata)
    blobs = []
    offset = 0
    for name, (tag, shape, payload) in tensors.items():
        if tag not in _DTYPE_TAGS:
            raise UnknownDTypeError(f"cannot serialize dtype {tag!r}")
        header[name] = {
            "dtype": tag,
            "shape": list(shape),
            "data_offsets": [offset, offset + len(payload)],
        }
        blobs.append(payload)
        offset += len(payload)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return len(head).to_bytes(8, "little") + head + b"".join(blobs)


def index_to_entries(index: CheckpointIndex) -> dict[str, tuple[str, tuple[int, ...], bytes]]:
    """Round-trip companion of :func:`write_safetensors`."""
    return {
        name: (rec.dtype.value, rec.shape, bytes(index.payload(name)))
        for name, rec in index.records.items()
    }


# ---------------------------------------------------------------------------
# widening
# ---------------------------------------------------------------------------

def widen(raw: bytes | memoryview, dtype: DType, shape: tuple[int, ...]) -> Tensor:
    """Exact widening of a stored payload to an F32 tensor.

    BF16 widens by bit-pattern extension: the stored 16 bits become the high
    half of the F32 pattern. F16 uses the hardware-defined conversion, which
    is exact because every F16 value is representable in F32.
    """
    if dtype is DType.F32:
        arr = np.frombuffer(raw, dtype=np.float32)
    elif dtype is DType.F16:
        arr = np.frombuffer(raw, dtype=np.float16).astype(np.float32)
    elif dtype is DType.BF16:
        bits = np.frombuffer(raw, dtype=np.uint16).astype(np.uint32)
        arr = (bits << 16).view(np.float32)
    else:
        raise UnknownDTypeError(f"cannot widen {dtype.value} to F32")
    return Tensor.from_array(arr.reshape(shape), DType.F32)


# ---------------------------------------------------------------------------
# model config
# ---------------------------------------------------------------------------

_FAMILY_BY_MODEL_TYPE = {"bert": "bert", "roberta": "roberta", "xlm-roberta": "xlm-roberta"}
_DEFAULT_PAD = {"bert": 0, "roberta": 1, "xlm-roberta": 1}

_REQUIRED_CONFIG_KEYS = (
    "hidden_size",
    "num_hidden_layers",
    "num_attention_heads",
    "intermediate_size",
    "vocab_size",
    "max_position_embeddings",
    "type_vocab_size",
    "layer_norm_eps",
)


def infer_family(config_bytes: bytes) -> str:
    try:
        doc = json.loads(config_bytes)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    model_type = doc.get("model_type")
    if model_type not in _FAMILY_BY_MODEL_TYPE:
        raise ConfigError(
            f"cannot infer model family from model_type={model_type!r}; pass it explicitly"
        )
    return _FAMILY_BY_MODEL_TYPE[model_type]


def load_config(config_bytes: bytes, family: str):
    """Parse a repo config file into an :class:`encbench.models.EncoderConfig`."""
    from .models import EncoderConfig

    try:
        doc = json.loads(config_bytes)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    missing = [k for k in _REQUIRED_CONFIG_KEYS if k not in doc]
    if missing:
        raise ConfigError(f"config is missing keys: {', '.join(missing)}")
    # legacy repo configs omit pad_token_id; the family convention fills it
    pad = doc.get("pad_token_id", _DEFAULT_PAD[family])
    try:
        cfg = EncoderConfig(
            family=family,
            hidden_size=int(doc["hidden_size"]),
            num_hidden_layers=int(doc["num_hidden_layers"]),
            num_attention_heads=int(doc["num_attention_heads"]),
            intermediate_size=int(doc["intermediate_size"]),
            vocab_size=int(doc["vocab_size"]),
            max_position_embeddings=int(doc["max_position_embeddings"]),
            type_vocab_size=int(doc["type_vocab_size"]),
            layer_norm_eps=float(doc["layer_norm_eps"]),
            pad_token_id=int(pad),
        )
    except ValueError as e:
        raise ConfigError(str(e))
    return cfg


# ---------------------------------------------------------------------------
# published-name mapping
# ---------------------------------------------------------------------------

# layer-norm parameters appear as weight/bias in current exports and as
# gamma/beta in older ones
_LN_W = ("weight", "gamma")
_LN_B = ("bias", "beta")

# task-head names expected to remain unmatched on canonical checkpoints
_DOCUMENTED_LEFTOVERS = ("cls.", "lm_head.", "qa_outputs.", "classifier.")
_IGNORED_BUFFERS = (".position_ids",)


@dataclass(frozen=True)
class NameRule:
    patterns: tuple[str, ...]   # candidate published names, first match wins
    slot: str                   # internal slot, e.g. "layer.3.q_w"
    shape: tuple[int, ...]
    required: bool = True


@dataclass(frozen=True)
class WeightNameMap:
    family: str
    rules: tuple[NameRule, ...]


def _expand(prefixes, *suffixes) -> tuple[str, ...]:
    return tuple(f"{p}{s}" for s in suffixes for p in prefixes)


def build_name_map(family: str, config) -> WeightNameMap:
    """Name rules for one family at a given layer count and geometry."""
    h, i = config.hidden_size, config.intermediate_size
    prefixes = ("", "bert.") if family == "bert" else ("", "roberta.")
    rules: list[NameRule] = [
        NameRule(_expand(prefixes, "embeddings.word_embeddings.weight"),
                 "word_embeddings", (config.vocab_size, h)),
        NameRule(_expand(prefixes, "embeddings.position_embeddings.weight"),
                 "position_embeddings", (config.max_position_embeddings, h)),
        NameRule(_expand(prefixes, "embeddings.token_type_embeddings.weight"),
                 "token_type_embeddings", (config.type_vocab_size, h)),
        NameRule(_expand(prefixes, *(f"embeddings.LayerNorm.{s}" for s in _LN_W)),
                 "emb_ln_gamma", (h,)),
        NameRule(_expand(prefixes, *(f"embeddings.LayerNorm.{s}" for s in _LN_B)),
                 "emb_ln_beta", (h,)),
    ]
    for n in range(config.num_hidden_layers):
        base = f"encoder.layer.{n}."
        per_layer = [
            (f"{base}attention.self.query.weight", f"layer.{n}.q_w", (h, h)),
            (f"{base}attention.self.query.bias", f"layer.{n}.q_b", (h,)),
            (f"{base}attention.self.key.weight", f"layer.{n}.k_w", (h, h)),
            (f"{base}attention.self.key.bias", f"layer.{n}.k_b", (h,)),
            (f"{base}attention.self.value.weight", f"layer.{n}.v_w", (h, h)),
            (f"{base}attention.self.value.bias", f"layer.{n}.v_b", (h,)),
            (f"{base}attention.output.dense.weight", f"layer.{n}.attn_out_w", (h, h)),
            (f"{base}attention.output.dense.bias", f"layer.{n}.attn_out_b", (h,)),
            (f"{base}intermediate.dense.weight", f"layer.{n}.ffn_in_w", (i, h)),
            (f"{base}intermediate.dense.bias", f"layer.{n}.ffn_in_b", (i,)),
            (f"{base}output.dense.weight", f"layer.{n}.ffn_out_w", (h, i)),
            (f"{base}output.dense.bias", f"layer.{n}.ffn_out_b", (h,)),
        ]
        for pattern, slot, shape in per_layer:
            rules.append(NameRule(_expand(prefixes, pattern), slot, shape))
        rules.append(NameRule(
            _expand(prefixes, *(f"{base}attention.output.LayerNorm.{s}" for s in _LN_W)),
            f"layer.{n}.attn_ln_gamma", (h,)))
        rules.append(NameRule(
            _expand(prefixes, *(f"{base}attention.output.LayerNorm.{s}" for s in _LN_B)),
            f"layer.{n}.attn_ln_beta", (h,)))
        rules.append(NameRule(
            _expand(prefixes, *(f"{base}output.LayerNorm.{s}" for s in _LN_W)),
            f"layer.{n}.ffn_ln_gamma", (h,)))
        rules.append(NameRule(
            _expand(prefixes, *(f"{base}output.LayerNorm.{s}" for s in _LN_B)),
            f"layer.{n}.ffn_ln_beta", (h,)))
    rules.append(NameRule(_expand(prefixes, "pooler.dense.weight"),
                          "pooler_w", (h, h), required=False))
    rules.append(NameRule(_expand(prefixes, "pooler.dense.bias"),
                          "pooler_b", (h,), required=False))
    return WeightNameMap(family, tuple(rules))


def map_weights(index: CheckpointIndex, name_map: WeightNameMap, config):
    """Fill every encoder slot from the checkpoint, widening to F32.

    Unmatched checkpoint names are reported as warnings (task heads are
    expected); missing required slots raise with the patterns tried.
    """
    from .models import EncoderWeights, LayerWeights

    slots: dict[str, Tensor] = {}
    used: set[str] = set()
    missing: list[str] = []
    for rule in name_map.rules:
        hit = next((p for p in rule.patterns if p in index.records), None)
        if hit is None:
            if rule.required:
                missing.append(f"{rule.slot} (tried {', '.join(rule.patterns)})")
            continue
        rec = index.records[hit]
        if rec.shape != rule.shape:
            raise WeightMappingError(
                f"slot {rule.slot}: checkpoint tensor {hit!r} has shape {rec.shape}, "
                f"expected {rule.shape}"
            )
        slots[rule.slot] = index.tensor(hit)
        used.add(hit)
    if missing:
        raise WeightMappingError(
            "checkpoint does not cover required slots:\n  " + "\n  ".join(missing)
        )

    for name in index.records:
        if name in used or name.endswith(_IGNORED_BUFFERS):
            continue
        level = log.debug if name.startswith(_DOCUMENTED_LEFTOVERS) else log.warning
        level("checkpoint tensor %r not used by the encoder", name)

    layers = tuple(
        LayerWeights(
            q_w=slots[f"layer.{n}.q_w"], q_b=slots[f"layer.{n}.q_b"],
            k_w=slots[f"layer.{n}.k_w"], k_b=slots[f"layer.{n}.k_b"],
            v_w=slots[f"layer.{n}.v_w"], v_b=slots[f"layer.{n}.v_b"],
            attn_out_w=slots[f"layer.{n}.attn_out_w"], attn_out_b=slots[f"layer.{n}.attn_out_b"],
            attn_ln_gamma=slots[f"layer.{n}.attn_ln_gamma"],
            attn_ln_beta=slots[f"layer.{n}.attn_ln_beta"],
            ffn_in_w=slots[f"layer.{n}.ffn_in_w"], ffn_in_b=slots[f"layer.{n}.ffn_in_b"],
            ffn_out_w=slots[f"layer.{n}.ffn_out_w"], ffn_out_b=slots[f"layer.{n}.ffn_out_b"],
            ffn_ln_gamma=slots[f"layer.{n}.ffn_ln_gamma"],
            ffn_ln_beta=slots[f"layer.{n}.ffn_ln_beta"],
        )
        for n in range(config.num_hidden_layers)
    )
    return EncoderWeights(
        word_embeddings=slots["word_embeddings"],
        position_embeddings=slots["position_embeddings"],
        token_type_embeddings=slots["token_type_embeddings"],
        emb_ln_gamma=slots["emb_ln_gamma"],
        emb_ln_beta=slots["emb_ln_beta"],
        layers=layers,
        pooler_w=slots.get("pooler_w"),
        pooler_b=slots.get("pooler_b"),
    )


# ---------------------------------------------------------------------------
# hub fetch + cache
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HubLocation:
    repo_id: str
    revision: str = "main"
    filename: str = ""

    def __post_init__(self):
        for part, value in (("repo_id", self.repo_id),
                            ("revision", self.revision),
                            ("filename", self.filename)):
            if not value:
                raise ValueError(f"HubLocation.{part} must be nonempty")
            segments = value.replace("\\", "/").split("/")
            if any(seg in ("", ".", "..") for seg in segments) or value.startswith("/"):
                raise ValueError(f"HubLocation.{part} {value!r} contains invalid path segments")

    @property
    def url(self) -> str:
        base = os.environ.get(HUB_URL_ENV, DEFAULT_HUB_URL).rstrip("/")
        return f"{base}/{self.repo_id}/resolve/{self.revision}/{self.filename}"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_DIR_ENV, DEFAULT_CACHE_DIR)).expanduser()


def offline_mode(explicit: bool | None = None) -> bool:
    if explicit is not None:
        return explicit
    return os.environ.get(OFFLINE_ENV, "").strip() not in ("", "0", "false")


def cache_path(location: HubLocation, cache_dir: str | Path | None = None) -> Path:
    root = Path(cache_dir).expanduser() if cache_dir else default_cache_dir()
    return root / location.repo_id.replace("/", "--") / location.revision / location.filename


_LOCK_TIMEOUT_S = 600.0


def fetch(location: HubLocation, cache_dir: str | Path | None = None,
          offline: bool | None = None, timeout: float = 60.0) -> Path:
    """Return a local path for a hub file, downloading at most once per key.

    Concurrent callers coordinate through an exclusive lock file plus atomic
    rename, so everybody observes either no file or a complete one.
    """
    target = cache_path(location, cache_dir)
    if target.is_file():
        return target
    if offline_mode(offline):
        raise OfflineCacheMissError(
            f"offline mode and {location.repo_id}/{location.filename} is not cached at {target}",
            url=location.url,
        )

    target.parent.mkdir(parents=True, exist_ok=True)
    lock = target.with_name(target.name + ".lock")
    deadline = time.monotonic() + _LOCK_TIMEOUT_S
    while True:
        if target.is_file():
            return target
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if time.monotonic() > deadline:
                raise HubError(f"timed out waiting for concurrent download of {target}")
            time.sleep(0.05)
            continue
        try:
            if not target.is_file():
                _download(location, target, timeout)
            return target
        finally:
            os.close(fd)
            try:
                os.unlink(lock)
            except FileNotFoundError:
                pass


def _download(location: HubLocation, target: Path, timeout: float) -> None:
    req = urllib.request.Request(location.url, headers={"User-Agent": "encbench/0.1"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            expected = resp.headers.get("Content-Length")
            etag = resp.headers.get("ETag")
            fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".")
            try:
                with os.fdopen(fd, "wb") as out:
                    while True:
                        chunk = resp.read(1 << 20)
                        if not chunk:
                            break
                        out.write(chunk)
                size = os.path.getsize(tmp_name)
                if expected is not None and size != int(expected):
                    raise DownloadIntegrityError(
                        f"{location.url}: got {size} bytes, Content-Length said {expected}",
                        url=location.url,
                    )
                os.replace(tmp_name, target)
            except BaseException:
                try:
                    os.unlink(tmp_name)
                except FileNotFoundError:
                    pass
                raise
    except urllib.error.HTTPError as e:
        raise HubError(f"HTTP {e.code} fetching {location.url}", status=e.code, url=location.url)
    except urllib.error.URLError as e:
        raise HubError(f"cannot reach {location.url}: {e.reason}", url=location.url)
    if etag:
        try:
            target.with_name(target.name + ".etag").write_text(etag)
        except OSError:
            pass


# ---------------------------------------------------------------------------
# one-call loader
# ---------------------------------------------------------------------------

TOKENIZER_FILES = {
    "bert": ("vocab.txt",),
    "roberta": ("vocab.json", "merges.txt"),
    "xlm-roberta": ("tokenizer.json",),
}
OPTIONAL_FILES = ("tokenizer_config.json",)
WEIGHTS_FILE = "model.safetensors"
CONFIG_FILE = "config.json"


@dataclass
class LoadedEncoder:
    repo_id: str
    config: object
    weights: object
    files: dict[str, Path]


def fetch_repo(repo_id: str, revision: str = "main", cache_dir=None,
               offline: bool | None = None) -> tuple[str, dict[str, Path]]:
    """Fetch config, weights and tokenizer files; returns (family, paths)."""
    files: dict[str, Path] = {}
    files[CONFIG_FILE] = fetch(HubLocation(repo_id, revision, CONFIG_FILE), cache_dir, offline)
    family = infer_family(files[CONFIG_FILE].read_bytes())
    names = (WEIGHTS_FILE,) + TOKENIZER_FILES[family]
    for name in names:
        files[name] = fetch(HubLocation(repo_id, revision, name), cache_dir, offline)
    for name in OPTIONAL_FILES:
        try:
            files[name] = fetch(HubLocation(repo_id, revision, name), cache_dir, offline)
        except HubError:
            log.debug("optional file %s not available for %s", name, repo_id)
    return family, files


def load_encoder(repo_id: str, revision: str = "main", cache_dir=None,
                 offline: bool | None = None) -> LoadedEncoder:
    family, files = fetch_repo(repo_id, revision, cache_dir, offline)
    config = load_config(files[CONFIG_FILE].read_bytes(), family)
    index = load_safetensors(files[WEIGHTS_FILE])
    weights = map_weights(index, build_name_map(family, config), config)
    return LoadedEncoder(repo_id, config, weights, files)
