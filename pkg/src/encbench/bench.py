"""The measurement engine: operation microbenchmarks, model inference
benchmarks, aggregation, speedups, and the detailed/average report formats.

Protocol defaults: operations run five timed iterations, models ten, over
input character lengths 50/100/200/500 and batch sizes 1/16/32, on both
backends, after two untimed warmup runs. Timed regions are bracketed by
``synchronize`` so deferred kernels cannot leak work past the clock.
Tokenization happens once per (length, batch) cell and is recorded in its
own column, never inside the forward timing.

Reports come in two shapes: detailed (one row per timed iteration) and
average (per-subject means with speedup columns), each as pipe-table text
plus machine twins (CSV and line-delimited JSON). Everything except the
wall-clock numbers is deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import hashlib
import io
import json
import os
import random
import statistics
import tempfile
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .backends import Backend, get_backend, host_descriptor
from .checkpoint import LoadedEncoder, load_encoder
from .models import forward
from .tensor import Tensor
from .tokenizers import encode_batch, load_tokenizer

DEFAULT_CHAR_LENGTHS = (50, 100, 200, 500)
DEFAULT_BATCH_SIZES = (1, 16, 32)
DEFAULT_OP_ITERATIONS = 5
DEFAULT_MODEL_ITERATIONS = 10
DEFAULT_WARMUP = 2
DEFAULT_BACKENDS = ("reference", "optimized")
DEFAULT_SPEEDUP_PAIRS = (("optimized", "reference"),)

DETAILED_HEADER = "| subject | backend | iteration | ms | tokenize_ms |"


class BenchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# specs and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpBenchSpec:
    ops: tuple[str, ...] | None = None          # None means the whole registry
    iterations: int = DEFAULT_OP_ITERATIONS
    warmup: int = DEFAULT_WARMUP
    backends: tuple[str, ...] = DEFAULT_BACKENDS
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


@dataclass(frozen=True)
class ModelBenchSpec:
    repo_id: str
    revision: str = "main"
    char_lengths: tuple[int, ...] = DEFAULT_CHAR_LENGTHS
    batch_sizes: tuple[int, ...] = DEFAULT_BATCH_SIZES
    iterations: int = DEFAULT_MODEL_ITERATIONS
    warmup: int = DEFAULT_WARMUP
    backends: tuple[str, ...] = DEFAULT_BACKENDS
    corpus_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if any(v < 1 for v in self.char_lengths) or not self.char_lengths:
            raise ValueError("char_lengths must be positive")
        if any(v < 1 for v in self.batch_sizes) or not self.batch_sizes:
            raise ValueError("batch_sizes must be positive")


@dataclass(frozen=True)
class RunRecord:
    subject: str
    backend: str
    iteration: int               # dense from 1 within a subject/backend group
    ms: float
    tokenize_ms: float | None = None
    op: str | None = None
    model: str | None = None
    char_len: int | None = None
    batch_size: int | None = None

    def sort_key(self):
        return (self.model or "", self.char_len or 0, self.batch_size or 0,
                self.op or "", self.subject, self.backend, self.iteration)


@dataclass(frozen=True)
class Aggregate:
    subject: str
    backend: str
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    median_ms: float
    count: int
    degenerate: bool = False     # single sample, std undefined and reported 0


@dataclass(frozen=True)
class SpeedupRow:
    subject: str
    numerator: str               # backend whose mean is the numerator
    denominator: str
    ratio: float

    @property
    def label(self) -> str:
        # "optimized/reference speedup" reads as: how many times faster the
        # denominator backend is; its value is numerator mean / denominator mean
        return f"{self.denominator}/{self.numerator} speedup"


@dataclass
class BenchReport:
    kind: str                     # "ops" or "model"
    records: list[RunRecord]
    spec_echo: dict
    manifest: dict
    header_notes: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def load_corpus(path: str | Path | None = None) -> list[str]:
    """One sentence per line; the bundled corpus unless a file is given."""
    if path is None:
        text = resources.files("encbench").joinpath("data/corpus.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    lines = [line.strip() for line in text.splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise BenchError("corpus has no usable lines")
    return lines


def generate_inputs(corpus: Sequence[str], char_len: int, batch: int, seed: int) -> list[str]:
    """``batch`` strings of exactly ``char_len`` characters, sampled from the
    corpus and cut to length; deterministic for a given seed."""
    if not corpus:
        raise BenchError("corpus is empty")
    if char_len < 1 or batch < 1:
        raise ValueError("char_len and batch must be >= 1")
    rng = random.Random(f"{seed}:{char_len}:{batch}")
    out = []
    for _ in range(batch):
        parts: list[str] = []
        total = -1
        while total < char_len:
            line = corpus[rng.randrange(len(corpus))]
            parts.append(line)
            total += len(line) + 1
        out.append(" ".join(parts)[:char_len])
    return out


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def time_once(thunk: Callable[[], object], backend: Backend) -> float:
    """Milliseconds for one run of ``thunk``, fencing deferred work on both
    sides of the clock."""
    backend.synchronize()
    start = time.perf_counter_ns()
    thunk()
    backend.synchronize()
    return (time.perf_counter_ns() - start) / 1e6


# ---------------------------------------------------------------------------
# operation registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpCase:
    name: str
    shapes: str
    make: Callable[[np.random.Generator], tuple]
    run: Callable[[Backend, tuple], object]


def _f32(rng, *shape):
    return Tensor.from_array(rng.random(shape, dtype=np.float32) + np.float32(0.1))


OP_REGISTRY: dict[str, OpCase] = {}


def _register(case: OpCase):
    OP_REGISTRY[case.name] = case


_register(OpCase(
    "matmul", "[1024x1024] x [1024x1024]",
    lambda rng: (_f32(rng, 1024, 1024), _f32(rng, 1024, 1024)),
    lambda backend, inp: backend.matmul(*inp)))
_register(OpCase(
    "linear", "[128x1024] x [1024x1024] + [1024]",
    lambda rng: (_f32(rng, 128, 1024), _f32(rng, 1024, 1024), _f32(rng, 1024)),
    lambda backend, inp: backend.linear(*inp)))
_register(OpCase(
    "softmax", "[128x1024] axis -1",
    lambda rng: (_f32(rng, 128, 1024),),
    lambda backend, inp: backend.softmax(inp[0], axis=-1)))
_register(OpCase(
    "layer_norm", "[128x1024], gamma/beta [1024]",
    lambda rng: (_f32(rng, 128, 1024), _f32(rng, 1024), _f32(rng, 1024)),
    lambda backend, inp: backend.layer_norm(inp[0], inp[1], inp[2], eps=1e-12)))
_register(OpCase(
    "gelu", "[128x4096]",
    lambda rng: (_f32(rng, 128, 4096),),
    lambda backend, inp: backend.gelu(inp[0])))
_register(OpCase(
    "add", "[1024x1024] + [1024x1024]",
    lambda rng: (_f32(rng, 1024, 1024), _f32(rng, 1024, 1024)),
    lambda backend, inp: backend.add(*inp)))
_register(OpCase(
    "concat", "2 x [512x1024] on axis 0",
    lambda rng: (_f32(rng, 512, 1024), _f32(rng, 512, 1024)),
    lambda backend, inp: backend.concat(list(inp), axis=0)))
_register(OpCase(
    "transpose", "[1024x1024] perm (1,0)",
    lambda rng: (_f32(rng, 1024, 1024),),
    lambda backend, inp: backend.transpose(inp[0], (1, 0))))
_register(OpCase(
    "embedding_lookup", "table [30522x768], ids [32x128]",
    lambda rng: (_f32(rng, 30522, 768),
                 Tensor.from_array(rng.integers(0, 30522, size=(32, 128), dtype=np.int64))),
    lambda backend, inp: backend.embedding_lookup(*inp)))


def op_shape_notes(ops: Sequence[str] | None = None) -> tuple[str, ...]:
    names = tuple(ops) if ops else tuple(OP_REGISTRY)
    return tuple(f"op {name}: {OP_REGISTRY[name].shapes}" for name in names)


def run_op_bench(spec: OpBenchSpec) -> BenchReport:
    names = spec.ops if spec.ops is not None else tuple(OP_REGISTRY)
    unknown = [n for n in names if n not in OP_REGISTRY]
    if unknown:
        raise BenchError(f"unknown ops: {', '.join(unknown)} "
                         f"(registry: {', '.join(OP_REGISTRY)})")
    records: list[RunRecord] = []
    for op_i, name in enumerate(names):
        case = OP_REGISTRY[name]
        for b_i, backend_name in enumerate(spec.backends):
            backend = get_backend(backend_name)
            rng = np.random.default_rng([spec.seed, op_i, b_i])
            try:
                for _ in range(spec.warmup):
                    case.run(backend, case.make(rng))
                    backend.synchronize()
                for it in range(1, spec.iterations + 1):
                    inputs = case.make(rng)      # built outside the timed region
                    ms = time_once(lambda: case.run(backend, inputs), backend)
                    records.append(RunRecord(subject=name, backend=backend_name,
                                             iteration=it, ms=ms, op=name))
            except Exception as e:
                raise BenchError(f"op {name!r} failed on backend "
                                 f"{backend_name!r}: {e}") from e
    return BenchReport(
        kind="ops",
        records=records,
        spec_echo=dataclasses.asdict(spec),
        manifest=_manifest(dataclasses.asdict(spec), seed=spec.seed),
        header_notes=op_shape_notes(names),
    )


# ---------------------------------------------------------------------------
# model benchmark
# ---------------------------------------------------------------------------

def run_model_bench(spec: ModelBenchSpec, cache_dir=None, offline: bool | None = None,
                    loaded: LoadedEncoder | None = None) -> BenchReport:
    """Full protocol for one model: every (char length x batch x backend)
    cell gets one tokenization (timed separately) and ``iterations`` timed
    forward passes over the same encoding."""
    if loaded is None:
        loaded = load_encoder(spec.repo_id, spec.revision, cache_dir, offline)
    tokenizer = load_tokenizer(loaded.config.family, loaded.files)
    corpus = load_corpus(spec.corpus_path)

    records: list[RunRecord] = []
    digest = hashlib.sha256()
    for char_len in spec.char_lengths:
        for batch in spec.batch_sizes:
            texts = generate_inputs(corpus, char_len, batch, spec.seed)
            t0 = time.perf_counter_ns()
            encoding = encode_batch(texts, tokenizer)
            tokenize_ms = (time.perf_counter_ns() - t0) / 1e6
            for text in texts:
                digest.update(text.encode("utf-8"))
            digest.update(encoding.input_ids.data.tobytes())
            digest.update(encoding.attention_mask.data.tobytes())

            inp = encoding.to_encoder_input()
            subject = f"{spec.repo_id}[len={char_len},batch={batch}]"
            for backend_name in spec.backends:
                backend = get_backend(backend_name)
                try:
                    for _ in range(spec.warmup):
                        forward(inp, loaded.weights, loaded.config, backend)
                        backend.synchronize()
                    for it in range(1, spec.iterations + 1):
                        ms = time_once(
                            lambda: forward(inp, loaded.weights, loaded.config, backend),
                            backend)
                        records.append(RunRecord(
                            subject=subject, backend=backend_name, iteration=it,
                            ms=ms, tokenize_ms=tokenize_ms, model=spec.repo_id,
                            char_len=char_len, batch_size=batch))
                except Exception as e:
                    raise BenchError(f"{subject} failed on backend "
                                     f"{backend_name!r}: {e}") from e

    echo = dataclasses.asdict(spec)
    manifest = _manifest(echo, seed=spec.seed, input_digest=digest.hexdigest())
    return BenchReport(kind="model", records=records, spec_echo=echo, manifest=manifest)


def _manifest(spec_echo: dict, seed: int, **extra) -> dict:
    return {
        "artifact": f"encbench {__version__}",
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "host": host_descriptor(),
        "seed": seed,
        "spec": spec_echo,
        **extra,
    }


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def aggregate(group: Sequence[RunRecord], subject: str | None = None,
              backend: str | None = None) -> Aggregate:
    if not group:
        raise BenchError("cannot aggregate an empty record group")
    values = [r.ms for r in group]
    single = len(values) == 1
    return Aggregate(
        subject=subject if subject is not None else group[0].subject,
        backend=backend if backend is not None else group[0].backend,
        mean_ms=statistics.fmean(values),
        std_ms=0.0 if single else statistics.stdev(values),
        min_ms=min(values),
        max_ms=max(values),
        median_ms=statistics.median(values),
        count=len(values),
        degenerate=single,
    )


def speedup(num: Aggregate, den: Aggregate, subject: str | None = None) -> SpeedupRow:
    if den.mean_ms <= 0:
        raise BenchError(f"speedup denominator mean is {den.mean_ms}")
    return SpeedupRow(
        subject=subject if subject is not None else num.subject,
        numerator=num.backend,
        denominator=den.backend,
        ratio=num.mean_ms / den.mean_ms,
    )


GroupedAggregates = list[tuple[str, dict[str, Aggregate]]]


def _group(records: Sequence[RunRecord], subject_of, sort_of) -> GroupedAggregates:
    buckets: dict[tuple, dict[str, list[RunRecord]]] = {}
    for rec in records:
        key = sort_of(rec)
        buckets.setdefault(key, {}).setdefault(rec.backend, []).append(rec)
    out: GroupedAggregates = []
    for key in sorted(buckets):
        per_backend = buckets[key]
        subject = subject_of(next(iter(per_backend.values()))[0])
        out.append((subject, {
            backend: aggregate(group, subject=subject, backend=backend)
            for backend, group in per_backend.items()
        }))
    return out


def aggregates_by_subject(records: Sequence[RunRecord]) -> GroupedAggregates:
    return _group(records, lambda r: r.subject, lambda r: r.sort_key()[:-2])


def aggregates_overall(records: Sequence[RunRecord]) -> GroupedAggregates:
    """One row per op or per model, averaged over every cell and iteration."""
    return _group(records, lambda r: r.model or r.subject,
                  lambda r: (r.model or r.subject,))


def aggregates_by_length(records: Sequence[RunRecord]) -> GroupedAggregates:
    return _group(records, lambda r: f"{r.model} len={r.char_len}",
                  lambda r: (r.model, r.char_len))


def aggregates_by_batch(records: Sequence[RunRecord]) -> GroupedAggregates:
    return _group(records, lambda r: f"{r.model} batch={r.batch_size}",
                  lambda r: (r.model, r.batch_size))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.2f}"


def render_detailed(records: Sequence[RunRecord], header_notes: Sequence[str] = ()) -> str:
    lines = [f"# {note}" for note in header_notes]
    lines.append(DETAILED_HEADER)
    lines.append("|---|---|---|---|---|")
    for rec in sorted(records, key=RunRecord.sort_key):
        lines.append(f"| {rec.subject} | {rec.backend} | {rec.iteration} "
                     f"| {_fmt(rec.ms)} | {_fmt(rec.tokenize_ms)} |")
    return "\n".join(lines) + "\n"


def detailed_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject", "backend", "iteration", "ms", "tokenize_ms",
                     "model", "char_len", "batch_size", "op"])
    for rec in sorted(records, key=RunRecord.sort_key):
        writer.writerow([
            rec.subject, rec.backend, rec.iteration, repr(rec.ms),
            "" if rec.tokenize_ms is None else repr(rec.tokenize_ms),
            rec.model or "", rec.char_len if rec.char_len is not None else "",
            rec.batch_size if rec.batch_size is not None else "", rec.op or "",
        ])
    return buf.getvalue()


def detailed_jsonl(records: Sequence[RunRecord]) -> str:
    lines = [json.dumps(dataclasses.asdict(rec), sort_keys=True)
             for rec in sorted(records, key=RunRecord.sort_key)]
    return "\n".join(lines) + "\n"


def _speedup_rows(groups: GroupedAggregates,
                  pairs: Sequence[tuple[str, str]]) -> dict[str, list[SpeedupRow]]:
    rows: dict[str, list[SpeedupRow]] = {}
    for subject, per_backend in groups:
        rows[subject] = []
        for compared, baseline in pairs:
            if compared not in per_backend or baseline not in per_backend:
                raise BenchError(
                    f"speedup pair {compared}/{baseline} missing a backend for "
                    f"{subject!r}; have {sorted(per_backend)}"
                )
            rows[subject].append(
                speedup(per_backend[baseline], per_backend[compared], subject=subject))
    return rows


def render_average(groups: GroupedAggregates,
                   pairs: Sequence[tuple[str, str]] = DEFAULT_SPEEDUP_PAIRS,
                   header_notes: Sequence[str] = ()) -> str:
    """Pipe table with one row per subject, per-backend mean columns, and one
    speedup column per (compared, baseline) pair."""
    backends = sorted({b for _, per in groups for b in per})
    ratios = _speedup_rows(groups, pairs)
    head = ["subject"] + [f"{b} mean ms" for b in backends]
    head += [f"{compared}/{baseline} speedup" for compared, baseline in pairs]
    lines = [f"# {note}" for note in header_notes]
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "---|" * len(head))
    for subject, per_backend in groups:
        cells = [subject]
        cells += [_fmt(per_backend[b].mean_ms) if b in per_backend else ""
                  for b in backends]
        cells += [f"{row.ratio:.2f}" for row in ratios[subject]]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def average_csv(groups: GroupedAggregates,
                pairs: Sequence[tuple[str, str]] = DEFAULT_SPEEDUP_PAIRS) -> str:
    backends = sorted({b for _, per in groups for b in per})
    ratios = _speedup_rows(groups, pairs)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    head = ["subject"]
    for b in backends:
        head += [f"{b}_mean_ms", f"{b}_std_ms", f"{b}_min_ms", f"{b}_max_ms",
                 f"{b}_median_ms", f"{b}_count"]
    head += [f"speedup_{compared}_over_{baseline}" for compared, baseline in pairs]
    writer.writerow(head)
    for subject, per_backend in groups:
        row: list = [subject]
        for b in backends:
            agg = per_backend.get(b)
            if agg is None:
                row += [""] * 6
            else:
                row += [repr(agg.mean_ms), repr(agg.std_ms), repr(agg.min_ms),
                        repr(agg.max_ms), repr(agg.median_ms), agg.count]
        row += [repr(r.ratio) for r in ratios[subject]]
        writer.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_report(report: BenchReport, outdir: str | Path,
                 pairs: Sequence[tuple[str, str]] | None = None) -> dict[str, Path]:
    """Write every report file under ``outdir`` (created if needed); each file
    lands atomically via temp file + rename."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        backends = tuple(dict.fromkeys(r.backend for r in report.records))
        pairs = DEFAULT_SPEEDUP_PAIRS if set(DEFAULT_BACKENDS) <= set(backends) else ()

    tables: dict[str, GroupedAggregates] = {}
    if report.kind == "model":
        tables["average_by_length"] = aggregates_by_length(report.records)
        tables["average_by_batch"] = aggregates_by_batch(report.records)
        tables["average_overall"] = aggregates_overall(report.records)
        tables["average_by_cell"] = aggregates_by_subject(report.records)
    else:
        tables["average_overall"] = aggregates_by_subject(report.records)

    # render everything before touching the filesystem
    rendered: dict[str, str] = {
        "detailed.txt": render_detailed(report.records, report.header_notes),
        "detailed.csv": detailed_csv(report.records),
        "detailed.jsonl": detailed_jsonl(report.records),
        "manifest.json": json.dumps(report.manifest, indent=2, sort_keys=True) + "\n",
    }
    for name, groups in tables.items():
        rendered[f"{name}.txt"] = render_average(groups, pairs, report.header_notes)
        rendered[f"{name}.csv"] = average_csv(groups, pairs)

    written: dict[str, Path] = {}
    for name, text in rendered.items():
        path = outdir / name
        _write_atomic(path, text)
        written[name] = path
    return written
