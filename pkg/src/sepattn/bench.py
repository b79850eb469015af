"""Single-thread latency benchmark of the attention units, log-log scaling
fits, and context-score-map export."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as attn
from .errors import UsageError
from .mobilevitv2 import Model, fold, model_forward
from .tensor import DEFAULT_DTYPE, Tensor, make_rng

CSV_HEADER = ["kind", "k", "d", "h", "p", "macs", "median_s", "mean_s", "p95_s"]
DEFAULT_TOKENS = (64, 128, 256, 512, 1024, 2048, 4096)


@dataclass(frozen=True)
class BenchConfig:
    kinds: tuple[str, ...] = attn.KINDS
    tokens: tuple[int, ...] = DEFAULT_TOKENS
    d: int = 512
    h: int = 8
    p: int = 256
    warmup: int = 10
    repeats: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 10:
            raise UsageError(f"repeats must be >= 10, got {self.repeats}")
        if self.warmup < 1:
            raise UsageError(f"warmup must be >= 1, got {self.warmup}")
        if not self.tokens or min(self.tokens) < 1:
            raise UsageError("token counts must be >= 1")
        bad = [k for k in self.kinds if k not in attn.KINDS]
        if bad:
            raise UsageError(f"unsupported attention kind(s): {', '.join(bad)}")
        if self.d < 1 or self.h < 1 or self.d % self.h:
            raise UsageError(f"d={self.d} must be a positive multiple of h={self.h}")
        if self.p < 1:
            raise UsageError("p must be >= 1")


@dataclass(frozen=True)
class BenchRecord:
    kind: str
    k: int
    d: int
    h: int
    p: int
    median_s: float
    mean_s: float
    p95_s: float
    macs: int

    def row(self) -> list:
        return [self.kind, self.k, self.d, self.h, self.p, self.macs,
                repr(self.median_s), repr(self.mean_s), repr(self.p95_s)]


def _check_clock():
    info = time.get_clock_info("perf_counter")
    if not info.monotonic or info.resolution > 1e-6:
        raise RuntimeError(f"perf_counter is unsuitable for timing: {info}")


def time_attention(kind: str, k: int, d: int, h: int, p: int, cfg: BenchConfig) -> BenchRecord:
    """Time ``cfg.repeats`` forwards of one attention unit on one thread.

    Weights and input are built from ``cfg.seed`` before the timed region.
    """
    if kind not in attn.KINDS:
        raise UsageError(f"unsupported attention kind {kind!r}")
    if k < 1:
        raise UsageError("k must be >= 1")
    _check_clock()
    rng = make_rng(cfg.seed)
    if kind == "mha":
        w = attn.init_mha(d, h, rng)
    elif kind == "linformer":
        w = attn.init_linformer(d, h, p, max(k, max(cfg.tokens)), rng)
    else:
        w = attn.init_separable(d, rng)
    x = rng.standard_normal((k, d)).astype(DEFAULT_DTYPE)
    forward = {"mha": attn.mha_forward, "linformer": attn.linformer_forward,
               "separable": attn.separable_self_attention_forward}[kind]

    lat = np.empty(cfg.repeats)
    with threadpool_limits(limits=1):
        for _ in range(cfg.warmup):
            forward(x, w)
        clock = time.perf_counter
        for i in range(cfg.repeats):
            t0 = clock()
            forward(x, w)
            lat[i] = clock() - t0
    return BenchRecord(
        kind=kind, k=k, d=d, h=h, p=p,
        median_s=float(np.median(lat)),
        mean_s=float(np.mean(lat)),
        p95_s=float(np.percentile(lat, 95)),
        macs=attn.attention_macs(kind, k, d, h, p),
    )


def fit_scaling_exponent(records: list[BenchRecord]) -> tuple[float, float, float]:
    """OLS of ln(median latency) on ln(k); returns (slope, intercept, r^2)."""
    kinds = {r.kind for r in records}
    if len(kinds) > 1:
        raise UsageError(f"records mix attention kinds: {sorted(kinds)}")
    if len(records) < 4:
        raise UsageError(f"need at least 4 records to fit, got {len(records)}")
    ks = np.array([r.k for r in records], dtype=np.float64)
    if ks.max() < 16 * ks.min():
        raise UsageError("token counts must span at least a factor of 16")
    lx, ly = np.log(ks), np.log([r.median_s for r in records])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def run_suite(cfg: BenchConfig, out_path=None, progress=None) -> list[BenchRecord]:
    """Benchmark every (kind, k), kinds in config order then k ascending;
    optionally write the CSV."""
    records = []
    for kind in cfg.kinds:
        for k in sorted(cfg.tokens):
            rec = time_attention(kind, k, cfg.d, cfg.h, cfg.p, cfg)
            records.append(rec)
            if progress:
                progress(rec)
    if out_path is not None:
        write_csv(records, out_path)
    return records


def write_csv(records: list[BenchRecord], path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_HEADER)
            for r in records:
                wr.writerow(r.row())
    except OSError as exc:
        raise OSError(f"cannot write benchmark CSV {path}: {exc.strerror or exc}") from exc


def read_csv(path) -> list[BenchRecord]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read benchmark CSV {path}: {exc.strerror or exc}") from exc
    try:
        return [
            BenchRecord(
                kind=r["kind"], k=int(r["k"]), d=int(r["d"]), h=int(r["h"]), p=int(r["p"]),
                macs=int(r["macs"]), median_s=float(r["median_s"]),
                mean_s=float(r["mean_s"]), p95_s=float(r["p95_s"]),
            )
            for r in rows
        ]
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path} is not a benchmark CSV: {exc}") from exc


def fit_by_kind(records: list[BenchRecord]) -> dict[str, tuple[float, float, float]]:
    groups: dict[str, list[BenchRecord]] = {}
    for r in records:
        groups.setdefault(r.kind, []).append(r)
    return {kind: fit_scaling_exponent(rs) for kind, rs in groups.items()}


# ---------------------------------------------------------------- score maps


@dataclass(frozen=True)
class ScoreMapImage:
    height: int
    width: int
    values: Tensor = field(repr=False)  # H x W in [0, 1]
    output_stride: int
    block: int

    @property
    def name(self) -> str:
        return f"os{self.output_stride}_block{self.block}"

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.values * 255).astype(np.uint8)


def minmax_normalize(cm: Tensor) -> Tensor:
    """Scale to [0, 1]; a constant map becomes all 0.5."""
    cm = np.asarray(cm, dtype=np.float64)
    lo, hi = cm.min(), cm.max()
    if hi == lo:
        return np.full_like(cm, 0.5)
    return (cm - lo) / (hi - lo)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) 8-bit graymap, rows top to bottom."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w)


def score_maps(model: Model, image: Tensor) -> list[ScoreMapImage]:
    """Fold every separable block's context scores back onto its feature map."""
    _, captured = model_forward(model, image, return_scores=True)
    ph, pw = model.spec.patch
    out = []
    for c in captured:
        cm = fold(c.scores[None], ph, pw, c.height, c.width)[0]
        out.append(ScoreMapImage(c.height, c.width, minmax_normalize(cm), c.output_stride, c.block))
    return out


def export_score_maps(model: Model, image: Tensor, out_dir) -> list[Path]:
    """Write ``os{8,16,32}_block{i}.pgm`` for every separable block."""
    out_dir = Path(out_dir)
    maps = score_maps(model, image)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for m in maps:
            path = out_dir / f"{m.name}.pgm"
            write_pgm(path, m.to_uint8())
            paths.append(path)
    except OSError as exc:
        raise OSError(f"cannot write score maps to {out_dir}: {exc.strerror or exc}") from exc
    return paths


def latency_summary(records: list[BenchRecord]) -> str:
    lines = [f"{'kind':<10}{'k':>6}{'median ms':>12}{'p95 ms':>10}{'GMAC':>9}"]
    for r in records:
        lines.append(f"{r.kind:<10}{r.k:>6}{r.median_s * 1e3:>12.3f}{r.p95_s * 1e3:>10.3f}{r.macs / 1e9:>9.3f}")
    return "\n".join(lines)


def load_image(path) -> Tensor:
    """Read a ``3 x H x W`` float image from .npy or any format Pillow opens."""
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path).astype(DEFAULT_DTYPE)
        if img.ndim != 3 or img.shape[0] != 3:
            raise UsageError(f"{path}: expected a 3 x H x W array, got {img.shape}")
        return img
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=DEFAULT_DTYPE) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))

