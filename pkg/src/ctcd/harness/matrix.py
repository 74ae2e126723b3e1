"""The five teacher/student transfer scenarios and their comparison table."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path

from ctcd.errors import ConfigError
from ctcd.harness.config import RunConfig
from ctcd.harness.train import train
from ctcd.metrics import rerr
from ctcd.models import Checkpoint, EncoderSpec, atomic_write


@dataclass(frozen=True)
class Scenario:
    name: str
    skd_teacher: str  # family of the SKD teacher
    rkd_teacher: str  # family of the RKD teacher
    student: str

    @property
    def mixed(self) -> bool:
        return self.skd_teacher != self.rkd_teacher


SCENARIOS = {
    s.name: s
    for s in (
        Scenario("cnn-rnn", "tdnn", "tdnn", "rnn"),
        Scenario("cnn-cnn", "tdnn", "tdnn", "tdnn"),
        Scenario("rnn-cnn", "rnn", "rnn", "tdnn"),
        Scenario("rnn-rnn", "rnn", "rnn", "rnn"),
        Scenario("rnn&cnn-cnn", "rnn", "tdnn", "tdnn"),
    )
}
DEFAULT_METHODS = ("baseline", "skd-only", "tutornet")
CSV_COLUMNS = ("scenario", "method", "seed", "wer", "ter", "rerr_vs_baseline")


def default_student(cfg: RunConfig, family: str) -> EncoderSpec:
    """The configured student when its family matches, else a small default."""
    if cfg.student.family == family:
        return cfg.student
    d, k = cfg.task.feature_dim, cfg.task.num_classes
    if family == "tdnn":
        return EncoderSpec("tdnn", d, (24,), k, kernel_widths=(5,))
    return EncoderSpec("rnn", d, (12,), k)


TEACHER_SEED = 100


def default_teacher_spec(cfg: RunConfig, family: str) -> EncoderSpec:
    """Teachers are larger models of each family trained on ground truth."""
    d, k = cfg.task.feature_dim, cfg.task.num_classes
    if family == "tdnn":
        return EncoderSpec("tdnn", d, (48, 48), k, kernel_widths=(5, 5))
    return EncoderSpec("rnn", d, (16,), k, bidirectional=True)


def train_teachers(cfg: RunConfig, families=("tdnn", "rnn"), seed: int = TEACHER_SEED) -> dict[str, Checkpoint]:
    out = {}
    for fam in families:
        run = replace(cfg, student=default_teacher_spec(cfg, fam), seed=seed, output_dir=None, init_checkpoint=None)
        out[fam] = train(run, "baseline").checkpoint
    return out


@dataclass
class MatrixRow:
    scenario: str
    method: str
    seed: int
    wer: float
    ter: float
    rerr_vs_baseline: float | None


def run_matrix(
    cfg: RunConfig,
    teachers: dict,
    seeds: list[int],
    scenarios: list[str] | None = None,
    methods: tuple[str, ...] = DEFAULT_METHODS,
    students: dict[str, EncoderSpec] | None = None,
) -> list[MatrixRow]:
    """Train and evaluate every (scenario, method, seed).

    ``teachers`` maps an encoder family (``tdnn``/``rnn``) to a checkpoint or
    checkpoint path. The mixed-teacher scenario contributes a single
    ``tutornet`` row per seed; baselines are shared across scenarios that
    have the same student family.
    """
    names = list(SCENARIOS) if scenarios is None else scenarios
    for name in names:
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; known: {list(SCENARIOS)}")
        sc = SCENARIOS[name]
        for fam in {sc.skd_teacher, sc.rkd_teacher}:
            ref = teachers.get(fam)
            if ref is None or (not isinstance(ref, Checkpoint) and not Path(ref).exists()):
                raise ConfigError(f"scenario {name}: missing {fam} teacher checkpoint")
    if "baseline" not in methods:
        methods = ("baseline",) + tuple(methods)
    students = students or {}
    baselines: dict[tuple[str, int], float] = {}
    rows = []
    for name in names:
        sc = SCENARIOS[name]
        student = students.get(sc.student) or default_student(cfg, sc.student)
        for seed in seeds:
            plan = replace(cfg.plan, skd_teacher=teachers[sc.skd_teacher], rkd_teacher=teachers[sc.rkd_teacher])
            run_cfg = replace(cfg, student=student, plan=plan, seed=seed, output_dir=None)
            key = (sc.student, seed)
            if key not in baselines:
                base = train(run_cfg, "baseline").report.eval
                baselines[key] = base
            wanted = ("tutornet",) if sc.mixed else methods
            for method in wanted:
                ev = baselines[key] if method == "baseline" else train(run_cfg, method).report.eval
                rows.append(_row(name, method, seed, ev, baselines[key]))
    return rows


def _row(name, method, seed, ev, base) -> MatrixRow:
    r = rerr(100 * base.wer, 100 * ev.wer) if base.wer > 0 else None
    return MatrixRow(name, method, seed, ev.wer, ev.ter, r)


def rows_to_csv(rows: list[MatrixRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.scenario, r.method, r.seed, repr(r.wer), repr(r.ter),
                    "" if r.rerr_vs_baseline is None else repr(r.rerr_vs_baseline)])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MatrixRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ConfigError(f"matrix CSV must have columns {','.join(CSV_COLUMNS)}")
    out = []
    for rec in reader:
        r = rec["rerr_vs_baseline"]
        out.append(MatrixRow(rec["scenario"], rec["method"], int(rec["seed"]), float(rec["wer"]),
                             float(rec["ter"]), float(r) if r else None))
    return out


def summarize(rows: list[MatrixRow]) -> str:
    """Markdown table of seed-averaged WER, TER and RERR per scenario and method."""
    groups: dict[tuple[str, str], list[MatrixRow]] = defaultdict(list)
    for r in rows:
        groups[(r.scenario, r.method)].append(r)
    lines = [
        "| scenario | method | seeds | WER % | TER % | RERR % |",
        "|---|---|---|---|---|---|",
    ]
    for (scenario, method), rs in groups.items():
        mean = lambda xs: sum(xs) / len(xs)  # noqa: E731
        rr = [r.rerr_vs_baseline for r in rs if r.rerr_vs_baseline is not None]
        rr_txt = f"{mean(rr):.2f}" if rr else "n/a"
        lines.append(
            f"| {scenario} | {method} | {len(rs)} | {100 * mean([r.wer for r in rs]):.2f} "
            f"| {100 * mean([r.ter for r in rs]):.2f} | {rr_txt} |"
        )
    return "\n".join(lines) + "\n"


def write_matrix(rows: list[MatrixRow], out_dir: str | Path) -> None:
    out = Path(out_dir)
    atomic_write(out / "matrix.csv", rows_to_csv(rows).encode())
    atomic_write(out / "summary.md", summarize(rows).encode())


def check_rerr_consistent(rows: list[MatrixRow], tol: float = 1e-9) -> bool:
    """True when every RERR entry is recomputable from the WER columns."""
    base = {(r.scenario, r.seed): r.wer for r in rows if r.method == "baseline"}
    for r in rows:
        b = base.get((r.scenario, r.seed))
        if b is None or r.rerr_vs_baseline is None:
            continue
        if not math.isclose(r.rerr_vs_baseline, rerr(100 * b, 100 * r.wer), abs_tol=tol):
            return False
    return True
