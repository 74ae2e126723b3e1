"""Training loops: CTC baseline, two-stage distillation, KD baselines, evaluation.

Batches only hold utterances of equal length, so no padding is needed.
Per-step losses are summed over frames and averaged over the utterances of
the batch. Every loop is deterministic given the config and seed.
"""

from __future__ import annotations

import io
import json
import logging
import os
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ctcd.ctc import ctc_loss, greedy_decode, min_frames
from ctcd.distill import (
    DistillPlan,
    combined_loss,
    frame_kd_loss,
    guided_loss,
    guided_mask,
    rkd_loss,
    seq_kd_targets,
    skd_loss,
)
from ctcd.errors import ConfigError, NumericError
from ctcd.harness.config import RunConfig, dump_config
from ctcd.harness.optim import Adam
from ctcd.metrics import corpus_counts
from ctcd.models import Adapter, Checkpoint, Encoder, atomic_write, build, load, save
from ctcd.numcore import DenseArray, Rng, add, backward, concat, scale, slice_, softmax_np
from ctcd.synthdata import Dataset, Utterance, make_dataset, read_dataset

log = logging.getLogger(__name__)

TWO_STAGE_METHODS = ("tutornet", "skd-only")
KD_METHODS = ("framekd", "guided", "seqkd")
METHODS = ("baseline",) + TWO_STAGE_METHODS + KD_METHODS

# independent RNG streams derived from the run seed
INIT_STREAM, SHUFFLE_STREAM, ADAPTER_STREAM = 11, 12, 13

STAGE2_HEADER = "step,loss_ctc,loss_skd,loss_total"
STAGE1_HEADER = "step,loss_rkd"


@dataclass
class EvalReport:
    wer: float
    ter: float
    num_utterances: int
    word_errors: int
    word_count: int
    token_errors: int
    token_count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


@dataclass
class RunReport:
    method: str
    seed: int
    stage1: dict[str, list[float]] = field(default_factory=dict)
    stage2: dict[str, list[float]] = field(default_factory=dict)
    rkd_initial: float | None = None
    rkd_final: float | None = None
    eval: EvalReport | None = None
    rerr_vs_baseline: float | None = None
    skipped: int = 0
    steps: int = 0
    wall_clock_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: RunReport
    stage1_csv: str | None
    stage2_csv: str


# -- data --------------------------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train/eval splits from files when configured, else generated from the task."""
    d = cfg.data
    train = read_dataset(d.train_path) if d.train_path else make_dataset(cfg.task, d.train_count, 0, "train")
    held = read_dataset(d.eval_path) if d.eval_path else make_dataset(cfg.task, d.eval_count, 1, "eval")
    for ds in (train, held):
        if ds.feature_dim != cfg.student.input_dim:
            raise ConfigError(f"dataset feature dim {ds.feature_dim} != model input_dim {cfg.student.input_dim}")
        if ds.alphabet_size + 1 != cfg.student.alphabet_size:
            raise ConfigError(f"dataset |Y|={ds.alphabet_size} needs a model with {ds.alphabet_size + 1} classes")
    return train, held


def feasible(utts: list[Utterance]) -> tuple[list[Utterance], int]:
    keep = [u for u in utts if min_frames(u.labels) <= u.num_frames]
    skipped = len(utts) - len(keep)
    if skipped:
        log.warning("skipping %d utterance(s) whose targets do not fit their frames", skipped)
    return keep, skipped


def length_groups(utts: list[Utterance]) -> list[list[Utterance]]:
    groups: dict[int, list[Utterance]] = {}
    for u in utts:
        groups.setdefault(u.num_frames, []).append(u)
    return [groups[t] for t in sorted(groups)]


def epoch_batches(utts: list[Utterance], batch_size: int, rng: Rng) -> list[list[Utterance]]:
    """Shuffle, split into equal-length batches of at most ``batch_size``, shuffle batches."""
    shuffled = [utts[i] for i in rng.permutation(len(utts))]
    batches = []
    for group in length_groups(shuffled):
        batches += [group[i : i + batch_size] for i in range(0, len(group), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def batches_per_epoch(utts: list[Utterance], batch_size: int) -> int:
    return sum(-(-len(g) // batch_size) for g in length_groups(utts))


def stack(batch: list[Utterance]) -> np.ndarray:
    return np.stack([u.features for u in batch])


# -- teachers -----------------------------------------------------------------------


def resolve_teacher(ref) -> Encoder:
    if ref is None:
        raise ConfigError("a teacher checkpoint is required for this method")
    if isinstance(ref, Checkpoint):
        return ref.to_encoder()
    if isinstance(ref, Encoder):
        return ref
    if not Path(ref).exists():
        raise ConfigError(f"teacher checkpoint {ref} does not exist")
    return load(ref).to_encoder()


@dataclass
class TeacherView:
    """Teacher outputs per utterance id, computed once (teachers are frozen)."""

    logits: dict[str, np.ndarray]
    hidden: dict[str, np.ndarray]

    @classmethod
    def compute(cls, teacher: Encoder, utts: list[Utterance], layer: int = -1) -> "TeacherView":
        logits, hidden = {}, {}
        for group in length_groups(utts):
            out = teacher(stack(group))
            for i, u in enumerate(group):
                logits[u.id] = out.logits.data[i]
                hidden[u.id] = out.hidden_layers[layer].data[i]
        return cls(logits, hidden)

    def batch_logits(self, batch: list[Utterance]) -> np.ndarray:
        return np.stack([self.logits[u.id] for u in batch])

    def batch_hidden(self, batch: list[Utterance]) -> np.ndarray:
        return np.stack([self.hidden[u.id] for u in batch])


def _check_teacher(teacher: Encoder, cfg: RunConfig, role: str) -> None:
    s = teacher.spec
    if s.input_dim != cfg.student.input_dim or s.alphabet_size != cfg.student.alphabet_size:
        raise ConfigError(f"{role} teacher spec {s} does not match the student's input/output sizes")


# -- loops --------------------------------------------------------------------------


def _csv(header: str, rows: list[tuple]) -> str:
    buf = io.StringIO()
    buf.write(header + "\n")
    for row in rows:
        buf.write(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]) + "\n")
    return buf.getvalue()


def _epoch_means(rows: list[tuple], per_epoch: int, epochs: int, col: int) -> list[float]:
    return [float(np.mean([r[col] for r in rows[e * per_epoch : (e + 1) * per_epoch]])) for e in range(epochs)]


StepLoss = Callable[[list[Utterance], Encoder], tuple[DenseArray, DenseArray, DenseArray]]


def _run_stage2(student: Encoder, utts, cfg: RunConfig, step_loss: StepLoss, rng: Rng):
    per_epoch = batches_per_epoch(utts, cfg.batch_size)
    opt = Adam(student.parameters(), cfg.optim, per_epoch * cfg.stage2_epochs)
    rows = []
    for epoch in range(cfg.stage2_epochs):
        for batch in epoch_batches(utts, cfg.batch_size, rng):
            opt.zero_grad()
            try:
                ctc, aux, total = step_loss(batch, student)
                backward(total)
                opt.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, step {opt.t + 1}: {exc}") from None
            rows.append((opt.t, ctc.item(), aux.item(), total.item()))
    means = {
        name: _epoch_means(rows, per_epoch, cfg.stage2_epochs, col)
        for col, name in ((1, "loss_ctc"), (2, "loss_skd"), (3, "loss_total"))
    }
    return rows, means


def _rkd_batch_loss(student, adapter, view, batch, plan: DistillPlan) -> DenseArray:
    pair = plan.layer_pairs[0]
    w_stu = student(stack(batch)).hidden_layers[pair.student_layer]
    return scale(rkd_loss(view.batch_hidden(batch), w_stu, adapter, plan.frame_weighting), 1.0 / len(batch))


def _rkd_full(student, adapter, view, utts, plan) -> float:
    """Mean per-utterance L_RKD over all of ``utts``."""
    total = 0.0
    for group in length_groups(utts):
        total += _rkd_batch_loss(student, adapter, view, group, plan).item() * len(group)
    return total / len(utts)


def _run_stage1(student: Encoder, teacher: Encoder, utts, cfg: RunConfig, rng: Rng, report: RunReport):
    plan = cfg.plan
    if len(plan.layer_pairs) != 1:
        raise ConfigError("exactly one teacher/student layer pair is supported")
    pair = plan.layer_pairs[0]
    try:
        d_tea = teacher.spec.hidden_dims()[pair.teacher_layer]
        d_stu = student.spec.hidden_dims()[pair.student_layer]
    except IndexError:
        raise ConfigError(f"layer pair {pair} out of range") from None
    view = TeacherView.compute(teacher, utts, pair.teacher_layer)
    adapter = Adapter.create(d_stu, d_tea, Rng(cfg.seed, ADAPTER_STREAM), plan.adapter_width)
    per_epoch = batches_per_epoch(utts, cfg.batch_size)
    optim = cfg.optim if cfg.optim.stage1_lr is None else replace(cfg.optim, lr=cfg.optim.stage1_lr)
    opt = Adam(student.parameters() + adapter.parameters(), optim, per_epoch * cfg.stage1_epochs)
    report.rkd_initial = _rkd_full(student, adapter, view, utts, plan)
    rows = []
    for epoch in range(cfg.stage1_epochs):
        for batch in epoch_batches(utts, cfg.batch_size, rng):
            opt.zero_grad()
            try:
                loss = _rkd_batch_loss(student, adapter, view, batch, plan)
                backward(loss)
                opt.step()
            except NumericError as exc:
                raise NumericError(f"stage 1 epoch {epoch + 1}, step {opt.t + 1}: {exc}") from None
            rows.append((opt.t, loss.item()))
    report.rkd_final = _rkd_full(student, adapter, view, utts, plan)
    report.stage1 = {"loss_rkd": _epoch_means(rows, per_epoch, cfg.stage1_epochs, 1)}
    for p in student.parameters():
        p.grad = None
    return rows  # the adapter goes out of scope here


def _ctc_term(batch, logits) -> DenseArray:
    return scale(ctc_loss(logits, [u.labels for u in batch]), 1.0 / len(batch))


def _zero() -> DenseArray:
    return DenseArray(np.zeros(1))


def _baseline_step(batch, student):
    ctc = _ctc_term(batch, student(stack(batch)).logits)
    return ctc, _zero(), ctc


def _skd_step(view: TeacherView, plan: DistillPlan) -> StepLoss:
    def step(batch, student):
        logits = student(stack(batch)).logits
        ctc = _ctc_term(batch, logits)
        skd = scale(skd_loss(view.batch_logits(batch), logits, plan.tau), 1.0 / len(batch))
        return ctc, skd, combined_loss(ctc, skd, plan.lambda_skd)

    return step


def _framekd_step(view: TeacherView, plan: DistillPlan) -> StepLoss:
    lam = plan.lambda_skd
    if lam > 1:
        raise ConfigError("framekd interpolates (1 - lambda) CTC + lambda KD and needs lambda <= 1")

    def step(batch, student):
        logits = student(stack(batch)).logits
        ctc = _ctc_term(batch, logits)
        p_tea = softmax_np(view.batch_logits(batch) / plan.tau, axis=-1)
        kd = scale(frame_kd_loss(p_tea, logits), 1.0 / len(batch))
        return ctc, kd, add(scale(ctc, 1.0 - lam), scale(kd, lam))

    return step


def _guided_step(view: TeacherView, plan: DistillPlan) -> StepLoss:
    def step(batch, student):
        logits = student(stack(batch)).logits
        ctc = _ctc_term(batch, logits)
        mask = guided_mask(view.batch_logits(batch))
        g = scale(guided_loss(mask, logits, plan.guided_weight), 1.0 / len(batch))
        return ctc, g, add(ctc, g)

    return step


def _seqkd_step(view: TeacherView, plan: DistillPlan) -> StepLoss:
    targets = {
        uid: seq_kd_targets(softmax_np(lg, axis=-1), plan.nbest_n, plan.beam_width)
        for uid, lg in view.logits.items()
    }

    def step(batch, student):
        logits = student(stack(batch)).logits
        rows, labels, weights = [], [], []
        for i, u in enumerate(batch):
            for hyp, w in targets[u.id]:
                rows.append(i)
                labels.append(hyp)
                weights.append(w)
        if rows != list(range(len(batch))):
            logits = concat([slice_(logits, (slice(i, i + 1),)) for i in rows], axis=0)
        ctc = scale(ctc_loss(logits, labels, weights), 1.0 / len(batch))
        return ctc, _zero(), ctc

    return step


def _finish(cfg, student, method, report, stage1_rows, stage2_rows, t0, extra_meta) -> TrainResult:
    report.steps = len(stage2_rows) + len(stage1_rows or [])
    ckpt = Checkpoint.from_encoder(
        student,
        method=method,
        seed=cfg.seed,
        stage1_epochs=cfg.stage1_epochs if method == "tutornet" else 0,
        stage2_epochs=cfg.stage2_epochs,
        **extra_meta,
    )
    report.wall_clock_s = time.perf_counter() - t0
    res = TrainResult(
        ckpt,
        report,
        _csv(STAGE1_HEADER, stage1_rows) if stage1_rows is not None else None,
        _csv(STAGE2_HEADER, stage2_rows),
    )
    if cfg.output_dir:
        write_outputs(res, cfg)
    return res


def write_outputs(res: TrainResult, cfg: RunConfig) -> None:
    out = Path(cfg.output_dir)
    save(res.checkpoint, out / "model.ckpt")
    atomic_write(out / "losses.csv", res.stage2_csv.encode())
    if res.stage1_csv is not None:
        atomic_write(out / "stage1_losses.csv", res.stage1_csv.encode())
    atomic_write(out / "report.json", res.report.to_json().encode())
    atomic_write(out / "config.txt", dump_config(cfg).encode())


def _init_student(cfg: RunConfig) -> Encoder:
    ref = cfg.init_checkpoint
    if not isinstance(ref, Checkpoint):
        if not Path(ref).exists():
            raise ConfigError(f"init checkpoint {ref} does not exist")
        ref = load(ref)
    if ref.spec != cfg.student:
        raise ConfigError(f"init checkpoint spec {ref.spec} differs from the student spec {cfg.student}")
    return ref.to_encoder(trainable=True)


def _prepare(cfg: RunConfig, method: str):
    t0 = time.perf_counter()
    train, held = load_data(cfg)
    utts, skipped = feasible(train.utterances)
    if not utts:
        raise ConfigError("no trainable utterances")
    if cfg.init_checkpoint is not None:
        student = _init_student(cfg)
    else:
        student = build(cfg.student, Rng(cfg.seed, INIT_STREAM))
    report = RunReport(method, cfg.seed, skipped=skipped)
    return t0, held, utts, student, report, Rng(cfg.seed, SHUFFLE_STREAM)


def _evaluate_into(report: RunReport, student: Encoder, held: Dataset) -> None:
    if len(held):
        report.eval = evaluate(Checkpoint.from_encoder(student), held)


def train_baseline(cfg: RunConfig) -> TrainResult:
    """CTC-only training on ground truth for ``stage2_epochs`` epochs."""
    t0, held, utts, student, report, rng = _prepare(cfg, "baseline")
    rows, report.stage2 = _run_stage2(student, utts, cfg, _baseline_step, rng)
    _evaluate_into(report, student, held)
    return _finish(cfg, student, "baseline", report, None, rows, t0, {})


def _teacher_meta(plan: DistillPlan, method: str) -> dict:
    name = lambda r: r if isinstance(r, str) else None  # noqa: E731
    meta = {"skd_teacher": name(plan.skd_teacher)}
    if method == "tutornet":
        meta["rkd_teacher"] = name(plan.rkd_teacher)
    return meta


def train_two_stage(cfg: RunConfig, method: str = "tutornet") -> TrainResult:
    """Stage 1 (tutornet only): L_RKD on the paired layers through a fresh
    adapter, which is then dropped. Stage 2: L_CTC + lambda * L_SKD."""
    if method not in TWO_STAGE_METHODS:
        raise ConfigError(f"two-stage method must be one of {TWO_STAGE_METHODS}, got {method!r}")
    plan = cfg.plan
    skd_teacher = resolve_teacher(plan.skd_teacher)
    _check_teacher(skd_teacher, cfg, "SKD")
    rkd_teacher = None
    if method == "tutornet" and cfg.stage1_epochs > 0:
        rkd_teacher = resolve_teacher(plan.rkd_teacher)
        _check_teacher(rkd_teacher, cfg, "RKD")
    t0, held, utts, student, report, rng = _prepare(cfg, method)
    stage1_rows = None
    if rkd_teacher is not None:
        stage1_rows = _run_stage1(student, rkd_teacher, utts, cfg, rng, report)
    view = TeacherView.compute(skd_teacher, utts)
    rows, report.stage2 = _run_stage2(student, utts, cfg, _skd_step(view, plan), rng)
    _evaluate_into(report, student, held)
    return _finish(cfg, student, method, report, stage1_rows, rows, t0, _teacher_meta(plan, method))


def train_baseline_kd(cfg: RunConfig, method: str) -> TrainResult:
    """Comparison KD methods driven by the SKD teacher."""
    steps = {"framekd": _framekd_step, "guided": _guided_step, "seqkd": _seqkd_step}
    if method not in steps:
        raise ConfigError(f"method must be one of {KD_METHODS}, got {method!r}")
    teacher = resolve_teacher(cfg.plan.skd_teacher)
    _check_teacher(teacher, cfg, "SKD")
    t0, held, utts, student, report, rng = _prepare(cfg, method)
    view = TeacherView.compute(teacher, utts)
    rows, report.stage2 = _run_stage2(student, utts, cfg, steps[method](view, cfg.plan), rng)
    _evaluate_into(report, student, held)
    return _finish(cfg, student, method, report, None, rows, t0, _teacher_meta(cfg.plan, method))


def train(cfg: RunConfig, method: str) -> TrainResult:
    if method == "baseline":
        return train_baseline(cfg)
    if method in TWO_STAGE_METHODS:
        return train_two_stage(cfg, method)
    return train_baseline_kd(cfg, method)


# -- evaluation ---------------------------------------------------------------------


def decode_dataset(enc: Encoder, ds: Dataset) -> dict[str, tuple[int, ...]]:
    hyps = {}
    for group in length_groups(ds.utterances):
        logits = enc(stack(group)).logits.data
        for i, u in enumerate(group):
            hyps[u.id] = greedy_decode(logits[i])
    return hyps


def evaluate(ckpt: Checkpoint, ds: Dataset) -> EvalReport:
    """Greedy decoding; pooled word-level WER (via the space label) and TER."""
    if not len(ds):
        raise ConfigError("cannot evaluate on an empty dataset")
    if ckpt.spec.input_dim != ds.feature_dim:
        raise ConfigError(f"checkpoint input_dim {ckpt.spec.input_dim} != dataset feature dim {ds.feature_dim}")
    if ckpt.spec.alphabet_size != ds.alphabet_size + 1:
        raise ConfigError(f"checkpoint has {ckpt.spec.alphabet_size} classes, dataset needs {ds.alphabet_size + 1}")
    hyps = decode_dataset(ckpt.to_encoder(), ds)
    refs = [u.labels for u in ds.utterances]
    out = [hyps[u.id] for u in ds.utterances]
    words = corpus_counts(refs, out, level="word", space=ds.space)
    tokens = corpus_counts(refs, out, level="token")
    return EvalReport(
        wer=words.rate,
        ter=tokens.rate,
        num_utterances=len(ds),
        word_errors=words.errors,
        word_count=words.reference_length,
        token_errors=tokens.errors,
        token_count=tokens.reference_length,
    )


def output_paths(cfg: RunConfig) -> dict[str, str]:
    base = cfg.output_dir or "."
    return {k: os.path.join(base, k) for k in ("model.ckpt", "losses.csv", "stage1_losses.csv", "report.json")}
