from __future__ import annotations

import numpy as np

from ctcd.harness.config import build_config
from ctcd.models import Checkpoint, EncoderSpec, build
from ctcd.numcore import Rng


def make_config(**settings):
    """RunConfig from ``section__key=value`` keyword arguments, ignoring CTCD_SEED."""
    values = {k.replace("__", "."): str(v) for k, v in settings.items()}
    return build_config(values, env={})


def tiny_config(**settings):
    base = dict(
        task__alphabet_size=3,
        task__feature_dim=3,
        task__sigma=0.3,
        task__max_symbols=4,
        data__train_count=12,
        data__eval_count=6,
        student__layer_widths="4",
        student__kernel_widths="3",
        train__batch_size=4,
        train__stage1_epochs=2,
        train__stage2_epochs=2,
    )
    base.update(settings)
    return make_config(**base)


def tiny_teacher(cfg, seed=99, family="tdnn") -> Checkpoint:
    if family == "tdnn":
        spec = EncoderSpec("tdnn", cfg.task.feature_dim, (6,), cfg.task.num_classes, kernel_widths=(3,))
    else:
        spec = EncoderSpec("rnn", cfg.task.feature_dim, (3,), cfg.task.num_classes, bidirectional=True)
    return Checkpoint.from_encoder(build(spec, Rng(seed)))


def oracle_teacher(task, scale: float = 20.0) -> Checkpoint:
    """Nearest-template classifier that decodes noiseless data perfectly.

    hidden = [relu(x), relu(-x)] recovers x; the logit of label c is
    scale * (t_c . x - |t_c|^2 / 2), maximal for the closest template, and
    the blank logit is 0, which wins on silence (x = 0).
    """
    d, k = task.feature_dim, task.num_classes
    spec = EncoderSpec("tdnn", d, (2 * d,), k, kernel_widths=(1,))
    eye = np.eye(d)
    t = task.templates
    out_w = np.zeros((2 * d, k))
    out_w[:d, : k - 1] = scale * t.T
    out_w[d:, : k - 1] = -scale * t.T
    out_b = np.zeros(k)
    out_b[: k - 1] = -scale * 0.5 * np.sum(t**2, axis=1)
    params = {
        "layer0.weight": np.concatenate([eye, -eye], axis=1)[None],
        "layer0.bias": np.zeros(2 * d),
        "output.weight": out_w,
        "output.bias": out_b,
    }
    return Checkpoint(spec, params)


def spike_checkpoint(spec: EncoderSpec, label: int, height: float, rng_seed: int = 0) -> Checkpoint:
    """Model whose posterior spikes on ``label`` at every frame, regardless of input."""
    ckpt = Checkpoint.from_encoder(build(spec, Rng(rng_seed)))
    ckpt.params["output.weight"][:] = 0.0
    bias = np.full(spec.alphabet_size, -height)
    bias[label] = height
    ckpt.params["output.bias"][:] = bias
    return ckpt


# -- acceptance report ------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and remember one PASS/FAIL line; the caller asserts afterwards."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
