"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines; the suite asserts every criterion at its stated tolerance.
"""

import copy
import statistics
import time

import numpy as np
import pytest
import torch

from skd.data import (
    ArrayDataset,
    FractionSample,
    Splits,
    apply_fraction,
    make_classification_data,
    make_segmentation_data,
    sample_fraction,
)
from skd.harness import RunStore, config_digest, render_report, run_experiment
from skd.losses import (
    attention_loss,
    cross_entropy,
    fsp_loss,
    simultaneous_loss,
    stage_mse,
)
from skd.metrics import mean_iou, top1_accuracy
from skd.models import RESNET_STAGE_BLOCKS, build_resnet, count_params_flops, parameter_digest
from skd.training import (
    DistillConfig,
    evaluate,
    run_method,
    train_at,
    train_no_teacher,
    train_simultaneous,
    train_stagewise,
    train_traditional,
)

from oracles import (
    attention_loss_oracle,
    ce_oracle,
    fsp_loss_oracle,
    mean_iou_oracle,
    mse_oracle,
    resnet_param_oracle,
    simultaneous_oracle,
)

torch.set_num_threads(2)

REFERENCE_PARAMS = {34: 21.550e6, 26: 17.712e6, 20: 12.622e6, 14: 11.072e6, 10: 5.171e6}


def report(number, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion {number}: {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {number} failed: {name} {detail}"


def t64(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)


def test_criterion_1_loss_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(20):
        m = int(rng.integers(1, 4))
        shapes = [(m, int(rng.integers(1, 4)), h, h) for h in (8, 4, 4, 2)]
        t_taps = [rng.normal(size=s) for s in shapes]
        s_taps = [rng.normal(size=s) for s in shapes]
        logits = rng.normal(size=(m, 5)) * 2
        labels = rng.integers(0, 5, size=m)

        pairs = [
            (stage_mse(t64(t_taps[0]), t64(s_taps[0])).item(),
             mse_oracle(t_taps[0], s_taps[0])),
            (stage_mse(t64(t_taps[1]), t64(s_taps[1]), "full_mean").item(),
             mse_oracle(t_taps[1], s_taps[1], "full_mean")),
            (cross_entropy(t64(logits), torch.tensor(labels)).item(),
             ce_oracle(logits, labels)),
            (simultaneous_loss([t64(t) for t in t_taps], [t64(s) for s in s_taps],
                               t64(logits), torch.tensor(labels)).item(),
             simultaneous_oracle(t_taps, s_taps, logits, labels)),
            (fsp_loss([t64(s) for s in s_taps], [t64(t) for t in t_taps]).item(),
             fsp_loss_oracle(s_taps, t_taps)),
            (attention_loss([t64(s) for s in s_taps], [t64(t) for t in t_taps]).item(),
             attention_loss_oracle(s_taps, t_taps)),
        ]
        for got, expect in pairs:
            worst = max(worst, abs(got - expect))
    elapsed = time.perf_counter() - start
    report(1, "loss oracles", worst < 1e-6 and elapsed < 10,
           f"worst abs err {worst:.2e}, {elapsed:.1f}s")


def _fd_grads(fn, tensors, eps=1e-6):
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def test_criterion_2_gradient_checks():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0

    def check(fn, tensors):
        nonlocal worst
        for t in tensors:
            t.requires_grad_(True)
        analytic = torch.autograd.grad(fn(), tensors)
        with torch.no_grad():
            numeric = _fd_grads(fn, tensors)
        for a, n in zip(analytic, numeric):
            rel = (a - n).norm().item() / max(a.norm().item(), n.norm().item(), 1e-12)
            worst = max(worst, rel)
        for t in tensors:
            t.requires_grad_(False)

    shapes = [(2, 2, h, h) for h in (8, 4, 4, 2)]
    t_taps = [t64(rng.normal(size=s)) for s in shapes]
    s_taps = [t64(rng.normal(size=s)) for s in shapes]
    logits = t64(rng.normal(size=(3, 5)))
    labels = torch.tensor(rng.integers(0, 5, size=3))
    small_t, small_s = t64(rng.normal(size=(2, 3, 4, 4))), t64(rng.normal(size=(2, 3, 4, 4)))

    check(lambda: stage_mse(small_t, small_s), [small_s])
    check(lambda: cross_entropy(logits, labels), [logits])
    check(lambda: simultaneous_loss(t_taps, s_taps, logits, labels), s_taps + [logits])
    check(lambda: fsp_loss(s_taps, t_taps), s_taps)
    check(lambda: attention_loss(s_taps, t_taps), s_taps)
    elapsed = time.perf_counter() - start
    report(2, "gradient checks", worst < 1e-4 and elapsed < 60,
           f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_reference_sizes():
    start = time.perf_counter()
    details = []
    ok = True
    flops = []
    for variant in (10, 14, 18, 20, 26, 34):
        net = build_resnet(variant, 1000)
        rep = count_params_flops(net, (3, 224, 224))
        analytic = resnet_param_oracle(RESNET_STAGE_BLOCKS[variant], 1000)
        ok &= rep.parameter_count == analytic
        if variant in REFERENCE_PARAMS:
            err = abs(rep.parameter_count - REFERENCE_PARAMS[variant]) / REFERENCE_PARAMS[variant]
            ok &= err < 0.03
            details.append(f"R{variant} {err * 100:.2f}%")
        flops.append(rep.flop_count)
    ok &= flops == sorted(flops) and len(set(flops)) == len(flops)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30
    report(3, "reference parameter counts and FLOP ordering", ok,
           ", ".join(details) + f", {elapsed:.1f}s")


def _tiny_splits(n_train=16, n_val=8, seed=0):
    return make_classification_data(n_train, n_val, num_classes=2, size=32,
                                    noise=0.2, seed=seed)


def test_criterion_4_freeze_invariants():
    start = time.perf_counter()
    data = _tiny_splits()
    cfg = DistillConfig(method="stagewise", epochs_per_stage=2, learning_rate=1e-3,
                        seed=0, batch_size=8)
    teacher = build_resnet(14, 2, seed=1).freeze_all()
    student = build_resnet(10, 2, seed=2)
    ok = True

    _, log = train_stagewise(teacher, student, data, cfg)
    names = student.stage_names
    previous = None
    for phase, expected in zip(log.phases, names):
        if previous is not None:
            for name in names:
                same = phase.stage_digests[name] == previous[name]
                ok &= same if name != expected else not same
        previous = phase.stage_digests

    for method in ("stagewise", "simultaneous", "traditional", "fsp", "at", "none"):
        teacher = build_resnet(14, 2, seed=1).freeze_all()
        before = parameter_digest(teacher)
        mcfg = DistillConfig(method=method, epochs_per_stage=2, learning_rate=1e-3,
                             seed=0, batch_size=8)
        run_method(method, teacher if method != "none" else None,
                   build_resnet(10, 2, seed=2), data, mcfg)
        ok &= parameter_digest(teacher) == before
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    report(4, "freeze invariants (stage isolation, teacher immutability)", ok,
           f"{elapsed:.0f}s")


def test_criterion_5_algorithm_structure():
    data = _tiny_splits()
    teacher = build_resnet(14, 2, seed=1).freeze_all()
    cfg = lambda m: DistillConfig(method=m, epochs_per_stage=1, learning_rate=1e-3,
                                  seed=0, batch_size=8)
    _, sw = train_stagewise(teacher, build_resnet(10, 2, seed=2), data, cfg("stagewise"))
    _, tr = train_traditional(teacher, build_resnet(10, 2, seed=2), data, cfg("traditional"))
    _, fs = run_method("fsp", teacher, build_resnet(10, 2, seed=2), data, cfg("fsp"))
    _, si = train_simultaneous(teacher, build_resnet(10, 2, seed=2), data, cfg("simultaneous"))
    _, at = train_at(teacher, build_resnet(10, 2, seed=2), data, cfg("at"))
    _, nt = train_no_teacher(build_resnet(10, 2, seed=2), data, cfg("none"))
    ok = ([p.name for p in sw.phases] == ["stage1", "stage2", "stage3", "stage4", "head"]
          and len(tr.phases) == 2 and len(fs.phases) == 2
          and len(si.phases) == 1 and len(at.phases) == 1 and len(nt.phases) == 1)
    report(5, "phase structure (5 stagewise, 2 two-phase, 1 single-phase)", ok)


def test_criterion_6_identity_distillation():
    data = _tiny_splits()
    teacher = build_resnet(10, 2, seed=3).freeze_all()
    student = build_resnet(10, 2, seed=4)
    student.load_state_dict(copy.deepcopy(teacher.state_dict()))
    cfg = DistillConfig(method="stagewise", epochs_per_stage=2, learning_rate=1e-3,
                        seed=0, batch_size=8)
    _, log = train_stagewise(teacher, student, data, cfg)
    initial = [p.entries[0].train_loss for p in log.phases[:-1]]
    later = [e.train_loss for p in log.phases[:-1] for e in p.entries]
    ok = all(v == 0.0 for v in initial) and all(v < 1e-8 for v in later)
    report(6, "identity distillation stays at zero loss", ok,
           f"max stage loss {max(later):.2e}")


# desk-scale directional benchmark settings (criterion 7)
BENCH = dict(n_train=200, n_val=100, size=32, noise=0.25, data_seed=123,
             lr=3e-3, batch_size=8, teacher_epochs=10, epochs_per_stage=5,
             seeds=(0, 1, 2))


def _bench_train(method, teacher, data, full_val, seed):
    student = build_resnet(10, 2, seed=seed + 10)
    cfg = DistillConfig(method=method, epochs_per_stage=BENCH["epochs_per_stage"],
                        learning_rate=BENCH["lr"], seed=seed, batch_size=BENCH["batch_size"])
    if method == "none":
        train_no_teacher(student, data, cfg)
    else:
        train_stagewise(teacher, student, data, cfg)
    return evaluate(student, full_val)


def test_criterion_7_desk_scale_direction():
    start = time.perf_counter()
    data = make_classification_data(BENCH["n_train"], BENCH["n_val"], num_classes=2,
                                    size=BENCH["size"], noise=BENCH["noise"],
                                    seed=BENCH["data_seed"])
    teacher = build_resnet(14, 2, seed=0)
    tcfg = DistillConfig(method="none", epochs_per_stage=BENCH["teacher_epochs"],
                         learning_rate=BENCH["lr"], seed=0, batch_size=BENCH["batch_size"])
    train_no_teacher(teacher, data, tcfg)
    teacher_acc = evaluate(teacher, data.val)
    teacher.freeze_all()

    medians = {}
    for fraction in (1.0, 0.25):
        accs = {"none": [], "stagewise": []}
        for seed in BENCH["seeds"]:
            if fraction < 1.0:
                sub = apply_fraction(data.train, sample_fraction(data.train, fraction, seed))
                d = Splits(train=sub, val=data.val)
            else:
                d = data
            for method in ("none", "stagewise"):
                accs[method].append(_bench_train(method, teacher, d, data.val, seed))
        medians[fraction] = {m: statistics.median(v) for m, v in accs.items()}

    gap_full = medians[1.0]["stagewise"] - medians[1.0]["none"]
    gap_quarter = medians[0.25]["stagewise"] - medians[0.25]["none"]
    elapsed = time.perf_counter() - start
    ok = (teacher_acc >= 0.90
          and medians[1.0]["stagewise"] >= medians[1.0]["none"]
          and gap_quarter >= gap_full
          and elapsed < 45 * 60)
    report(7, "desk-scale direction (distilled >= plain, gap holds at 25% data)", ok,
           f"teacher {teacher_acc:.2f}; full: skd {medians[1.0]['stagewise']:.2f} "
           f"vs none {medians[1.0]['none']:.2f}; quarter: skd {medians[0.25]['stagewise']:.2f} "
           f"vs none {medians[0.25]['none']:.2f}; {elapsed / 60:.1f}min")


def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(50):
        c = int(rng.integers(2, 6))
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)), int(rng.integers(2, 8)))
        ignore = c if trial % 2 else None
        hi = c + 1 if ignore is not None else c
        labels = rng.integers(0, hi, size=shape)
        if ignore is not None and (labels != ignore).sum() == 0:
            labels.flat[0] = 0
        preds = rng.integers(0, c, size=shape)
        got = mean_iou(preds, labels, c, ignore_index=ignore)
        expect = mean_iou_oracle(preds, labels, c, ignore)
        worst = max(worst, abs(got - expect))
    acc_exact = True
    for _ in range(20):
        n = int(rng.integers(1, 50))
        preds = rng.integers(0, 4, size=n)
        labels = rng.integers(0, 4, size=n)
        acc_exact &= top1_accuracy(preds, labels) == (preds == labels).sum() / n
    report(8, "metric oracles (mean IoU brute force, exact accuracy)",
           worst < 1e-12 and acc_exact, f"worst IoU err {worst:.1e}")


def test_criterion_9_fraction_sampler(tmp_path):
    per_class, classes = 40, 5
    labels = np.repeat(np.arange(classes), per_class)
    ds = ArrayDataset(np.zeros((len(labels), 3, 2, 2), np.float32), labels,
                      "classification", classes)
    ok = True
    for fraction in (0.1, 0.2, 0.25, 0.3, 0.4):
        sample = sample_fraction(ds, fraction, seed=9)
        counts = np.bincount(labels[sample.indices], minlength=classes)
        ok &= all(abs(c - fraction * per_class) <= 1 for c in counts)
    a = sample_fraction(ds, 0.3, seed=4)
    b = sample_fraction(ds, 0.3, seed=4)
    ok &= a.indices == b.indices
    path = a.save(tmp_path / "sample.json")
    restored = FractionSample.load(path)
    ok &= restored.indices == a.indices and restored.fraction == a.fraction
    report(9, "fraction sampler (balance, determinism, round trip)", ok)


def test_criterion_10_harness_determinism(tmp_path):
    cfg = {
        "preset": "desk", "dataset": "synthetic_cls", "method": "stagewise",
        "synthetic": {"n_train": 16, "n_val": 8, "resolution": 32, "seed": 0, "noise": 0.2},
        "epochs_per_stage": 1, "teacher_epochs": 1, "batch_size": 8, "seed": 0,
    }
    records, csvs = [], []
    for store in ("a", "b"):
        record = run_experiment(dict(cfg), runs_dir=tmp_path / store)
        records.append(record)
        rows = [r for r in RunStore(tmp_path / store).iter_records()
                if r.config["method"] == "stagewise"]
        csv_text, _ = render_report(rows, "classification_table")
        csvs.append(csv_text)
    ok = records[0].digest == records[1].digest
    ok &= records[0].final_metric == records[1].final_metric
    ok &= csvs[0] == csvs[1]
    rerun = run_experiment(dict(cfg), runs_dir=tmp_path / "a")
    ok &= rerun.created_at == records[0].created_at  # skipped, not re-executed
    report(10, "harness determinism (equal digests, identical CSV, skip on rerun)", ok,
           f"digest {records[0].digest}")
