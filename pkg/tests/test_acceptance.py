"""Acceptance suite: one test per criterion, each printing a PASS line.

Full-scale benchmark accuracies from the literature are not reproducible at
desk scale (no pretrained checkpoints, CPU-only budgets), so the criteria
here are identities, oracle equivalences, gradient checks, desk-scale
training behavior, structural resource claims, and format guarantees. Every
tolerance is pinned in this module.
"""
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

import edkd
from edkd.data import DatasetSplits, preprocess_images, synthetic_dataset
from edkd.embed_cache import build_cache, float64_twin, load_cache, sample_per_class, save_cache
from edkd.errors import FormatError, StalenessError, ValidationError
from edkd.losses import (
    DistillationInputs,
    LossWeights,
    clip_loss,
    cross_entropy_rows,
    distillation_loss,
    identity_targets,
    kl_distill_loss,
    one_hot_targets,
    project_teacher,
    similarity_logits,
)
from edkd.metrics import static_memory_estimate
from edkd.model import (
    ModelConfig,
    ViTEncoder,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from edkd.trainer import ExperimentConfig, alpha_sweep, train

from conftest import central_difference_grads, sample_coords

STUDENT = ModelConfig(layers=2, embed_dim=64, heads=4, mlp_dim=128,
                      patch_size=4, image_size=16, num_classes=10)
DESK_TEACHER = ModelConfig(layers=3, embed_dim=96, heads=4, mlp_dim=192,
                           patch_size=4, image_size=16, num_classes=10)
LARGE_32_TEACHER = ModelConfig(layers=24, embed_dim=1024, heads=16, mlp_dim=4096,
                               patch_size=32, image_size=224, num_classes=100)


def report_pass(name):
    print(f"\nACCEPTANCE PASS: {name}")


def randn64(*shape, seed=0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_full_scale_figures_out_of_scope():
    """Full-scale benchmark accuracies need pretrained hub teachers and
    multi-day runs; the substitute property suite in this module is the
    binding check.
    """
    substitutes = [
        "test_loss_identity_suite",
        "test_gradient_suite",
        "test_oracle_equivalence_suite",
        "test_desk_scale_training",
        "test_structural_memory_and_time",
        "test_alpha_sweep_interior_optimum",
        "test_format_suite",
    ]
    for name in substitutes:
        assert name in globals(), f"substitute criterion {name} missing"
    report_pass("full-scale accuracy figures out of scope; property suite substituted")


def test_loss_identity_suite():
    start = time.perf_counter()

    # uniform logits over M=100 classes -> ln(100), within 1e-6
    uniform = cross_entropy_rows(
        torch.zeros(8, 100, dtype=torch.float64),
        one_hot_targets(list(range(8)), 100).double(),
    )
    assert abs(float(uniform) - math.log(100)) < 1e-6

    # orthonormal identity embeddings at B=2 -> ln(1 + e^-1), within 1e-6
    eye = torch.eye(2, dtype=torch.float64)
    identity_clip = clip_loss(eye, eye, eye)
    assert abs(float(identity_clip) - math.log(1 + math.exp(-1))) < 1e-6

    # KL of identical logits -> 0 within 1e-9
    z = randn64(16, 10, seed=1)
    assert abs(float(kl_distill_loss(z, z))) < 1e-9

    # alpha2 = 0 makes the total exactly the weighted supervised loss
    z_s = randn64(4, 10, seed=2)
    labels = [0, 1, 2, 3]
    ce = cross_entropy_rows(z_s, one_hot_targets(labels, 10).double())
    aux = DistillationInputs(teacher_logits=randn64(4, 10, seed=3))
    total = distillation_loss("regular-kd", z_s, labels, aux, LossWeights(1.0, 0.0)).total
    assert float(total) == float(ce)
    supervised = distillation_loss("supervised-only", z_s, labels, None, LossWeights(1.0, 0.0)).total
    assert float(supervised) == float(ce)

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"loss identities took {elapsed:.2f}s"
    report_pass(f"loss identity suite ({elapsed * 1000:.0f}ms)")


def test_gradient_suite():
    start = time.perf_counter()
    checks = 0

    def check(analytic, value_fn, tensor, seed):
        nonlocal checks
        coords = sample_coords(tensor.numel(), 32, seed)
        fd = central_difference_grads(value_fn, tensor, coords)
        got = analytic.detach().reshape(-1).numpy()[coords]
        np.testing.assert_allclose(got, fd, rtol=1e-3, atol=1e-8)
        checks += 1

    # clip loss wrt student embeddings and the projection
    e_s = randn64(6, 8, seed=0).requires_grad_(True)
    raw_t = randn64(6, 8, seed=1)
    w_proj = randn64(8, 8, seed=2).requires_grad_(True)
    targets = identity_targets(6, torch.float64)
    loss = clip_loss(e_s, project_teacher(raw_t, w_proj), targets)
    g_es, g_w = torch.autograd.grad(loss, [e_s, w_proj])

    def clip_value():
        with torch.no_grad():
            return float(clip_loss(e_s, project_teacher(raw_t, w_proj), targets))

    check(g_es, clip_value, e_s, seed=0)
    check(g_w, clip_value, w_proj, seed=1)

    # KL distillation wrt student logits
    z_s = randn64(6, 8, seed=3).requires_grad_(True)
    z_t = randn64(6, 8, seed=4)
    (g_z,) = torch.autograd.grad(kl_distill_loss(z_s, z_t, 2.0), [z_s])

    def kl_value():
        with torch.no_grad():
            return float(kl_distill_loss(z_s, z_t, 2.0))

    check(g_z, kl_value, z_s, seed=2)

    # full model forward + composite loss on a <=2-layer, <=16-dim config
    model = init_model(
        ModelConfig(layers=2, embed_dim=16, heads=2, mlp_dim=32,
                    patch_size=8, image_size=16, num_classes=4),
        seed=6, dtype=torch.float64,
    )
    x = randn64(2, 16, 16, 3, seed=7)
    labels = [0, 1]
    proto = randn64(4, 16, seed=8)
    weights = LossWeights(0.5, 0.5)

    def model_loss():
        out = model(x)
        aux = DistillationInputs(
            student_embedding=out.cls_embedding,
            teacher_embedding=proto,
            targets=one_hot_targets(labels, 4).double(),
        )
        return distillation_loss("clip-embed", out.logits, labels, aux, weights).total

    grads = torch.autograd.grad(model_loss(), list(model.parameters()))

    def model_value():
        with torch.no_grad():
            return float(model_loss())

    for i, (name, param) in enumerate(model.named_parameters()):
        check(grads[i], model_value, param, seed=10 + i)

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    report_pass(f"gradient suite ({checks} tensors, {elapsed:.1f}s)")


def test_oracle_equivalence_suite():
    rng = np.random.default_rng(42)

    # similarity vs scalar cosine loop, 100 instances, 64-bit
    for _ in range(100):
        b, m, d = rng.integers(1, 7, size=3)
        e_s = rng.normal(size=(b, d)) * rng.uniform(0.1, 10)
        e_t = rng.normal(size=(m, d)) * rng.uniform(0.1, 10)
        got = similarity_logits(torch.from_numpy(e_s), torch.from_numpy(e_t)).numpy()
        want = np.empty((b, m))
        for i in range(b):
            for j in range(m):
                nu = max(math.sqrt(float((e_s[i] ** 2).sum())), 1e-8)
                nv = max(math.sqrt(float((e_t[j] ** 2).sum())), 1e-8)
                want[i, j] = float((e_s[i] * e_t[j]).sum()) / (nu * nv)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    # row cross entropy vs brute-force definition, 100 instances, 64-bit
    for _ in range(100):
        b, m = rng.integers(1, 7, size=2)
        logits = rng.normal(size=(b, m)) * 3.0
        hot = np.zeros((b, m))
        hot[np.arange(b), rng.integers(0, m, size=b)] = 1.0
        got = float(cross_entropy_rows(torch.from_numpy(logits), torch.from_numpy(hot)))
        want = 0.0
        for i in range(b):
            probs = np.exp(logits[i]) / np.exp(logits[i]).sum()
            want += -math.log(probs[int(hot[i].argmax())])
        want /= b
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    # cache averaging vs independent one-by-one recomputation + mean, bit-exact
    teacher = init_model(
        ModelConfig(layers=1, embed_dim=12, heads=2, mlp_dim=24,
                    patch_size=8, image_size=8, num_classes=4),
        seed=9,
    )
    instances = 0
    worker = float64_twin(teacher)
    for trial in range(25):
        data = synthetic_dataset(4, 6, 8, seed=800 + trial, noise=0.3)
        cache = build_cache(teacher, data, n=4, seed=trial, batch_size=3)
        picks = sample_per_class(data, 4, seed=trial)
        for c, indices in enumerate(picks):
            acc = np.zeros(12, dtype=np.float64)
            for i in indices:
                with torch.no_grad():
                    x = preprocess_images(data.images[i : i + 1], 8, torch.float64)
                    acc += worker(x).cls_embedding[0].numpy()
            np.testing.assert_array_equal(cache.table[c], (acc / len(indices)).astype(np.float32))
            instances += 1
    assert instances == 100
    report_pass("oracle equivalence suite (3 x 100 instances)")


@pytest.fixture(scope="module")
def desk_setup():
    """Shared desk-scale data, locally trained teacher, and embedding cache."""
    splits = DatasetSplits(
        train=synthetic_dataset(10, 48, 16, seed=100, noise=0.12),
        val=synthetic_dataset(10, 16, 16, seed=101, noise=0.12),
    )
    teacher_cfg = ExperimentConfig(
        mode="supervised-only", student=DESK_TEACHER, epochs=8, batch_size=32,
        base_lr=2e-3, seed=7, student_image_size=16, teacher_image_size=16,
    )
    teacher = train(teacher_cfg, splits).student
    cache = build_cache(teacher, splits.train, n=16, seed=7)
    return splits, teacher, cache


def test_desk_scale_training(desk_setup):
    splits, teacher, cache = desk_setup
    start = time.perf_counter()
    results = {}
    for mode in ("supervised-only", "regular-kd", "clip-teacher", "clip-embed"):
        config = ExperimentConfig(
            mode=mode,
            student=STUDENT,
            teacher=DESK_TEACHER if mode in ("regular-kd", "clip-teacher") else None,
            cache_path="<injected>" if mode == "clip-embed" else None,
            epochs=20, batch_size=32, base_lr=1e-3, seed=0,
            student_image_size=16, teacher_image_size=16,
        )
        report = train(
            config, splits,
            teacher=teacher if mode in ("regular-kd", "clip-teacher") else None,
            cache=cache if mode == "clip-embed" else None,
        )
        results[mode] = report

        assert report.final_accuracy > 0.5, (
            f"{mode}: accuracy {report.final_accuracy:.3f} not above 0.5 (chance 0.1)"
        )
        first5 = [r.loss_total for r in report.epochs[:5]]
        assert all(a > b for a, b in zip(first5, first5[1:])), (
            f"{mode}: first-5-epoch loss not strictly decreasing: {first5}"
        )

    assert results["clip-embed"].teacher_forward_passes == 0
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0, f"desk-scale training took {elapsed:.0f}s"
    summary = ", ".join(f"{m}={r.final_accuracy:.2f}" for m, r in results.items())
    report_pass(f"desk-scale training ({summary}, {elapsed:.0f}s)")


def _write_config(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh)
    return str(path)


def test_structural_memory_and_time(tmp_path):
    # static teacher-side ratio with the 24-layer/1024-dim teacher, anchored
    # by a per-tensor enumeration of the actually built model
    enumerated = sum(p.numel() for p in ViTEncoder(LARGE_32_TEACHER).parameters())
    assert param_count(LARGE_32_TEACHER) == enumerated

    base_student = ModelConfig(layers=6, embed_dim=256, heads=8, mlp_dim=1024,
                               patch_size=4, image_size=32, num_classes=100)
    teacher_cfg = ExperimentConfig(
        mode="clip-teacher", student=base_student, teacher=LARGE_32_TEACHER,
        student_image_size=32, teacher_image_size=224,
    )
    embed_cfg = ExperimentConfig(
        mode="clip-embed", student=base_student, cache_path="x",
        student_image_size=32, teacher_image_size=224,
    )
    teacher_bytes = static_memory_estimate(teacher_cfg)["teacher"]
    table_bytes = static_memory_estimate(embed_cfg, teacher_embed_dim=1024)["embedding_table"]
    assert table_bytes == 409_600
    ratio = teacher_bytes / table_bytes
    assert ratio >= 59, f"static teacher/table ratio {ratio:.0f} below 59"

    # measured whole-run comparison: fresh process per mode via the CLI
    teacher = {"layers": 8, "embed_dim": 512, "heads": 8, "mlp_dim": 2048,
               "patch_size": 16, "image_size": 224, "num_classes": 10}
    base = {
        "mode": "clip-teacher",
        "run_name": "measure",
        "student": {"layers": 2, "embed_dim": 64, "heads": 4, "mlp_dim": 128,
                    "patch_size": 4, "image_size": 16, "num_classes": 10},
        "teacher": teacher,
        "data": {"source": "synthetic", "num_classes": 10, "per_class": 8,
                 "val_per_class": 4, "image_size": 16, "seed": 3},
        "epochs": 2, "batch_size": 16, "base_lr": 1e-3, "seed": 0,
        "student_image_size": 16, "teacher_image_size": 224,
        "cache_samples_per_class": 4,
    }
    out = str(tmp_path / "runs")
    env = dict(os.environ, EDKD_THREADS="2")

    def cli(*args):
        proc = subprocess.run(
            [sys.executable, "-m", "edkd.cli", *args],
            capture_output=True, text=True, env=env,
        )
        assert proc.returncode == 0, proc.stderr
        return proc

    config_path = _write_config(tmp_path / "measure.json", base)
    cli("precompute", "--config", config_path, "--out", out)
    cache_path = os.path.join(out, "measure", "cache.edkc")

    cli("train", "--config", config_path, "--out", out, "--set", "run_name=teacher-mode")
    cli("train", "--config", config_path, "--out", out, "--set", "run_name=embed-mode",
        "--mode", "clip-embed", "--set", f"cache_path={cache_path}")

    with open(os.path.join(out, "teacher-mode", "report.json")) as fh:
        teacher_run = json.load(fh)
    with open(os.path.join(out, "embed-mode", "report.json")) as fh:
        embed_run = json.load(fh)

    peak_teacher = teacher_run["resource_profile"]["peak_bytes_measured"]
    peak_embed = embed_run["resource_profile"]["peak_bytes_measured"]
    assert peak_teacher is not None and peak_embed is not None
    assert peak_embed < peak_teacher, (
        f"clip-embed peak {peak_embed / 1e6:.0f}MB not below clip-teacher "
        f"{peak_teacher / 1e6:.0f}MB"
    )

    epoch_teacher = teacher_run["wall_seconds"] / teacher_run["config"]["epochs"]
    epoch_embed = embed_run["wall_seconds"] / embed_run["config"]["epochs"]
    assert epoch_embed < epoch_teacher, (
        f"clip-embed epoch {epoch_embed:.2f}s not below clip-teacher {epoch_teacher:.2f}s"
    )

    assert embed_run["teacher_forward_passes"] == 0
    report_pass(
        f"structural memory and time (static ratio {ratio:.0f}x, peak "
        f"{peak_embed / 1e6:.0f}MB < {peak_teacher / 1e6:.0f}MB, epoch "
        f"{epoch_embed:.2f}s < {epoch_teacher:.2f}s)"
    )


def test_alpha_sweep_interior_optimum():
    noise, jitter = 0.25, 0.6
    teacher_data = DatasetSplits(
        train=synthetic_dataset(10, 160, 16, seed=500, noise=noise, brightness_jitter=jitter),
        val=synthetic_dataset(10, 20, 16, seed=501, noise=noise, brightness_jitter=jitter),
    )
    teacher_cfg = ExperimentConfig(
        mode="supervised-only", student=DESK_TEACHER, epochs=12, batch_size=32,
        base_lr=2e-3, seed=7, student_image_size=16, teacher_image_size=16,
    )
    teacher = train(teacher_cfg, teacher_data).student
    cache = build_cache(teacher, teacher_data.train, n=100, seed=7)

    wins = 0
    summaries = []
    for seed in (0, 1, 2):
        splits = DatasetSplits(
            train=synthetic_dataset(10, 10, 16, seed=600 + seed, noise=noise,
                                    brightness_jitter=jitter),
            val=synthetic_dataset(10, 40, 16, seed=700 + seed, noise=noise,
                                  brightness_jitter=jitter),
        )
        config = ExperimentConfig(
            mode="clip-embed", student=STUDENT, cache_path="<injected>",
            epochs=8, batch_size=16, base_lr=1e-3, seed=seed,
            student_image_size=16, teacher_image_size=16,
        )
        reports = alpha_sweep(config, [0.0, 0.25, 0.5, 0.75, 1.0], splits, cache=cache)
        accuracy = {r.alpha2: r.final_accuracy for r in reports}
        interior_best = max(accuracy[a] for a in (0.25, 0.5, 0.75))
        endpoint_best = max(accuracy[0.0], accuracy[1.0])
        if interior_best > endpoint_best:
            wins += 1
        summaries.append(
            "seed %d: %s" % (seed, " ".join(f"{a:g}:{v:.2f}" for a, v in accuracy.items()))
        )

    assert wins >= 2, "interior alpha2 won only %d/3 seeds\n%s" % (wins, "\n".join(summaries))
    report_pass(f"alpha-sweep interior optimum ({wins}/3 seeds)")


def test_format_suite(tmp_path, desk_setup):
    _, teacher, cache = desk_setup

    # checkpoint round trip is bit-exact
    ckpt = str(tmp_path / "teacher.edkd")
    save_checkpoint(teacher, ckpt)
    reloaded = load_checkpoint(ckpt)
    for (name, a), (_, b) in zip(teacher.named_parameters(), reloaded.named_parameters()):
        assert torch.equal(a, b), name

    # cache round trip is bit-exact
    cache_path = str(tmp_path / "cache.edkc")
    save_cache(cache, cache_path)
    loaded = load_cache(cache_path)
    np.testing.assert_array_equal(loaded.table, cache.table)
    assert (loaded.teacher_digest, loaded.dataset_digest, loaded.seed) == (
        cache.teacher_digest, cache.dataset_digest, cache.seed,
    )

    # corruption and truncation are rejected with format errors
    for path, loader in ((ckpt, load_checkpoint), (cache_path, load_cache)):
        blob = open(path, "rb").read()
        bad_magic = str(tmp_path / "magic.bin")
        open(bad_magic, "wb").write(b"XXXX" + blob[4:])
        with pytest.raises(FormatError):
            loader(bad_magic)
        truncated = str(tmp_path / "short.bin")
        open(truncated, "wb").write(blob[: len(blob) // 3])
        with pytest.raises(FormatError):
            loader(truncated)

    # stale provenance is a distinct error class
    with pytest.raises(StalenessError):
        load_cache(cache_path, expected_teacher_digest="0" * 64)

    # CIFAR-100 record framing is validated exactly
    record = bytes([1, 2]) + bytes(3072)
    cifar_dir = tmp_path / "cifar"
    cifar_dir.mkdir()
    (cifar_dir / "train.bin").write_bytes(record * 3)
    assert len(edkd.load_cifar100(str(cifar_dir), "train")) == 3
    (cifar_dir / "train.bin").write_bytes(record * 3 + b"\x01")
    with pytest.raises(FormatError):
        edkd.load_cifar100(str(cifar_dir), "train")
    bad_label = bytes([1, 255]) + bytes(3072)
    (cifar_dir / "train.bin").write_bytes(bad_label)
    with pytest.raises(ValidationError):
        edkd.load_cifar100(str(cifar_dir), "train")

    report_pass("format suite")
