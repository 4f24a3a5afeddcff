"""Acceptance gate. Each test prints one PASS/FAIL line (collected in the summary).

Criteria 1-5 are fast property checks. Criteria 6-10 drive complete
desk-scale runs through the command line and take over an hour on a
single CPU core.
"""

import copy
import itertools
import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from jointflow import runconfig
from jointflow.cli import load_splits, main
from jointflow.data import make_synthetic
from jointflow.evaluation import (
    accuracy,
    aggregate_runs,
    arc_curve,
    auc_ovr,
    binary_auc,
    evaluate_records,
)
from jointflow.flow import flow_matching_loss, sample_training_batch
from jointflow.model import toy_config
from jointflow.palette import build_palette, decode_prediction, encode_label
from jointflow.pipelines import (
    Checkpoint,
    TrainConfig,
    classify_batch,
    load_autoencoder,
    load_checkpoint,
    reconstruction_mse,
    save_checkpoint,
    train,
)
from jointflow.solver import IntegrationSpec, integrate

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# pinned thresholds
SOLVER_TOL = 1e-12
DECAY_4_STEPS = 0.31640625
GRADCHECK_TOL = 1e-3
GRADCHECK_EPS = 1e-5
NOISY_ENCODES = 10_000
STUB_DIST_TOL = 1e-9
AUC_TOL = 1e-9
AUC_INSTANCES = 200
DESK_ACC, DESK_AUC, DESK_MINUTES = 0.90, 0.95, 20.0
ARC_SLACK = 0.005
GRAY_AUC_SLACK = 0.01
VAE_MSE, LATENT_ACC, LATENT_MINUTES = 0.02, 0.85, 40.0


# ---------------------------------------------------------------- fast criteria


def test_c01_solver_exactness(report):
    t0 = time.perf_counter()

    def constant(x, y, t):
        return torch.full_like(x, 0.37), torch.full_like(y, -1.3)

    x0 = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    x, y = integrate(constant, x0, x0.clone(), IntegrationSpec(0.0, 1.0, 25))
    err = max((x - 0.37).abs().max().item(), (y + 1.3).abs().max().item())

    one = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    xd, _ = integrate(lambda x, y, t: (-x, -y), one, one.clone(), IntegrationSpec(0.0, 1.0, 4))
    elapsed = time.perf_counter() - t0
    ok = err <= SOLVER_TOL and xd.item() == DECAY_4_STEPS and elapsed < 1.0
    report(1, ok, f"constant-field error {err:.1e} (<= {SOLVER_TOL}), v=-x 4 steps -> {xd.item()!r}, {elapsed:.3f}s")


class _TinyField(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.mix = torch.nn.Conv2d(6, 6, 1)
        self.time = torch.nn.Parameter(torch.zeros(6))

    def forward(self, x, y, t):
        h = self.mix(torch.cat([x, y], 1)) + t[:, None, None, None] * self.time[None, :, None, None]
        return h[:, :3], h[:, 3:]


def test_c02_gradient_check(report):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    field = _TinyField().double()
    with torch.no_grad():
        for p in field.parameters():
            p.normal_(0, 0.3)
    n_params = sum(p.numel() for p in field.parameters())
    rng = np.random.default_rng(0)
    images = torch.as_tensor(rng.uniform(-1, 1, (4, 3, 8, 8)), dtype=torch.float64)
    batch = sample_training_batch(images, [0, 1, 2, 3], build_palette(4), 1.0, rng)

    def loss():
        vx, vy = field(batch.xt, batch.yt, batch.t)
        return flow_matching_loss(vx, vy, batch, lambda_y=1.0)

    field.zero_grad()
    loss().backward()
    worst = 0.0
    with torch.no_grad():
        for p in field.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + GRADCHECK_EPS
                up = loss().item()
                flat[i] = orig - GRADCHECK_EPS
                down = loss().item()
                flat[i] = orig
                fd = (up - down) / (2 * GRADCHECK_EPS)
                worst = max(worst, abs(fd - grad[i].item()) / max(abs(fd), abs(grad[i].item()), 1e-8))
    elapsed = time.perf_counter() - t0
    ok = n_params <= 1000 and worst < GRADCHECK_TOL and elapsed < 30
    report(2, ok, f"{n_params} params, max rel error {worst:.2e} (< {GRADCHECK_TOL}), {elapsed:.2f}s")


def test_c03_palette_roundtrip(report):
    t0 = time.perf_counter()
    exact = True
    noisy_ok, total = True, 0
    for mode in ("rgb", "grayscale"):
        for k in range(2, 9):
            pal = build_palette(k, mode)
            rng = np.random.default_rng(k)
            for c in range(k):
                exact &= decode_prediction(pal, encode_label(pal, c, 28, 28, 0.0, rng))[:2] == (c, 0.0)
            beta = pal.min_pairwise_distance / 2
            for i in range(NOISY_ENCODES):
                c = i % k
                noisy_ok &= decode_prediction(pal, encode_label(pal, c, 2, 2, beta, rng))[0] == c
            total += NOISY_ENCODES
    elapsed = time.perf_counter() - t0
    ok = exact and noisy_ok and elapsed < 10
    report(3, ok, f"exact roundtrip {exact}, {total} noisy encodes all decoded {noisy_ok}, {elapsed:.2f}s")


class _CodeField:
    dtype = torch.float64

    def __init__(self, code):
        self.code = torch.tensor(np.array(code), dtype=torch.float64)[None, :, None, None]
        self.y1 = None

    def __call__(self, x, y, t):
        if float(t[0]) == 1.0:
            self.y1 = y.clone()
        return torch.zeros_like(x), self.y1 - self.code


def test_c04_stub_classification(report):
    t0 = time.perf_counter()
    pal = build_palette(8)
    images = np.random.default_rng(0).uniform(-1, 1, (4, 28, 28, 3)).astype(np.float32)
    worst, all_right = 0.0, True
    for k in range(8):
        ckpt = Checkpoint(_CodeField(pal.codes[k]), toy_config(), pal,
                          TrainConfig(epochs=2, warmup_epochs=1, beta=1.0), image_shape=(3, 28, 28))
        for rec in classify_batch(ckpt, images, steps=25, runs=2, seed=k):
            all_right &= rec.predicted_class == k
            worst = max(worst, rec.uncertainty)
    elapsed = time.perf_counter() - t0
    ok = all_right and worst < STUB_DIST_TOL and elapsed < 5
    report(4, ok, f"all classes recovered {all_right}, max distance {worst:.1e} (< {STUB_DIST_TOL}), {elapsed:.2f}s")


def _brute_auc(scores, positives):
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    return sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (len(pos) * len(neg))


def test_c05_metric_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(AUC_INSTANCES):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(k, 65))
        labels = rng.integers(0, k, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.uniform(size=(n, k)), 1)
        if k == 2:
            ref = _brute_auc(scores[:, 1], labels == 1)
        else:
            per = [_brute_auc(scores[:, c], labels == c) for c in range(k) if (labels == c).any()]
            ref = sum(per) / len(per)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            worst = max(worst, abs(auc_ovr(scores, labels)[0] - ref))
    examples = [
        accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75,
        binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75,
        binary_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5,
        arc_curve([True, True, False, True], [0.1, 0.2, 0.9, 0.3], [0.0, 0.25])[1].retained_accuracy == 1.0,
        arc_curve([True, True, False, True], [0.1, 0.2, 0.9, 0.3], [0.0])[0].retained_accuracy == 0.75,
        all(p.retained_accuracy == 1.0 for p in arc_curve([True] * 5, [0.3, 0.1, 0.9, 0.2, 0.5])),
        aggregate_runs([0.9] * 5) == (0.9, 0.0),
        np.allclose(aggregate_runs([0.8, 1.0]), (0.9, 2 * math.sqrt(0.02)), atol=1e-12),
    ]
    elapsed = time.perf_counter() - t0
    ok = worst <= AUC_TOL and all(examples) and elapsed < 30
    report(5, ok, f"max |auc - brute| {worst:.1e} over {AUC_INSTANCES} instances, "
                  f"{sum(examples)}/{len(examples)} worked examples, {elapsed:.2f}s")


# ---------------------------------------------------------------- desk-scale runs


def _run(cfg: dict, out: Path, seed=None):
    """Train and classify through the CLI; returns (metrics dict, wall seconds)."""
    out.mkdir(parents=True, exist_ok=True)
    cfg = copy.deepcopy(cfg)
    cfg["out"] = str(out)
    if seed is not None:
        cfg["seed"] = seed
    path = out / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    t0 = time.perf_counter()
    assert main(["train", "--config", str(path)]) == 0
    assert main(["classify", "--config", str(path), "--checkpoint", str(out / "checkpoint.pt")]) == 0
    elapsed = time.perf_counter() - t0
    assert main(["evaluate", "--predictions", str(out / "predictions_test.jsonl")]) == 0
    assert main(["arc", "--predictions", str(out / "predictions_test.jsonl")]) == 0
    return json.loads((out / "metrics.json").read_text()), elapsed


def _desk(name):
    return yaml.safe_load((CONFIGS / name).read_text())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def desk_run(workdir):
    return _run(_desk("desk.yaml"), workdir / "desk")


@pytest.fixture(scope="module")
def latent_run(workdir):
    return _run(_desk("desk_latent.yaml"), workdir / "latent")


def test_c06_desk_scale_pixel(report, desk_run, workdir):
    metrics, elapsed = desk_run
    losses = [float(line.split(",")[1]) for line in (workdir / "desk" / "loss_history.csv").read_text().splitlines()[1:]]
    ok = (metrics["accuracy"] >= DESK_ACC and metrics["auc_macro"] >= DESK_AUC
          and elapsed <= DESK_MINUTES * 60 and losses[-1] < losses[0])
    report(6, ok, f"accuracy {metrics['accuracy']:.4f} (>= {DESK_ACC}), macro AUC {metrics['auc_macro']:.4f} "
                  f"(>= {DESK_AUC}) [{metrics['accuracy_pm']} / {metrics['auc_pm']}], "
                  f"train+classify {elapsed / 60:.1f} min on 1 core (<= {DESK_MINUTES}), "
                  f"loss {losses[0]:.3f} -> {losses[-1]:.3f}")


def test_c07_selective_prediction(report, desk_run):
    metrics, _ = desk_run
    arc = {round(p["rejection_fraction"], 2): p["retained_accuracy"] for p in metrics["arc"]}
    base, half, best = arc[0.0], arc[0.5], max(arc.values())
    ok = half >= base - ARC_SLACK and (base == 1.0 or best > base)
    report(7, ok, f"retained accuracy rho=0 {base:.4f}, rho=0.5 {half:.4f} (>= rho0 - {ARC_SLACK}), max {best:.4f}")


def test_c08_rgb_vs_grayscale(report, workdir):
    cfg = _desk("desk.yaml")
    cfg["dataset"]["synthetic"]["num_classes"] = 6
    rgb, _ = _run(cfg, workdir / "six_rgb")
    cfg["palette_mode"] = "grayscale"
    gray, _ = _run(cfg, workdir / "six_gray")
    ok = rgb["auc_macro"] >= gray["auc_macro"] - GRAY_AUC_SLACK
    report(8, ok, f"6 classes: RGB macro AUC {rgb['auc_macro']:.4f} (acc {rgb['accuracy']:.4f}), "
                  f"grayscale macro AUC {gray['auc_macro']:.4f} (acc {gray['accuracy']:.4f})")


def test_c09_latent_variant(report, latent_run, workdir):
    metrics, elapsed = latent_run
    cfg = runconfig.load(workdir / "latent" / "run.yaml")
    test = load_splits(cfg["dataset"], cfg["seed"])["test"]
    mse = reconstruction_mse(load_autoencoder(workdir / "latent" / "autoencoder.pt"), test)
    ok = mse <= VAE_MSE and metrics["accuracy"] >= LATENT_ACC and elapsed <= LATENT_MINUTES * 60
    report(9, ok, f"held-out VAE MSE {mse:.4f} (<= {VAE_MSE}), latent accuracy {metrics['accuracy']:.4f} "
                  f"(>= {LATENT_ACC}), macro AUC {metrics['auc_macro']:.4f}, {elapsed / 60:.1f} min (<= {LATENT_MINUTES})")


def test_c10_determinism(report, desk_run, latent_run, workdir):
    _run(_desk("desk.yaml"), workdir / "desk_again")
    _run(_desk("desk_latent.yaml"), workdir / "latent_again")
    same_pixel = (workdir / "desk" / "predictions_test.jsonl").read_bytes() == \
        (workdir / "desk_again" / "predictions_test.jsonl").read_bytes()
    same_latent = (workdir / "latent" / "predictions_test.jsonl").read_bytes() == \
        (workdir / "latent_again" / "predictions_test.jsonl").read_bytes()

    # in-memory checkpoint vs saved and reloaded copy
    data = make_synthetic(3, 16, size=16, seed=0)
    ckpt = train(TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, warmup_epochs=1, beta=1.0),
                 data, net_config=toy_config(base_channels=16))
    before = [r.to_dict() for r in classify_batch(ckpt, data.images, steps=5, runs=3, seed=0)]
    loaded = load_checkpoint(save_checkpoint(ckpt, workdir / "roundtrip.pt"))
    after = [r.to_dict() for r in classify_batch(loaded, data.images, steps=5, runs=3, seed=0)]
    ok = same_pixel and same_latent and before == after
    report(10, ok, f"pixel predictions identical {same_pixel}, latent predictions identical {same_latent}, "
                   f"checkpoint roundtrip bit-exact {before == after}")


@pytest.mark.skip(reason="optional GPU criterion (MedMNIST at full budget); not gating")
def test_c11_pneumonia_gpu():
    pass
