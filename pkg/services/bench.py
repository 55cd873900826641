"""Benchmark procedures: 1D sine adaptation and synthetic deblurring."""

import csv
import io
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np

from adaptation.models import ResidueVariant
from benchmarks.models import (
    BenchMethod,
    BenchmarkOutcome,
    BenchResult,
    BlurSpec,
    DeblurBenchSettings,
    SignalBenchSettings,
    SignalDomain,
    SignalSpec,
)
from datasets.models import as_image_batch
from exceptions import ArgumentError
from networks.models import Activation, ConvKernel
from services.align import align_nearest, align_sinkhorn
from services.bounds import verify_generalization_bound, verify_transfer_bound
from services.convadapt import (
    cnn_forward,
    cnn_mse_loss,
    init_cnn,
    lva_conv_last_layer,
    psnr,
    refit_last_kernel,
    train_cnn,
)
from services.generators import gen_blur_pairs, gen_signal
from services.lva import lva_one_layer, lva_two_layer
from services.net import init_mlp
from services.train import TrainConfig, finetune_gd, mse_loss, pretrain, suffix_layers


logger = logging.getLogger(__name__)


RESULTS_HEADER = ['method', 'budget', 'loss', 'psnr', 'runtime_ms', 'seed']
ORDERING_SLACK = 1e-9
CONTROL_DELTA_LIMIT = 1e-6


class _Stopwatch:
    """Context manager recording elapsed wall time in milliseconds."""

    def __enter__(self) -> '_Stopwatch':
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.ms = (time.perf_counter() - self._start) * 1000.0


def _kernel_norm(kernel: ConvKernel) -> float:
    return float(np.sqrt(np.sum(kernel.weights ** 2) + np.sum(kernel.bias ** 2)))


def run_benchmark_1d(seed: int, settings: Optional[SignalBenchSettings] = None) -> BenchmarkOutcome:
    """
    Pretrain on the clean sine, then adapt to the shifted, rescaled one.

    Rows are reported in the order pretrained, gd, gd2, lva1, lva1_input,
    lva2, lva_ot; target_loss is the mean loss on the adaptation set and
    extra_metrics['test_loss'] the loss on a held-out target split.
    """
    settings = settings or SignalBenchSettings()
    if settings.test_samples > settings.samples:
        raise ArgumentError(
            f"test split ({settings.test_samples}) must not exceed the adaptation set ({settings.samples})"
        )
    source = gen_signal(SignalSpec(n=settings.samples, domain=SignalDomain.SOURCE))
    target = gen_signal(SignalSpec(n=settings.samples, noise_seed=seed, domain=SignalDomain.TARGET))
    test = gen_signal(SignalSpec(n=settings.test_samples, noise_seed=seed + 1, domain=SignalDomain.TARGET))

    sizes = [source.dx, *settings.hidden_sizes, source.dy]
    net = init_mlp(sizes, Activation.relu(), seed)
    with _Stopwatch() as clock:
        f, _ = pretrain(net, source, TrainConfig(
            learning_rate=settings.learning_rate, epochs=settings.pretrain_epochs, seed=seed,
        ))

    results = []

    def record(method: BenchMethod, model, ms: float) -> None:
        results.append(BenchResult(
            method=method,
            target_loss=mse_loss(model, target),
            runtime_ms=int(round(ms)),
            seed=seed,
            extra_metrics={'test_loss': mse_loss(model, test)},
        ))

    record(BenchMethod.PRETRAINED, f, clock.ms)

    for method, layers in ((BenchMethod.GD, 1), (BenchMethod.GD2, 2)):
        cfg = TrainConfig(
            learning_rate=settings.learning_rate, epochs=settings.gd_epochs, seed=seed,
            trainable_layers=suffix_layers(f, layers),
        )
        with _Stopwatch() as clock:
            g, _ = finetune_gd(f, target, cfg)
        record(method, g, clock.ms)

    with _Stopwatch() as align_clock:
        alignment = align_nearest(source, target)

    with _Stopwatch() as clock:
        g_lva1, _ = lva_one_layer(f, alignment, source, target)
    record(BenchMethod.LVA1, g_lva1, align_clock.ms + clock.ms)

    with _Stopwatch() as clock:
        g, _ = lva_one_layer(f, alignment, source, target, ResidueVariant.INPUT)
    record(BenchMethod.LVA1_INPUT, g, align_clock.ms + clock.ms)

    with _Stopwatch() as clock:
        g, _ = lva_two_layer(f, alignment, source, target, settings.two_layer_sweeps)
    record(BenchMethod.LVA2, g, align_clock.ms + clock.ms)

    with _Stopwatch() as clock:
        ot_alignment = align_sinkhorn(
            source, target, reg=settings.sinkhorn_reg, max_iter=settings.sinkhorn_max_iter,
        )
        g, _ = lva_one_layer(f, ot_alignment, source, target, ResidueVariant.INPUT)
    record(BenchMethod.LVA_OT, g, clock.ms)

    reports = [
        verify_transfer_bound(f, g_lva1, 1, alignment, source, target),
        verify_generalization_bound(g_lva1, target, test),
    ]
    outcome = BenchmarkOutcome(
        benchmark='1d',
        seed=seed,
        results=results,
        reports=reports,
        baselines={
            'pretrained_source_loss': mse_loss(f, source),
            'pretrained_target_loss': mse_loss(f, target),
        },
    )
    logger.info(f"1D benchmark (seed {seed}) finished with {len(results)} methods")
    return outcome


def run_benchmark_deblur(seed: int, settings: Optional[DeblurBenchSettings] = None) -> BenchmarkOutcome:
    """
    Pretrain a small CNN on mildly blurred images, adapt to stronger blur.

    For every budget the last kernel is adapted by GD and by LVA on the first
    `budget` target images; both are scored on a held-out target test set.
    The identical-domain control adapts the pretrained CNN on its own
    training data and records the correction norm, once on the raw
    pretrained CNN and once after the last-kernel refit. On the raw CNN the
    control correction must reproduce the refit (control_refit_gap).
    """
    settings = settings or DeblurBenchSettings()
    size = settings.image_size
    image_size = (size, size)

    def blur_spec(count: int, offset: int, target_sigma: float) -> BlurSpec:
        return BlurSpec(
            image_size=size, num_images=count, seed=seed + offset,
            blur_sigma_source=settings.blur_sigma_source, blur_sigma_target=target_sigma,
        )

    source, _ = gen_blur_pairs(blur_spec(settings.source_images, 0, settings.blur_sigma_target))
    _, pool = gen_blur_pairs(blur_spec(max(settings.budgets), 1, settings.blur_sigma_target))
    source_test, target_test = gen_blur_pairs(blur_spec(settings.test_images, 2, settings.blur_sigma_target))

    cnn = init_cnn(settings.kernel_sizes, settings.channels, seed)
    f, _ = train_cnn(cnn, source, image_size, TrainConfig(
        learning_rate=settings.learning_rate, epochs=settings.pretrain_epochs,
        batch_size=settings.pretrain_batch_size, seed=seed,
    ))
    # identical domains: target blur equals source blur, same images
    control_source, control_target = gen_blur_pairs(
        blur_spec(settings.source_images, 0, settings.blur_sigma_source)
    )
    control_alignment = align_nearest(control_source, control_target)
    before_refit, raw_delta = lva_conv_last_layer(
        f, control_alignment, control_source, control_target, image_size
    )
    f = refit_last_kernel(f, source, image_size)
    control_images = as_image_batch(control_source.inputs, settings.channels[0], size, size)
    refit_gap = float(np.sqrt(np.mean(
        (cnn_forward(before_refit, control_images) - cnn_forward(f, control_images)) ** 2
    )))

    pixels = size * size * settings.channels[-1]
    results = []

    def record(method: BenchMethod, model, budget: int, ms: float) -> None:
        loss = cnn_mse_loss(model, target_test, image_size)
        results.append(BenchResult(
            method=method, target_loss=loss, runtime_ms=int(round(ms)), seed=seed,
            budget=budget, extra_metrics={'psnr': psnr(loss, pixels)},
        ))

    last = frozenset({f.depth - 1})
    for budget in settings.budgets:
        adapt = pool.head(budget, name=f'target-{budget}')
        cfg = TrainConfig(
            learning_rate=settings.learning_rate, epochs=settings.gd_epochs,
            seed=seed, trainable_layers=last,
        )
        with _Stopwatch() as clock:
            g, _ = train_cnn(f, adapt, image_size, cfg)
        record(BenchMethod.GD, g, budget, clock.ms)

        with _Stopwatch() as clock:
            alignment = align_nearest(source, adapt)
            g, _ = lva_conv_last_layer(f, alignment, source, adapt, image_size)
        record(BenchMethod.LVA1, g, budget, clock.ms)

    _, control_delta = lva_conv_last_layer(f, control_alignment, control_source, control_target, image_size)
    control_norm = _kernel_norm(control_delta)

    source_loss = cnn_mse_loss(f, source_test, image_size)
    target_loss = cnn_mse_loss(f, target_test, image_size)
    outcome = BenchmarkOutcome(
        benchmark='deblur',
        seed=seed,
        results=results,
        baselines={
            'pretrained_source_loss': source_loss,
            'pretrained_source_psnr': psnr(source_loss, pixels),
            'pretrained_target_loss': target_loss,
            'pretrained_target_psnr': psnr(target_loss, pixels),
            'control_delta_norm': control_norm,
            'control_delta_norm_before_refit': _kernel_norm(raw_delta),
            'control_refit_gap': refit_gap,
        },
    )
    logger.info(f"Deblur benchmark (seed {seed}) finished for budgets {list(settings.budgets)}")
    return outcome


def check_orderings(outcome: BenchmarkOutcome) -> list[str]:
    """Expected method orderings that the outcome violates (empty when all hold)."""
    failures = []
    if outcome.benchmark == '1d':
        lva1 = outcome.result(BenchMethod.LVA1).target_loss
        gd = outcome.result(BenchMethod.GD).target_loss
        lva2 = outcome.result(BenchMethod.LVA2).target_loss
        if not lva1 < gd:
            failures.append(f"lva1 loss {lva1:.6e} is not below gd loss {gd:.6e}")
        if not lva2 <= lva1 + ORDERING_SLACK:
            failures.append(f"lva2 loss {lva2:.6e} exceeds lva1 loss {lva1:.6e}")
        failures.extend(
            f"{report.kind} bound violated: {report.observed_loss:.6e} > {report.rhs_bound:.6e}"
            for report in outcome.reports if not report.holds
        )
    elif outcome.benchmark == 'deblur':
        budget = max(r.budget for r in outcome.results)
        lva = outcome.result(BenchMethod.LVA1, budget)
        gd = outcome.result(BenchMethod.GD, budget)
        if not lva.target_loss <= gd.target_loss:
            failures.append(
                f"budget {budget}: lva loss {lva.target_loss:.6e} exceeds gd loss {gd.target_loss:.6e}"
            )
        if not outcome.baselines['control_delta_norm'] < CONTROL_DELTA_LIMIT:
            failures.append(f"identical-domain correction norm {outcome.baselines['control_delta_norm']:.3e}")
        gap = outcome.baselines.get('control_refit_gap')
        if gap is not None and not gap < CONTROL_DELTA_LIMIT:
            failures.append(f"identical-domain correction differs from the refit by {gap:.3e}")
    for failure in failures:
        logger.warning(f"Benchmark ordering failed: {failure}")
    return failures


def format_results_csv(outcome: BenchmarkOutcome) -> str:
    """Results CSV text; budget and psnr are blank when not applicable."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=RESULTS_HEADER, lineterminator='\n')
    writer.writeheader()
    for result in outcome.results:
        value = result.extra_metrics.get('psnr')
        writer.writerow({
            'method': result.method.value,
            'budget': '' if result.budget is None else result.budget,
            'loss': repr(result.target_loss),
            'psnr': '' if value is None else repr(value),
            'runtime_ms': result.runtime_ms,
            'seed': result.seed,
        })
    return buffer.getvalue()


def write_results_csv(outcome: BenchmarkOutcome, path: Path) -> None:
    Path(path).write_text(format_results_csv(outcome))
    logger.info(f"Wrote {len(outcome.results)} result rows to {path}")
