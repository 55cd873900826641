"""
Command-line interface: pretrain, adapt, verify, bench.

Exit codes: 0 success, 1 bound or benchmark check failed, 2 usage error,
3 data/model error, 4 unexpected error. Reports go to stdout; diagnostics
go to the log (stderr).
"""

import argparse
import json
import logging
import time
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from adaptation.models import LayerDelta, ResidueVariant
from benchmarks.models import (
    BenchMethod,
    BenchResult,
    BlurSpec,
    DeblurBenchSettings,
    SignalBenchSettings,
    SignalDomain,
    SignalSpec,
)
from datasets.models import PairedDataset
from exceptions import ArgumentError, LvaError, UnsupportedModelError
from networks.models import Activation, Cnn, ConvKernel, Mlp
from services.align import align_nearest, align_sinkhorn
from services.bench import check_orderings, run_benchmark_1d, run_benchmark_deblur, write_results_csv
from services.bounds import verify_generalization_bound, verify_transfer_bound
from services.convadapt import (
    cnn_mse_loss,
    init_cnn,
    lva_conv_last_layer,
    psnr,
    refit_last_kernel,
    train_cnn,
)
from services.dataset_io import load_dataset_csv
from services.generators import gen_blur_pairs, gen_signal
from services.lva import lva_one_layer, lva_two_layer
from services.model_io import load_cnn, load_mlp, load_model, save_model
from services.net import init_mlp
from services.train import OptimizerKind, TrainConfig, finetune_gd, mse_loss, pretrain, suffix_layers
from ui.reporting import render_summary, render_theory, render_train


logger = logging.getLogger(__name__)


EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA_ERROR = 3
EXIT_UNEXPECTED = 4

GENERATORS = ('signal-source', 'signal-target', 'blur-source', 'blur-target')


class RunConfig(BaseModel):
    """Fully resolved configuration of one CLI run, written next to its output."""
    command: str
    seed: int
    options: dict[str, Any]


class AdaptationSummary(BaseModel):
    method: str
    variant: Optional[ResidueVariant] = None
    alignment: Optional[str] = None
    bias_column: bool = True
    ridge: float = 0.0
    layers: int = Field(ge=1)
    delta_norms: list[float] = Field(default_factory=list)
    result: BenchResult


# --- argument parsing ---

def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(',') if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _image_size(text: str) -> tuple[int, int]:
    values = _int_list(text)
    if len(values) == 1:
        return values[0], values[0]
    if len(values) != 2 or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected H or H,W, got '{text}'")
    return values


def _data_options() -> argparse.ArgumentParser:
    """Options shared by every command that generates or reads datasets."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--seed', type=int, default=0, help='seed of every PRNG')
    parent.add_argument('--samples', type=int, default=2000, help='signal generator sample count')
    parent.add_argument('--image-size', type=_image_size, default=None, help='H or H,W of image data')
    parent.add_argument('--num-images', type=int, default=256, help='blur generator image count')
    parent.add_argument('--sigma-source', type=float, default=1.0)
    parent.add_argument('--sigma-target', type=float, default=2.0)
    return parent


def _train_options(epochs: int) -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--epochs', type=int, default=epochs)
    parent.add_argument('--lr', type=float, default=1e-3)
    parent.add_argument('--batch-size', type=int, default=None, help='default: full batch')
    parent.add_argument('--optimizer', choices=[k.value for k in OptimizerKind], default='adam')
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='lva', description='Layer variational adaptation toolkit')
    commands = parser.add_subparsers(dest='command', required=True)
    data = _data_options()

    p = commands.add_parser('pretrain', parents=[data, _train_options(8000)],
                            help='train a network on a source dataset')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--gen', choices=GENERATORS, help='generate the training data')
    source.add_argument('--data', help='dataset CSV')
    p.add_argument('--hidden', type=_int_list, default=(64, 64, 64), help='MLP hidden widths')
    p.add_argument('--kernel-sizes', type=_int_list, default=(9, 5, 5), help='CNN kernel sizes')
    p.add_argument('--channels', type=_int_list, default=(8, 8), help='CNN hidden channels')
    p.add_argument('--json', action='store_true', help='print the training report as JSON')
    p.add_argument('--out', required=True, help='model JSON output path')
    p.set_defaults(handler=cmd_pretrain)

    p = commands.add_parser('adapt', parents=[data, _train_options(12000)],
                            help='adapt a pretrained network to a target dataset')
    p.add_argument('--model', required=True)
    p.add_argument('--source', required=True, help='dataset CSV or generator name')
    p.add_argument('--target', required=True, help='dataset CSV or generator name')
    p.add_argument('--method', choices=['gd', 'lva1', 'lva2', 'lva-conv'], default='lva1')
    p.add_argument('--align', choices=['nn', 'sinkhorn'], default='nn')
    p.add_argument('--variant', choices=[v.value for v in ResidueVariant], default='latent')
    p.add_argument('--ridge', type=float, default=0.0)
    p.add_argument('--no-bias', action='store_true', help='solve the weight correction only')
    p.add_argument('--layers', type=int, default=1, help='trailing layers finetuned by gd')
    p.add_argument('--sweeps', type=int, default=3, help='lva2 sweeps')
    p.add_argument('--sinkhorn-reg', type=float, default=0.05)
    p.add_argument('--sinkhorn-iter', type=int, default=1000)
    p.add_argument('--json', action='store_true', help='print the adaptation summary as JSON')
    p.add_argument('--out', required=True, help='adapted model JSON output path')
    p.set_defaults(handler=cmd_adapt)

    p = commands.add_parser('verify', parents=[data], help='check a loss bound numerically')
    p.add_argument('--bound', choices=['transfer', 'generalization'], default='transfer')
    p.add_argument('--pretrained', help='pretrained model (transfer bound)')
    p.add_argument('--adapted', required=True)
    p.add_argument('--source', help='source dataset (transfer bound)')
    p.add_argument('--target', required=True, help='target / adaptation dataset')
    p.add_argument('--test', help='held-out test dataset (generalization bound)')
    p.add_argument('--layers', type=int, default=1, help='number of adapted trailing layers')
    p.add_argument('--json', action='store_true', help='print the report as JSON')
    p.add_argument('--out', help='also write the report JSON here')
    p.set_defaults(handler=cmd_verify)

    p = commands.add_parser('bench', help='run a benchmark')
    p.add_argument('name', choices=['1d', 'deblur'])
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--budgets', type=_int_list, default=None, help='deblur sample budgets')
    p.add_argument('--samples', type=int, default=None, help='1d samples per domain')
    p.add_argument('--test-samples', type=int, default=None)
    p.add_argument('--source-images', type=int, default=None)
    p.add_argument('--test-images', type=int, default=None)
    p.add_argument('--pretrain-epochs', type=int, default=None)
    p.add_argument('--gd-epochs', type=int, default=None)
    p.add_argument('--out', required=True, help='results CSV output path')
    p.set_defaults(handler=cmd_bench)
    return parser


# --- helpers ---

def _side_path(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2) + '\n')


def _write_manifest(args: argparse.Namespace, out: Path) -> None:
    options = {
        key: list(value) if isinstance(value, tuple) else value
        for key, value in vars(args).items()
        if key not in ('handler', 'command', 'seed')
    }
    manifest = RunConfig(command=args.command, seed=args.seed, options=options)
    _write_json(_side_path(out, '.manifest.json'), manifest.model_dump(mode='json'))


def _train_config(args: argparse.Namespace, trainable: frozenset = frozenset()) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        seed=args.seed,
        trainable_layers=trainable,
    )


def _blur_size(args: argparse.Namespace) -> int:
    if args.image_size is None:
        return 16
    height, width = args.image_size
    if height != width:
        raise ArgumentError(f"blur generators make square images, got {height}x{width}")
    return height


def resolve_dataset(value: str, args: argparse.Namespace) -> PairedDataset:
    """Load a dataset CSV or run the named generator with the command's options."""
    if value in ('signal-source', 'signal-target'):
        domain = SignalDomain.SOURCE if value == 'signal-source' else SignalDomain.TARGET
        return gen_signal(SignalSpec(n=args.samples, noise_seed=args.seed, domain=domain))
    if value in ('blur-source', 'blur-target'):
        source, target = gen_blur_pairs(BlurSpec(
            image_size=_blur_size(args),
            num_images=args.num_images,
            blur_sigma_source=args.sigma_source,
            blur_sigma_target=args.sigma_target,
            seed=args.seed,
        ))
        return source if value == 'blur-source' else target
    return load_dataset_csv(Path(value))


def _image_size_for(args: argparse.Namespace, *names: str) -> Optional[tuple[int, int]]:
    if args.image_size is not None:
        return args.image_size
    if any(name and name.startswith('blur-') for name in names):
        size = _blur_size(args)
        return size, size
    return None


def _delta_norm(delta: Union[LayerDelta, ConvKernel]) -> float:
    if isinstance(delta, LayerDelta):
        weight, bias = delta.d_weight, delta.d_bias
    else:
        weight, bias = delta.weights, delta.bias
    return float(np.sqrt(np.sum(weight ** 2) + np.sum(bias ** 2)))


# --- commands ---

def cmd_pretrain(args: argparse.Namespace) -> int:
    out = Path(args.out)
    name = args.gen or args.data
    data = resolve_dataset(name, args)
    image_size = _image_size_for(args, args.gen)
    cfg = _train_config(args)

    if image_size is None:
        net = init_mlp([data.dx, *args.hidden, data.dy], Activation.relu(), args.seed)
        model, report = pretrain(net, data, cfg)
    else:
        pixels = image_size[0] * image_size[1]
        if data.dx % pixels or data.dy % pixels:
            raise ArgumentError(f"dataset rows do not hold {image_size[0]}x{image_size[1]} images")
        channels = (data.dx // pixels, *args.channels, data.dy // pixels)
        cnn = init_cnn(args.kernel_sizes, channels, args.seed)
        model, report = train_cnn(cnn, data, image_size, cfg)
        model = refit_last_kernel(model, data, image_size)

    save_model(model, out)
    _write_json(_side_path(out, '.report.json'), report.model_dump(mode='json'))
    _write_manifest(args, out)
    if args.json:
        print(json.dumps(report.model_dump(mode='json'), indent=2))
    else:
        print(render_train(report), end='')
    return EXIT_OK


def _align(args, source: PairedDataset, target: PairedDataset):
    if args.align == 'sinkhorn':
        return align_sinkhorn(source, target, reg=args.sinkhorn_reg, max_iter=args.sinkhorn_iter)
    return align_nearest(source, target)


def _adapt_mlp(args, f: Mlp, source: PairedDataset, target: PairedDataset):
    variant = ResidueVariant(args.variant)
    if args.method == 'gd':
        g, _ = finetune_gd(f, target, _train_config(args, suffix_layers(f, args.layers)))
        alignment = align_nearest(source, target)
        return g, [], args.layers, alignment
    alignment = _align(args, source, target)
    if args.method == 'lva1':
        g, delta = lva_one_layer(f, alignment, source, target, variant, args.ridge,
                                 bias_column=not args.no_bias)
        return g, [delta], 1, alignment
    if args.no_bias:
        raise ArgumentError("--no-bias applies to lva1 and lva-conv only")
    g, deltas = lva_two_layer(f, alignment, source, target, args.sweeps, args.ridge, variant)
    return g, deltas, 2, alignment


def cmd_adapt(args: argparse.Namespace) -> int:
    out = Path(args.out)
    source = resolve_dataset(args.source, args)
    target = resolve_dataset(args.target, args)
    image_size = _image_size_for(args, args.source, args.target)

    started = time.perf_counter()
    report = None
    if args.method == 'lva-conv':
        f = load_cnn(Path(args.model))
        if image_size is None:
            raise ArgumentError("lva-conv needs --image-size")
        alignment = _align(args, source, target)
        g, delta = lva_conv_last_layer(f, alignment, source, target, image_size, args.ridge,
                                       ResidueVariant(args.variant), bias_column=not args.no_bias)
        deltas, layers = [delta], 1
    else:
        f = load_model(Path(args.model))
        if isinstance(f, Cnn):
            if args.method != 'gd':
                raise UnsupportedModelError(f"{args.method} needs a fully-connected model; use lva-conv")
            if image_size is None:
                raise ArgumentError("CNN finetuning needs --image-size")
            trainable = frozenset(range(f.depth - args.layers, f.depth))
            g, _ = train_cnn(f, target, image_size, _train_config(args, trainable))
            deltas, layers = [], args.layers
        else:
            g, deltas, layers, alignment = _adapt_mlp(args, f, source, target)
            report = verify_transfer_bound(f, g, layers, alignment, source, target)
    elapsed_ms = (time.perf_counter() - started) * 1000.0

    if isinstance(g, Cnn):
        loss = cnn_mse_loss(g, target, image_size)
        metrics = {'psnr': psnr(loss, target.dy)}
    else:
        loss = mse_loss(g, target)
        metrics = {}
    method = {'gd': BenchMethod.GD if layers == 1 else BenchMethod.GD2,
              'lva1': BenchMethod.LVA1, 'lva2': BenchMethod.LVA2, 'lva-conv': BenchMethod.LVA1}[args.method]
    if args.method == 'lva1' and args.align == 'sinkhorn':
        method = BenchMethod.LVA_OT
    summary = AdaptationSummary(
        method=args.method,
        variant=None if args.method == 'gd' else args.variant,
        alignment=None if args.method == 'gd' else args.align,
        bias_column=not args.no_bias,
        ridge=args.ridge,
        layers=layers,
        delta_norms=[_delta_norm(delta) for delta in deltas],
        result=BenchResult(method=method, target_loss=loss, runtime_ms=int(round(elapsed_ms)),
                           seed=args.seed, extra_metrics=metrics),
    )

    save_model(g, out)
    _write_json(_side_path(out, '.result.json'), summary.model_dump(mode='json'))
    if report is not None:
        _write_json(_side_path(out, '.theory.json'), report.to_json_dict())
    _write_manifest(args, out)
    if args.json:
        print(json.dumps(summary.model_dump(mode='json'), indent=2))
    else:
        print(f"{args.method}: target loss {loss:.6e}, delta norms {summary.delta_norms}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    g = load_mlp(Path(args.adapted))
    target = resolve_dataset(args.target, args)
    if args.bound == 'transfer':
        if not (args.pretrained and args.source):
            raise ArgumentError("the transfer bound needs --pretrained and --source")
        f = load_mlp(Path(args.pretrained))
        source = resolve_dataset(args.source, args)
        alignment = align_nearest(source, target)
        report = verify_transfer_bound(f, g, args.layers, alignment, source, target)
    else:
        if not args.test:
            raise ArgumentError("the generalization bound needs --test")
        report = verify_generalization_bound(g, target, resolve_dataset(args.test, args))

    payload = report.to_json_dict()
    if args.out:
        out = Path(args.out)
        _write_json(out, payload)
        _write_manifest(args, out)
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(render_theory(report), end='')
    return EXIT_OK if report.holds else EXIT_CHECK_FAILED


def _overrides(args: argparse.Namespace, names: Sequence[str]) -> dict:
    return {name: getattr(args, name) for name in names if getattr(args, name) is not None}


def cmd_bench(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.name == '1d':
        settings = SignalBenchSettings(**_overrides(args, (
            'samples', 'test_samples', 'pretrain_epochs', 'gd_epochs')))
        outcome = run_benchmark_1d(args.seed, settings)
    else:
        settings = DeblurBenchSettings(**_overrides(args, (
            'budgets', 'source_images', 'test_images', 'pretrain_epochs', 'gd_epochs')))
        outcome = run_benchmark_deblur(args.seed, settings)

    write_results_csv(outcome, out)
    _write_json(_side_path(out, '.outcome.json'), outcome.model_dump(mode='json', by_alias=True))
    _write_manifest(args, out)
    print(render_summary(outcome), end='')
    return EXIT_CHECK_FAILED if check_orderings(outcome) else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        return args.handler(args)
    except LvaError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA_ERROR
    except (OSError, ValueError) as e:
        # missing files and pydantic validation of option values
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA_ERROR
    except Exception:
        logger.error(f"Unexpected error in '{args.command}'", exc_info=True)
        return EXIT_UNEXPECTED
