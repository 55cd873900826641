"""Plain-text rendering of reports for the terminal."""

from adaptation.models import TheoryReport
from benchmarks.models import BenchmarkOutcome
from services.train import TrainReport


def _fmt(value, digits: int = 6) -> str:
    if value is None:
        return '--'
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    return str(value)


def render_summary(outcome: BenchmarkOutcome) -> str:
    """Fixed-width table of benchmark rows followed by the baselines."""
    header = f"{'method':<12} {'budget':>6} {'loss':>14} {'psnr':>9} {'runtime_ms':>11}"
    lines = [f"benchmark {outcome.benchmark} (seed {outcome.seed})", header, '-' * len(header)]
    for result in outcome.results:
        lines.append(
            f"{result.method.value:<12} {_fmt(result.budget):>6} "
            f"{result.target_loss:>14.6e} {_fmt(result.extra_metrics.get('psnr'), 4):>9} "
            f"{result.runtime_ms:>11d}"
        )
    for name, value in outcome.baselines.items():
        lines.append(f"{name}: {_fmt(value)}")
    for report in outcome.reports:
        verdict = 'holds' if report.holds else 'VIOLATED'
        lines.append(
            f"{report.kind} bound {verdict}: lhs {_fmt(report.observed_loss)} <= rhs {_fmt(report.rhs_bound)}"
        )
    return '\n'.join(lines) + '\n'


def render_theory(report: TheoryReport) -> str:
    """One 'name: value' line per reported constant, JSON names."""
    lines = [f"{report.kind} bound: {'holds' if report.holds else 'VIOLATED'}"]
    for name, value in report.to_json_dict().items():
        if name != 'kind':
            lines.append(f"  {name}: {_fmt(value)}")
    return '\n'.join(lines) + '\n'


def render_train(report: TrainReport) -> str:
    return (
        f"epochs {len(report.loss_history)}, final loss {report.final_loss:.6e}, "
        f"epsilon {report.epsilon_trained:.6e}\n"
    )
