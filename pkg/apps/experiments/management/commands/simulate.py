from django.core.management.base import CommandError

from apps.scheduler.domain import SCHEDULER_KINDS
from apps.workload.trace import load_trace

from ...services import read_placement, simulate, write_simulation
from ..base import USAGE_ERROR, ExperimentCommand


class Command(ExperimentCommand):
    help = 'Simulate a placement serving a trace and write records and metrics'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('-p', '--placement', required=True, help='Placement JSON from plan')
        parser.add_argument('-t', '--trace', required=True, help='Trace CSV from gen-workload')
        parser.add_argument('-o', '--output', required=True, help='Output directory')
        parser.add_argument('--scheduler', choices=SCHEDULER_KINDS,
                            help='Override the configured scheduler')

    def handle(self, *args, **options):
        config = self.load(options)
        with self.domain_errors():
            placement = read_placement(options['placement'])
            trace = load_trace(options['trace'])
            result, report = simulate(config, placement, trace, options['scheduler'])
        try:
            out_dir = write_simulation(result, report, options['output'])
        except OSError as e:
            raise CommandError(f"cannot write results: {e}", returncode=USAGE_ERROR)

        self.stdout.write(f"{report.finished_requests}/{report.total_requests} requests finished "
                          f"in {report.horizon_s:g}s")
        self.stdout.write(f"aggregated throughput {report.aggregated_throughput:.3f} req/s")
        for scale, attainment in report.slo_attainment.items():
            self.stdout.write(f"SLO x{scale}: {attainment:.1%}")
        if result.stalled:
            self.stdout.write(self.style.WARNING('simulation stalled before draining every unit'))
        self.stdout.write(self.style.SUCCESS(f"Wrote results to {out_dir}"))
