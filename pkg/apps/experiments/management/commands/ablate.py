from django.core.management.base import CommandError

from ...services import ablate, write_sweep
from ..base import USAGE_ERROR, ExperimentCommand


class Command(ExperimentCommand):
    help = 'Sweep rate scales and schedulers and write one CSV row per point'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('-o', '--output', required=True, help='Sweep CSV to write')

    def handle(self, *args, **options):
        config = self.load(options)
        with self.domain_errors():
            sweep = ablate(config)
        try:
            path = write_sweep(sweep, options['output'])
        except OSError as e:
            raise CommandError(f"cannot write sweep: {e}", returncode=USAGE_ERROR)

        columns = ['rate_scale', 'scheduler', 'aggregated_throughput', 'fairness_gap']
        columns += [column for column in sweep.columns if column.startswith('slo@')]
        self.stdout.write(sweep[columns].to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(sweep)} rows to {path}"))
