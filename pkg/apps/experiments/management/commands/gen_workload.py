from django.core.management.base import CommandError

from apps.workload.services import rate_table, top_share
from apps.workload.trace import save_trace

from ...services import generate_trace
from ..base import USAGE_ERROR, ExperimentCommand


class Command(ExperimentCommand):
    help = 'Generate a synthetic request trace from an experiment config'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('-o', '--output', required=True, help='Trace CSV to write')

    def handle(self, *args, **options):
        config = self.load(options)
        trace = generate_trace(config)
        try:
            path = save_trace(trace, options['output'])
        except OSError as e:
            raise CommandError(f"cannot write trace: {e}", returncode=USAGE_ERROR)

        rates = config.workload.llm_rates
        self.stdout.write(rate_table(rates).to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        self.stdout.write(f"Top 20% of LLMs carry {top_share(list(rates.values())):.1%} of the rate")
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(trace)} requests to {path}"))
