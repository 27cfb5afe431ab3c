from django.core.management.base import CommandError

from apps.placement.services import BACKEND_SOLVERS

from ...services import compare_backends, plan, write_placement
from ..base import USAGE_ERROR, ExperimentCommand


class Command(ExperimentCommand):
    help = 'Compute an LLM placement for the cluster in an experiment config'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--backend', choices=sorted(BACKEND_SOLVERS),
                            help='Placement backend (default: the config, else greedy)')
        parser.add_argument('-o', '--output', required=True, help='Placement JSON to write')
        parser.add_argument('--compare', action='store_true',
                            help='Also solve exactly and report the greedy gap')

    def handle(self, *args, **options):
        config = self.load(options)
        with self.domain_errors():
            placement = plan(config, options['backend'])
            if options['compare']:
                greedy, exact, gap = compare_backends(config)
        try:
            path = write_placement(placement, options['output'])
        except OSError as e:
            raise CommandError(f"cannot write placement: {e}", returncode=USAGE_ERROR)

        for index, unit in enumerate(placement.units):
            llms = ', '.join(f"{p.spec.name}(tp={p.candidate.tp_degree}, sm={p.candidate.num_sm:g})"
                             for p in unit.llms)
            self.stdout.write(f"unit {index}: gpus {list(unit.mesh.gpu_ids)} -> {llms}")
        self.stdout.write(f"{placement.backend}: est_total_tpt={placement.est_total_tpt:.3f} req/s, "
                          f"objective={placement.objective:.3f}")
        if options['compare']:
            if exact is None:
                self.stdout.write('exact backend skipped: instance exceeds ilp_max_dims')
            else:
                self.stdout.write(f"greedy objective {greedy.objective:.3f}, exact {exact.objective:.3f}, "
                                  f"gap {gap:.2%}")
        self.stdout.write(self.style.SUCCESS(f"Wrote placement to {path}"))
