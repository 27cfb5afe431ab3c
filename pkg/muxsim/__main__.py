"""Entry point for the ``muxsim`` command.

Maps ``muxsim gen-workload ...`` onto the ``gen_workload`` management command
and so on, so the CLI and ``manage.py`` share one implementation.
"""
import os
import sys

COMMANDS = {
    'gen-workload': 'gen_workload',
    'plan': 'plan',
    'simulate': 'simulate',
    'ablate': 'ablate',
}


def main(argv=None):
    """Run a muxsim command and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'muxsim.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc

    if not argv or argv[0] in ('-h', '--help') or argv[0] not in COMMANDS:
        names = ', '.join(COMMANDS)
        sys.stderr.write(f"usage: muxsim {{{names}}} [options]\n")
        return 0 if argv and argv[0] in ('-h', '--help') else 1

    command = COMMANDS[argv[0]]
    try:
        execute_from_command_line(['muxsim', command, *argv[1:]])
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
