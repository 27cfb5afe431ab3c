import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "muxsim.settings")
django.setup()
