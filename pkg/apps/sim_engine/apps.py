from django.apps import AppConfig


class SimEngineConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.sim_engine'
    verbose_name = 'Simulation engine'
