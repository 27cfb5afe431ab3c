from django.apps import AppConfig


class CostModelConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.cost_model'
