from django.apps import AppConfig


class KvManagerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.kv_manager'
    verbose_name = 'KV cache manager'
