from django.apps import AppConfig


class VoxelcomConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "voxelcom"
    verbose_name = "Voxel feature-grid transmission"
