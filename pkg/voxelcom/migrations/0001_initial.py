import django.core.validators
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="MetricsRecord",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("scene_id", models.CharField(max_length=100)),
                (
                    "method",
                    models.CharField(
                        choices=[("jscc", "JSCC"), ("separation", "Separation")],
                        max_length=12,
                    ),
                ),
                ("snr_true_db", models.FloatField(blank=True, null=True)),
                ("snr_est_db", models.FloatField(blank=True, null=True)),
                (
                    "cbr",
                    models.FloatField(
                        validators=[django.core.validators.MinValueValidator(0.0)]
                    ),
                ),
                (
                    "psnr_db",
                    models.FloatField(
                        validators=[
                            django.core.validators.MinValueValidator(0.0),
                            django.core.validators.MaxValueValidator(99.0),
                        ]
                    ),
                ),
                (
                    "ssim",
                    models.FloatField(
                        validators=[
                            django.core.validators.MinValueValidator(-1.0),
                            django.core.validators.MaxValueValidator(1.0),
                        ]
                    ),
                ),
                ("seed", models.IntegerField(default=0)),
                ("label", models.CharField(blank=True, max_length=100)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
            ],
            options={
                "ordering": ["method", "snr_true_db", "cbr"],
            },
        ),
    ]
