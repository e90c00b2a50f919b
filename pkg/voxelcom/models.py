from django.core.validators import MaxValueValidator, MinValueValidator
from django.db import models


class MetricsRecord(models.Model):
    METHOD_CHOICES = (
        ('jscc', 'JSCC'),
        ('separation', 'Separation'),
    )

    scene_id = models.CharField(max_length=100)
    method = models.CharField(max_length=12, choices=METHOD_CHOICES)
    # +inf (noiseless) is stored as NULL
    snr_true_db = models.FloatField(null=True, blank=True)
    snr_est_db = models.FloatField(null=True, blank=True)
    cbr = models.FloatField(validators=[MinValueValidator(0.0)])
    psnr_db = models.FloatField(validators=[MinValueValidator(0.0), MaxValueValidator(99.0)])
    ssim = models.FloatField(validators=[MinValueValidator(-1.0), MaxValueValidator(1.0)])
    seed = models.IntegerField(default=0)
    label = models.CharField(max_length=100, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['method', 'snr_true_db', 'cbr']

    def __str__(self):
        return f"{self.scene_id} {self.method} @ {self.snr_label}: {self.psnr_db:.2f} dB"

    @property
    def snr_label(self):
        return "inf" if self.snr_true_db is None else f"{self.snr_true_db:g} dB"

    def as_row(self):
        return {
            'method': self.method,
            'snr_true_db': 'inf' if self.snr_true_db is None else self.snr_true_db,
            'snr_est_db': 'inf' if self.snr_est_db is None else self.snr_est_db,
            'cbr': self.cbr,
            'psnr_db': self.psnr_db,
            'ssim': self.ssim,
            'seed': self.seed,
            'scene_id': self.scene_id,
        }
