import math
from fractions import Fraction

from django import forms
from django.core.exceptions import ValidationError

from .channel import Modulation, STANDARD_CODES
from .codec import CODEC_KINDS
from .jscc import ALLOCATION_MODES, JSCC_KINDS
from .scene import MAX_EXTENT, SCENE_KINDS


def _choices(values):
    return [(v, v) for v in values]


class ListField(forms.Field):
    """A TOML array of ``item`` values, optionally of fixed length."""

    def __init__(self, item, length=None, min_length=1, **kwargs):
        self.item = item
        self.length = length
        self.min_length = min_length
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in self.empty_values:
            return []
        if not isinstance(value, (list, tuple)):
            raise ValidationError('Expected a list, got %(value)r.', params={'value': value})
        return [self.item.clean(v) for v in value]

    def validate(self, value):
        super().validate(value)
        if self.length is not None and len(value) != self.length:
            raise ValidationError('Expected %(n)d values, got %(got)d.', params={'n': self.length, 'got': len(value)})
        if len(value) < self.min_length:
            raise ValidationError('Expected at least %(n)d values.', params={'n': self.min_length})


class SnrField(forms.FloatField):
    """A finite dB value or the string "inf" for a noiseless channel."""

    def to_python(self, value):
        if isinstance(value, str) and value.strip().lower() in ('inf', '+inf'):
            return math.inf
        return super().to_python(value)

    def validate(self, value):
        if value == math.inf:
            return
        super().validate(value)


class McsTableField(forms.Field):
    """Rows of [min_snr_db, modulation, code_rate]."""

    def to_python(self, value):
        if not isinstance(value, (list, tuple)) or not value:
            raise ValidationError('Expected a non-empty list of [snr, modulation, rate] rows.')
        rows = []
        for row in value:
            if not isinstance(row, (list, tuple)) or len(row) != 3:
                raise ValidationError('MCS row %(row)r is not [snr, modulation, rate].', params={'row': row})
            snr, modulation, rate = row
            try:
                snr = float(snr)
                modulation = Modulation(modulation).value
                rate = Fraction(str(rate))
            except (TypeError, ValueError):
                raise ValidationError('MCS row %(row)r is malformed.', params={'row': row}) from None
            if rate not in STANDARD_CODES:
                raise ValidationError('No LDPC code for rate %(rate)s.', params={'rate': rate})
            rows.append((snr, modulation, str(rate)))
        thresholds = [r[0] for r in rows]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValidationError('MCS thresholds must be strictly increasing.')
        return rows


class SectionForm(forms.Form):
    """One config section; missing keys take field initials, unknown keys are errors."""

    aliases = {}

    def __init__(self, data=None, **kwargs):
        data = dict(data or {})
        self.unknown = sorted(k for k in data if self.aliases.get(k, k) not in self.base_fields)
        merged = {name: field.initial for name, field in self.base_fields.items()}
        for key, value in data.items():
            merged[self.aliases.get(key, key)] = value
        super().__init__(merged, **kwargs)

    def clean(self):
        cleaned = super().clean()
        if self.unknown:
            raise ValidationError('Unknown key(s): %(keys)s.', params={'keys': ', '.join(self.unknown)})
        return cleaned


class SceneForm(SectionForm):
    kind = forms.ChoiceField(choices=_choices(SCENE_KINDS), initial='spheres')
    dims = ListField(forms.IntegerField(min_value=4, max_value=MAX_EXTENT), length=3, initial=[32, 32, 32])
    channels = forms.IntegerField(min_value=4, max_value=16, initial=4)
    image_size = forms.IntegerField(min_value=11, initial=32)
    train_views = forms.IntegerField(min_value=1, initial=16)
    test_views = forms.IntegerField(min_value=1, initial=32)
    camera_radius = forms.FloatField(min_value=2.0, initial=4.0)
    fov_deg = forms.FloatField(min_value=1.0, max_value=170.0, initial=30.0)
    steps_per_ray = forms.IntegerField(min_value=2, initial=96)
    seed = forms.IntegerField(min_value=0, initial=0)

    def clean_dims(self):
        dims = self.cleaned_data['dims']
        if any(d % 4 for d in dims):
            raise ValidationError('Grid dims must be multiples of 4, got %(dims)s.', params={'dims': dims})
        return dims


class CodecForm(SectionForm):
    aliases = {'lambda': 'lam'}

    kind = forms.ChoiceField(choices=_choices(CODEC_KINDS), initial='conv')
    widths = ListField(forms.IntegerField(min_value=1), length=2, initial=[16, 32])
    d_v = forms.IntegerField(min_value=1, initial=32)
    d_z = forms.IntegerField(min_value=1, initial=16)
    hyper_hidden = forms.IntegerField(min_value=1, initial=32)
    sigma_min = forms.FloatField(min_value=1e-9, initial=1e-3)
    lam = forms.FloatField(min_value=1e-12, initial=1e-3)
    lambdas = ListField(forms.FloatField(min_value=1e-12), initial=[1e-4, 1e-3, 1e-2])
    cdf_knots = forms.IntegerField(min_value=2, initial=10)
    cdf_range = forms.FloatField(min_value=1e-3, initial=8.0)


class JsccForm(SectionForm):
    kind = forms.ChoiceField(choices=_choices(JSCC_KINDS), initial='dense')
    eta = forms.FloatField(min_value=1e-12, initial=0.2)
    q_levels = ListField(forms.IntegerField(min_value=0), initial=[0, 2, 4, 8, 16, 32])
    k_max = forms.IntegerField(min_value=1, initial=32)
    hidden = forms.IntegerField(min_value=1, initial=64)
    allocation = forms.ChoiceField(choices=_choices(ALLOCATION_MODES), initial='entropy')
    side_modulation = forms.ChoiceField(choices=[('QPSK', 'QPSK')], initial='QPSK')
    side_rate = forms.ChoiceField(choices=[('1/2', '1/2')], initial='1/2')
    target_cbr = forms.FloatField(min_value=1e-9, required=False)

    def clean(self):
        cleaned = super().clean()
        levels = sorted(set(cleaned.get('q_levels', [])) | {0})
        k_max = cleaned.get('k_max')
        if k_max is not None:
            if any(level > k_max for level in levels):
                raise ValidationError('q_levels may not exceed k_max=%(k)d.', params={'k': k_max})
            if cleaned.get('allocation') == 'full' and k_max not in levels:
                raise ValidationError('Full allocation needs k_max among the q_levels.')
        if len(levels) > 8:
            raise ValidationError('At most 8 symbol levels (including 0) fit the 3-bit side table.')
        return cleaned


class ChannelForm(SectionForm):
    snr_db = ListField(SnrField(), initial=[10.0, 9.0, 8.0, 7.0, 6.0])
    snr_est_db = SnrField(initial=10.0)
    train_snr_db = SnrField(initial=10.0)
    seed = forms.IntegerField(min_value=0, initial=0)


class TrainingForm(SectionForm):
    t1 = forms.IntegerField(min_value=1, initial=2000)
    t2 = forms.IntegerField(min_value=1, initial=2000)
    t3 = forms.IntegerField(min_value=1, initial=1000)
    lr_grid = forms.FloatField(min_value=1e-12, initial=0.1)
    lr_codec = forms.FloatField(min_value=1e-12, initial=1e-3)
    betas = ListField(forms.FloatField(min_value=0.0, max_value=0.999999), length=2, initial=[0.9, 0.999])
    warmup_frac = forms.FloatField(min_value=0.0, max_value=0.5, initial=0.02)
    decay = forms.FloatField(min_value=1e-6, max_value=1.0, initial=0.1)
    ray_batch = forms.IntegerField(min_value=1, initial=1024)
    grid_batch = forms.IntegerField(min_value=1, initial=2)
    crop = forms.IntegerField(min_value=4, initial=16)
    log_every = forms.IntegerField(min_value=1, initial=50)

    def clean_crop(self):
        crop = self.cleaned_data['crop']
        if crop % 4:
            raise ValidationError('crop must be a multiple of 4, got %(crop)d.', params={'crop': crop})
        return crop


class BaselineForm(SectionForm):
    codebook_size = forms.IntegerField(min_value=1, max_value=65535, initial=256)
    codebook_sizes = ListField(forms.IntegerField(min_value=1, max_value=65535), initial=[16, 64, 256])
    kmeans_iters = forms.IntegerField(min_value=1, initial=25)
    patch = forms.IntegerField(min_value=1, initial=4)
    # codebook and patch of the degradation sweep, small enough for JSCC to match its CBR
    matched_codebook_size = forms.IntegerField(min_value=1, max_value=65535, initial=16)
    matched_patch = forms.IntegerField(min_value=1, initial=2)
    ldpc_max_iters = forms.IntegerField(min_value=1, initial=50)
    mcs_table = McsTableField(
        initial=[[2.5, 'QPSK', '1/2'], [5.5, 'QPSK', '3/4'], [7.5, 'QAM16', '1/2'], [10.0, 'QAM16', '2/3']]
    )


SECTION_FORMS = {
    'scene': SceneForm,
    'codec': CodecForm,
    'jscc': JsccForm,
    'channel': ChannelForm,
    'training': TrainingForm,
    'baseline': BaselineForm,
}
