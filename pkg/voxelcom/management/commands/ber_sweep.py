import json

import numpy as np

from ...channel import McsTable, ber_sweep, calibrate_mcs
from ...storage import write_csv
from ..base import ExperimentCommand

BER_FIELDS = ("snr_db", "modulation", "rate", "bits", "errors", "ber")


class Command(ExperimentCommand):
    help = "Monte Carlo BER of every MCS entry over an SNR grid; optionally re-derive the MCS thresholds."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--snr-min", type=float, default=0.0)
        parser.add_argument("--snr-max", type=float, default=12.0)
        parser.add_argument("--snr-step", type=float, default=1.0)
        parser.add_argument("--bits", type=int, default=100_000, help="information bits per SNR point")
        parser.add_argument("--calibrate", action="store_true", help="write thresholds where BER < --target-ber")
        parser.add_argument("--target-ber", type=float, default=1e-5)

    def run(self, config, out_dir, **options):
        grid = np.arange(options["snr_min"], options["snr_max"] + 1e-9, options["snr_step"]).round(6).tolist()
        table = config.baseline.table
        max_iters = config.baseline.ldpc_max_iters
        seed = config.channel.seed
        rows = []
        for entry in table.entries:
            rows += ber_sweep(entry.modulation, entry.code_rate, grid, options["bits"], seed, max_iters)
        csv_path = out_dir / "ber.csv"
        write_csv(csv_path, BER_FIELDS, rows)
        outputs = [csv_path]
        if options["calibrate"]:
            calibrated = calibrate_mcs(table, grid, options["bits"], options["target_ber"], seed, max_iters)
            table_path = out_dir / "mcs_calibrated.json"
            table_path.write_text(json.dumps({"mcs_table": calibrated.to_rows()}, indent=2))
            outputs.append(table_path)
            for entry in calibrated.entries:
                self.stdout.write(f"{entry.describe()}: {entry.min_snr_db:g} dB")
        return [], outputs
