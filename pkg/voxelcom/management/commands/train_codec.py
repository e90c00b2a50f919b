from ...pipeline import JsccSystem
from ...training import stage2_train_codec
from ..base import STAGE1_GRID, SYSTEM_FILE, ExperimentCommand


class Command(ExperimentCommand):
    help = "Stage 2: train the codec and JSCC heads on the frozen stage-1 grid."

    def run(self, config, out_dir, **options):
        grid = self.load_grid(out_dir, STAGE1_GRID, "fit")
        system = JsccSystem(config.codec, config.jscc)
        log = stage2_train_codec(grid, config.training, system.codec, system.jscc, config.jscc)
        checkpoint = out_dir / SYSTEM_FILE
        log_path = out_dir / "train_log_stage2.csv"
        system.save(checkpoint)
        log.write(log_path)
        last = log.reports[-1]
        self.stdout.write(f"R_v {last.R_v:.1f} bits, R_z {last.R_z:.1f} bits, feature MSE {last.feat_mse:.6f}")
        return [out_dir / STAGE1_GRID], [checkpoint, log_path]
