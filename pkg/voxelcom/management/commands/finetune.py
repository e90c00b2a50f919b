from ...training import stage3_finetune_nerf
from ..base import STAGE1_GRID, STAGE3_GRID, SYSTEM_FILE, VIEWS_FILE, ExperimentCommand


class Command(ExperimentCommand):
    help = "Stage 3: fine-tune the grid through the frozen encoder, channel and decoder."

    def run(self, config, out_dir, **options):
        dataset = self.load_dataset(out_dir, config)
        grid = self.load_grid(out_dir, STAGE1_GRID, "fit")
        system = self.load_system(out_dir, config)
        tuned, log = stage3_finetune_nerf(grid, dataset, config.training, system.codec, system.jscc, config.jscc)
        checkpoint = out_dir / STAGE3_GRID
        log_path = out_dir / "train_log_stage3.csv"
        self.save_grid(tuned, checkpoint)
        log.write(log_path)
        self.report_views(tuned, dataset, config.scene.steps_per_ray)
        return [out_dir / VIEWS_FILE, out_dir / STAGE1_GRID, out_dir / SYSTEM_FILE], [checkpoint, log_path]
