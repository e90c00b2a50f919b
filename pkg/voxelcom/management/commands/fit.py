from ...training import stage1_fit_nerf
from ..base import STAGE1_GRID, VIEWS_FILE, ExperimentCommand


class Command(ExperimentCommand):
    help = "Stage 1: fit a voxel feature grid to the training views."

    def run(self, config, out_dir, **options):
        dataset = self.load_dataset(out_dir, config)
        grid, log = stage1_fit_nerf(dataset, config.training, config.scene.dims, config.scene.channels)
        checkpoint = out_dir / STAGE1_GRID
        log_path = out_dir / "train_log_stage1.csv"
        self.save_grid(grid, checkpoint)
        log.write(log_path)
        self.report_views(grid, dataset, config.scene.steps_per_ray)
        return [out_dir / VIEWS_FILE], [checkpoint, log_path]
