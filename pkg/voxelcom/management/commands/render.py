from pathlib import Path

from django.core.management.base import CommandError

from ...scene import Intrinsics, View, VoxelFeatureGrid, look_at, render
from ...storage import read_checkpoint, write_ppm
from ..base import CONFIG_ERROR, ExperimentCommand, eye_from_pose


class Command(ExperimentCommand):
    help = "Render a grid checkpoint (or scene file) from a dataset view or an arbitrary camera position."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--checkpoint", required=True, help="grid checkpoint (.vckp) or scene file (.vfg)")
        parser.add_argument("--pose", required=True, help="view direction id, or x,y,z camera position")
        parser.add_argument("--image-size", type=int, help="default: scene.image_size")
        parser.add_argument("--output", default="render.ppm")

    def run(self, config, out_dir, **options):
        path = self.require(Path(options["checkpoint"]), "fit")
        if path.suffix == ".vfg":
            grid = VoxelFeatureGrid.load(path)
        else:
            grid = VoxelFeatureGrid.from_checkpoint(read_checkpoint(path))
        pose = options["pose"]
        size = options.get("image_size") or config.scene.image_size
        intrinsics = Intrinsics.from_fov(size, config.scene.fov_deg)
        if pose.isdigit():
            view = self.dataset_view(out_dir, config, int(pose))
            view = View(view.pose, intrinsics, direction_id=view.direction_id)
        else:
            view = View(look_at(eye_from_pose(pose, config.scene.camera_radius)), intrinsics)
        image = render(grid, view, config.scene.steps_per_ray).rgb.data
        output = out_dir / options["output"]
        write_ppm(output, image)
        return [path], [output]

    def dataset_view(self, out_dir, config, direction_id):
        dataset = self.load_dataset(out_dir, config)
        for view in dataset.train_views + dataset.test_views:
            if view.direction_id == direction_id:
                return view
        raise CommandError(f"no view with direction id {direction_id}", returncode=CONFIG_ERROR)
