from ...scene import generate_scene, make_dataset
from ...storage import write_ppm, write_views
from ..base import IMAGE_DIR, SCENE_FILE, VIEWS_FILE, ExperimentCommand


class Command(ExperimentCommand):
    help = "Generate an analytic toy scene, its ground-truth grid and rendered train/test views."

    def run(self, config, out_dir, **options):
        scene = config.scene
        grid, _ = generate_scene(scene.kind, scene.seed, scene.dims, scene.channels)
        dataset = make_dataset(
            grid,
            scene.scene_id,
            train_views=scene.train_views,
            test_views=scene.test_views,
            image_size=scene.image_size,
            radius=scene.camera_radius,
            fov_deg=scene.fov_deg,
            steps=scene.steps_per_ray,
        )
        image_dir = out_dir / IMAGE_DIR
        image_dir.mkdir(exist_ok=True)
        outputs = [out_dir / SCENE_FILE, out_dir / VIEWS_FILE]
        grid.save(outputs[0])
        records = []
        for split, views in (("train", dataset.train_views), ("test", dataset.test_views)):
            for view in views:
                record = view.to_record(split)
                record["image"] = f"{split}_{view.direction_id:03d}.ppm"
                write_ppm(image_dir / record["image"], view.image)
                outputs.append(image_dir / record["image"])
                records.append(record)
        write_views(outputs[1], records)
        self.stdout.write(
            f"scene {dataset.scene_id}: {scene.dims} grid, {len(dataset.train_views)} train / "
            f"{len(dataset.test_views)} test views"
        )
        return [], outputs
