from ...baseline import grid_patches, run_separation, vq_train
from ...codec import DOWNSAMPLE
from ...jscc import allocation_heat, serialize_frame
from ...metrics import aggregate, record, write_rd_csv
from ...pipeline import evaluate_grid
from ...storage import write_csv, write_ppm
from ..base import STAGE1_GRID, STAGE3_GRID, SYSTEM_FILE, ExperimentCommand, parse_snr


class Command(ExperimentCommand):
    help = "Send the trained grid through the channel once and score the received scene on the test views."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--snr-true", help="channel SNR in dB, or 'inf' (default: first channel.snr_db)")
        parser.add_argument("--snr-est", help="SNR the transmitter designs for (default: channel.snr_est_db)")
        parser.add_argument("--method", choices=["jscc", "separation"], default="jscc")
        parser.add_argument("--stage", type=int, choices=[1, 3], default=3, help="which grid checkpoint to send")
        parser.add_argument("--save-images", action="store_true", help="write received test-view renders as PPM")

    def run(self, config, out_dir, **options):
        snr_true = parse_snr(options["snr_true"]) if options.get("snr_true") else config.channel.snr_db[0]
        snr_est = parse_snr(options["snr_est"]) if options.get("snr_est") else config.channel.snr_est_db
        method = options["method"]
        dataset = self.load_dataset(out_dir, config)
        grid_name = STAGE3_GRID if options["stage"] == 3 else STAGE1_GRID
        grid = self.load_grid(out_dir, grid_name, "finetune" if options["stage"] == 3 else "fit")
        inputs = [out_dir / grid_name]
        outputs = []
        seed = config.channel.seed
        if method == "jscc":
            system = self.load_system(out_dir, config)
            inputs.append(out_dir / SYSTEM_FILE)
            outcome = system.run(grid, snr_true, seed, max_iters=config.baseline.ldpc_max_iters)
            frame_path = out_dir / "frame.nfrm"
            frame_path.write_bytes(serialize_frame(outcome.frame))
            heat_path = out_dir / "allocation_heat.csv"
            lattice = tuple(d // DOWNSAMPLE for d in grid.dims)
            write_csv(heat_path, ("d", "r", "c", "k_bar"), allocation_heat(lattice, outcome.frame.alloc))
            outputs += [frame_path, heat_path]
            received, cbr = outcome.grid, outcome.cbr
        else:
            samples, _ = grid_patches(grid, config.baseline.patch)
            codebook = vq_train(samples, config.baseline.codebook_size, config.baseline.kmeans_iters, config.seed)
            outcome = run_separation(
                grid,
                codebook,
                config.baseline.table,
                snr_est,
                snr_true,
                config.baseline.patch,
                seed,
                config.baseline.ldpc_max_iters,
            )
            received, cbr = outcome.grid, outcome.cbr
        mean_psnr, mean_ssim, images = evaluate_grid(received, dataset.test_views, config.scene.steps_per_ray)
        entry = record(dataset.scene_id, method, snr_true, snr_est, cbr, mean_psnr, mean_ssim, config.seed)
        self.persist([entry])
        csv_path = out_dir / f"transmit_{method}.csv"
        write_rd_csv(csv_path, aggregate([entry]))
        outputs.append(csv_path)
        if options.get("save_images"):
            for view, image in zip(dataset.test_views, images):
                path = out_dir / f"received_{method}_{view.direction_id:03d}.ppm"
                write_ppm(path, image)
                outputs.append(path)
        self.stdout.write(f"{method} at {snr_true} dB (est {snr_est}): CBR {cbr:.5f}, PSNR {mean_psnr:.2f} dB, SSIM {mean_ssim:.4f}")
        return inputs, outputs
