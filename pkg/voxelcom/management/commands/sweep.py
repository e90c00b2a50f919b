from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext

from ...baseline import grid_patches, run_separation, vq_train
from ...codec import DOWNSAMPLE
from ...jscc import allocation_heat
from ...metrics import aggregate, record, write_rd_csv
from ...pipeline import ExperimentSettings, JsccSystem, degradation_experiment, evaluate_grid
from ...storage import write_csv
from ...training import stage2_train_codec
from ..base import STAGE1_GRID, STAGE3_GRID, SYSTEM_FILE, VIEWS_FILE, ExperimentCommand

HEAT_FIELDS = ("d", "r", "c", "k_bar")


class Command(ExperimentCommand):
    help = "Rate-distortion sweep over lambda / codebook size (--axis cbr) or true-SNR degradation sweep (--axis snr)."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--axis", choices=["cbr", "snr"], default="cbr")
        parser.add_argument("--method", choices=["jscc", "separation", "both"], default="both")
        parser.add_argument("--parallel", type=int, default=1, help="worker threads for independent sweep points")

    def run(self, config, out_dir, **options):
        workers = max(1, options.get("parallel") or 1)
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        with pool or nullcontext():
            if options["axis"] == "cbr":
                return self.cbr_sweep(config, out_dir, options["method"], pool)
            return self.snr_sweep(config, out_dir, pool)

    def cbr_sweep(self, config, out_dir, method, pool):
        dataset = self.load_dataset(out_dir, config)
        grid = self.load_grid(out_dir, STAGE1_GRID, "fit")
        snr = config.channel.snr_est_db
        steps = config.scene.steps_per_ray
        lattice = tuple(d // DOWNSAMPLE for d in grid.dims)

        def jscc_point(lam):
            point = config.with_lambda(lam)
            system = JsccSystem(point.codec, point.jscc)
            stage2_train_codec(grid, point.training, system.codec, system.jscc, point.jscc)
            outcome = system.run(grid, snr, config.channel.seed, max_iters=config.baseline.ldpc_max_iters)
            mean_psnr, mean_ssim, _ = evaluate_grid(outcome.grid, dataset.test_views, steps)
            entry = record(dataset.scene_id, "jscc", snr, snr, outcome.cbr, mean_psnr, mean_ssim, config.seed, f"lambda={lam:g}")
            return entry, allocation_heat(lattice, outcome.frame.alloc)

        def separation_point(size):
            samples, _ = grid_patches(grid, config.baseline.patch)
            codebook = vq_train(samples, size, config.baseline.kmeans_iters, config.seed, dataset.scene_id)
            outcome = run_separation(
                grid, codebook, config.baseline.table, snr, snr, config.baseline.patch, config.channel.seed,
                config.baseline.ldpc_max_iters,
            )
            mean_psnr, mean_ssim, _ = evaluate_grid(outcome.grid, dataset.test_views, steps)
            return record(dataset.scene_id, "separation", snr, snr, outcome.cbr, mean_psnr, mean_ssim, config.seed, f"K={size}")

        run_map = pool.map if pool is not None else map
        records = []
        outputs = []
        if method in ("jscc", "both"):
            lambdas = list(config.codec.lambdas)
            results = list(run_map(jscc_point, lambdas))
            records += [entry for entry, _ in results]
            heat_index = lambdas.index(config.codec.lam) if config.codec.lam in lambdas else 0
            heat_path = out_dir / "allocation_heat.csv"
            write_csv(heat_path, HEAT_FIELDS, results[heat_index][1])
            outputs.append(heat_path)
        if method in ("separation", "both"):
            records += list(run_map(separation_point, list(config.baseline.codebook_sizes)))
        self.persist(records)
        csv_path = out_dir / "rd_cbr.csv"
        write_rd_csv(csv_path, aggregate(records))
        outputs.insert(0, csv_path)
        self.stdout.write(f"cbr sweep: {len(records)} point(s)")
        return [out_dir / VIEWS_FILE, out_dir / STAGE1_GRID], outputs

    def snr_sweep(self, config, out_dir, pool):
        dataset = self.load_dataset(out_dir, config)
        grid = self.load_grid(out_dir, STAGE3_GRID, "finetune")
        system = self.load_system(out_dir, config)
        baseline = config.baseline
        samples, _ = grid_patches(grid, baseline.matched_patch)
        codebook = vq_train(samples, baseline.matched_codebook_size, baseline.kmeans_iters, config.seed, dataset.scene_id)
        settings = ExperimentSettings(
            snr_true_grid=tuple(config.channel.snr_db),
            snr_est_db=config.channel.snr_est_db,
            steps=config.scene.steps_per_ray,
            patch=baseline.matched_patch,
            max_iters=config.baseline.ldpc_max_iters,
            seed=config.channel.seed,
            scene_id=dataset.scene_id,
        )
        records = degradation_experiment(grid, system, dataset.test_views, codebook, config.baseline.table, settings, pool)
        mismatched = {entry.label for entry in records if entry.label.startswith("CBR mismatch")}
        for label in sorted(mismatched):
            self.stderr.write(self.style.WARNING(f"snr sweep: {label}"))
        self.persist(records)
        csv_path = out_dir / "rd_snr.csv"
        write_rd_csv(csv_path, aggregate(records))
        self.stdout.write(f"snr sweep: {len(records)} point(s)")
        return [out_dir / VIEWS_FILE, out_dir / STAGE3_GRID, out_dir / SYSTEM_FILE], [csv_path]
