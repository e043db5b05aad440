"""
Dataset generation, training and evaluation runs, saliency maps and the
end-to-end experiment
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError

from autodiff import (GradCheckResult, Precision, Tensor, adjoint_gap, bce_loss, combined_loss, concat_channels,
                      conv2d, dice_loss, dot_const, grad_check, maxpool2d, relu, sigmoid, upsample_nearest)
from dsp import ca_cfar, calibrate_keep_fraction, radar_heatmap, radar_input_image
from errors import ConfigError, DataError, EmptyCloudError, NumericError, SimulationError
from model import (ModelParams, Sample, TrainingResult, build_unet, forward, forward_graph, saliency,
                   stacks_from_sequence, train)
from pointcloud import PointCloud2D, cdf_samples, chamfer, mod_hausdorff, polar_to_points, threshold_image
from schemas import (CfarConfig, DatasetManifest, EnvironmentKind, ExperimentConfig, LossConfig, MethodMetrics,
                     MetricsReport, SimConfig, Split, TrajectoryEntry, UNetConfig, check_unet_matches_sim)
from sim import frame_seed, gen_scene, gen_trajectory, lidar_scan, radar_snapshot
from storage import (FrameRecord, load_checkpoint, read_stack, read_trajectory, save_checkpoint, triptych,
                     write_pgm, write_stack, write_trajectory)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MODEL_METHOD = "radarhd"
OP_TOLERANCE = 1e-6
NET_TOLERANCE = 1e-5


def _derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def cfar_method(threshold_db: float) -> str:
    return f"cfar_{threshold_db:g}dB"


# Dataset
def simulate_trajectory(entry: TrajectoryEntry, cfg: SimConfig, step: float, workers: int = 1) -> List[FrameRecord]:
    """Frame records of one trajectory; frames are independent given their seeds"""
    scene = gen_scene(entry.scene_seed, entry.kind)
    try:
        poses = gen_trajectory(scene, entry.n_frames, step, entry.traj_seed)
    except SimulationError as e:
        raise SimulationError(str(e), trajectory_id=entry.id) from e
    lidar_cfg = cfg.model_copy(update={"smoke": entry.smoke})

    def frame(i: int) -> FrameRecord:
        pose = poses[i]
        snap = radar_snapshot(scene, pose, cfg, frame_seed(entry.traj_seed, i))
        return FrameRecord.build(radar_input_image(snap, cfg), lidar_scan(scene, pose, lidar_cfg), pose, i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(frame, range(entry.n_frames)))
    return [frame(i) for i in range(entry.n_frames)]


def regenerate_heatmaps(entry: TrajectoryEntry, cfg: SimConfig, step: float):
    """Radar magnitude heatmaps rebuilt from the recorded seeds"""
    scene = gen_scene(entry.scene_seed, entry.kind)
    poses = gen_trajectory(scene, entry.n_frames, step, entry.traj_seed)
    return [radar_heatmap(radar_snapshot(scene, p, cfg, frame_seed(entry.traj_seed, i)), cfg)
            for i, p in enumerate(poses)]


def calibrate_on(plan: Sequence[TrajectoryEntry], cfg: SimConfig, step: float) -> float:
    """Dataset-wide keep_fraction from the training frames (every frame if there are none)"""
    entries = [e for e in plan if e.split == Split.TRAIN] or [e for e in plan if not e.smoke]
    heatmaps = [h for entry in entries for h in regenerate_heatmaps(entry, cfg, step)]
    keep = calibrate_keep_fraction(heatmaps, cfg.keep_cfar, cfg.keep_ratio)
    logger.info(f"Calibrated keep_fraction={keep:.4f} on {len(heatmaps)} frames "
                f"({cfg.keep_ratio:g}x CA-CFAR at {cfg.keep_cfar.threshold_db:g} dB)")
    return keep


def plan_trajectories(seed: int, n_train: int, n_test_same: int, n_test_similar: int, n_test_different: int,
                      frames: int, smoke: bool = False) -> List[TrajectoryEntry]:
    """Trajectory entries with derived seeds; same-kind trajectories share one office"""
    office_seed = _derive_seed(seed, 0)
    plan = ([(Split.TRAIN, EnvironmentKind.SAME)] * n_train
            + [(Split.TEST_SAME, EnvironmentKind.SAME)] * n_test_same
            + [(Split.TEST_SIMILAR, EnvironmentKind.SIMILAR)] * n_test_similar
            + [(Split.TEST_DIFFERENT, EnvironmentKind.DIFFERENT)] * n_test_different)
    entries, counters = [], {}
    for k, (split, kind) in enumerate(plan):
        n = counters.get(split, 0)
        counters[split] = n + 1
        traj_id = f"{split.value}_{n:03d}"
        scene_seed = office_seed if kind == EnvironmentKind.SAME else _derive_seed(seed, 2, k)
        entries.append(TrajectoryEntry(id=traj_id, kind=kind, split=split, n_frames=frames, scene_seed=scene_seed,
                                       traj_seed=_derive_seed(seed, 1, k), file=f"{traj_id}.rhd",
                                       offsets=[0] * frames))
    if smoke:
        for entry in [e for e in entries if e.split == Split.TEST_SAME]:
            smoke_id = entry.id.replace(Split.TEST_SAME.value, Split.TEST_SMOKE.value)
            entries.append(entry.model_copy(update={"id": smoke_id, "split": Split.TEST_SMOKE, "smoke": True,
                                                    "reference_id": entry.id, "file": f"{smoke_id}.rhd"}))
    return entries


def make_dataset(out_dir: Path, n_train: int, n_test_same: int, n_test_similar: int, n_test_different: int,
                 frames: int, cfg: SimConfig, seed: int, step: float = 0.1, smoke: bool = False,
                 workers: int = 1) -> DatasetManifest:
    """Write every trajectory file plus manifest.json; output bytes depend only on the arguments"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {out_dir}: {e}") from e
    cfg = cfg.model_copy(update={"rng_seed": seed, "smoke": False})
    plan = plan_trajectories(seed, n_train, n_test_same, n_test_similar, n_test_different, frames, smoke)
    if cfg.keep_fraction is None:
        cfg = cfg.model_copy(update={"keep_fraction": calibrate_on(plan, cfg, step)})
    entries = []
    for entry in plan:
        records = simulate_trajectory(entry, cfg, step, workers)
        try:
            offsets = write_trajectory(out_dir / entry.file, records)
        except OSError as e:
            raise DataError(f"cannot write {out_dir / entry.file}: {e}") from e
        entries.append(entry.model_copy(update={"offsets": offsets}))
        logger.info(f"Wrote trajectory {entry.id} ({entry.kind.value}, {frames} frames)")
    manifest = DatasetManifest(sim_config=cfg, step=step, trajectories=entries)
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Dataset written to {out_dir}: {len(entries)} trajectories")
    return manifest


def load_dataset(data_dir: Path) -> DatasetManifest:
    """Parse manifest.json; split disjointness is re-checked by the schema"""
    path = Path(data_dir) / MANIFEST_NAME
    try:
        manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"no {MANIFEST_NAME} in {data_dir}") from e
    except ValidationError as e:
        raise DataError(f"invalid manifest {path}: {e}") from e
    for entry in manifest.trajectories:
        if not (Path(data_dir) / entry.file).is_file():
            raise DataError(f"trajectory file missing: {entry.file}")
    return manifest


def load_records(data_dir: Path, manifest: DatasetManifest, entry: TrajectoryEntry) -> List[FrameRecord]:
    return read_trajectory(Path(data_dir) / entry.file, entry.offsets, manifest.sim_config.max_range)


def load_samples(data_dir: Path, manifest: DatasetManifest, entries: Sequence[TrajectoryEntry],
                 history: int) -> List[Sample]:
    samples = []
    for entry in entries:
        records = load_records(data_dir, manifest, entry)
        stacks = stacks_from_sequence([r.radar.data for r in records], history)
        samples += [(s, r.lidar.data.astype(np.float32)) for s, r in zip(stacks, records)]
    return samples


def export_stack(data_dir: Path, traj_id: str, index: int, history: int, out: Path) -> np.ndarray:
    """Write the input stack of one recorded frame as an RHD1 file"""
    manifest = load_dataset(data_dir)
    try:
        entry = manifest.entry(traj_id)
    except KeyError as e:
        raise DataError(f"unknown trajectory {traj_id}") from e
    if not 0 <= index < entry.n_frames:
        raise DataError(f"frame {index} outside {traj_id} ({entry.n_frames} frames)")
    records = load_records(data_dir, manifest, entry)[:index + 1]
    stack = stacks_from_sequence([r.radar.data for r in records], history)[-1]
    write_stack(out, stack)
    logger.info(f"Exported stack of {traj_id}[{index}] to {out}")
    return stack


# Training
def _register(record, db, *args) -> None:
    """Registry writes never fail a run"""
    try:
        record(db, *args)
    except SQLAlchemyError as e:
        db.rollback()
        logger.warning(f"Registry unavailable, run not recorded: {e}")


def _write_loss_csv(path: Path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, value in enumerate(curve):
            writer.writerow([epoch, repr(float(value))])


def run_training(data_dir: Path, cfg: ExperimentConfig, epochs: int, checkpoint_out: Path, resume: bool = False,
                 db=None) -> TrainingResult:
    """Train on the train split; writes the checkpoint and <checkpoint>.loss.csv"""
    manifest = load_dataset(data_dir)
    try:
        check_unet_matches_sim(cfg.unet, manifest.sim_config)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    entries = manifest.split(Split.TRAIN)
    if not entries:
        raise DataError(f"{data_dir} has no training trajectories")
    samples = load_samples(data_dir, manifest, entries, cfg.unet.history)

    checkpoint_out = Path(checkpoint_out)
    state, start_epoch, prior = None, 0, []
    if resume and checkpoint_out.exists():
        ckpt = load_checkpoint(checkpoint_out)
        if ckpt.params.config != cfg.unet:
            raise ConfigError("checkpoint U-Net shape differs from the config")
        params, state, start_epoch, prior = ckpt.params, ckpt.optimizer_state, ckpt.epoch, list(ckpt.loss_curve)
        logger.info(f"Resuming from {checkpoint_out} at epoch {start_epoch}")
    else:
        params = build_unet(cfg.unet, cfg.adam.seed)

    logger.info(f"Training on {len(samples)} samples for {epochs} epochs")
    result = train(params, samples, cfg.loss, cfg.adam, epochs, cfg.training.batch_size, state, start_epoch)
    curve = prior + result.loss_curve
    save_checkpoint(checkpoint_out, result.params, result.optimizer_state, start_epoch + epochs, curve)
    _write_loss_csv(Path(f"{checkpoint_out}.loss.csv"), curve)

    if db is not None:
        from database import record_training
        _register(record_training, db, str(data_dir), str(checkpoint_out), cfg.model_dump(mode="json"),
                  result.loss_curve, start_epoch)
    return TrainingResult(result.params, curve, result.optimizer_state)


# Evaluation
class FramePair(NamedTuple):
    traj_id: str
    index: int
    chamfer: Optional[float]
    mod_hausdorff: Optional[float]
    n_points: int


def score(pred: PointCloud2D, truth: PointCloud2D) -> Tuple[Optional[float], Optional[float]]:
    try:
        return chamfer(pred, truth), mod_hausdorff(pred, truth)
    except EmptyCloudError:
        return None, None


def summarize(method: str, pairs: Sequence[FramePair]) -> MethodMetrics:
    cham = [p.chamfer for p in pairs if p.chamfer is not None]
    haus = [p.mod_hausdorff for p in pairs if p.mod_hausdorff is not None]
    return MethodMetrics(
        method=method,
        n_pairs=len(cham),
        n_missing=len(pairs) - len(cham),
        mean_points=float(np.mean([p.n_points for p in pairs])) if pairs else 0.0,
        chamfer=cham,
        mod_hausdorff=haus,
        median_chamfer=float(np.median(cham)) if cham else None,
        median_mod_hausdorff=float(np.median(haus)) if haus else None,
        cdf_chamfer=cdf_samples(cham),
        cdf_mod_hausdorff=cdf_samples(haus),
    )


def _write_reports(report_dir: Path, report: MetricsReport, pairs: Dict[str, List[FramePair]]) -> None:
    report_dir.mkdir(parents=True, exist_ok=True)
    for method, metrics in report.methods.items():
        with open(report_dir / f"cdf_{method}.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["percentile", "chamfer", "mod_hausdorff"])
            for p in sorted(metrics.cdf_chamfer):
                writer.writerow([p, repr(metrics.cdf_chamfer[p]), repr(metrics.cdf_mod_hausdorff[p])])
        with open(report_dir / f"pairs_{method}.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["trajectory", "frame", "chamfer", "mod_hausdorff", "n_points"])
            for pair in pairs[method]:
                writer.writerow([pair.traj_id, pair.index,
                                 "" if pair.chamfer is None else repr(pair.chamfer),
                                 "" if pair.mod_hausdorff is None else repr(pair.mod_hausdorff), pair.n_points])
    with open(report_dir / "summary.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "n_pairs", "n_missing", "mean_points", "median_chamfer", "median_mod_hausdorff"])
        writer.writerow(["lidar", report.n_frames, 0, repr(report.lidar_mean_points), "", ""])
        for m in report.methods.values():
            writer.writerow([m.method, m.n_pairs, m.n_missing, repr(m.mean_points),
                             "" if m.median_chamfer is None else repr(m.median_chamfer),
                             "" if m.median_mod_hausdorff is None else repr(m.median_mod_hausdorff)])
    (report_dir / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")


def run_eval(data_dir: Path, split: Split, checkpoint: Path, cfar_thresholds: Sequence[float], tau: float,
             report_dir: Path, cfar: Optional[CfarConfig] = None, n_triptychs: int = 0, db=None) -> MetricsReport:
    """Score the model and every CFAR threshold against lidar on one test split"""
    split = Split(split)
    manifest = load_dataset(data_dir)
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split.value} is empty in {data_dir}")
    ckpt = load_checkpoint(checkpoint)
    params = ckpt.params
    try:
        check_unet_matches_sim(params.config, manifest.sim_config)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    cfar = cfar or ExperimentConfig().cfar
    sim_cfg = manifest.sim_config
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)

    methods = [MODEL_METHOD] + [cfar_method(t) for t in cfar_thresholds]
    pairs: Dict[str, List[FramePair]] = {m: [] for m in methods}
    lidar_points = []
    written = 0
    for entry in entries:
        records = load_records(data_dir, manifest, entry)
        labels = records
        if entry.reference_id is not None:
            labels = load_records(data_dir, manifest, manifest.entry(entry.reference_id))
        stacks = stacks_from_sequence([r.radar.data for r in records], params.config.history)
        heatmaps = regenerate_heatmaps(entry, sim_cfg, manifest.step)

        for i, (stack, label) in enumerate(zip(stacks, labels)):
            truth = polar_to_points(label.lidar)
            lidar_points.append(len(truth))
            probability = forward(params, stack, sim_cfg.max_range)
            prediction = threshold_image(probability, tau)
            clouds = {MODEL_METHOD: polar_to_points(prediction)}
            for t in cfar_thresholds:
                detections = ca_cfar(heatmaps[i], cfar.model_copy(update={"threshold_db": t}))
                clouds[cfar_method(t)] = polar_to_points(detections)
            for method, cloud in clouds.items():
                c, h = score(cloud, truth)
                pairs[method].append(FramePair(entry.id, i, c, h, len(cloud)))
            if written < n_triptychs:
                image = triptych(records[i].radar.data, prediction.data, label.lidar.data)
                write_pgm(report_dir / f"triptych_{entry.id}_{i:04d}.pgm", image)
                written += 1

    metrics = {m: summarize(m, pairs[m]) for m in methods}
    for m in metrics.values():
        if m.n_missing:
            logger.warning(f"{m.method}: {m.n_missing} frames with an empty cloud excluded")
    report = MetricsReport(split=split, tau=tau, n_frames=len(lidar_points),
                           lidar_mean_points=float(np.mean(lidar_points)), methods=metrics)
    report = _with_ratios(report, cfar_thresholds)
    _write_reports(report_dir, report, pairs)
    logger.info(f"Report for {split.value} written to {report_dir}")

    if db is not None:
        from database import record_evaluation
        _register(record_evaluation, db, str(data_dir), str(checkpoint), report)
    return report


def _with_ratios(report: MetricsReport, cfar_thresholds: Sequence[float]) -> MetricsReport:
    """Best CFAR by median Chamfer; ratios are best-CFAR median over model median"""
    model = report.methods[MODEL_METHOD]
    candidates = [report.methods[cfar_method(t)] for t in cfar_thresholds]
    candidates = [m for m in candidates if m.median_chamfer is not None]
    if not candidates:
        return report
    best = min(candidates, key=lambda m: m.median_chamfer)
    update = {"best_cfar": best.method}
    if model.median_chamfer:
        update["chamfer_ratio"] = best.median_chamfer / model.median_chamfer
    if model.median_mod_hausdorff:
        update["mod_hausdorff_ratio"] = best.median_mod_hausdorff / model.median_mod_hausdorff
    return report.model_copy(update=update)


# Inference and attribution
def run_infer(checkpoint: Path, stack_path: Path, out: Path, tau: Optional[float] = None):
    """Probability map (or its threshold at tau) of one stack as a PGM"""
    params = load_checkpoint(checkpoint).params
    image = forward(params, read_stack(stack_path))
    if tau is not None:
        image = threshold_image(image, tau)
    write_pgm(out, image.data)
    logger.info(f"Prediction written to {out}")
    return image


def run_saliency(checkpoint: Path, stack_path: Path, pixel: Tuple[int, int], out_dir: Path) -> np.ndarray:
    """One min-max normalized PGM per input channel plus saliency.csv of raw values"""
    params = load_checkpoint(checkpoint).params
    attribution = saliency(params, read_stack(stack_path), pixel)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for c, channel in enumerate(attribution):
        write_pgm(out_dir / f"channel_{c:02d}.pgm", channel, normalize=True)
    with open(out_dir / "saliency.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["channel", "range_bin", "azimuth_bin", "value"])
        for (c, r, a), value in np.ndenumerate(attribution):
            writer.writerow([c, r, a, repr(float(value))])
    logger.info(f"Saliency of pixel {pixel} written to {out_dir}")
    return attribution


# Experiment
GENERALIZATION_SPLITS = (Split.TEST_SAME, Split.TEST_SIMILAR, Split.TEST_DIFFERENT)


def ordered_with_slack(medians: Dict[str, Optional[float]], slack: float = 1.1) -> bool:
    """same <= similar <= different, each step allowed `slack` times the next median"""
    values = [medians.get(s.value) for s in GENERALIZATION_SPLITS]
    if None in values:
        return False
    return all(a <= slack * b for a, b in zip(values, values[1:]))


def run_experiment(out_dir: Path, seed: int, cfg: ExperimentConfig, n_train: int = 8, n_test: int = 4,
                   frames: int = 100, step: float = 0.1, workers: int = 1, db=None) -> dict:
    """simulate -> train -> eval on every split; writes experiment.json"""
    out_dir = Path(out_dir)
    data_dir, ckpt = out_dir / "data", out_dir / "model.rhd"
    make_dataset(data_dir, n_train, n_test, n_test, n_test, frames, cfg.sim, seed, step, smoke=True,
                 workers=workers)
    run_training(data_dir, cfg, cfg.training.epochs, ckpt, db=db)
    reports = {}
    for split in (Split.TEST_SAME, Split.TEST_SIMILAR, Split.TEST_DIFFERENT, Split.TEST_SMOKE):
        reports[split] = run_eval(data_dir, split, ckpt, cfg.training.cfar_thresholds, cfg.training.tau,
                                  out_dir / "reports" / split.value, cfg.cfar, cfg.training.n_triptychs, db=db)

    same = reports[Split.TEST_SAME]
    cr, hr = same.chamfer_ratio or 0.0, same.mod_hausdorff_ratio or 0.0
    chamfers = {s.value: reports[s].methods[MODEL_METHOD].median_chamfer for s in reports}
    medians = {s.value: reports[s].methods[MODEL_METHOD].median_mod_hausdorff for s in reports}
    model_same = same.methods[MODEL_METHOD]
    model_smoke = reports[Split.TEST_SMOKE].methods[MODEL_METHOD]
    summary = {
        "seed": seed,
        "chamfer_ratio": same.chamfer_ratio,
        "mod_hausdorff_ratio": same.mod_hausdorff_ratio,
        "beats_cfar": max(cr, hr) >= 1.5 and min(cr, hr) >= 1.2,
        "median_chamfer": chamfers,
        "median_mod_hausdorff": medians,
        "generalization_ordered": ordered_with_slack(chamfers) and ordered_with_slack(medians),
        "smoke_identical": (model_same.chamfer == model_smoke.chamfer
                            and model_same.mod_hausdorff == model_smoke.mod_hausdorff),
    }
    (out_dir / "experiment.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Experiment summary written to {out_dir / 'experiment.json'}")
    return summary


# Gradient checks
class CheckOutcome(NamedTuple):
    name: str
    max_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_error < self.tolerance


def op_check_cases(rng: np.random.Generator) -> Dict[str, Tuple]:
    """name -> (build, leaves) pairs over small f64 tensors"""
    def leaf(*shape, low=None, high=None):
        if low is None:
            return Tensor(rng.standard_normal(shape))
        return Tensor(rng.uniform(low, high, size=shape))

    checks = {}
    x, w, b = leaf(3, 6, 8), leaf(4, 3, 3, 3), leaf(4)
    c = rng.standard_normal((4, 6, 8))
    checks["conv2d"] = (lambda: dot_const(conv2d(x, w, b), c), {"x": x, "w": w, "b": b})

    lx, lw, lb = leaf(5, 1, 1), leaf(3, 5, 1, 1), leaf(3)
    lc = rng.standard_normal((3, 1, 1))
    checks["linear"] = (lambda: dot_const(conv2d(lx, lw, lb), lc), {"x": lx, "w": lw, "b": lb})

    r = leaf(2, 4, 4)
    rc = rng.standard_normal((2, 4, 4))
    checks["relu"] = (lambda: dot_const(relu(r), rc), {"x": r})

    p = leaf(2, 4, 8)
    pool_c = (rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 4, 4)))
    checks["maxpool2d_2x2"] = (lambda: dot_const(maxpool2d(p, (2, 2)), pool_c[0]), {"x": p})
    checks["maxpool2d_1x2"] = (lambda: dot_const(maxpool2d(p, (1, 2)), pool_c[1]), {"x": p})

    u = leaf(2, 3, 4)
    up_c = (rng.standard_normal((2, 6, 8)), rng.standard_normal((2, 3, 8)))
    checks["upsample_2x2"] = (lambda: dot_const(upsample_nearest(u, (2, 2)), up_c[0]), {"x": u})
    checks["upsample_1x2"] = (lambda: dot_const(upsample_nearest(u, (1, 2)), up_c[1]), {"x": u})

    a, bb = leaf(2, 3, 3), leaf(3, 3, 3)
    cc = rng.standard_normal((5, 3, 3))
    checks["concat_channels"] = (lambda: dot_const(concat_channels(a, bb), cc), {"a": a, "b": bb})

    s = leaf(2, 4, 4)
    sc = rng.standard_normal((2, 4, 4))
    checks["sigmoid"] = (lambda: dot_const(sigmoid(s), sc), {"x": s})

    o = leaf(1, 6, 6, low=0.05, high=0.95)
    g = (rng.random((1, 6, 6)) < 0.4).astype(np.float64)
    checks["bce_loss"] = (lambda: bce_loss(o, g), {"o": o})
    checks["dice_loss"] = (lambda: dice_loss(o, g), {"o": o})
    checks["combined_loss"] = (lambda: combined_loss(o, g, LossConfig()), {"o": o})
    return checks


def _adjoint_checks() -> Dict[str, float]:
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    zero_b = Tensor(np.zeros(4))
    other = Tensor(rng.standard_normal((2, 5, 6)))
    return {
        "conv2d": adjoint_gap(lambda x: conv2d(x, w, zero_b), (3, 5, 6)),
        "upsample_2x2": adjoint_gap(lambda x: upsample_nearest(x, (2, 2)), (3, 5, 6)),
        "upsample_1x2": adjoint_gap(lambda x: upsample_nearest(x, (1, 2)), (3, 5, 6)),
        "concat_channels": adjoint_gap(lambda x: concat_channels(x, other), (3, 5, 6)),
    }


def unet_grad_check(cfg: UNetConfig, seed: int = 0, n_coords: int = 20) -> GradCheckResult:
    """Composed check of combined_loss(forward(stack), label) w.r.t. the U-Net parameters"""
    params = build_unet(cfg, seed).astype(Precision.F64)
    rng = np.random.default_rng(seed + 1)
    stack = rng.random(cfg.in_shape) * (rng.random(cfg.in_shape) < 0.3)
    label = (rng.random(cfg.out_shape) < 0.1).astype(np.float64)
    loss = LossConfig()
    return grad_check(lambda: combined_loss(forward_graph(params, stack), label, loss), params.tensors,
                      h=1e-5, n_coords=n_coords, seed=seed, min_magnitude=1e-4)


def gradcheck_suite(seed: int = 0, unet: Optional[UNetConfig] = None) -> List[CheckOutcome]:
    """Per-op finite-difference checks, adjointness of the linear ops and the composed network"""
    rng = np.random.default_rng(seed)
    outcomes = []
    for name, (build, leaves) in op_check_cases(rng).items():
        result = grad_check(build, leaves, h=1e-5, n_coords=20, seed=seed, min_magnitude=1e-6)
        outcomes.append(CheckOutcome(name, result.max_error, result.n_checked, OP_TOLERANCE))
    for name, gap in _adjoint_checks().items():
        outcomes.append(CheckOutcome(f"adjoint_{name}", gap, 1, 1e-10))
    result = unet_grad_check(unet or UNetConfig(), seed)
    outcomes.append(CheckOutcome("unet", result.max_error, result.n_checked, NET_TOLERANCE))
    for outcome in outcomes:
        level = logging.INFO if outcome.passed else logging.ERROR
        logger.log(level, f"{outcome.name}: max error {outcome.max_error:.3e} over {outcome.n_checked} coords")
    return outcomes


def require_gradcheck(outcomes: Sequence[CheckOutcome]) -> None:
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
