use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use regions::deviation::DeviationLine;
use regions::discovery::TraceLine;
use regions::measure::{deviation_from_lines, enumerate_segments, trace_lines};
use regions::model_io::{load_model_at, model_paths, read_tensor, save_model};
use regions::paths::{self as pathmod, PathSpec};
use regions::stats::{self, Metric, PairedRun};
use regions::toy::{self, DatasetKind, ToyDataset, TrainConfig};
use regions::{Error, Network, Tensor};

use crate::{
    DatasetArg, DeviationArgs, DiscoverArgs, Failure, Measure, PathsArgs, StatsArgs, StatsMetric, ToyCommon,
    ToySweepArgs, ToyTrainArgs,
};

type Outcome = Result<usize, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = create(path)?;
    for row in rows {
        let line = serde_json::to_string(row).map_err(Error::from)?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| {
            Failure::Data(Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, Failure> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> Failure {
    Failure::Data(Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn check_tau_batch(tau: f64, batch: usize) -> Result<(), Failure> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(usage(format!("--tau must be positive, got {tau}")));
    }
    if batch == 0 {
        return Err(usage("--batch must be at least 1"));
    }
    Ok(())
}

#[derive(Deserialize)]
struct NoiseStats {
    shape: Vec<usize>,
    /// One value per channel or per element.
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn expand_stats(values: &[f64], shape: &[usize], what: &str) -> Result<Tensor, Failure> {
    let len: usize = shape.iter().product();
    let data = if values.len() == len {
        values.to_vec()
    } else if !shape.is_empty() && values.len() == shape[0] && len % shape[0] == 0 {
        let plane = len / shape[0];
        values.iter().flat_map(|&v| std::iter::repeat_n(v, plane)).collect()
    } else {
        return Err(Failure::Data(Error::Input(format!(
            "noise {what} has {} values; expected one per channel or {len}",
            values.len()
        ))));
    };
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn paths(a: &PathsArgs) -> Outcome {
    let sources = [!a.images.is_empty(), a.noise.is_some(), a.centers.is_some()];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(usage("give exactly one of --images, --noise, --centers"));
    }
    if a.open && a.images.is_empty() {
        return Err(usage("--open requires --images"));
    }
    if a.anchors < 2 {
        return Err(usage("--anchors must be at least 2"));
    }
    if !(a.radius > 0.0 && a.radius.is_finite()) {
        return Err(usage("--radius must be positive"));
    }
    let pad = a.pad.unwrap_or_else(|| pathmod::default_pad(a.radius));

    let paths: Vec<PathSpec> = if let Some(stats_file) = &a.noise {
        let text = fs::read(stats_file).map_err(|e| io_err(stats_file, e))?;
        let s: NoiseStats = serde_json::from_slice(&text).map_err(|e| {
            Failure::Data(Error::Format {
                path: stats_file.clone(),
                msg: e.to_string(),
            })
        })?;
        let mean = expand_stats(&s.mean, &s.shape, "mean")?;
        let std = expand_stats(&s.std, &s.shape, "std")?;
        pathmod::build_noise_paths(&mean, &std, a.count, a.radius, a.anchors, pad, a.seed)?
    } else if let Some(centers_file) = &a.centers {
        let text = fs::read(centers_file).map_err(|e| io_err(centers_file, e))?;
        let centers: Vec<Vec<f64>> = serde_json::from_slice(&text).map_err(|e| {
            Failure::Data(Error::Format {
                path: centers_file.clone(),
                msg: e.to_string(),
            })
        })?;
        pathmod::build_orbit_paths(&centers, a.radius, a.anchors)?
    } else {
        let images = a.images.iter().map(read_tensor).collect::<Result<Vec<_>, _>>()?;
        if a.open {
            pathmod::build_open_paths(&images, a.shift_px)?
        } else {
            pathmod::build_circular_paths(&images, a.radius, a.anchors, pad)?
        }
    };
    if paths.is_empty() {
        return Err(Failure::Data(Error::Input("no usable paths".into())));
    }
    let index = pathmod::write_paths(&a.out, &paths)?;
    log::info!("wrote {} paths to {}", paths.len(), index.display());
    Ok(0)
}

pub fn discover(a: &DiscoverArgs) -> Outcome {
    check_tau_batch(a.tau, a.batch)?;
    let net = load_model_at(&a.model)?;
    let paths = pathmod::read_paths(&a.paths)?;
    let segments = enumerate_segments(&paths, a.tau)?;
    let lines = trace_lines(&net, &segments, a.batch)?;
    write_jsonl(&a.out, &lines)?;

    let mut anomalies = 0;
    for l in &lines {
        if let Some(e) = &l.error {
            log::error!("segment {} (path {}): {e}", l.segment_id, l.path_id);
            anomalies += 1;
        } else if !l.is_complete() {
            log::warn!("segment {} (path {}) terminated with {:?}", l.segment_id, l.path_id, l.terminations);
            anomalies += 1;
        }
    }
    log::info!("traced {} segments of {} paths into {}", lines.len(), paths.len(), a.out.display());
    Ok(anomalies)
}

pub fn deviation(a: &DeviationArgs) -> Outcome {
    let net = load_model_at(&a.model)?;
    let paths = pathmod::read_paths(&a.paths)?;
    let segments = enumerate_segments(&paths, regions::discovery::DEFAULT_TAU)?;
    let lines: Vec<TraceLine> = read_jsonl(&a.trace)?;
    let scores = deviation_from_lines(&net, &segments, &lines)?;

    let mut anomalies = 0;
    let mut out = Vec::with_capacity(scores.len());
    for s in scores {
        match s {
            Ok(score) => {
                if score.partial || !score.l2.is_finite() {
                    anomalies += 1;
                }
                out.push(DeviationLine::from(&score));
            }
            Err(e) => {
                log::error!("{e}");
                anomalies += 1;
            }
        }
    }
    write_jsonl(&a.out, &out)?;
    log::info!("wrote deviation for {} paths to {}", out.len(), a.out.display());
    Ok(anomalies)
}

fn measure_of(line: &DeviationLine, m: Measure) -> f64 {
    match m {
        Measure::Deviation => line.deviation_l2,
        Measure::Density => line.density as f64,
    }
}

fn measure_name(m: Measure) -> &'static str {
    match m {
        Measure::Deviation => "deviation",
        Measure::Density => "density",
    }
}

/// Two files matched on `path_id`; both must cover the same paths.
fn align(a: &[DeviationLine], b: &[DeviationLine], names: (&Path, &Path)) -> Result<Vec<(DeviationLine, DeviationLine)>, Failure> {
    let index: BTreeMap<usize, &DeviationLine> = b.iter().map(|l| (l.path_id, l)).collect();
    if index.len() != b.len() || a.len() != b.len() {
        return Err(Failure::Data(Error::Input(format!(
            "{} and {} do not cover the same paths",
            names.0.display(),
            names.1.display()
        ))));
    }
    let mut pairs = Vec::with_capacity(a.len());
    for l in a {
        match index.get(&l.path_id) {
            Some(other) => pairs.push((l.clone(), (*other).clone())),
            None => {
                return Err(Failure::Data(Error::Input(format!(
                    "path {} missing from {}",
                    l.path_id,
                    names.1.display()
                ))))
            }
        }
    }
    pairs.sort_by_key(|(l, _)| l.path_id);
    Ok(pairs)
}

pub fn stats(a: &StatsArgs) -> Outcome {
    let inputs = a
        .inputs
        .iter()
        .map(|p| read_jsonl::<DeviationLine>(p))
        .collect::<Result<Vec<_>, _>>()?;
    for (p, rows) in a.inputs.iter().zip(&inputs) {
        if rows.is_empty() {
            return Err(Failure::Data(Error::Input(format!("{} has no rows", p.display()))));
        }
        let partial = rows.iter().filter(|r| r.partial).count();
        if partial > 0 {
            log::warn!("{}: {partial} partial paths included", p.display());
        }
    }
    let path = a.out.as_path();
    let mut w = csv_writer(path)?;
    let mut anomalies = 0;

    match a.metric {
        StatsMetric::Ecdf => {
            w.write_record(["input", "measure", "value", "ecdf"]).map_err(|e| csv_err(path, e))?;
            for (p, rows) in a.inputs.iter().zip(&inputs) {
                let values: Vec<f64> = rows.iter().map(|r| measure_of(r, a.measure)).collect();
                let e = stats::ecdf(&values)?;
                for (v, f) in e.steps() {
                    w.write_record([p.display().to_string(), measure_name(a.measure).into(), v.to_string(), f.to_string()])
                        .map_err(|e| csv_err(path, e))?;
                }
            }
        }
        StatsMetric::Spearman => {
            w.write_record(["input_a", "measure_a", "input_b", "measure_b", "n", "spearman"])
                .map_err(|e| csv_err(path, e))?;
            let (pa, pb, xs, ys, ma, mb) = match inputs.len() {
                1 => {
                    let rows = &inputs[0];
                    (
                        &a.inputs[0],
                        &a.inputs[0],
                        rows.iter().map(|r| r.density as f64).collect::<Vec<_>>(),
                        rows.iter().map(|r| r.deviation_l2).collect::<Vec<_>>(),
                        Measure::Density,
                        Measure::Deviation,
                    )
                }
                2 => {
                    let pairs = align(&inputs[0], &inputs[1], (&a.inputs[0], &a.inputs[1]))?;
                    (
                        &a.inputs[0],
                        &a.inputs[1],
                        pairs.iter().map(|(l, _)| measure_of(l, a.measure)).collect(),
                        pairs.iter().map(|(_, r)| measure_of(r, a.measure)).collect(),
                        a.measure,
                        a.measure,
                    )
                }
                _ => return Err(usage("spearman takes one or two inputs")),
            };
            let rho = match stats::spearman(&xs, &ys) {
                Ok(r) => r.to_string(),
                Err(e) => {
                    log::warn!("{e}");
                    anomalies += 1;
                    "undefined".to_string()
                }
            };
            w.write_record([
                pa.display().to_string(),
                measure_name(ma).into(),
                pb.display().to_string(),
                measure_name(mb).into(),
                xs.len().to_string(),
                rho,
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        StatsMetric::Paired => {
            if inputs.len() != 2 {
                return Err(usage("paired takes exactly two inputs"));
            }
            let pairs = align(&inputs[0], &inputs[1], (&a.inputs[0], &a.inputs[1]))?;
            let run = PairedRun::new(
                pairs.iter().map(|(l, _)| l.path_id).collect(),
                pairs.iter().map(|(l, _)| l.deviation_l2).collect(),
                pairs.iter().map(|(_, r)| r.deviation_l2).collect(),
                pairs.iter().map(|(l, _)| l.density as f64).collect(),
                pairs.iter().map(|(_, r)| r.density as f64).collect(),
            )?;
            w.write_record(["path_id", "deviation_1", "deviation_2", "deviation_diff", "density_1", "density_2", "density_diff"])
                .map_err(|e| csv_err(path, e))?;
            let dd = run.differences(Metric::Deviation);
            let nd = run.differences(Metric::Density);
            for i in 0..run.path_ids.len() {
                w.write_record([
                    run.path_ids[i].to_string(),
                    run.dev1[i].to_string(),
                    run.dev2[i].to_string(),
                    dd[i].to_string(),
                    run.den1[i].to_string(),
                    run.den2[i].to_string(),
                    nd[i].to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
            println!("metric,positive_fraction");
            println!("deviation,{}", stats::positive_fraction(&run, Metric::Deviation));
            println!("density,{}", stats::positive_fraction(&run, Metric::Density));
        }
        StatsMetric::Medians => {
            w.write_record(["measure", "runs", "mean_of_medians", "std_of_medians"])
                .map_err(|e| csv_err(path, e))?;
            for m in [Measure::Density, Measure::Deviation] {
                let runs: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|rows| rows.iter().map(|r| measure_of(r, m)).collect())
                    .collect();
                let (mean, std) = stats::median_summary(&runs)?;
                w.write_record([measure_name(m).to_string(), runs.len().to_string(), mean.to_string(), std.to_string()])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(anomalies)
}

fn dataset_kind(d: DatasetArg) -> DatasetKind {
    match d {
        DatasetArg::Spirals => DatasetKind::Spirals,
        DatasetArg::Gaussians => DatasetKind::Gaussians,
    }
}

fn train_config(c: &ToyCommon, hidden: Vec<usize>) -> Result<TrainConfig, Failure> {
    if !(c.lr > 0.0) || !(0.0..1.0).contains(&c.momentum) || c.batch_size == 0 || hidden.contains(&0) || !(c.bias_scale >= 0.0) {
        return Err(usage("need --lr > 0, 0 <= --momentum < 1, --batch-size >= 1 and positive widths, --bias-scale >= 0"));
    }
    Ok(TrainConfig {
        hidden,
        learning_rate: c.lr,
        momentum: c.momentum,
        max_epochs: c.epochs,
        batch_size: c.batch_size,
        loss_threshold: c.loss_threshold,
        stop_at_interpolation: !c.no_interpolation_stop,
        bias_scale: c.bias_scale,
        seed: c.seed,
    })
}

fn make_train_set(c: &ToyCommon) -> Result<ToyDataset, Failure> {
    if !(0.0..=1.0).contains(&c.noise) {
        return Err(usage("--noise must lie in [0, 1]"));
    }
    Ok(toy::make_dataset(dataset_kind(c.dataset), c.n, c.classes, c.noise, c.seed)?)
}

fn write_dataset(path: &Path, d: &ToyDataset) -> Result<(), Failure> {
    let mut w = csv_writer(path)?;
    w.write_record(["x", "y", "label", "clean_label", "noisy"]).map_err(|e| csv_err(path, e))?;
    for (i, p) in d.points.iter().enumerate() {
        let noisy = d.noisy_indices.binary_search(&i).is_ok();
        w.write_record([
            p[0].to_string(),
            p[1].to_string(),
            d.labels[i].to_string(),
            d.clean_labels[i].to_string(),
            noisy.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn save_named(net: &Network, dir: &Path, name: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (m, b) = model_paths(dir, name);
    Ok(save_model(net, m, b)?)
}

pub fn toy_train(a: &ToyTrainArgs) -> Outcome {
    let cfg = train_config(&a.common, a.hidden.clone())?;
    let data = make_train_set(&a.common)?;
    let trained = toy::train(&data, &cfg)?;
    let out = a.common.out.as_path();
    save_named(&trained.network, out, "toy")?;
    save_named(&trained.initial, out, "init")?;
    write_dataset(&out.join("dataset.csv"), &data)?;

    let log_path = out.join("train_log.csv");
    let mut w = csv_writer(&log_path)?;
    w.write_record(["epoch", "loss", "accuracy"]).map_err(|e| csv_err(&log_path, e))?;
    for l in &trained.log {
        w.write_record([l.epoch.to_string(), l.loss.to_string(), l.accuracy.to_string()])
            .map_err(|e| csv_err(&log_path, e))?;
    }
    w.flush().map_err(|e| io_err(&log_path, e))?;
    match trained.log.last() {
        Some(l) => log::info!("trained {} epochs: loss {:.6}, accuracy {:.4}", l.epoch, l.loss, l.accuracy),
        None => log::info!("zero epochs: saved the initialization"),
    }
    Ok(0)
}

/// `count` training points at evenly spaced indices.
fn spread_points(data: &ToyDataset, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|i| data.points[i * data.len() / count].to_vec()).collect()
}

pub fn toy_sweep(a: &ToySweepArgs) -> Outcome {
    check_tau_batch(a.tau, a.batch)?;
    if a.widths.is_empty() || a.depth == 0 {
        return Err(usage("need at least one width and --depth >= 1"));
    }
    if a.path_count == 0 || a.path_count > a.common.n {
        return Err(usage("--path-count must lie in 1..=n"));
    }
    let cfg = train_config(&a.common, vec![1; a.depth])?;
    let data = make_train_set(&a.common)?;
    let test = toy::make_dataset(
        dataset_kind(a.common.dataset),
        a.test_n,
        a.common.classes,
        0.0,
        a.common.seed.wrapping_add(1),
    )?;
    let centers = spread_points(&data, a.path_count);
    let paths = pathmod::build_orbit_paths(&centers, a.path_radius, a.anchors)?;
    let segments = enumerate_segments(&paths, a.tau)?;

    let out = a.common.out.as_path();
    let sweep = toy::width_sweep(&data, &test, &a.widths, &cfg)?;
    let table = out.join("sweep.csv");
    let mut w = csv_writer(&table)?;
    w.write_record([
        "width",
        "train_error",
        "test_error",
        "epochs",
        "final_loss",
        "median_density",
        "median_deviation",
    ])
    .map_err(|e| csv_err(&table, e))?;

    let mut anomalies = 0;
    for point in &sweep {
        let net = &point.trained.network;
        save_named(net, out, &format!("width{}", point.width))?;
        let lines = trace_lines(net, &segments, a.batch)?;
        let scores = deviation_from_lines(net, &segments, &lines)?;
        let mut density = Vec::new();
        let mut deviation = Vec::new();
        for s in scores {
            match s {
                Ok(s) => {
                    anomalies += usize::from(s.partial);
                    density.push(s.density as f64);
                    deviation.push(s.l2);
                }
                Err(e) => {
                    log::error!("width {}: {e}", point.width);
                    anomalies += 1;
                }
            }
        }
        let (epochs, loss) = point
            .trained
            .log
            .last()
            .map(|l| (l.epoch, l.loss.to_string()))
            .unwrap_or((0, String::new()));
        let med = |v: &[f64]| stats::lower_median(v).map(|m| m.to_string()).unwrap_or_default();
        w.write_record([
            point.width.to_string(),
            point.train_error.to_string(),
            point.test_error.to_string(),
            epochs.to_string(),
            loss,
            med(&density),
            med(&deviation),
        ])
        .map_err(|e| csv_err(&table, e))?;
    }
    w.flush().map_err(|e| io_err(&table, e))?;
    log::info!("wrote {} sweep rows to {}", sweep.len(), table.display());
    Ok(anomalies)
}
