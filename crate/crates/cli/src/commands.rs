//! Command implementations behind the thin clap layer in `main`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sscf_core::energy::EnergyProbe;
use sscf_core::fewshot::{
    self, Dataset, EvalOptions, MetricsSink, NoiseSpec, Partition, SplitSpec,
};
use sscf_core::model::SscfModel;
use sscf_core::rng::{hash_str, Rng};
use sscf_core::tensor::{no_grad, BnMode, Tensor};

use crate::config::RunConfig;

pub type CmdResult<T> = Result<T, String>;

fn fail(context: &str, err: impl std::fmt::Display) -> String {
    format!("{context}: {err}")
}

/// Worker budget from the environment; single-threaded by default.
pub fn thread_budget() -> usize {
    std::env::var("SSCF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

// ── dataset / split assembly ─────────────────────────────────────────

pub fn build_dataset(config: &RunConfig) -> CmdResult<Dataset> {
    match config.dataset_kind.as_str() {
        "synthetic" => {
            let mut rng = Rng::new(config.seed).derive(0x5059_4e47);
            fewshot::make_synthetic_glyphs(
                config.synthetic_classes,
                config.synthetic_per_class,
                config.resolution,
                &mut rng,
            )
            .map_err(|e| fail("synthetic dataset", e))
        }
        "images" => {
            let root = config.dataset_path.as_ref().expect("validated");
            fewshot::load_image_dataset(Path::new(root), config.resolution)
                .map_err(|e| fail("image dataset", e))
        }
        "events" => {
            let root = config.dataset_path.as_ref().expect("validated");
            fewshot::load_event_dataset(Path::new(root)).map_err(|e| fail("event dataset", e))
        }
        other => Err(format!("unknown dataset kind {other:?}")),
    }
}

#[derive(serde::Deserialize)]
struct SplitFile {
    #[serde(default)]
    train: Vec<String>,
    #[serde(default)]
    val: Vec<String>,
    #[serde(default)]
    test: Vec<String>,
}

pub fn build_split(config: &RunConfig, dataset: &Dataset) -> CmdResult<SplitSpec> {
    match &config.split_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| fail(path, e))?;
            let parsed: SplitFile =
                serde_json::from_str(&text).map_err(|e| fail(path, e))?;
            SplitSpec::from_names(dataset, &parsed.train, &parsed.val, &parsed.test)
                .map_err(|e| fail("split file", e))
        }
        None => SplitSpec::by_count(
            dataset,
            config.train_classes,
            config.val_classes,
            config.test_classes,
        )
        .map_err(|e| fail("class split", e)),
    }
}

fn build_model(config: &RunConfig) -> CmdResult<SscfModel> {
    let model_config = config.model_config()?;
    SscfModel::new(model_config, config.seed).map_err(|e| fail("model init", e))
}

fn load_model(config: &RunConfig, checkpoint: &Path) -> CmdResult<SscfModel> {
    let mut model = build_model(config)?;
    model
        .load_checkpoint(checkpoint)
        .map_err(|e| fail("checkpoint", e))?;
    Ok(model)
}

/// 64-bit FNV-1a content hash, hex-encoded.
fn content_hash(bytes: &[u8]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail("serialize", e))?;
    std::fs::write(path, text).map_err(|e| fail(&path.display().to_string(), e))
}

// ── make-synthetic ───────────────────────────────────────────────────

pub fn cmd_make_synthetic(
    out: &Path,
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> CmdResult<()> {
    let mut rng = Rng::new(seed).derive(0x5059_4e47);
    let dataset = fewshot::make_synthetic_glyphs(classes, per_class, resolution, &mut rng)
        .map_err(|e| fail("synthetic dataset", e))?;
    for cid in 0..dataset.num_classes() {
        let dir = out.join(dataset.class_name(cid));
        std::fs::create_dir_all(&dir).map_err(|e| fail(&dir.display().to_string(), e))?;
        for (i, &item_idx) in dataset.class_items(cid).iter().enumerate() {
            let t = &dataset.item(item_idx).tensor;
            let path = dir.join(format!("item_{i:03}.pgm"));
            fewshot::write_pgm(&path, resolution, resolution, t.data())
                .map_err(|e| fail(&path.display().to_string(), e))?;
        }
    }
    println!(
        "wrote {} items across {} classes under {}",
        dataset.len(),
        dataset.num_classes(),
        out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct RunRecord<'a> {
    config: &'a RunConfig,
    weights_hash: String,
    metrics_path: String,
    checkpoint_path: String,
    started_at_unix: u64,
    finished_at_unix: u64,
}

pub fn cmd_train(config: &RunConfig, out: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(out).map_err(|e| fail(&out.display().to_string(), e))?;
    let dataset = build_dataset(config)?;
    let split = build_split(config, &dataset)?;
    let mut model = build_model(config)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut sink = MetricsSink::to_file(&metrics_path).map_err(|e| fail("metrics file", e))?;
    let train_config = config.train_config();
    let started = unix_now();
    fewshot::train(&mut model, &dataset, &split, &train_config, &mut sink)
        .map_err(|e| fail("training", e))?;
    let checkpoint_path = out.join("weights.ckpt");
    model
        .save_checkpoint(&checkpoint_path)
        .map_err(|e| fail("checkpoint", e))?;
    let weights = std::fs::read(&checkpoint_path).map_err(|e| fail("checkpoint", e))?;
    let record = RunRecord {
        config,
        weights_hash: content_hash(&weights),
        metrics_path: metrics_path.display().to_string(),
        checkpoint_path: checkpoint_path.display().to_string(),
        started_at_unix: started,
        finished_at_unix: unix_now(),
    };
    write_json(&out.join("run.json"), &record)?;
    println!(
        "trained {} episodes; checkpoint {} (hash {})",
        config.episodes,
        checkpoint_path.display(),
        record.weights_hash
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
    out: Option<&Path>,
) -> CmdResult<()> {
    let dataset = build_dataset(config)?;
    let split = build_split(config, &dataset)?;
    let model = load_model(config, checkpoint)?;
    let report = fewshot::evaluate(
        &model,
        &dataset,
        &split,
        config.n_way,
        config.k_shot,
        config.q_queries,
        episodes,
        EvalOptions {
            partition: Partition::Test,
            noise: config.noise(),
            noise_on_support: config.noise_on_support,
            seed: config.seed,
            threads: thread_budget(),
        },
    )
    .map_err(|e| fail("evaluation", e))?;
    println!(
        "{}-way {}-shot over {} episodes: accuracy {:.4} ± {:.4} (95% CI)",
        config.n_way, config.k_shot, episodes, report.mean_accuracy, report.ci95
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| fail(&dir.display().to_string(), e))?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(())
}

// ── profile-energy ───────────────────────────────────────────────────

pub fn cmd_profile_energy(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    probe_episodes: usize,
    out: Option<&Path>,
) -> CmdResult<()> {
    let dataset = build_dataset(config)?;
    let split = build_split(config, &dataset)?;
    let model = match checkpoint {
        Some(path) => load_model(config, path)?,
        None => build_model(config)?,
    };
    let mode = if model.bn.any_uninitialized() {
        BnMode::Train
    } else {
        BnMode::Eval
    };
    let mut probe = EnergyProbe::new();
    let mut queries = 0usize;
    for ep_idx in 0..probe_episodes {
        let mut rng = Rng::new(config.seed).derive(0xE0_0000 + ep_idx as u64);
        let episode = fewshot::sample_episode(
            &dataset,
            &split.test,
            config.n_way,
            config.k_shot,
            config.q_queries,
            &mut rng,
        )
        .map_err(|e| fail("probe episode", e))?;
        queries += episode.query.len();
        no_grad(|| {
            model.forward_episode(&episode.support, &episode.query, mode, false, Some(&mut probe))
        })
        .map_err(|e| fail("probe forward", e))?;
    }
    probe.queries = queries as f64;
    let report = probe.finish();
    print!("{}", report.render_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| fail(&dir.display().to_string(), e))?;
        write_json(&dir.join("energy.json"), &report)?;
    }
    Ok(())
}

// ── export ───────────────────────────────────────────────────────────

pub fn cmd_export_embeddings(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
) -> CmdResult<()> {
    let dataset = build_dataset(config)?;
    let split = build_split(config, &dataset)?;
    let model = load_model(config, checkpoint)?;
    let mode = if model.bn.any_uninitialized() {
        BnMode::Train
    } else {
        BnMode::Eval
    };
    std::fs::create_dir_all(out).map_err(|e| fail(&out.display().to_string(), e))?;
    let path = out.join("embeddings.csv");
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| fail("csv", e))?);
    let mut rows = 0usize;
    for &cid in &split.test {
        for &item_idx in dataset.class_items(cid) {
            let item = dataset.item(item_idx);
            let emb = no_grad(|| -> Result<Tensor, String> {
                let batch = sscf_core::model::batch_items(
                    &[(item.tensor.clone(), cid)],
                    &[],
                )
                .map_err(|e| fail("batch", e))?;
                let mut updates = Vec::new();
                let features = model
                    .encode(&batch, mode, None, &mut updates)
                    .map_err(|e| fail("encode", e))?;
                let f_mean = sscf_core::cfc::temporal_mean(&features)
                    .map_err(|e| fail("temporal mean", e))?;
                let (c, h, w) = (f_mean.shape()[1], f_mean.shape()[2], f_mean.shape()[3]);
                f_mean
                    .reshape(&[c, h * w])
                    .and_then(|f| f.mean_axis(1))
                    .map_err(|e| fail("pool", e))
            })?;
            let mut line = format!("{cid}");
            for v in emb.data() {
                line.push_str(&format!(",{v}"));
            }
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| fail("csv", e))?;
            rows += 1;
        }
    }
    file.flush().map_err(|e| fail("csv", e))?;
    println!("wrote {rows} embedding rows to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct RasterLayer {
    layer: String,
    spike_counts_per_step: Vec<f64>,
    total: f64,
}

pub fn cmd_export_raster(config: &RunConfig, checkpoint: &Path, out: &Path) -> CmdResult<()> {
    let dataset = build_dataset(config)?;
    let split = build_split(config, &dataset)?;
    let model = load_model(config, checkpoint)?;
    let mode = if model.bn.any_uninitialized() {
        BnMode::Train
    } else {
        BnMode::Eval
    };
    std::fs::create_dir_all(out).map_err(|e| fail(&out.display().to_string(), e))?;
    let mut rng = Rng::new(config.seed).derive(0x7A57);
    let episode = fewshot::sample_episode(
        &dataset,
        &split.test,
        config.n_way,
        config.k_shot,
        config.q_queries,
        &mut rng,
    )
    .map_err(|e| fail("probe episode", e))?;
    let batch = sscf_core::model::batch_items(&episode.support, &episode.query)
        .map_err(|e| fail("batch", e))?;
    let (_features, trace) = no_grad(|| model.encode_traced(&batch, mode))
        .map_err(|e| fail("traced encode", e))?;
    let mut summary = Vec::new();
    let mut pgm_count = 0usize;
    for (name, spikes) in &trace {
        let [t, b, c, h, w] = [
            spikes.shape()[0],
            spikes.shape()[1],
            spikes.shape()[2],
            spikes.shape()[3],
            spikes.shape()[4],
        ];
        let mut per_step = Vec::with_capacity(t);
        for step in 0..t {
            let slice = spikes.index_axis0(step).map_err(|e| fail("slice", e))?;
            per_step.push(slice.data().iter().sum::<f64>());
            // channel-and-batch mean spike map for this step
            let mut map = vec![0.0; h * w];
            for bb in 0..b {
                for cc in 0..c {
                    for pos in 0..h * w {
                        map[pos] += slice.data()[(bb * c + cc) * h * w + pos];
                    }
                }
            }
            for v in &mut map {
                *v /= (b * c) as f64;
            }
            let path = out.join(format!("raster_{}_t{step}.pgm", name.replace('.', "_")));
            fewshot::write_pgm(&path, w, h, &map).map_err(|e| fail("raster pgm", e))?;
            pgm_count += 1;
        }
        summary.push(RasterLayer {
            layer: name.clone(),
            total: per_step.iter().sum(),
            spike_counts_per_step: per_step,
        });
    }
    write_json(&out.join("raster_counts.json"), &summary)?;
    println!(
        "wrote {pgm_count} raster images ({} layers x {} steps) and raster_counts.json",
        trace.len(),
        config.timesteps
    );
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub ci95: f64,
}

#[derive(Serialize)]
pub struct SweepReport {
    pub parameter: String,
    pub cells: Vec<SweepCell>,
    pub mean_by_value: Vec<(f64, f64)>,
}

/// One training + evaluation at a given swept value. Noise sweeps train a
/// clean model and perturb only the test episodes.
fn sweep_run(
    base: &RunConfig,
    parameter: &str,
    value: f64,
    replicate: usize,
) -> CmdResult<SweepCell> {
    let mut config = base.clone();
    let seed_tag = hash_str(&format!("{parameter}={value:.6}#{replicate}"));
    config.seed = base.seed ^ seed_tag;
    match parameter {
        "lambda" => config.lambda = value,
        "noise" => config.noise_rate = value,
        "timesteps" => config.timesteps = value as usize,
        other => return Err(format!("unknown sweep parameter {other:?}")),
    }
    if parameter == "noise" {
        // train clean; the spec's robustness protocol perturbs test data
        config.noise_rate = 0.0;
    }
    let dataset = build_dataset(&config)?;
    let split = build_split(&config, &dataset)?;
    let mut model = build_model(&config)?;
    let mut sink = MetricsSink::default();
    let mut train_config = config.train_config();
    train_config.log_every = 0;
    fewshot::train(&mut model, &dataset, &split, &train_config, &mut sink)
        .map_err(|e| fail("sweep training", e))?;
    let noise = if parameter == "noise" && value > 0.0 {
        Some(NoiseSpec { rate: value })
    } else {
        config.noise()
    };
    let report = fewshot::evaluate(
        &model,
        &dataset,
        &split,
        config.n_way,
        config.k_shot,
        config.q_queries,
        config.eval_episodes,
        EvalOptions {
            partition: Partition::Test,
            noise,
            noise_on_support: config.noise_on_support,
            seed: config.seed,
            threads: 1,
        },
    )
    .map_err(|e| fail("sweep evaluation", e))?;
    Ok(SweepCell {
        value,
        seed: config.seed,
        accuracy: report.mean_accuracy,
        ci95: report.ci95,
    })
}

pub fn cmd_sweep(
    config: &RunConfig,
    parameter: &str,
    values: &[f64],
    seeds: usize,
    out: Option<&Path>,
) -> CmdResult<()> {
    if values.is_empty() {
        return Err("sweep needs at least one value".into());
    }
    let jobs: Vec<(f64, usize)> = values
        .iter()
        .flat_map(|&v| (0..seeds).map(move |r| (v, r)))
        .collect();
    let threads = thread_budget().min(jobs.len().max(1));
    let mut cells: Vec<Option<CmdResult<SweepCell>>> = (0..jobs.len()).map(|_| None).collect();
    if threads <= 1 {
        for (slot, &(value, rep)) in cells.iter_mut().zip(&jobs) {
            *slot = Some(sweep_run(config, parameter, value, rep));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut cells);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let (value, rep) = jobs[i];
                    let cell = sweep_run(config, parameter, value, rep);
                    slots.lock().unwrap()[i] = Some(cell);
                });
            }
        });
    }
    let mut report = SweepReport {
        parameter: parameter.to_string(),
        cells: Vec::new(),
        mean_by_value: Vec::new(),
    };
    for cell in cells {
        report.cells.push(cell.expect("job ran")?);
    }
    for &v in values {
        let of_v: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.value == v)
            .map(|c| c.accuracy)
            .collect();
        let mean = of_v.iter().sum::<f64>() / of_v.len().max(1) as f64;
        report.mean_by_value.push((v, mean));
    }
    println!("sweep over {parameter} ({seeds} seeds per value):");
    for (v, acc) in &report.mean_by_value {
        println!("  {parameter} = {v:<8} mean accuracy {acc:.4}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| fail(&dir.display().to_string(), e))?;
        write_json(&dir.join(format!("sweep_{parameter}.json")), &report)?;
    }
    Ok(())
}

