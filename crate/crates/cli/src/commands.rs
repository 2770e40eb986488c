use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use skip2lora::data::{self, DriftSpec, LoadedCsv};
use skip2lora::network::{Checkpoint, DEFAULT_RANK};
use skip2lora::trainer::{self, BatchRecord, RunMetrics, TrainConfig};
use skip2lora::{Dataset, FineTuneMode, Model, ModelSpec};

use crate::error::CliError;
use crate::{sidecar, BenchArgs, DataArgs, EvalArgs, FinetuneArgs, GenDataArgs, LoopArgs, PretrainArgs};

pub const METRICS_HEADER: &str =
    "epoch,batch,loss,fc_fwd_macs,lora_fwd_macs,bwd_macs,update_macs,cache_hits,cache_misses,elapsed_us";

fn load(args: &DataArgs) -> Result<Dataset, CliError> {
    let loaded: LoadedCsv = data::load_csv(&args.data, &args.label_column)?;
    if !loaded.is_identity_mapping() {
        let pairs: Vec<String> = loaded
            .label_values
            .iter()
            .enumerate()
            .map(|(c, v)| format!("{v}->{c}"))
            .collect();
        println!("label mapping: {}", pairs.join(", "));
    }
    Ok(loaded.dataset)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        ));
    }
    Ok(())
}

/// Writes through a temporary file so a failed run never leaves a partial checkpoint.
fn write_checkpoint(model: &Model, path: &Path) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, model.to_checkpoint().to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn check_features(model: &Model, data: &Dataset) -> Result<(), CliError> {
    if data.feature_dim() != model.dims()[0] {
        return Err(CliError::Usage(format!(
            "dataset has {} features but the checkpoint expects {}",
            data.feature_dim(),
            model.dims()[0]
        )));
    }
    Ok(())
}

fn train_config(args: &LoopArgs, mode: FineTuneMode) -> TrainConfig {
    TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        mode,
        cache_enabled: mode.uses_cache(),
        sampler: args.sampler.into(),
    }
}

pub fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = DriftSpec {
        num_classes: args.classes,
        feature_dim: args.features,
        pretrain_samples: args.samples,
        finetune_samples: args.samples,
        test_samples: args.samples,
        separation: args.separation,
        noise: args.noise,
        drift_shift: args.drift_shift,
        drift_noise: args.drift_noise,
        seed: args.seed,
    };
    let splits = data::gen_drifted(&spec)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    for d in [&splits.pretrain, &splits.finetune, &splits.test] {
        let path = args.out_dir.join(format!("{}.csv", d.name));
        d.write_csv(&path)?;
        println!("wrote {} ({} samples)", path.display(), d.len());
    }
    Ok(())
}

pub fn pretrain(args: PretrainArgs) -> Result<(), CliError> {
    ensure_parent(&args.out)?;
    let mut data = load(&args.data)?;
    if args.hidden.is_empty() || args.hidden.contains(&0) {
        return Err(CliError::Usage("--hidden needs at least one positive width".into()));
    }
    let norm = if args.no_normalize {
        None
    } else {
        Some(data::normalize(&mut data, &mut [])?)
    };
    let mut dims = vec![data.feature_dim()];
    dims.extend(&args.hidden);
    dims.push(data.num_classes());
    let spec = ModelSpec::new(dims, FineTuneMode::FtAll)
        .with_rank(DEFAULT_RANK)
        .with_seed(args.train.seed);
    let mut model = Model::build(&spec)?;
    let config = train_config(&args.train, FineTuneMode::FtAll);
    let metrics = trainer::pretrain(&mut model, &data, &config)?;
    let accuracy = trainer::evaluate(&model, &data)?;

    write_checkpoint(&model, &args.out)?;
    sidecar::carry(norm.as_ref(), &args.out)?;
    println!("dims: {:?}", model.dims());
    println!("final train loss: {:.6}", metrics.final_loss().unwrap_or(f32::NAN));
    println!("pretrain accuracy: {:.2}%", 100.0 * accuracy);
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

fn write_metrics(path: &Path, records: &[BatchRecord]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    writeln!(w, "{METRICS_HEADER}").map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.batch,
            r.loss,
            r.fc_fwd_macs,
            r.lora_fwd_macs,
            r.bwd_macs,
            r.update_macs,
            r.cache_hits,
            r.cache_misses,
            r.elapsed_us
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

fn print_summary(metrics: &RunMetrics) {
    let t = metrics.totals();
    println!("batches: {}", t.batches);
    println!("final epoch loss: {:.6}", metrics.final_loss().unwrap_or(f32::NAN));
    println!("fc_fwd_macs: {}", t.fc_fwd_macs);
    println!("lora_fwd_macs: {}", t.lora_fwd_macs);
    println!("bwd_macs: {}", t.bwd_macs);
    println!("update_macs: {}", t.update_macs);
    println!("total_macs: {}", t.total_macs());
    println!("frozen-path samples computed: {}", metrics.samples_computed);
    if let Some(c) = &metrics.cache {
        println!("cache_hits: {}", c.hits);
        println!("cache_misses: {}", c.misses);
        println!("cache entries: {}, payload {} bytes", c.occupancy, c.payload_bytes);
    }
    println!(
        "mean per batch: forward {:.1} us, backward {:.1} us, update {:.1} us",
        t.mean_forward_us(),
        t.mean_backward_us(),
        t.mean_update_us()
    );
}

pub fn finetune(args: FinetuneArgs) -> Result<(), CliError> {
    ensure_parent(&args.out)?;
    if let Some(m) = &args.metrics {
        ensure_parent(m)?;
    }
    let ckpt = Checkpoint::read_file(&args.checkpoint)?;
    let mut data = load(&args.data)?;
    let norm = sidecar::apply(&args.checkpoint, &mut data)?;
    let mut model = Model::from_checkpoint(&ckpt, args.mode, args.rank, args.train.seed)?;
    check_features(&model, &data)?;
    let mut config = train_config(&args.train, args.mode);
    config.cache_enabled &= !args.no_cache;

    let metrics = trainer::finetune(&mut model, &data, &config)?;
    if let Some(path) = &args.metrics {
        write_metrics(path, &metrics.records)?;
    }
    write_checkpoint(&model, &args.out)?;
    sidecar::carry(norm.as_ref(), &args.out)?;
    println!("mode: {}", args.mode);
    print_summary(&metrics);
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    accuracy: f64,
    num_samples: usize,
    mode: String,
}

fn load_for_inference(checkpoint: &Path) -> Result<Model, CliError> {
    let ckpt = Checkpoint::read_file(checkpoint)?;
    Ok(Model::from_checkpoint(&ckpt, ckpt.mode, ckpt.rank, 0)?)
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    if let Some(j) = &args.json {
        ensure_parent(j)?;
    }
    let model = load_for_inference(&args.checkpoint)?;
    let mut data = load(&args.data)?;
    sidecar::apply(&args.checkpoint, &mut data)?;
    check_features(&model, &data)?;
    let accuracy = trainer::evaluate(&model, &data)?;
    println!("accuracy: {:.2}%", 100.0 * accuracy);
    println!("samples: {}", data.len());
    println!("mode: {}", model.mode());
    if let Some(path) = &args.json {
        let report = EvalReport {
            accuracy,
            num_samples: data.len(),
            mode: model.mode().to_string(),
        };
        let text = serde_json::to_string_pretty(&report).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

pub const BENCH_COLUMNS: [&str; 15] = [
    "mode",
    "fwd_us",
    "bwd_us",
    "upd_us",
    "batch_us",
    "batch_us_steady",
    "predict_us",
    "fc_fwd_macs",
    "lora_fwd_macs",
    "bwd_macs",
    "upd_macs",
    "total_macs",
    "fwd_red_%",
    "bwd_red_%",
    "total_red_%",
];

struct BenchRow {
    mode: FineTuneMode,
    metrics: RunMetrics,
    predict_us: f64,
}

fn reduction(value: u64, base: u64) -> String {
    if base == 0 {
        "-".into()
    } else {
        format!("{:.1}", 100.0 * (1.0 - value as f64 / base as f64))
    }
}

pub fn bench(args: BenchArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::read_file(&args.checkpoint)?;
    let mut data = load(&args.data)?;
    sidecar::apply(&args.checkpoint, &mut data)?;

    let mut modes = vec![args.baseline];
    for m in &args.modes {
        if !modes.contains(m) {
            modes.push(*m);
        }
    }
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut model = Model::from_checkpoint(&ckpt, mode, args.rank, args.train.seed)?;
        check_features(&model, &data)?;
        let metrics = trainer::finetune(&mut model, &data, &train_config(&args.train, mode))?;
        let start = Instant::now();
        for r in 0..data.len() {
            model.predict(&data.features().gather_rows(&[r])?)?;
        }
        let predict_us = start.elapsed().as_secs_f64() * 1e6 / data.len() as f64;
        rows.push(BenchRow {
            mode,
            metrics,
            predict_us,
        });
    }

    let base = rows[0].metrics.totals();
    let mut table: Vec<Vec<String>> = vec![BENCH_COLUMNS.iter().map(|s| s.to_string()).collect()];
    let mut ordered: Vec<&BenchRow> = rows.iter().filter(|r| args.modes.contains(&r.mode)).collect();
    if !args.modes.contains(&args.baseline) {
        ordered.insert(0, &rows[0]);
    }
    for row in ordered {
        let t = row.metrics.totals();
        let steady = row.metrics.totals_after_first_epoch();
        let per_batch = |v: u64| v as f64 / t.batches as f64;
        table.push(vec![
            row.mode.to_string(),
            format!("{:.1}", t.mean_forward_us()),
            format!("{:.1}", t.mean_backward_us()),
            format!("{:.1}", t.mean_update_us()),
            format!("{:.1}", per_batch(t.forward_us + t.backward_us + t.update_us)),
            format!(
                "{:.1}",
                steady.mean_forward_us() + steady.mean_backward_us() + steady.mean_update_us()
            ),
            format!("{:.2}", row.predict_us),
            t.fc_fwd_macs.to_string(),
            t.lora_fwd_macs.to_string(),
            t.bwd_macs.to_string(),
            t.update_macs.to_string(),
            t.total_macs().to_string(),
            reduction(t.forward_macs(), base.forward_macs()),
            reduction(t.bwd_macs, base.bwd_macs),
            reduction(t.total_macs(), base.total_macs()),
        ]);
    }
    println!(
        "{} epochs x {} batches of {}; times are per-batch means, batch_us_steady skips epoch 0; MACs are run totals; reductions vs {}",
        args.train.epochs,
        data.len() / args.train.batch_size.max(1),
        args.train.batch_size,
        args.baseline
    );
    print_table(&table);
    Ok(())
}

fn print_table(table: &[Vec<String>]) {
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        println!("{}", cells.join("  ").trim_end());
    }
}
