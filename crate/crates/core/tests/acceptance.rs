//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::{bits, fixture, finetune_config, random_matrix, rng, scramble, BATCH, DIMS, RANK};
use rand::Rng;
use skip2lora::network::compute_type_assignment;
use skip2lora::trainer::{self, grad_check, RunMetrics};
use skip2lora::{Dataset, FineTuneMode, Model, ModelSpec, ParamId, SkipCache};

use FineTuneMode::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Compute-type enumerations for n = 3, written out as strings: `(FC, LoRA)`.
fn published_table(mode: FineTuneMode) -> ([&'static str; 3], Option<[&'static str; 3]>) {
    match mode {
        FtAll => (["FC_ywb", "FC_ywbx", "FC_ywbx"], None),
        FtLast => (["FC_y", "FC_y", "FC_ywb"], None),
        FtBias => (["FC_yb", "FC_ybx", "FC_ybx"], None),
        LoraAll => (["FC_y", "FC_yx", "FC_yx"], Some(["LoRA_yw", "LoRA_ywx", "LoRA_ywx"])),
        LoraLast => (["FC_y", "FC_y", "FC_y"], Some(["φ", "φ", "LoRA_yw"])),
        SkipLora | Skip2Lora => (["FC_y", "FC_y", "FC_y"], Some(["LoRA_yw", "LoRA_yw", "LoRA_yw"])),
        FtAllLora => (["FC_ywb", "FC_ywbx", "FC_ywbx"], Some(["LoRA_yw", "LoRA_ywx", "LoRA_ywx"])),
    }
}

fn suffix(t: &str) -> &str {
    t.split('_').nth(1).unwrap_or("")
}

/// Backward MACs of one batch, counted by hand from the published tables.
///
/// FC: gW = xᵀ·gy (in·B·out), gb = Σgy (B·out), gx = gy·Wᵀ (B·out·in).
/// Adapter: gW_B, gx_B (R·B·out each), gW_A (in·B·R), gx_A (B·R·in), plus
/// B·in to add gx_A onto a gradient the FC layer already produced.
fn analytic_backward(mode: FineTuneMode, dims: &[usize], rank: usize, b: usize) -> u64 {
    let (fc, lora) = published_table(mode);
    let mut macs = 0;
    for (k, t) in fc.iter().enumerate() {
        let (i, o) = (dims[k], dims[k + 1]);
        let s = suffix(t);
        if s.contains('w') {
            macs += i * b * o;
        }
        if s.contains('b') {
            macs += b * o;
        }
        if s.contains('x') {
            macs += b * o * i;
        }
    }
    let n = dims.len() - 1;
    for (src, t) in lora.into_iter().flatten().enumerate() {
        if t == "φ" {
            continue;
        }
        let target = if matches!(mode, SkipLora | Skip2Lora) { n - 1 } else { src };
        let (i, o) = (dims[src], dims[target + 1]);
        macs += 2 * rank * b * o + i * b * rank;
        if suffix(t).contains('x') {
            macs += b * rank * i;
            if suffix(fc[src]).contains('x') {
                macs += b * i;
            }
        }
    }
    macs as u64
}

struct Runs {
    lora_all: RunMetrics,
    skip: RunMetrics,
    skip2: RunMetrics,
    acc_before: f64,
    acc_skip: f64,
    acc_skip2: f64,
    preds_equal: bool,
    elapsed: Duration,
}

const LONG_EPOCHS: usize = 300;
const SEED: u64 = 7;

fn long_runs() -> Runs {
    let f = fixture();
    let start = Instant::now();
    let base = Model::from_checkpoint(&f.base, FtAll, RANK, 0).unwrap();
    let acc_before = trainer::evaluate(&base, &f.splits.test).unwrap();
    let run = |mode| {
        let mut m = Model::from_checkpoint(&f.base, mode, RANK, SEED).unwrap();
        let metrics = trainer::finetune(&mut m, &f.splits.finetune, &finetune_config(mode, LONG_EPOCHS, SEED)).unwrap();
        (m, metrics)
    };
    let (skip_model, skip) = run(SkipLora);
    let (skip2_model, skip2) = run(Skip2Lora);
    let (_, lora_all) = run(LoraAll);
    let test = &f.splits.test;
    Runs {
        acc_before,
        acc_skip: trainer::evaluate(&skip_model, test).unwrap(),
        acc_skip2: trainer::evaluate(&skip2_model, test).unwrap(),
        preds_equal: skip_model.predict(test.features()).unwrap() == skip2_model.predict(test.features()).unwrap(),
        lora_all,
        skip,
        skip2,
        elapsed: start.elapsed(),
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (s, mode) in FineTuneMode::ALL.into_iter().enumerate() {
        let mut model = Model::build(&ModelSpec::new(vec![4, 3, 3, 2], mode).with_rank(2)).unwrap();
        scramble(&mut model, 100 + s as u64);
        let x = random_matrix(&mut rng(200 + s as u64), 2, 4, 2.0);
        let r = grad_check(&model, &x, &[0, 1], 1e-3).map_err(|e| format!("{mode}: {e}"))?;
        check(r.max_rel_error <= 1e-2, || format!("{mode}: max rel err {:.3e} at {:?}", r.max_rel_error, r.worst))?;
        worst = worst.max(r.max_rel_error);
    }
    let t = start.elapsed();
    check(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("worst max rel err {worst:.2e} over 8 modes in {t:.2?}"))
}

fn cache_transparency(skip2_runs: &mut Vec<RunMetrics>) -> Outcome {
    let f = fixture();
    let start = Instant::now();
    let mut models = Vec::new();
    let mut metrics = Vec::new();
    for mode in [SkipLora, Skip2Lora] {
        let mut m = Model::from_checkpoint(&f.base, mode, RANK, SEED).unwrap();
        metrics.push(trainer::finetune(&mut m, &f.splits.finetune, &finetune_config(mode, 50, SEED)).unwrap());
        models.push(m);
    }
    let t = start.elapsed();
    for j in 0..models[0].adapters().len() {
        for id in [ParamId::AdapterA(j), ParamId::AdapterB(j)] {
            check(bits(models[0].tensor(id).unwrap()) == bits(models[1].tensor(id).unwrap()), || {
                format!("{id:?} differs")
            })?;
        }
    }
    check(bits(&metrics[0].losses()) == bits(&metrics[1].losses()), || "loss sequences differ".into())?;
    check(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    let batches = metrics[0].records.len();
    skip2_runs.push(metrics.pop().unwrap());
    Ok(format!("adapters and {batches} losses bit-identical ({t:.2?})"))
}

fn forward_reduction(r: &Runs) -> Outcome {
    let (skip, skip2) = (r.skip.totals(), r.skip2.totals());
    let frozen = skip2.fc_fwd_macs as f64 / skip.fc_fwd_macs as f64;
    let total = 1.0 - skip2.forward_macs() as f64 / skip.forward_macs() as f64;
    check(frozen <= 0.015, || format!("frozen FC forward ratio {:.3}%", 100.0 * frozen))?;
    check(total >= 0.85, || format!("forward reduction {:.1}%", 100.0 * total))?;
    Ok(format!(
        "frozen FC forward {:.3}% of Skip-LoRA, total forward reduced {:.1}%",
        100.0 * frozen,
        100.0 * total
    ))
}

fn backward_reduction(r: &Runs) -> Outcome {
    for (name, mode, m) in [("LoRA-All", LoraAll, &r.lora_all), ("Skip-LoRA", SkipLora, &r.skip)] {
        let expected = analytic_backward(mode, &DIMS, RANK, BATCH);
        if let Some(rec) = m.records.iter().find(|rec| rec.bwd_macs != expected) {
            return Err(format!("{name}: batch {}/{} has {} bwd MACs, expected {expected}", rec.epoch, rec.batch, rec.bwd_macs));
        }
    }
    let (la, sk) = (analytic_backward(LoraAll, &DIMS, RANK, BATCH), analytic_backward(SkipLora, &DIMS, RANK, BATCH));
    let ratio = sk as f64 / la as f64;
    check(ratio <= 0.20, || format!("ratio {:.1}%", 100.0 * ratio))?;
    Ok(format!("per batch: Skip-LoRA {sk} vs LoRA-All {la} MACs ({:.1}%), instrumented == analytic", 100.0 * ratio))
}

fn total_reduction(r: &Runs) -> Outcome {
    let ratio = r.skip2.totals().total_macs() as f64 / r.lora_all.totals().total_macs() as f64;
    check(ratio <= 0.15, || format!("ratio {:.2}%", 100.0 * ratio))?;
    Ok(format!("Skip2-LoRA total {:.2}% of LoRA-All", 100.0 * ratio))
}

fn cache_sizing(r: &Runs) -> Outcome {
    let mut cache = SkipCache::new(470, &DIMS[1..]).map_err(|e| e.to_string())?;
    let mut g = rng(3);
    for i in 0..470 {
        let entry: Vec<Vec<f32>> = DIMS[1..].iter().map(|&d| (0..d).map(|_| g.random()).collect()).collect();
        cache.insert(i, &entry).map_err(|e| e.to_string())?;
    }
    let full = cache.stats().payload_bytes;
    check(full == 366_600, || format!("filled cache payload {full}"))?;
    let run = r.skip2.cache.ok_or("Skip2-LoRA run reported no cache")?;
    check(run.occupancy == 470 && run.payload_bytes == 366_600, || {
        format!("run cache: {} entries, {} bytes", run.occupancy, run.payload_bytes)
    })?;
    Ok(format!("{full} payload bytes at full occupancy"))
}

fn compute_type_tables() -> Outcome {
    for mode in FineTuneMode::ALL {
        let (fc, lora) = published_table(mode);
        let got = compute_type_assignment(mode, 3);
        let render = |v: &[skip2lora::layers::ComputeType]| {
            v.iter()
                .map(|t| t.to_string().replace("none", "φ"))
                .collect::<Vec<_>>()
        };
        check(render(&got.fc) == fc, || format!("{mode}: FC {:?}", render(&got.fc)))?;
        let want_lora = lora.unwrap_or(["φ"; 3]);
        check(render(&got.lora) == want_lora, || format!("{mode}: LoRA {:?}", render(&got.lora)))?;
    }
    Ok("all eight modes match".into())
}

fn drift_gap(r: &Runs) -> Outcome {
    check(r.acc_before <= 0.60, || format!("before drift {:.2}%", 100.0 * r.acc_before))?;
    check(r.acc_skip2 >= 0.85, || format!("Skip2-LoRA after {:.2}%", 100.0 * r.acc_skip2))?;
    check(r.acc_skip == r.acc_skip2 && r.preds_equal, || {
        format!("Skip {:.4} vs Skip2 {:.4}", r.acc_skip, r.acc_skip2)
    })?;
    check(r.elapsed < Duration::from_secs(120), || format!("took {:?}", r.elapsed))?;
    Ok(format!(
        "before {:.2}%, Skip2-LoRA after {:.2}% (Skip-LoRA identical), {:.2?}",
        100.0 * r.acc_before,
        100.0 * r.acc_skip2,
        r.elapsed
    ))
}

fn expected_trainable(mode: FineTuneMode) -> BTreeSet<ParamId> {
    use ParamId::*;
    let fc_all = (0..3).flat_map(|k| [FcWeight(k), FcBias(k)]);
    let bn = (0..2).flat_map(|k| [BnGamma(k), BnBeta(k)]);
    let adapters = |n| (0..n).flat_map(|j| [AdapterA(j), AdapterB(j)]).collect::<Vec<_>>();
    match mode {
        FtAll => fc_all.chain(bn).collect(),
        FtLast => [FcWeight(2), FcBias(2)].into(),
        FtBias => (0..3).map(FcBias).collect(),
        FtAllLora => fc_all.chain(bn).chain(adapters(3)).collect(),
        LoraAll | SkipLora | Skip2Lora => adapters(3).into_iter().collect(),
        LoraLast => adapters(1).into_iter().collect(),
    }
}

fn freeze_matrix(skip2_runs: &mut Vec<RunMetrics>) -> Outcome {
    let f = fixture();
    let idx: Vec<usize> = (0..BATCH).collect();
    let (x, y) = f.splits.finetune.batch(&idx).map_err(|e| e.to_string())?;
    let one_batch = Dataset::new("one", x, y, 3).map_err(|e| e.to_string())?;
    for mode in FineTuneMode::ALL {
        let mut m = Model::from_checkpoint(&f.base, mode, RANK, SEED).unwrap();
        let mut g = rng(5);
        for j in 0..m.adapters().len() {
            for v in m.tensor_mut(ParamId::AdapterB(j)).unwrap() {
                *v = g.random_range(-0.1..0.1);
            }
        }
        let before = m.checksums();
        let metrics = trainer::finetune(&mut m, &one_batch, &finetune_config(mode, 1, SEED)).map_err(|e| e.to_string())?;
        if mode == Skip2Lora {
            skip2_runs.push(metrics);
        }
        let changed: BTreeSet<ParamId> = before
            .iter()
            .zip(m.checksums())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((id, _), _)| *id)
            .collect();
        let want = expected_trainable(mode);
        check(changed == want, || format!("{mode}: changed {changed:?}, expected {want:?}"))?;
    }
    Ok("one-step checksum audit matches for all eight modes".into())
}

fn event_conservation(runs: &[(&str, &RunMetrics, usize, usize)]) -> Outcome {
    for &(name, m, epochs, samples) in runs {
        let expected = (epochs * (samples / BATCH) * BATCH) as u64;
        let t = m.totals();
        check(t.cache_hits + t.cache_misses == expected, || {
            format!("{name}: {} + {} != {expected}", t.cache_hits, t.cache_misses)
        })?;
        let c = m.cache.ok_or_else(|| format!("{name}: no cache stats"))?;
        check(c.hits == t.cache_hits && c.misses == t.cache_misses, || format!("{name}: cache counters disagree with records"))?;
    }
    Ok(format!("{} Skip2-LoRA runs conserve sample events", runs.len()))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut extra_skip2 = Vec::new();

    results.push(("gradient correctness", gradient_correctness()));
    results.push(("skip-cache transparency", cache_transparency(&mut extra_skip2)));
    let runs = long_runs();
    results.push(("forward-cost reduction", forward_reduction(&runs)));
    results.push(("backward-cost reduction", backward_reduction(&runs)));
    results.push(("total fine-tune reduction", total_reduction(&runs)));
    results.push(("cache sizing", cache_sizing(&runs)));
    results.push(("compute-type tables", compute_type_tables()));
    results.push(("drift-gap pattern", drift_gap(&runs)));
    results.push(("parameter-freeze matrix", freeze_matrix(&mut extra_skip2)));
    let samples = fixture().splits.finetune.len();
    let conserved = [
        ("E=50", &extra_skip2[0], 50, samples),
        ("E=300", &runs.skip2, LONG_EPOCHS, samples),
        ("one step", extra_skip2.get(1).unwrap_or(&extra_skip2[0]), 1, BATCH),
    ];
    results.push(("event conservation", event_conservation(&conserved)));

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
