use std::path::{Path, PathBuf};

use lmk3d_core::audit::{format_results, run_suite, AuditOptions, Suite};
use lmk3d_core::cost::{bench_records, bench_table, run_sweep};
use lmk3d_core::data::{
    list_cases, load_dataset, load_landmarks, load_volume, prepare, save_landmarks, synth_generate, write_atomic,
};
use lmk3d_core::landmarks::LandmarkSet;
use lmk3d_core::metrics::{EvalReport, SDR_THRESHOLDS_MM};
use lmk3d_core::network::{build_model, load_checkpoint, save_checkpoint};
use lmk3d_core::train::{predict, train as train_model, LossRecord};
use lmk3d_core::Error;

use crate::config::RunConfig;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS_CURVE: &str = "loss_curve.csv";

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, contents.as_bytes())?)
}

pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
    write(&out.join(RESOLVED_CONFIG), &cfg.to_toml()?)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let names = synth_generate(&cfg.synth, out)?;
    println!("wrote {} cases to {}", names.len(), out.display());
    Ok(())
}

fn eval_report<'a>(cases: impl IntoIterator<Item = (&'a str, &'a LandmarkSet, &'a LandmarkSet)>) -> Result<EvalReport, CliError> {
    Ok(EvalReport::evaluate(cases, &SDR_THRESHOLDS_MM)?)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let samples = load_dataset::<f32>(data)?;
    let state = build_model::<f32>(&cfg.model, cfg.seed)?;
    let mut curve = format!("{}\n", LossRecord::CSV_HEADER);
    let (state, records) = train_model(state, &samples, &cfg.train, |r| {
        curve.push_str(&r.csv_row());
        curve.push('\n');
        if r.step % 50 == 0 || r.step == cfg.train.steps {
            eprintln!("step {:>5}  loss {:.6e}", r.step, r.total);
        }
    })?;
    write(&out.join(LOSS_CURVE), &curve)?;
    save_checkpoint(&out.join(CHECKPOINT), &state)?;

    let preds = samples
        .iter()
        .map(|s| predict(&state, &s.input, s.landmarks.spacing, &cfg.train))
        .collect::<lmk3d_core::Result<Vec<_>>>()?;
    let report = eval_report(samples.iter().zip(&preds).map(|(s, p)| (s.name.as_str(), p, &s.landmarks)))?;
    write(&out.join("train_eval.txt"), &report.to_table())?;
    let (first, last) = (records[0].total, records[records.len() - 1].total);
    println!("loss {first:.6e} -> {last:.6e} ({:.1}x)", first / last);
    print!("{}", report.to_table());
    Ok(())
}

/// Case names with a `.landmarks` file in `dir`, sorted.
fn annotated_cases(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| PathBuf::from(e.file_name()))
        .filter(|p| p.extension().is_some_and(|x| x == "landmarks"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    Ok(names)
}

pub fn eval(_cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<(), CliError> {
    let names = annotated_cases(gt)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no .landmarks files in {}", gt.display())).into());
    }
    let mut pairs = Vec::with_capacity(names.len());
    for n in &names {
        if !pred.join(format!("{n}.landmarks")).exists() {
            return Err(Error::Data(format!("no prediction for {n} in {}; run `lmk3d infer` first", pred.display())).into());
        }
        pairs.push((load_landmarks(&pred.join(n))?, load_landmarks(&gt.join(n))?));
    }
    let report = eval_report(names.iter().zip(&pairs).map(|(n, (p, g))| (n.as_str(), p, g)))?;
    write(&out.join("eval_report.txt"), &report.to_table())?;
    write(&out.join("eval_records.tsv"), &report.to_records())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn infer(cfg: &RunConfig, explicit_model: bool, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let state = load_checkpoint::<f32>(checkpoint)?;
    if explicit_model && state.config != cfg.model {
        return Err(Error::Data(format!(
            "{} was trained with a different model config; pass the training run's {RESOLVED_CONFIG} via --config or drop the model overrides",
            checkpoint.display()
        ))
        .into());
    }
    let names = list_cases(data)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no .volhdr files in {}", data.display())).into());
    }
    for n in &names {
        let (header, volume) = load_volume::<f32>(&data.join(n))?;
        if header.dims != state.config.input_dims {
            return Err(Error::Data(format!(
                "{n}: volume {:?} does not match the model input {:?}; crop the volumes first",
                header.dims, state.config.input_dims
            ))
            .into());
        }
        let empty = LandmarkSet { landmarks: Vec::new(), spacing: header.spacing };
        let sample = prepare::<f32, f32>(n, &volume, &empty)?;
        let set = predict(&state, &sample.input, header.spacing, &cfg.train)?;
        save_landmarks(&out.join(n), &set)?;
    }
    println!("wrote {} predictions to {}", names.len(), out.display());
    Ok(())
}

pub fn gradcheck(suite: &str, corrupt_gradient: bool, out: &Path) -> Result<(), CliError> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?]
    };
    let opts = AuditOptions { corrupt_gradient };
    let mut results = Vec::new();
    for s in suites {
        results.extend(run_suite(s, opts)?);
    }
    let table = format_results(&results);
    write(&out.join("gradcheck.txt"), &table)?;
    print!("{table}");
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let records = run_sweep(&cfg.bench, cfg.seed)?;
    let table = bench_table(&records);
    write(&out.join("bench_table.txt"), &table)?;
    write(&out.join("bench_records.tsv"), &bench_records(&records))?;
    print!("{table}");
    Ok(())
}
