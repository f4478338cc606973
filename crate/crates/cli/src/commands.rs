use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use shiftquant::cost::{baseline_cost, bits_to_mb, op_counts, pareto_front, storage_bits, write_pareto_csv, CostAxis, CostReport, ParetoPoint};
use shiftquant::data::Split;
use shiftquant::engine::{Calibration, EnginePlan};
use shiftquant::model_file::{ModelFile, Payload, Provenance};
use shiftquant::nn::{preset, Network, Params};
use shiftquant::quant::{apply_quantized, pack_weights, quantize_network, unpack_weights, QuantizedModel, Thresholds};
use shiftquant::train::{predict, summarize, sweep_lambda, write_metrics_csv, RegCoefficients, Scheme, TrainConfig, TrainState};
use shiftquant::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::Manifest;

/// Images used to calibrate activation scales at export.
pub const CALIBRATION_IMAGES: usize = 256;

pub fn model_id(cfg: &TrainConfig) -> String {
    match cfg.scheme {
        Scheme::Flexible => "flightnn".into(),
        Scheme::Fixed => format!("lightnn-{}", cfg.k),
        Scheme::FullPrecision => "full-precision".into(),
    }
}

fn provenance(cfg: &RunConfig, accuracy: Option<f64>) -> Result<Provenance> {
    Ok(Provenance {
        seed: cfg.train.seed,
        lambda: cfg.train.lambda.0.clone(),
        epochs: cfg.train.epochs,
        k: cfg.train.k,
        scheme: cfg.train.scheme.name().into(),
        code_bits: cfg.train.code_bits,
        accuracy,
        config_hash: cfg.hash()?,
    })
}

fn float_file(state: &TrainState<f32>, provenance: Provenance) -> ModelFile {
    ModelFile {
        config: state.net.config().clone(),
        provenance,
        payload: Payload::Float { params: state.params.clone(), buffers: state.buffers.clone(), thresholds: state.thresholds.clone() },
    }
}

fn add_data_inputs(m: &mut Manifest, cfg: &RunConfig) -> Result<()> {
    for p in cfg.data.paths() {
        m.input(p)?;
    }
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    use std::io::Write;
    // a closed stdout (e.g. piped into `head`) is not an error
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(v).expect("json"));
}

/// Trains per the run config; writes `metrics.csv`, `model.p2qm`,
/// `config.toml` and `manifest.json` into the output directory.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let net_cfg = cfg.validate()?;
    let split = cfg.data.load(&net_cfg)?;
    let net = Network::new(net_cfg)?;
    let out = &cfg.output.dir;
    fs::create_dir_all(out)?;
    let mut state = TrainState::<f32>::new(net, cfg.train.clone())?;
    let mut rows = Vec::new();
    let metrics_path = out.join("metrics.csv");
    for _ in 0..cfg.train.epochs {
        match state.train_epoch(&split.train, Some(&split.test)) {
            Ok(m) => {
                eprintln!(
                    "epoch {:>3}  L_CE {:.4}  L_reg {:.3e}  train {:.4}  test {:.4}  mean k {:.3}",
                    m.epoch,
                    m.l_ce,
                    m.l_reg,
                    m.train_acc,
                    m.test_acc.unwrap_or(f64::NAN),
                    m.k.mean_k
                );
                rows.push(m);
            }
            Err(e) => {
                write_metrics_csv(fs::File::create(&metrics_path)?, &rows, cfg.output.timing)?;
                let dump = out.join("divergence.p2qm");
                float_file(&state, provenance(cfg, None)?).save(&dump)?;
                eprintln!("training diverged; last good state written to {}", dump.display());
                return Err(e);
            }
        }
    }
    write_metrics_csv(fs::File::create(&metrics_path)?, &rows, cfg.output.timing)?;
    let accuracy = rows.last().and_then(|m| m.test_acc);
    let model_path = out.join("model.p2qm");
    float_file(&state, provenance(cfg, accuracy)?).save(&model_path)?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?)?;

    let mut manifest = Manifest::new("train", cfg.hash()?, cfg.train.seed);
    add_data_inputs(&mut manifest, cfg)?;
    for p in [&metrics_path, &model_path, &config_path] {
        manifest.output(p)?;
    }
    manifest.write(&out.join("manifest.json"))?;
    print_json(&json!({ "test_accuracy": accuracy, "model": model_path.display().to_string() }));
    Ok(())
}

fn expect_float(file: &ModelFile) -> Result<(&Params<f32>, &shiftquant::nn::Buffers<f32>, &Vec<Thresholds>)> {
    match &file.payload {
        Payload::Float { params, buffers, thresholds } => Ok((params, buffers, thresholds)),
        Payload::Quantized { .. } => Err(Error::Usage("expected a float model file".into())),
    }
}

/// Quantized weights a float model file describes under its training scheme.
fn quantize_float_file(net: &Network, file: &ModelFile, k: usize, thresholds: &[Thresholds]) -> Result<QuantizedModel> {
    let (params, _, _) = expect_float(file)?;
    let scheme: Scheme = file.provenance.scheme.parse()?;
    match scheme {
        Scheme::Flexible => quantize_network(net, params, thresholds, k, file.provenance.code_bits),
        Scheme::Fixed => quantize_network(net, params, &[Thresholds::filled(k, f64::NEG_INFINITY)], k, file.provenance.code_bits),
        Scheme::FullPrecision => Err(Error::Usage("full-precision models have no quantized form; pass --k to choose one".into())),
    }
}

pub struct QuantizeOptions {
    pub model: PathBuf,
    pub out: PathBuf,
    pub k: Option<usize>,
    pub thresholds: Option<Vec<f64>>,
}

/// Packs a float model's quantized weights with an engine calibration sidecar.
pub fn quantize(cfg: &RunConfig, opts: &QuantizeOptions) -> Result<()> {
    cfg.validate()?;
    let file = ModelFile::load(&opts.model)?;
    let net = Network::new(file.config.clone())?;
    let split = cfg.data.load(net.config())?;
    let (params, buffers, stored_t) = expect_float(&file)?;
    let mut k = opts.k.unwrap_or(file.provenance.k);
    let mut prov = file.provenance.clone();
    let thresholds = match &opts.thresholds {
        Some(t) => vec![Thresholds(t.clone())],
        None => stored_t.clone(),
    };
    let model = if opts.k.is_some() && prov.scheme == Scheme::FullPrecision.name() {
        // full-precision weights quantized after the fact, all gates open
        prov.scheme = Scheme::Fixed.name().into();
        quantize_network(&net, params, &[Thresholds::filled(k, f64::NEG_INFINITY)], k, prov.code_bits)?
    } else {
        if thresholds.iter().any(|t| t.len() < k) {
            k = thresholds.iter().map(|t| t.len()).min().unwrap_or(0);
        }
        quantize_float_file(&net, &ModelFile { provenance: prov.clone(), ..file.clone() }, k, &thresholds)?
    };
    prov.k = k;
    let n = split.train.len().min(CALIBRATION_IMAGES);
    let (calib, _) = split.train.batch(&(0..n).collect::<Vec<_>>());
    let plan = EnginePlan::export(&net, params, buffers, &model, &calib)?;
    let out = plan.run_inference(&split.test.images)?;
    let accuracy = accuracy_of(&out.labels, &split.test.labels);
    prov.accuracy = Some(accuracy);
    let packed = pack_weights(&model)?;
    let qfile = ModelFile { config: file.config.clone(), provenance: prov, payload: Payload::Quantized { packed, sidecar: plan.calibration().to_bytes() } };
    if let Some(dir) = opts.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    qfile.save(&opts.out)?;

    let mut manifest = Manifest::new("quantize", cfg.hash()?, file.provenance.seed);
    manifest.input(&opts.model)?;
    add_data_inputs(&mut manifest, cfg)?;
    manifest.output(&opts.out)?;
    manifest.write(&opts.out.with_extension("manifest.json"))?;
    print_json(&json!({ "engine_accuracy": accuracy, "storage_bits": storage_bits(&model)?, "mean_k": model.mean_k() }));
    Ok(())
}

fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Engine plan stored in a quantized model file.
pub fn plan_of(file: &ModelFile) -> Result<EnginePlan> {
    match &file.payload {
        Payload::Quantized { packed, sidecar } => {
            EnginePlan::new(file.config.clone(), &unpack_weights(packed)?, Calibration::from_bytes(sidecar)?)
        }
        Payload::Float { .. } => Err(Error::Usage("expected a quantized model file".into())),
    }
}

/// Test-split accuracy of a model file: quantized files run on the
/// integer engine, float files through their training-time quantization.
pub fn eval_accuracy(cfg: &RunConfig, model: &Path) -> Result<(f64, usize, ModelFile)> {
    let file = ModelFile::load(model)?;
    let net = Network::new(file.config.clone())?;
    let split: Split = cfg.data.load(net.config())?;
    let preds = match &file.payload {
        Payload::Quantized { .. } => plan_of(&file)?.run_inference(&split.test.images)?.labels,
        Payload::Float { params, buffers, thresholds } => {
            let wq = if file.provenance.scheme == Scheme::FullPrecision.name() {
                params.clone()
            } else {
                apply_quantized(&net, params, &quantize_float_file(&net, &file, file.provenance.k, thresholds)?)?
            };
            predict(&net, &wq, buffers, &split.test, cfg.train.batch_size)?
        }
    };
    Ok((accuracy_of(&preds, &split.test.labels), split.test.len(), file))
}

pub fn eval(cfg: &RunConfig, model: &Path, out: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let (accuracy, images, file) = eval_accuracy(cfg, model)?;
    let kind = match file.payload {
        Payload::Quantized { .. } => "integer-engine",
        Payload::Float { .. } => "float",
    };
    let report = json!({ "accuracy": accuracy, "logged_accuracy": file.provenance.accuracy, "images": images, "path": kind });
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&report).expect("json") + "\n")?;
        let mut manifest = Manifest::new("eval", cfg.hash()?, file.provenance.seed);
        manifest.input(model)?;
        add_data_inputs(&mut manifest, cfg)?;
        manifest.output(out)?;
        manifest.write(&out.with_extension("manifest.json"))?;
    }
    print_json(&report);
    Ok(())
}

pub fn cost_json(cost: &CostReport, mean_k: Option<f64>) -> serde_json::Value {
    json!({
        "storage_bits": cost.storage_bits,
        "storage_mb": bits_to_mb(cost.storage_bits),
        "macs": cost.macs,
        "shifts": cost.shifts,
        "adds": cost.adds(),
        "extra_adds": cost.extra_adds,
        "multiplies": cost.multiplies,
        "dsp_proxy": cost.dsp_proxy,
        "lut_proxy": cost.lut_proxy,
        "mean_k": mean_k,
        "layers": cost.layers,
    })
}

pub enum CostTarget {
    Model(PathBuf),
    /// A preset with seeded initial weights and all gates open.
    Preset { name: String, k: Option<usize>, code_bits: u8, seed: u64 },
}

/// Cost of a model file, or of a preset quantized to uniform `k` (32-bit
/// float baseline when `k` is absent).
pub fn cost(target: &CostTarget, out: Option<&Path>) -> Result<()> {
    let report = match target {
        CostTarget::Model(path) => {
            let file = ModelFile::load(path)?;
            let net = Network::new(file.config.clone())?;
            match &file.payload {
                Payload::Quantized { packed, .. } => {
                    let model = unpack_weights(packed)?;
                    cost_json(&op_counts(&net, &model)?, Some(model.mean_k()))
                }
                Payload::Float { thresholds, .. } => {
                    if file.provenance.scheme == Scheme::FullPrecision.name() {
                        cost_json(&baseline_cost(&net, 32), None)
                    } else {
                        let model = quantize_float_file(&net, &file, file.provenance.k, thresholds)?;
                        cost_json(&op_counts(&net, &model)?, Some(model.mean_k()))
                    }
                }
            }
        }
        CostTarget::Preset { name, k, code_bits, seed } => {
            let net = Network::new(preset(name)?)?;
            match k {
                None => cost_json(&baseline_cost(&net, 32), None),
                Some(k) => {
                    let params = net.init_params::<f32>(*seed);
                    let model = quantize_network(&net, &params, &[Thresholds::filled(*k, f64::NEG_INFINITY)], *k, *code_bits)?;
                    cost_json(&op_counts(&net, &model)?, Some(model.mean_k()))
                }
            }
        }
    };
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&report).expect("json") + "\n")?;
    }
    print_json(&report);
    Ok(())
}

pub struct SweepOptions {
    pub lambda0: f64,
    pub lambda1: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also train fixed-k models (k = 1 and k = 2) per seed.
    pub baselines: bool,
}

/// Trains one model per `(λ₁, seed)`; writes `pareto.csv` with one row per
/// successful cell, `pareto_front.csv` (storage axis) and `manifest.json`.
/// Failed cells are reported and skipped; the command then fails.
pub fn sweep(cfg: &RunConfig, opts: &SweepOptions) -> Result<()> {
    let net_cfg = cfg.validate()?;
    if cfg.train.k != 2 {
        return Err(Error::Config("the λ₁ sweep needs k = 2".into()));
    }
    let lambdas = opts
        .lambda1
        .iter()
        .map(|&l1| RegCoefficients::new(vec![opts.lambda0, l1]))
        .collect::<Result<Vec<_>>>()?;
    let split = cfg.data.load(&net_cfg)?;
    let net = Network::new(net_cfg)?;
    fs::create_dir_all(&cfg.output.dir)?;
    let base = TrainConfig { scheme: Scheme::Flexible, ..cfg.train.clone() };
    let mut points: Vec<ParetoPoint> = Vec::new();
    let mut failures = 0;
    for cell in sweep_lambda(&net, &base, &lambdas, &opts.seeds, &split, &model_id(&base))? {
        match cell.outcome {
            Ok(o) => {
                eprintln!("λ = {:?} seed {}: accuracy {:.4}, mean k {:.3}", cell.lambda.0, cell.seed, o.accuracy, o.mean_k);
                points.push(o.point);
            }
            Err(e) => {
                eprintln!("λ = {:?} seed {}: failed: {e}", cell.lambda.0, cell.seed);
                failures += 1;
            }
        }
    }
    if opts.baselines {
        for k in [1, 2] {
            for &seed in &opts.seeds {
                let c = TrainConfig { scheme: Scheme::Fixed, k, lambda: RegCoefficients::zeros(k), seed, ..cfg.train.clone() };
                let state = shiftquant::train::fit(&net, &c, &split.train, None, |_| {})?.0;
                let (accuracy, _, _, point) = summarize(&state, &model_id(&c), &split)?;
                eprintln!("{} seed {seed}: accuracy {accuracy:.4}", model_id(&c));
                points.push(point);
            }
        }
    }
    let csv_path = cfg.output.dir.join("pareto.csv");
    write_pareto_csv(fs::File::create(&csv_path)?, &points)?;
    let front_path = cfg.output.dir.join("pareto_front.csv");
    if !points.is_empty() {
        write_pareto_csv(fs::File::create(&front_path)?, &pareto_front(&points, CostAxis::Storage)?)?;
    }
    let mut manifest = Manifest::new("sweep", cfg.hash()?, cfg.train.seed);
    add_data_inputs(&mut manifest, cfg)?;
    manifest.output(&csv_path)?;
    if front_path.exists() {
        manifest.output(&front_path)?;
    }
    manifest.write(&cfg.output.dir.join("manifest.json"))?;
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} sweep cell(s) failed")));
    }
    print_json(&json!({ "rows": points.len(), "pareto_csv": csv_path.display().to_string() }));
    Ok(())
}
