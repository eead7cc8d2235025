use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use laser_core::analysis::{saturation_report, thresholds_with_defaults, SaturationReport};
use laser_core::gradcheck::{run_gradcheck, GradcheckOptions, Scope};
use laser_core::model::{save_checkpoint, Model};
use laser_core::train::{train_loop, Corpus, RunMetrics, TrainError, METRICS_CSV_HEADER};
use laser_core::{DType, Scalar};
use serde_json::{json, Value};

use crate::config::{self, ExperimentConfig};
use crate::error::{io_error, CliError, CliResult, ErrorKind};
use crate::plot::{Plot, Series, Style};
use crate::report::{versioned, write_json, write_text};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "resolved_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SATURATION_FILE: &str = "saturation.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const REPORT_FILE: &str = "report.json";
pub const ERROR_FILE: &str = "error.json";
pub const LOSS_PLOT_FILE: &str = "loss.svg";
pub const GRAD_NORM_PLOT_FILE: &str = "grad_norm.svg";

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub attention: Option<String>,
    pub out: Option<PathBuf>,
}

/// Loads the config named by `config_path` with `--set` style overrides.
pub fn resolve_config(config_path: Option<&Path>, set: &[String], attention: Option<&str>) -> CliResult<ExperimentConfig> {
    let mut overrides = set.iter().map(|s| config::parse_override(s)).collect::<CliResult<Vec<_>>>()?;
    if let Some(a) = attention {
        overrides.push((vec!["attention".into(), "variant".into()], Value::String(a.into())));
    }
    let cfg = config::load(config_path, &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_corpus(cfg: &ExperimentConfig, config_path: Option<&Path>) -> CliResult<Corpus> {
    let path = cfg
        .data
        .path
        .as_deref()
        .ok_or_else(|| CliError::config("data.path is required"))?;
    let path = config::resolve(config_path, path);
    let bytes = std::fs::read(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Corpus::from_bytes(bytes, cfg.data.holdout_frac).map_err(train_error)
}

pub fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Data(m) => CliError::data(m),
        TrainError::NonFinite { step, quantity, .. } => {
            CliError::new(ErrorKind::Numeric, format!("non-finite {quantity} at step {step}"))
                .with_details(json!({ "step": step, "quantity": quantity }))
        }
        TrainError::NonFiniteGradient { tensor } => {
            CliError::new(ErrorKind::Numeric, format!("non-finite gradient in tensor {tensor}"))
        }
        other => CliError::config(other.to_string()),
    }
}

pub fn run(args: &TrainArgs) -> CliResult<Value> {
    let config_path = args.config.as_deref();
    let mut cfg = resolve_config(config_path, &args.set, args.attention.as_deref())?;
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    let out_dir = match &args.out {
        Some(o) => o.clone(),
        None => config::resolve(config_path, &cfg.output.dir),
    };
    let corpus = load_corpus(&cfg, config_path)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
    let _ = std::fs::remove_file(out_dir.join(ERROR_FILE));
    write_json(&out_dir.join(CONFIG_FILE), &cfg)?;
    let result = match cfg.train.dtype {
        DType::F32 => run_typed::<f32>(&cfg, &corpus, &out_dir),
        DType::F64 => run_typed::<f64>(&cfg, &corpus, &out_dir),
    };
    if let Err(e) = &result {
        // Best effort: the same JSON also goes to stderr.
        let _ = write_json(&out_dir.join(ERROR_FILE), &e.to_json());
    }
    result
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, corpus: &Corpus, out_dir: &Path) -> CliResult<Value> {
    let model_config = cfg.model_config();
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{METRICS_CSV_HEADER}").map_err(|e| io_error(&metrics_path, e))?;
    let mut write_err = None;
    let outcome = train_loop::<T>(&model_config, &cfg.train, corpus, |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(csv, "{}", r.csv_row()) {
                write_err = Some(e);
            }
        }
    });
    csv.flush().map_err(|e| io_error(&metrics_path, e))?;
    if let Some(e) = write_err {
        return Err(io_error(&metrics_path, e));
    }
    let outcome = outcome.map_err(train_error)?;
    let metrics = &outcome.metrics;

    let mut files = json!({ "config": CONFIG_FILE, "metrics": METRICS_FILE });
    let checkpoint_meta = json!({
        "steps": metrics.steps.len(),
        "seed": cfg.train.seed,
        "final_eval_loss": metrics.final_eval_loss(),
    });
    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &outcome.model, checkpoint_meta)
        .map_err(|e| io_error(&out_dir.join(CHECKPOINT_FILE), e))?;
    files["checkpoint"] = json!(CHECKPOINT_FILE);

    let seq_len = cfg.train.seq_len;
    let windows = corpus
        .eval_windows(cfg.output.probe_sequences, seq_len)
        .map_err(train_error)?;
    let thresholds = thresholds_with_defaults(&[1.0 / (10.0 * seq_len as f64)]);
    let probe = |m: &Model<T>| -> CliResult<SaturationReport> {
        saturation_report(m, &windows, &thresholds, true).map_err(|e| CliError::new(ErrorKind::Numeric, e.to_string()))
    };
    let initial = Model::<T>::init(model_config.clone(), cfg.train.seed).map_err(|e| CliError::config(e.to_string()))?;
    let saturation = json!({ "initial": probe(&initial)?, "final": probe(&outcome.model)? });
    write_json(&out_dir.join(SATURATION_FILE), &versioned("saturation_comparison", &saturation))?;
    files["saturation"] = json!(SATURATION_FILE);

    let mut gradcheck_passed = Value::Null;
    if cfg.output.gradcheck {
        let report = run_gradcheck(&Scope::ALL, GradcheckOptions { seed: cfg.train.seed, fault: None });
        gradcheck_passed = json!(report.passed);
        write_json(&out_dir.join(GRADCHECK_FILE), &versioned("gradcheck", &report))?;
        files["gradcheck"] = json!(GRADCHECK_FILE);
    }

    if cfg.output.plots {
        write_text(&out_dir.join(LOSS_PLOT_FILE), &loss_plot(metrics).to_svg())?;
        write_text(&out_dir.join(GRAD_NORM_PLOT_FILE), &grad_norm_plot(metrics).to_svg())?;
        files["plots"] = json!([LOSS_PLOT_FILE, GRAD_NORM_PLOT_FILE]);
    }

    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let body = json!({
        "created_unix": created,
        "config": cfg,
        "files": files,
        "summary": {
            "steps": metrics.steps.len(),
            "final_loss": metrics.steps.last().map(|r| r.loss),
            "final_eval_loss": metrics.final_eval_loss(),
            "uniform_loss": (model_config.vocab_size as f64).ln(),
            "spike_count": metrics.spike_count,
            "spike_window": metrics.spike_window,
            "spike_jump": metrics.spike_jump,
            "parameters": outcome.model.params.num_params(),
            "gradcheck_passed": gradcheck_passed,
        },
    });
    let report = versioned("train_report", &body);
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn loss_plot(m: &RunMetrics) -> Plot {
    Plot {
        title: "Loss".into(),
        x_label: "step".into(),
        y_label: "cross-entropy (nats)".into(),
        series: vec![
            Series {
                label: "train".into(),
                points: m.steps.iter().map(|r| (r.step as f64, r.loss)).collect(),
                style: Style::Line,
            },
            Series {
                label: "eval".into(),
                points: m.eval_losses().into_iter().map(|(s, l)| (s as f64, l)).collect(),
                style: Style::Points,
            },
        ],
        ..Plot::default()
    }
}

fn grad_norm_plot(m: &RunMetrics) -> Plot {
    Plot {
        title: "Gradient norm".into(),
        x_label: "step".into(),
        y_label: "global L2 norm".into(),
        log_y: true,
        series: vec![Series {
            label: "grad norm".into(),
            points: m.steps.iter().map(|r| (r.step as f64, r.grad_norm)).collect(),
            style: Style::Line,
        }],
        ..Plot::default()
    }
}
