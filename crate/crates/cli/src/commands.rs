use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use simplelog::{ColorChoice, CombinedLogger, LevelFilter, SharedLogger, TermLogger, TerminalMode, WriteLogger};
use subnet_core::analysis::section_count;
use subnet_core::baselines::{write_compare_csv, write_curves_csv};
use subnet_core::data::{generate_splits, Splits};
use subnet_core::model::{SimulationMode, StateInit};
use subnet_core::{
    compare_report, g_of_d, kstep_nrms, load_csv, load_model, nrms, overlap_variance_mc, run_variant, save_csv,
    save_model, slice_splits, train_with, IoDataset, OverlapVariance, SubnetModel, TrainHooks, Variant,
};

use crate::config::{RunConfig, Split};
use crate::CliError;

/// Run directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
    command: &'static str,
}

/// Files a command writes; without `--force` none of them may exist yet.
fn outputs(command: &str) -> &'static [&'static str] {
    match command {
        "generate" => &["train.csv", "val.csv", "test.csv"],
        "train" => &["model.bin", "train_report.csv", "timing.csv"],
        "eval" => &["metrics.csv", "simulation.csv", "kstep_profile.csv", "kstep_predictions.csv"],
        "compare" => &["compare.csv", "curves.csv"],
        "analyze" => &["g_of_d.csv", "overlap_variance.csv"],
        _ => &[],
    }
}

impl RunDir {
    pub fn open(path: &Path, command: &'static str, force: bool) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let dir = Self {
            path: path.to_path_buf(),
            command,
        };
        if !force {
            let config = dir.config_path();
            for p in outputs(command).iter().map(|f| dir.file(f)).chain(std::iter::once(config)) {
                if p.exists() {
                    return Err(CliError::Exists(p));
                }
            }
        }
        dir.init_logging()?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn config_path(&self) -> PathBuf {
        self.file(&format!("{}.config.json", self.command))
    }

    /// Logs go to stderr and are appended to `run.log`. Only the first call
    /// in a process installs the logger.
    fn init_logging(&self) -> Result<(), CliError> {
        let log_path = self.file("run.log");
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| CliError::io(&log_path, e))?;
        let cfg = simplelog::Config::default();
        let loggers: Vec<Box<dyn SharedLogger>> = vec![
            TermLogger::new(LevelFilter::Info, cfg.clone(), TerminalMode::Stderr, ColorChoice::Never),
            WriteLogger::new(LevelFilter::Info, cfg, file),
        ];
        let _ = CombinedLogger::init(loggers);
        log::info!("{} -> {}", self.command, self.path.display());
        Ok(())
    }

    /// The effective configuration, enough to repeat the run.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let path = self.config_path();
        let text = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Loads or generates the three records named by the data section.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let d = &cfg.data;
    if let (Some(tr), Some(va), Some(te)) = (&d.train, &d.val, &d.test) {
        return Ok(Splits {
            train: load_csv(tr, d.n_u, d.n_y)?.named("train"),
            val: load_csv(va, d.n_u, d.n_y)?.named("val"),
            test: load_csv(te, d.n_u, d.n_y)?.named("test"),
        });
    }
    if let (Some(rec), Some([a, b, c])) = (&d.record, d.splits) {
        let record: IoDataset = load_csv(rec, d.n_u, d.n_y)?;
        let (train, val, test) = slice_splits(&record, a, b, c)?;
        return Ok(Splits { train, val, test });
    }
    let g = &d.generator;
    if d.n_u != 1 || d.n_y != 1 {
        return Err(CliError::Config("the generator produces single-input single-output records".into()));
    }
    let [a, b, c] = g.sizes;
    Ok(generate_splits(&g.template(), (a, b, c), cfg.seed)?)
}

fn pick(splits: Splits, split: Split) -> IoDataset {
    match split {
        Split::Train => splits.train,
        Split::Val => splits.val,
        Split::Test => splits.test,
    }
}

pub fn generate(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<String>, CliError> {
    let splits = load_splits(cfg)?;
    let mut lines = Vec::new();
    for (name, data) in [("train.csv", &splits.train), ("val.csv", &splits.val), ("test.csv", &splits.test)] {
        let path = dir.file(name);
        save_csv(data, &path)?;
        lines.push(format!("wrote {} ({} samples)", path.display(), data.len()));
    }
    Ok(lines)
}

pub fn train(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<String>, CliError> {
    let splits = load_splits(cfg)?;
    let tc = cfg.effective_train();
    let ckpt = dir.file("model.bin");
    let hooks = TrainHooks {
        checkpoint: Some(ckpt.clone()),
        observer: None,
    };
    let out = train_with(&tc, &splits.train, &splits.val, hooks)?;
    out.report.write_csv(&dir.file("train_report.csv"))?;
    out.report.write_timing_csv(&dir.file("timing.csv"))?;
    if let Some(e) = out.error {
        return Err(e.into());
    }
    save_model(&out.model, &ckpt)?;
    let r = &out.report;
    let metric = serde_json::to_value(r.validation).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let mut lines = vec![format!(
        "{} epochs, stopped by {}",
        r.epochs.len(),
        serde_json::to_value(r.stop_reason).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
    )];
    match (r.best_epoch, r.best_val_metric) {
        (Some(e), Some(v)) => lines.push(format!("best validation {metric}: {v:.6} (epoch {e})")),
        _ => lines.push("no epoch completed; saved the initial model".into()),
    }
    lines.push(format!("checkpoint: {}", ckpt.display()));
    Ok(lines)
}

pub fn eval(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<String>, CliError> {
    let ckpt = cfg.eval.checkpoint.clone().unwrap_or_else(|| dir.file("model.bin"));
    let model: SubnetModel = load_model(&ckpt)?;
    let data = pick(load_splits(cfg)?, cfg.eval.split);
    model.check_channels(&data)?;

    let mut metrics = Vec::new();
    let free = model.simulate(&data, SimulationMode::FreeRun)?;
    metrics.push(("free-run", nrms(&data.y, &free.y_hat, free.skip)?));
    let forced = model.simulate(&data, SimulationMode::TeacherForced)?;
    metrics.push(("teacher-forced", nrms(&data.y, &forced.y_hat, forced.skip)?));

    let split = serde_json::to_value(cfg.eval.split).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let path = dir.file("metrics.csv");
    write_lines(&path, "split,mode,nrms", metrics.iter().map(|(m, v)| format!("{split},{m},{v}")))?;

    let simulated = IoDataset::new(data.u.clone(), free.y_hat.clone())?;
    save_csv(&simulated, &dir.file("simulation.csv"))?;

    let mut lines: Vec<String> = metrics
        .iter()
        .map(|(m, v)| format!("{split} {m} NRMS: {:.3}%", 100.0 * v))
        .collect();
    if model.state_init() == StateInit::Encoder {
        let k_max = cfg.eval.k_max.min(data.len().saturating_sub(model.lag() + 1));
        let profile = kstep_nrms(&model, &data, k_max, cfg.train.horizon)?;
        profile.write_csv(&dir.file("kstep_profile.csv"))?;
        lines.push(format!(
            "k-step NRMS: k=0 {:.3}%, k={k_max} {:.3}%",
            100.0 * profile.nrms[0],
            100.0 * profile.nrms[k_max]
        ));
        if cfg.eval.write_predictions {
            let pred = model.kstep_predictions(&data, k_max)?;
            pred.write_csv(&data, &dir.file("kstep_predictions.csv"))?;
        }
    } else {
        log::warn!("model has no encoder; skipping the k-step profile");
    }
    Ok(lines)
}

pub fn compare(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<String>, CliError> {
    let splits = load_splits(cfg)?;
    let mut base = cfg.effective_train();
    base.time_budget_s = cfg.compare.budget_s;
    base.patience = None;
    let mut results = Vec::new();
    for &variant in &cfg.compare.variants {
        let hooks = TrainHooks {
            checkpoint: Some(dir.file(&format!("compare_{}.bin", slug(variant)))),
            observer: None,
        };
        let r = run_variant(variant, &base, &splits.train, &splits.val, &splits.test, hooks)?;
        if let Some(e) = &r.diverged {
            log::warn!("{variant}: {e}");
        }
        log::info!("{variant}: test NRMS {:.3}%", 100.0 * r.test_nrms);
        results.push(r);
    }
    let rows = compare_report(&results);
    write_compare_csv(&rows, &dir.file("compare.csv"))?;
    write_curves_csv(&results, &dir.file("curves.csv"))?;
    Ok(rows.iter().map(|r| format!("{:<28} {:>8.3}%", r.variant, r.nrms_percent)).collect())
}

fn slug(v: Variant) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub fn analyze(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<String>, CliError> {
    let a = &cfg.analyze;
    let rows = (1..=a.max_t).map(|t| {
        let n = 10 * t;
        let (m1, mt) = (section_count(n, t, 1), section_count(n, t, t));
        let (g1, gt) = (g_of_d(1, t, m1), g_of_d(t, t, mt));
        format!("{t},{n},{m1},{mt},{g1},{gt},{}", g1 / gt)
    });
    write_lines(&dir.file("g_of_d.csv"), "T,N,m_1,m_T,G_1,G_T,ratio", rows)?;

    let mut lines = Vec::new();
    let mut results = Vec::new();
    for (i, &(t, n)) in a.overlap_cases.iter().enumerate() {
        let r = overlap_variance_mc(t, n, a.trials, cfg.seed.wrapping_add(i as u64))?;
        lines.push(format!(
            "T={t} N={n}: var ratio {:.4} (analytic {:.4})",
            r.empirical_ratio(),
            r.analytic_ratio
        ));
        results.push(r);
    }
    write_lines(
        &dir.file("overlap_variance.csv"),
        OverlapVariance::csv_header(),
        results.iter().map(OverlapVariance::csv_row),
    )?;
    lines.push(format!("wrote {}", dir.file("g_of_d.csv").display()));
    Ok(lines)
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    let io = |e| CliError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        writeln!(w, "{r}").map_err(io)?;
    }
    w.flush().map_err(io)
}
