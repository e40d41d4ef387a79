//! Comparison of section-initialisation strategies under a shared budget.
//!
//! The five variants share networks, optimiser and data and differ only in
//! how each section's initial state is obtained (encoder or a trainable
//! state per section) and in the spacing of section starts. The
//! "Parameter init OE" variant simulates the whole training record as one
//! section from a single trainable initial state.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::nrms;
use crate::data::IoDataset;
use crate::error::{Error, Result};
use crate::model::{SimulationMode, StateInit, SubnetModel};
use crate::optim::{train_with, EpochRecord, TrainConfig, TrainHooks, TrainReport};
use crate::scalar::Scalar;

/// How section initial states are obtained.
pub type InitStrategy = StateInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ParameterInitOe,
    ParameterInitNoOverlap,
    ParameterInitOverlap,
    EncoderNoOverlap,
    EncoderOverlap,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ParameterInitOe,
        Variant::ParameterInitNoOverlap,
        Variant::ParameterInitOverlap,
        Variant::EncoderNoOverlap,
        Variant::EncoderOverlap,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::ParameterInitOe => "Parameter init OE",
            Variant::ParameterInitNoOverlap => "Parameter init no-overlap",
            Variant::ParameterInitOverlap => "Parameter init overlap",
            Variant::EncoderNoOverlap => "Encoder init no-overlap",
            Variant::EncoderOverlap => "Encoder init overlap",
        }
    }

    pub fn init_strategy(self) -> InitStrategy {
        match self {
            Variant::EncoderNoOverlap | Variant::EncoderOverlap => StateInit::Encoder,
            _ => StateInit::Zero,
        }
    }

    /// The base configuration with this variant's initialisation, spacing
    /// and horizon. Everything else is left untouched.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.state_init = self.init_strategy();
        let t = base.horizon.unwrap_or(1);
        match self {
            Variant::ParameterInitOe => {
                cfg.horizon = None;
                cfg.spacing = 1;
            }
            Variant::ParameterInitNoOverlap | Variant::EncoderNoOverlap => cfg.spacing = t,
            Variant::ParameterInitOverlap | Variant::EncoderOverlap => cfg.spacing = 1,
        }
        cfg
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug)]
pub struct VariantResult<S> {
    pub variant: Variant,
    pub model: SubnetModel<S>,
    pub report: TrainReport,
    /// Free-run NRMS of the returned model on the test record.
    pub test_nrms: f64,
    /// Set when training stopped on a numeric failure (the model is then
    /// the best one before the failure) or when the test simulation blew up
    /// (`test_nrms` is then infinite).
    pub diverged: Option<String>,
}

/// Trains one variant and evaluates it on the test record.
pub fn run_variant<S: Scalar>(
    variant: Variant,
    base: &TrainConfig,
    train: &IoDataset<S>,
    val: &IoDataset<S>,
    test: &IoDataset<S>,
    hooks: TrainHooks<'_, S>,
) -> Result<VariantResult<S>> {
    let cfg = variant.config(base);
    log::info!("running variant `{}`", variant.label());
    let out = train_with(&cfg, train, val, hooks)?;
    let (test_nrms, test_error) = free_run_score(&out.model, test)?;
    let diverged = match (out.error, test_error) {
        (Some(e), _) => Some(e.to_string()),
        (None, Some(e)) => Some(format!("test simulation: {e}")),
        (None, None) => None,
    };
    Ok(VariantResult {
        variant,
        model: out.model,
        report: out.report,
        test_nrms,
        diverged,
    })
}

/// Free-run NRMS on `data`. A simulation that blows up scores infinity and
/// hands back the numeric error; other errors propagate.
pub fn free_run_score<S: Scalar>(model: &SubnetModel<S>, data: &IoDataset<S>) -> Result<(f64, Option<Error>)> {
    match model.simulate(data, SimulationMode::FreeRun) {
        Ok(sim) => Ok((nrms(&data.y, &sim.y_hat, sim.skip)?, None)),
        Err(e) if e.is_numeric() => Ok((f64::INFINITY, Some(e))),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub variant: String,
    pub nrms_percent: f64,
}

/// Rows sorted by NRMS, ties broken by variant label.
pub fn compare_report<S>(results: &[VariantResult<S>]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = results
        .iter()
        .map(|r| CompareRow {
            variant: r.variant.label().to_string(),
            nrms_percent: 100.0 * r.test_nrms,
        })
        .collect();
    rows.sort_by(|a, b| a.nrms_percent.total_cmp(&b.nrms_percent).then_with(|| a.variant.cmp(&b.variant)));
    rows
}

/// `variant,nrms_percent`.
pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "variant,nrms_percent").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{}", r.variant, r.nrms_percent).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Validation NRMS against wall-clock time for every variant:
/// `variant,epoch,wallclock_s,val_nrms`.
pub fn write_curves_csv<S>(results: &[VariantResult<S>], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "variant,epoch,wallclock_s,val_nrms").map_err(io)?;
    for r in results {
        for EpochRecord {
            epoch,
            val_metric,
            wallclock_s,
            ..
        } in &r.report.epochs
        {
            writeln!(w, "{},{epoch},{wallclock_s},{val_metric}", r.variant.label()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sim_system, SimSystemConfig};
    use crate::loss::valid_starts;
    use crate::model::{ModelConfig, NetShape, Normalization};
    use crate::optim::StopReason;

    fn base() -> TrainConfig {
        let shape = NetShape {
            hidden_layers: 1,
            hidden_width: 6,
            ..NetShape::default()
        };
        TrainConfig {
            model: ModelConfig {
                n_x: 2,
                n_a: 3,
                n_b: 3,
                encoder_net: shape,
                transition_net: shape,
                output_net: shape,
                ..ModelConfig::default()
            },
            horizon: Some(6),
            batch_size: 16,
            max_epochs: 2,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> IoDataset<f64> {
        generate_sim_system(&SimSystemConfig {
            n_samples: n,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn overlap_variants_differ_only_in_spacing() {
        let b = base();
        let a = Variant::EncoderOverlap.config(&b);
        let mut c = Variant::EncoderNoOverlap.config(&b);
        assert_eq!((a.spacing, c.spacing), (1, 6));
        c.spacing = 1;
        assert_eq!(a, c);
        let oe = Variant::ParameterInitOe.config(&b);
        assert_eq!(oe.horizon, None);
        assert_eq!(oe.model.state_init, StateInit::Zero);
    }

    #[test]
    fn no_overlap_state_count() {
        for (n, t) in [(100, 6), (10_000, 40), (41, 40), (97, 7)] {
            let idx = valid_starts(n, t, 0, 0, t).unwrap();
            assert_eq!(idx.len(), (n - t + 1).div_ceil(t));
        }
    }

    #[test]
    fn variants_share_transition_and_output_sizes() {
        let b = base();
        let nm = Normalization::identity(1, 1);
        let sizes: Vec<(usize, usize)> = Variant::ALL
            .iter()
            .map(|v| {
                let m = SubnetModel::<f64>::init(&v.config(&b).model, nm.clone(), 0).unwrap();
                (m.transition.values().len(), m.output.values().len())
            })
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn every_variant_runs() {
        let (tr, va, te) = (data(120, 1), data(60, 2), data(60, 3));
        let mut results = Vec::new();
        for v in Variant::ALL {
            let r = run_variant(v, &base(), &tr, &va, &te, TrainHooks::default()).unwrap();
            assert!(r.test_nrms.is_finite());
            assert_eq!(r.report.epochs.len(), 2);
            results.push(r);
        }
        let rows = compare_report(&results);
        assert_eq!(rows.len(), 5);
        assert!(rows.windows(2).all(|w| w[0].nrms_percent <= w[1].nrms_percent));
        let dir = tempfile::tempdir().unwrap();
        write_compare_csv(&rows, &dir.path().join("c.csv")).unwrap();
        write_curves_csv(&results, &dir.path().join("k.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("k.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 10);
    }

    #[test]
    fn ties_sort_by_name() {
        let m = SubnetModel::<f64>::init(&base().model, Normalization::identity(1, 1), 0).unwrap();
        let mk = |variant| VariantResult {
            variant,
            model: m.clone(),
            report: TrainReport {
                epochs: vec![],
                best_epoch: None,
                best_val_metric: None,
                checkpoint: None,
                stop_reason: StopReason::MaxEpochs,
                validation: Default::default(),
            },
            test_nrms: 0.05,
            diverged: None,
        };
        let rows = compare_report(&[mk(Variant::ParameterInitOverlap), mk(Variant::EncoderOverlap)]);
        assert_eq!(rows[0].variant, "Encoder init overlap");
        assert_eq!(compare_report(&[mk(Variant::EncoderOverlap)]).len(), 1);
    }

    #[test]
    fn budget_is_checked_between_epochs() {
        let b = TrainConfig {
            time_budget_s: Some(0.0),
            max_epochs: 100,
            ..base()
        };
        let (tr, va) = (data(120, 1), data(60, 2));
        let r = run_variant(Variant::EncoderOverlap, &b, &tr, &va, &va, TrainHooks::default()).unwrap();
        assert!(r.report.epochs.is_empty());
        assert_eq!(r.report.stop_reason, StopReason::TimeBudget);

        let b = TrainConfig {
            time_budget_s: Some(0.05),
            max_epochs: 100_000,
            patience: None,
            ..base()
        };
        let r = run_variant(Variant::EncoderOverlap, &b, &tr, &va, &va, TrainHooks::default()).unwrap();
        let last = r.report.epochs.last().unwrap().wallclock_s;
        let per_epoch = last / r.report.epochs.len() as f64;
        assert!(last < 0.05 + 2.0 * per_epoch + 0.05, "{last}");
    }

    #[test]
    fn trainable_states_get_gradients_on_random_data() {
        let b = base();
        let cfg = Variant::ParameterInitNoOverlap.config(&b);
        let d = data(80, 4);
        let nm = Normalization::fit(&d).unwrap();
        let m = SubnetModel::<f64>::init(&cfg.model, nm.clone(), 1).unwrap();
        let dn = nm.normalize(&d);
        let idx = valid_starts(80, 6, 0, 0, 6).unwrap();
        let st = crate::loss::InitialStates::zeros(&idx, 2);
        let lg = crate::loss::section_loss_grad(&m, &dn, &idx.starts, 6, Some(&st), 1).unwrap();
        assert!(lg.grads[crate::model::BLOCK_STATES].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn diverging_test_simulation_scores_infinity() {
        let d = data(200, 5);
        let mut m = SubnetModel::<f64>::init(&base().model, Normalization::identity(1, 1), 0).unwrap();
        for w in m.transition.values_mut() {
            *w *= 1e3;
        }
        let (score, err) = free_run_score(&m, &d).unwrap();
        assert_eq!(score, f64::INFINITY);
        assert!(matches!(err, Some(Error::Divergence { .. })));

        let short = data(3, 5);
        assert!(free_run_score(&m, &short).is_err());
    }

    #[test]
    fn parse_variant_names() {
        assert_eq!("encoder-overlap".parse::<Variant>().unwrap(), Variant::EncoderOverlap);
        assert!("nope".parse::<Variant>().is_err());
    }
}
