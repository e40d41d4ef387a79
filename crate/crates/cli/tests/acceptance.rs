//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL ...`
//! line (visible with `--nocapture`) before asserting.
//!
//! Criteria 3, 4, 5 and 10 train for hours and are ignored by default:
//!
//! ```text
//! cargo test --release -p subnet-cli --test acceptance -- --ignored --nocapture --test-threads 1
//! ```

use std::fs;
use std::process::Command;

use subnet_core::analysis::section_count;
use subnet_core::data::{mix_seed, sim_system_step, simulate_sim_system, splits_for, WIENER_HAMMERSTEIN_SPLITS};
use subnet_core::loss::encoder_loss_grad;
use subnet_core::model::{NetShape, Rollout, Window};
use subnet_core::nets::{Activation, Mlp, MlpParams, MlpSpec};
use subnet_core::optim::EpochRecord;
use subnet_core::{
    encoder_loss, free_run_score, g_of_d, load_csv, overlap_variance_mc, paper_splits, run_variant, save_csv, slice_splits,
    train_with, IoDataset, Matrix, ModelConfig, NoiseStructure, Normalization, SimSystemConfig, SimVariant,
    SubnetModel, TrainConfig, TrainHooks, Variant,
};

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Free-run test NRMS; a diverging simulation counts as infinite error.
fn test_nrms(model: &SubnetModel, test: &IoDataset) -> f64 {
    let (v, err) = free_run_score(model, test).unwrap();
    if let Some(e) = err {
        println!("  test simulation diverged: {e}");
    }
    v
}

/// Uniform integer in `lo..=hi` from a counter-based hash.
fn pick(seed: u64, salt: u64, lo: usize, hi: usize) -> usize {
    lo + (mix_seed(seed.wrapping_mul(31).wrapping_add(salt)) % (hi - lo + 1) as u64) as usize
}

#[test]
fn c01_gradients_match_finite_differences() {
    let noises = [NoiseStructure::OutputError, NoiseStructure::LinearInnovation, NoiseStructure::GeneralInnovation];
    let h = 1e-6;
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let shape = |salt| NetShape {
            hidden_layers: pick(inst, salt, 1, 2),
            hidden_width: pick(inst, salt + 1, 1, 8),
            ..NetShape::default()
        };
        let cfg = ModelConfig {
            n_x: pick(inst, 0, 1, 4),
            n_a: pick(inst, 1, 0, 3),
            n_b: pick(inst, 2, 0, 3),
            noise: noises[pick(inst, 3, 0, 2)],
            encoder_net: shape(10),
            transition_net: shape(20),
            output_net: shape(30),
            ..ModelConfig::default()
        };
        let horizon = pick(inst, 4, 1, 5);
        let data = subnet_core::generate_sim_system(&SimSystemConfig {
            n_samples: 40,
            seed: inst,
            ..SimSystemConfig::default()
        })
        .unwrap();
        let norm = Normalization::fit(&data).unwrap();
        let mut model = SubnetModel::init(&cfg, norm, inst).unwrap();
        if let Some(k) = &mut model.gain {
            for (i, v) in k.as_mut_slice().iter_mut().enumerate() {
                *v = 0.3 * ((i as f64) + 1.0).sin();
            }
        }
        let lag = cfg.lag();
        let starts: Vec<usize> = (0..4).map(|j| pick(inst, 40 + j, lag, 40 - horizon)).collect();

        let analytic = encoder_loss_grad(&model, &data, &starts, horizon, 1).unwrap();
        let ids: Vec<usize> = model.param_blocks().iter().map(|(id, _)| *id).collect();
        for id in ids {
            for i in 0..analytic.grads[id].len() {
                let at = |delta: f64| {
                    let mut m = model.clone();
                    for (bid, vals) in m.param_blocks_mut() {
                        if bid == id {
                            vals[i] += delta;
                        }
                    }
                    encoder_loss(&m, &data, &starts, horizon).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let a = analytic.grads[id][i];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
            }
        }
    }
    let pass = worst < 1e-4;
    report(1, pass, format!("(max relative error {worst:.2e} over 100 instances)"));
    assert!(pass);
}

fn linear(input: usize, w: Vec<f64>) -> Mlp<f64> {
    let spec = MlpSpec {
        input_dim: input,
        output_dim: 1,
        hidden_layers: 0,
        hidden_width: 1,
        activation: Activation::Tanh,
        bypass: false,
    };
    let mut values = w;
    values.push(0.0);
    Mlp::new(spec, MlpParams { values }).unwrap()
}

/// Scalar model `x+ = f_w . [x, u, (e)]`, `y = x`, encoder `x = enc_w y_t`.
fn toy(noise: NoiseStructure, f_w: Vec<f64>, enc_w: f64) -> SubnetModel {
    let n = f_w.len();
    SubnetModel {
        n_x: 1,
        n_u: 1,
        n_y: 1,
        n_a: 0,
        n_b: 0,
        noise,
        encoder: Some(linear(1, vec![enc_w])),
        transition: linear(n, f_w),
        output: linear(1, vec![1.0]),
        gain: None,
        normalization: Normalization::identity(1, 1),
    }
}

fn window(y_t: f64, u: &[f64], y: &[f64]) -> Window<f64> {
    let t = u.len();
    Window {
        start: 0,
        u_past: Matrix::zeros(0, 1),
        y_past: Matrix::from_vec(1, 1, vec![y_t]).unwrap(),
        u: Matrix::from_vec(t, 1, u.to_vec()).unwrap(),
        y: Matrix::from_vec(t, 1, y.to_vec()).unwrap(),
    }
}

fn max_dev(r: &Rollout<f64>, expected: &[f64]) -> f64 {
    assert_eq!(r.y_hat.len(), expected.len());
    r.y_hat.iter().zip(expected).map(|(m, e)| (m[(0, 0)] - e).abs()).fold(0.0, f64::max)
}

#[test]
fn c02_hand_computed_rollouts() {
    // x+ = 0.5 x + u from x0 = 0 with an impulse: 0, 1, 0.5.
    let oe = toy(NoiseStructure::OutputError, vec![0.5, 1.0], 0.0);
    let d1 = max_dev(&oe.rollout(&window(0.0, &[1.0, 0.0, 0.0], &[0.0; 3])).unwrap(), &[0.0, 1.0, 0.5]);
    // x+ = 0.5 x + u + 0.1 e with y = 1 throughout: e = 1, 0.9 -> 0, 0.1, 0.14.
    let gi = toy(NoiseStructure::GeneralInnovation, vec![0.5, 1.0, 0.1], 0.0);
    let d2 = max_dev(&gi.rollout(&window(0.0, &[0.0; 3], &[1.0; 3])).unwrap(), &[0.0, 0.1, 0.14]);
    // T = 1: only the encoded state is read out, 2 * 0.35.
    let enc = toy(NoiseStructure::OutputError, vec![0.5, 1.0], 2.0);
    let d3 = max_dev(&enc.rollout(&window(0.35, &[5.0], &[0.0])).unwrap(), &[0.7]);
    let worst = d1.max(d2).max(d3);
    let pass = worst <= 1e-12;
    report(2, pass, format!("(deviations {d1:.1e}, {d2:.1e}, {d3:.1e})"));
    assert!(pass);
}

#[test]
#[ignore = "trains for about 7.5 hours"]
fn c03_c04_simulation_study() {
    const SHORT: f64 = 1500.0;
    const LONG: f64 = 7200.0;
    let mut short = Vec::new();
    let mut long = Vec::new();
    let mut oe = Vec::new();
    for seed in 0..3u64 {
        let splits = paper_splits(seed).unwrap();
        let cfg = TrainConfig {
            seed,
            max_epochs: 1_000_000,
            time_budget_s: Some(LONG),
            ..TrainConfig::default()
        };
        let mut snapshot: Option<SubnetModel> = None;
        let mut keep = |rec: &EpochRecord, best: &SubnetModel| {
            if rec.wallclock_s <= SHORT {
                snapshot = Some(best.clone());
            }
        };
        let hooks = TrainHooks {
            checkpoint: None,
            observer: Some(&mut keep),
        };
        let out = train_with(&cfg, &splits.train, &splits.val, hooks).unwrap();
        let s = test_nrms(snapshot.as_ref().unwrap_or(&out.model), &splits.test);
        let l = test_nrms(&out.model, &splits.test);
        println!(
            "  seed {seed}: encoder-overlap {:.3}% at 25 min, {:.3}% at end ({} epochs, {:?})",
            100.0 * s,
            100.0 * l,
            out.report.epochs.len(),
            out.report.stop_reason
        );
        short.push(s);
        long.push(l);

        let base = TrainConfig {
            patience: None,
            time_budget_s: Some(SHORT),
            ..cfg.clone()
        };
        let r = run_variant(Variant::ParameterInitOe, &base, &splits.train, &splits.val, &splits.test, TrainHooks::default())
            .unwrap();
        println!(
            "  seed {seed}: parameter-init OE {:.3}% ({} epochs{})",
            100.0 * r.test_nrms,
            r.report.epochs.len(),
            r.diverged.as_deref().map(|e| format!(", {e}")).unwrap_or_default()
        );
        oe.push(r.test_nrms);
    }
    let (ms, ml, mo) = (median(short), median(long), median(oe));
    let pass3 = ms <= 0.05 && ml <= 0.03;
    report(3, pass3, format!("(median test NRMS {:.3}% at 25 min, {:.3}% at 2 h)", 100.0 * ms, 100.0 * ml));
    let pass4 = ms < mo;
    report(4, pass4, format!("(median encoder-overlap {:.3}% vs parameter-init OE {:.3}%)", 100.0 * ms, 100.0 * mo));
    assert!(pass3 && pass4);
}

#[test]
#[ignore = "trains for about 3.75 hours"]
fn c05_innovation_noise_ordering() {
    let structures = [
        (NoiseStructure::OutputError, 8.2),
        (NoiseStructure::LinearInnovation, 6.5),
        (NoiseStructure::GeneralInnovation, 4.3),
    ];
    let mut results = vec![Vec::new(); 3];
    for seed in 0..3u64 {
        let splits = splits_for(SimVariant::NonlinearProcessNoise, 2.0, seed).unwrap();
        for (i, (noise, _)) in structures.iter().enumerate() {
            let mut cfg = TrainConfig {
                seed,
                max_epochs: 1_000_000,
                patience: None,
                time_budget_s: Some(1500.0),
                ..TrainConfig::default()
            };
            cfg.model.noise = *noise;
            let out = train_with(&cfg, &splits.train, &splits.val, TrainHooks::default()).unwrap();
            let v = 100.0 * test_nrms(&out.model, &splits.test);
            println!("  seed {seed}: {noise:?} {v:.3}%");
            results[i].push(v);
        }
    }
    let med: Vec<f64> = results.into_iter().map(median).collect();
    let ordered = med[2] < med[1] && med[1] < med[0];
    let within = med.iter().zip(&structures).all(|(m, (_, p))| (m - p).abs() <= 0.5 * p);
    report(
        5,
        ordered && within,
        format!("(median NRMS OE {:.2}%, linear {:.2}%, general {:.2}%)", med[0], med[1], med[2]),
    );
    assert!(ordered && within);
}

#[test]
fn c06_overlap_variance_monte_carlo() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (t, n)) in [(4, 256), (8, 512), (16, 1024)].into_iter().enumerate() {
        let r = overlap_variance_mc(t, n, 2000, 100 + i as u64).unwrap();
        let rel = (r.empirical_ratio() / r.analytic_ratio - 1.0).abs();
        pass &= r.var_d1 <= r.var_dt && rel < 0.10;
        parts.push(format!("T={t}: {:.3} vs {:.3}", r.empirical_ratio(), r.analytic_ratio));
    }
    report(6, pass, format!("({})", parts.join("; ")));
    assert!(pass);
}

#[test]
fn c07_analytic_g() {
    let g = g_of_d(1, 2, 3);
    let exact = g == 5.0 / 9.0;
    let mut sweep = true;
    for t in 1..=64 {
        for n in [t, 2 * t, 10 * t, 10 * t + t / 2, 1000] {
            // Spacing T needs at least one full section.
            if section_count(n, t, t) == 0 {
                continue;
            }
            let g1 = g_of_d(1, t, section_count(n, t, 1));
            let gt = g_of_d(t, t, section_count(n, t, t));
            sweep &= g1 <= gt * (1.0 + 1e-12);
        }
    }
    report(7, exact && sweep, format!("(G = {g}, sweep up to T = 64 {})", if sweep { "holds" } else { "violated" }));
    assert!(exact && sweep);
}

#[test]
fn c08_equilibrium_and_snr() {
    let x = sim_system_step([0.68, 0.68], 0.0, 0.0, SimVariant::Base, [0.0, 0.0]);
    let dev = (x[0] - 0.68).abs().max((x[1] - 0.68).abs());
    let trace = simulate_sim_system(&SimSystemConfig {
        n_samples: 10_000,
        seed: 11,
        ..SimSystemConfig::default()
    })
    .unwrap();
    let snr = trace.snr_db();
    let pass = dev <= 0.01 && (snr - 20.0).abs() <= 1.0;
    report(8, pass, format!("(fixed-point deviation {dev:.4}, SNR {snr:.2} dB)"));
    assert!(pass);
}

#[test]
fn c09_training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{"seed": 3, "train": {"max_epochs": 2}}"#).unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_subnet"))
            .args(["train", "--threads", "1", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        reports.push(fs::read(out.join("train_report.csv")).unwrap());
    }
    let pass = reports[0] == reports[1];
    report(9, pass, format!("({} bytes each)", reports[0].len()));
    assert!(pass);
}

/// Wiener-Hammerstein-like record: a second-order filter, a saturating
/// static nonlinearity and a second filter, driven by a random-phase
/// multisine.
fn wiener_hammerstein_record(n: usize) -> IoDataset {
    let freqs: Vec<(f64, f64)> = (1..=40)
        .map(|k| {
            let phase = mix_seed(k) as f64 / u64::MAX as f64 * std::f64::consts::TAU;
            (k as f64 * 0.0031, phase)
        })
        .collect();
    let (mut a1, mut a2, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0);
    let mut u = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for t in 0..n {
        let ut: f64 = freqs.iter().map(|(f, p)| (std::f64::consts::TAU * f * t as f64 + p).sin()).sum::<f64>() / 4.0;
        let v = 1.6 * a1 - 0.7 * a2 + 0.1 * ut;
        a2 = a1;
        a1 = v;
        let w = v + 0.5 * v * v - 0.3 * (2.0 * v).tanh();
        let z = 1.2 * b1 - 0.5 * b2 + 0.3 * w;
        b2 = b1;
        b1 = z;
        u.push(ut);
        y.push(z);
    }
    IoDataset::siso(u, y).unwrap()
}

#[test]
#[ignore = "trains for 10 minutes on a 188000-sample record"]
fn c10_long_record_ingestion_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wh.csv");
    save_csv(&wiener_hammerstein_record(188_000), &path).unwrap();
    let record: IoDataset = load_csv(&path, 1, 1).unwrap();
    let (a, b, c) = WIENER_HAMMERSTEIN_SPLITS;
    let (train, val, test) = slice_splits(&record, a, b, c).unwrap();
    let sizes_ok = record.len() == 188_000 && (train.len(), val.len(), test.len()) == (80_000, 20_000, 78_000);

    let mut cfg = TrainConfig {
        horizon: Some(80),
        batch_size: 1024,
        max_epochs: 1_000_000,
        patience: None,
        time_budget_s: Some(600.0),
        ..TrainConfig::default()
    };
    cfg.model.n_x = 6;
    cfg.model.n_a = 50;
    cfg.model.n_b = 50;
    let out = train_with(&cfg, &train, &val, TrainHooks::default()).unwrap();
    let v = test_nrms(&out.model, &test);
    let pass = sizes_ok && out.error.is_none() && v < 1.0;
    report(
        10,
        pass,
        format!("(splits ok: {sizes_ok}, {} epochs, diverged: {}, test NRMS {:.2}%)", out.report.epochs.len(), out.error.is_some(), 100.0 * v),
    );
    assert!(pass);
}
