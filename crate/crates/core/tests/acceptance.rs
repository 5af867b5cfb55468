//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Set `GEVIT_SKIP_TRAINING=1`
//! to skip the desk-scale training run; its line is then reported as SKIP.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gevit::attention::{group_attention, lifting_attention, AttentionParams, AttentionSettings, Boundary, FeatureMap};
use gevit::config::{AngleMode, ModelConfig, RunConfig};
use gevit::data::{load_idx, train_val_split};
use gevit::encoding::{EncoderKind, EncoderNet, PeVariant};
use gevit::group::FiniteGroup;
use gevit::harness::certify::{self, CertReport, Expectation};
use gevit::harness::eval::{evaluate, predict};
use gevit::harness::train::{train_on, TrainOptions};
use gevit::layers::{LayerNorm, Parameters};
use gevit::network::{loss, named_parameters, spatial_mean_pool, Model};
use gevit::tensor::{finite_diff_check, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass: Some(pass),
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

fn workspace_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn tensor_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid {
        op: "acceptance",
        msg: e.to_string(),
    }
}

fn group_algebra() -> Outcome {
    let start = Instant::now();
    let mut worst_matrix = 0.0f64;
    let mut failures = 0;
    for name in ["c1", "c4", "c8", "c12", "c16", "d4", "d8"] {
        let g: FiniteGroup = name.parse().unwrap();
        let r = certify::group_axiom_failures(&g);
        failures += r.failures;
        worst_matrix = worst_matrix.max(r.matrix_error);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        failures == 0 && worst_matrix < 1e-12 && secs < 1.0,
        format!("axiom failures {failures}, homomorphism error {worst_matrix:.1e}, {secs:.3}s"),
    )
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (r, c) = (3, 4);
    let x = rand_tensor(rng, &[r, c]);
    let w = rand_tensor(rng, &[r, c]);
    let bias = rand_tensor(rng, &[c]);
    let m = rand_tensor(rng, &[c, 2]);
    let ln = LayerNorm::<f64>::new(c);
    type Probe<'a> = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>, TensorError> + 'a>;
    let probes: Vec<Probe> = vec![
        Box::new(|x| Ok(x.sum())),
        Box::new(|x| Ok(x.square().mean())),
        Box::new(|x| Ok(x.scale(-1.5).neg().add_scalar(0.3).square().sum())),
        Box::new(|x| Ok(x.add(&bias)?.square().sum())),
        Box::new(|x| Ok(bias.sub(x)?.square().sum())),
        Box::new(|x| Ok(x.mul(&w)?.mul(x)?.sum())),
        Box::new(|x| Ok(x.matmul(&m)?.square().sum())),
        Box::new(|x| Ok(x.softmax_rows().mul(&w)?.sum())),
        Box::new(|x| Ok(x.swish().mul(&w)?.sum())),
        Box::new(|x| Ok(x.sigmoid().mul(&w)?.sum())),
        Box::new(|x| Ok(x.exp().mul(&w)?.sum())),
        Box::new(|x| Ok(x.sum_axis(0)?.square().sum())),
        Box::new(|x| Ok(x.mean_axis(1)?.square().sum())),
        Box::new(|x| Ok(x.max_axis(0)?.square().sum())),
        Box::new(|x| Ok(x.max_axis(1)?.square().sum())),
        Box::new(|x| Ok(Tensor::concat(&[x.clone(), w.clone()], 1)?.square().sum())),
        Box::new(|x| Ok(x.gather(&[2, 0, 2])?.square().sum())),
        Box::new(|x| Ok(x.transpose()?.matmul(&w)?.square().sum())),
        Box::new(|x| Ok(x.reshape(&[r * c])?.square().sum())),
        Box::new(|x| Ok(ln.forward(x)?.mul(&w)?.sum())),
        Box::new(|x| x.cross_entropy(&[1, 0, 3])),
    ];
    let mut worst = 0.0f64;
    for f in probes {
        worst = worst.max(finite_diff_check(f, &x, 1e-5)?.max_rel_error);
    }

    // attention layers and pooling, with respect to inputs and weights
    let g = FiniteGroup::cyclic(4).unwrap();
    let settings = AttentionSettings::window(3, Boundary::Torus);
    let p = AttentionParams::<f64>::new(rng, 3, 2, 2, 3);
    let lift_net = EncoderNet::<f64>::new_random(rng, EncoderKind::Lifting, 1, 4, 3);
    let group_net = EncoderNet::<f64>::new_random(rng, EncoderKind::Group, 1, 4, 3);
    let planar = rand_tensor(rng, &[16, 3]);
    let lifted = rand_tensor(rng, &[16 * 4, 3]);
    let wl = rand_tensor(rng, &[16 * 4, 3]);
    let lift = |x: &Tensor<f64>| -> Result<Tensor<f64>, TensorError> {
        let f = FeatureMap::planar(4, 4, x.clone()).map_err(tensor_err)?;
        let y = lifting_attention(&f, &p, &settings, &lift_net, &g, None).map_err(tensor_err)?;
        Ok(y.values.mul(&wl)?.sum())
    };
    let grp = |x: &Tensor<f64>| -> Result<Tensor<f64>, TensorError> {
        let f = FeatureMap::lifted(4, 4, 4, x.clone()).map_err(tensor_err)?;
        let y = group_attention(&f, &p, &settings, &group_net, &g, None).map_err(tensor_err)?;
        Ok(y.values.mul(&wl)?.sum())
    };
    let pool = |x: &Tensor<f64>| -> Result<Tensor<f64>, TensorError> {
        let f = FeatureMap::lifted(4, 4, 4, x.clone()).map_err(tensor_err)?;
        let y = spatial_mean_pool(&f, 2).map_err(tensor_err)?;
        Ok(y.values.square().sum())
    };
    worst = worst.max(finite_diff_check(lift, &planar, 1e-5)?.max_rel_error);
    worst = worst.max(finite_diff_check(grp, &lifted, 1e-5)?.max_rel_error);
    worst = worst.max(finite_diff_check(pool, &lifted, 1e-5)?.max_rel_error);
    Ok(worst)
}

/// Every parameter of the desk model, checked on a small random input.
/// The parameter set does not depend on the image size.
fn model_checks() -> Result<(usize, f64), TensorError> {
    let cfg = ModelConfig {
        image_width: 8,
        image_height: 8,
        attn_dropout: 0.0,
        value_dropout: 0.0,
        pe_scale: 1.0,
        ..RunConfig::desk().model
    };
    let m = Model::<f64>::build_random(&cfg, 21).map_err(tensor_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let px: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
    let img = m.image(&px).map_err(tensor_err)?;
    let mut worst = 0.0f64;
    for (name, p) in named_parameters(&m) {
        let gc = finite_diff_check(
            |x| {
                let mut probe = m.clone();
                probe.visit_mut("", &mut |n, t| {
                    if n == name {
                        *t = x.clone();
                    }
                });
                let y = probe.forward(&img, None).map_err(tensor_err)?;
                loss(&y, 3).map_err(tensor_err)
            },
            &p,
            1e-4,
        )?;
        worst = worst.max(gc.max_rel_error);
    }
    Ok((m.parameter_count(), worst))
}

fn autodiff() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let prim = match primitive_checks(&mut rng) {
        Ok(v) => v,
        Err(e) => return Outcome::error(e),
    };
    let (count, model) = match model_checks() {
        Ok(v) => v,
        Err(e) => return Outcome::error(e),
    };
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        prim < 1e-4 && model < 1e-4 && count < 5000 && secs < 120.0,
        format!("primitives max rel {prim:.1e}, desk model ({count} params) max rel {model:.1e}, {secs:.1}s"),
    )
}

fn record_outcome(r: gevit::harness::Result<certify::CheckRecord>, ok: impl Fn(f64) -> bool) -> Outcome {
    match r {
        Ok(rec) => Outcome::new(ok(rec.max_abs), format!("max abs diff {:.2e}", rec.max_abs)),
        Err(e) => Outcome::error(e),
    }
}

fn check_config(group: &str, variant: PeVariant) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model.group = group.into();
    cfg.model.pe_variant = variant;
    cfg.model.boundary = Boundary::Torus;
    cfg
}

fn layer_records(r: &CertReport) -> impl Iterator<Item = &certify::CheckRecord> {
    r.records.iter().filter(|x| x.name.starts_with("lifting/") || x.name.starts_with("group/"))
}

fn layer_equivariance(reports: &[(String, CertReport)]) -> (Outcome, f64) {
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    let mut checks = 0;
    for (_, r) in reports {
        for rec in layer_records(r) {
            checks += 1;
            match rec.precision.as_str() {
                "f64" => worst64 = worst64.max(rec.max_abs),
                _ => worst32 = worst32.max(rec.max_abs),
            }
        }
    }
    let names: Vec<&str> = reports.iter().map(|(n, _)| n.as_str()).collect();
    (
        Outcome::new(
            checks > 0 && worst64 < 1e-10 && worst32 < 1e-4,
            format!("{} over {checks} checks: f64 max {worst64:.2e}, f32 max {worst32:.2e}", names.join("/")),
        ),
        worst64.max(worst32),
    )
}

fn baseline_gap(report: &CertReport, gevit_worst: f64) -> Outcome {
    let worst = report
        .records
        .iter()
        .filter(|x| x.name.starts_with("group/") && x.expectation == Expectation::ExpectedFail)
        .map(|x| x.max_abs)
        .fold(f64::INFINITY, f64::min);
    let ok = worst.is_finite() && worst >= 1e-2 && worst >= 1e3 * gevit_worst;
    Outcome::new(
        ok,
        format!("baseline group-layer min error {worst:.2e} vs gevit max {gevit_worst:.2e}"),
    )
}

struct Training {
    outcome: Outcome,
    model: Option<Model<f32>>,
}

fn training(cfg: &RunConfig) -> Training {
    let t = &cfg.train;
    let data = load_idx(&workspace_path(&t.images), &workspace_path(&t.labels))
        .and_then(|base| train_val_split(&base, t.seed, t.train_count, t.val_count, t.angle_mode));
    let (train, val) = match data {
        Ok(d) => d,
        Err(e) => {
            return Training {
                outcome: Outcome::error(e),
                model: None,
            }
        }
    };
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let opts = TrainOptions::default();
    let report = match train_on::<f32>(cfg, &train, &val, dir.path(), &opts) {
        Ok(r) => r,
        Err(e) => {
            return Training {
                outcome: Outcome::error(e),
                model: None,
            }
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let mut model = Model::<f32>::build(&cfg.model, t.seed).unwrap();
    gevit::checkpoint::load(&mut model, &report.best_checkpoint).unwrap();

    // replay a short prefix twice: identical configuration and seed
    let mut short = cfg.clone();
    short.train.epochs = 1;
    let sub = train.subset(&(0..64).collect::<Vec<_>>());
    let replay = |d: &Path| train_on::<f32>(&short, &sub, &val.subset(&[0]), d, &opts).map(|r| r.step_losses);
    let (a, b) = (
        replay(&dir.path().join("replay_a")),
        replay(&dir.path().join("replay_b")),
    );
    let reproducible = matches!((&a, &b), (Ok(x), Ok(y)) if x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()) && x.len() == y.len());
    let first = report.epochs.first().map_or(f64::NAN, |e| e.mean_loss);
    let curve: Vec<String> = report.epochs.iter().map(|e| format!("{:.3}", e.val_accuracy)).collect();
    Training {
        outcome: Outcome::new(
            report.best_accuracy >= 0.75 && secs < 1800.0 && reproducible,
            format!(
                "best val acc {:.4} (epoch {}), per-epoch [{}], first-epoch loss {first:.3}, {secs:.0}s, bit-reproducible {reproducible}",
                report.best_accuracy,
                report.best_epoch,
                curve.join(" ")
            ),
        ),
        model: Some(model),
    }
}

fn end_to_end(c4: &CertReport, trained: Option<&Model<f32>>, cfg: &RunConfig) -> Outcome {
    let logits32 = c4
        .records
        .iter()
        .filter(|r| r.name.starts_with("model/") && r.precision == "f32")
        .map(|r| r.max_abs)
        .fold(0.0f64, f64::max);
    let t = &cfg.train;
    let model: Model<f64> = match trained {
        Some(m) => m.cast(),
        None => Model::build_random(&cfg.model, t.seed).unwrap(),
    };
    let base = match load_idx(&workspace_path(&t.images), &workspace_path(&t.labels)) {
        Ok(b) => b,
        Err(e) => return Outcome::error(e),
    };
    let (_, val) = match train_val_split(&base, t.seed, t.train_count, t.val_count, AngleMode::Exact90) {
        Ok(d) => d,
        Err(e) => return Outcome::error(e),
    };
    let val = val.subset(&(0..200.min(val.len())).collect::<Vec<_>>());
    let report = match evaluate(&model, &val, "val") {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let same_predictions = match val.rotated90().map(|rot| (predict(&model, &val), predict(&model, &rot))) {
        Ok((Ok(a), Ok(b))) => a == b,
        _ => false,
    };
    Outcome::new(
        logits32 < 1e-4 && report.accuracy() == report.rotated_accuracy() && same_predictions,
        format!(
            "f32 logit diff {logits32:.2e}; exact90 accuracy {:.4} unrotated vs {:.4} rotated, identical predictions {same_predictions}",
            report.accuracy(),
            report.rotated_accuracy()
        ),
    )
}

fn twist_identity() -> Outcome {
    let mut total = 0;
    for name in ["c4", "d4"] {
        total += certify::twist_covariance_failures(&name.parse().unwrap());
    }
    Outcome::new(total == 0, format!("{total} failing triples over C4 and D4"))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "group algebra axioms and homomorphism", group_algebra()));
    results.push((2, "finite-difference gradients", autodiff()));
    results.push((3, "global MHSA permutation equivariance", record_outcome(certify::permutation_check(0), |e| e < 1e-9)));
    results.push((
        4,
        "absolute-PE translation negative control",
        record_outcome(certify::absolute_translation_check(0), |e| e > 1e-3),
    ));
    results.push((
        5,
        "relative-PE translation equivariance",
        record_outcome(certify::relative_translation_check(0, 5), |e| e < 1e-9),
    ));

    let mut reports = Vec::new();
    let mut failed_report = None;
    for name in ["c4", "d4", "c8", "d8"] {
        match certify::cmd_check(&check_config(name, PeVariant::Gevit)) {
            Ok(r) => reports.push((name.to_string(), r)),
            Err(e) => failed_report = Some(e),
        }
    }
    let (eq, gevit_worst) = layer_equivariance(&reports);
    results.push((
        6,
        "lifting and group layer equivariance",
        match &failed_report {
            Some(e) => Outcome::error(e),
            None => eq,
        },
    ));
    results.push((
        7,
        "baseline encoding gap",
        match certify::cmd_check(&check_config("c4", PeVariant::Baseline)) {
            Ok(r) => baseline_gap(&r, gevit_worst),
            Err(e) => Outcome::error(e),
        },
    ));
    results.push((
        8,
        "dense oracle equivalence",
        record_outcome(certify::oracle_check(0, PeVariant::Gevit), |e| e < 1e-12),
    ));

    let cfg = RunConfig::desk();
    let trained = if std::env::var_os("GEVIT_SKIP_TRAINING").is_some() {
        Training {
            outcome: Outcome {
                pass: None,
                detail: "skipped (GEVIT_SKIP_TRAINING set)".into(),
            },
            model: None,
        }
    } else {
        training(&cfg)
    };
    let c4 = &reports.iter().find(|(n, _)| n == "c4").expect("c4 report").1;
    results.push((9, "end-to-end rotation invariance", end_to_end(c4, trained.model.as_ref(), &cfg)));
    results.push((10, "desk-scale training", trained.outcome));
    results.push((11, "twist covariance identity", twist_identity()));

    let mut all = true;
    for (n, name, o) in &results {
        let tag = match o.pass {
            Some(true) => "PASS",
            Some(false) => {
                all = false;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("[{tag}] {n:>2}. {name}: {}", o.detail);
    }
    println!("acceptance: {} ({:.0}s)", if all { "all criteria met" } else { "some criteria failed" }, start.elapsed().as_secs_f64());
}
