//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{fd_params, median_thresholds, params_rel_err, random_model, random_rows, small_spec};
use lesslab::assign::{column_deficit, sinkhorn_knopp};
use lesslab::data::{generate_blobs, split_barely, AugmentationFamily, BlobSpec};
use lesslab::diagnostics::signal_scarcity;
use lesslab::losses::{
    l_composite, l_distill, l_supervised, total_objective, unlabeled_loss_with_targets,
    unlabeled_targets, LossConfig, Objective, UnlabeledMode,
};
use lesslab::model::{ModelSpec, ModelState, SgdConfig};
use lesslab::numerics::{Matrix, Rng};
use lesslab::refine::{rule_of_three_test, History, RefinerConfig, ThresholdState};
use lesslab::runner::{run, unbiased_std, ExperimentConfig, MetricsRow, RunOutcome};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: lesslab::Error) -> String {
    e.to_string()
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let spec = small_spec();
    let cfg = LossConfig::default();
    let h = 1e-6;
    let mut worst = [0.0f64; 5];
    for seed in 0..20u64 {
        let m = random_model(&spec, 100 + seed);
        let mut rng = Rng::new(seed);
        let x_l = random_rows(&mut rng, 4, spec.input_dim, 1.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(spec.num_classes)).collect();
        let x_w = random_rows(&mut rng, 8, spec.input_dim, 1.0);
        let x_s = x_w.add(&random_rows(&mut rng, 8, spec.input_dim, 0.3)).unwrap();
        let tau = median_thresholds(&m, &x_w);

        let (_, g) = l_supervised(&m, &x_l, &labels).map_err(err)?;
        let fd = fd_params(&m, h, |s| l_supervised(s, &x_l, &labels).unwrap().0);
        worst[0] = worst[0].max(params_rel_err(&g, &fd));

        let modes = [UnlabeledMode::Distill, UnlabeledMode::Coreg, UnlabeledMode::Composite];
        for (slot, mode) in modes.into_iter().enumerate() {
            let targets = unlabeled_targets(&m, &x_w, &x_s, &tau, mode, &cfg).map_err(err)?;
            let out = unlabeled_loss_with_targets(&m, &x_w, &x_s, &targets, &cfg).map_err(err)?;
            ensure(out.grads.max_abs() > 0.0, format!("seed {seed}: {mode:?} gradient vanished"))?;
            let fd = fd_params(&m, h, |s| {
                unlabeled_loss_with_targets(s, &x_w, &x_s, &targets, &cfg)
                    .unwrap()
                    .composite()
            });
            worst[slot + 1] = worst[slot + 1].max(params_rel_err(&out.grads, &fd));
        }

        let batch = lesslab::data::Batch {
            labeled: lesslab::data::LabeledBatch {
                ids: (0..4).collect(),
                x: x_l.clone(),
                labels: labels.clone(),
            },
            unlabeled: lesslab::data::UnlabeledBatch {
                ids: (4..12).collect(),
                weak: x_w.clone(),
                strong: x_s.clone(),
            },
        };
        let objective = Objective {
            supervised: true,
            unlabeled: Some(UnlabeledMode::Composite),
        };
        let total = total_objective(&m, &batch, &tau, objective, &cfg).map_err(err)?;
        let targets = unlabeled_targets(&m, &x_w, &x_s, &tau, UnlabeledMode::Composite, &cfg).map_err(err)?;
        let fd = fd_params(&m, h, |s| {
            l_supervised(s, &x_l, &labels).unwrap().0
                + cfg.lambda_u
                    * unlabeled_loss_with_targets(s, &x_w, &x_s, &targets, &cfg)
                        .unwrap()
                        .composite()
        });
        worst[4] = worst[4].max(params_rel_err(&total.grads, &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max rel err sup {:.1e}, distill {:.1e}, coreg {:.1e}, composite {:.1e}, total {:.1e}; {secs:.1}s",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    ensure(worst.iter().all(|&w| w < 1e-4), detail.clone())?;
    ensure(secs < 60.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn sinkhorn_invariants() -> Check {
    let mut rng = Rng::new(2024);
    let mut row_err = 0.0f64;
    let mut plan3 = 0.0f64;
    let mut plan200 = 0.0f64;
    let mut out3_unit_eps = 0.0f64;
    let mut out3_default = 0.0f64;
    let mut count = 0;
    for &b in &[8usize, 32] {
        for &k in &[4usize, 10] {
            for _ in 0..50 {
                let s = Matrix::from_vec(b, k, (0..b * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
                let q3 = sinkhorn_knopp(&s, 0.05, 3).map_err(err)?;
                let q200 = sinkhorn_knopp(&s, 0.05, 200).map_err(err)?;
                for v in q3.q.row_sums().into_iter().chain(q200.q.row_sums()) {
                    row_err = row_err.max((v - 1.0).abs());
                }
                plan3 = plan3.max(column_deficit(&q3.balanced));
                plan200 = plan200.max(column_deficit(&q200.balanced));
                out3_default = out3_default.max(column_deficit(&q3.q));
                out3_unit_eps = out3_unit_eps.max(column_deficit(&sinkhorn_knopp(&s, 1.0, 3).map_err(err)?.q));
                count += 1;
            }
        }
    }
    let detail = format!(
        "{count} matrices: row err {row_err:.1e}; plan deficit {plan3:.1e} @3, {plan200:.1e} @200; \
         output deficit {out3_unit_eps:.1e} @3 (eps=1), {out3_default:.2} @3 (eps=0.05, info)"
    );
    ensure(
        row_err < 1e-9 && plan3 < 0.05 && plan200 < 1e-6 && out3_unit_eps < 0.05,
        detail.clone(),
    )?;
    Ok(detail)
}

fn masking_vs_never_masked() -> Check {
    let spec = ModelSpec::new(8, 5);
    let m = ModelState::init(spec, SgdConfig::default(), &mut Rng::new(3)).map_err(err)?;
    let mut rng = Rng::new(4);
    let x_w = random_rows(&mut rng, 16, 8, 1.0);
    let x_s = x_w.add(&random_rows(&mut rng, 16, 8, 0.5)).unwrap();
    let tau = [0.98; 5];
    let cfg = LossConfig::default();
    let d = l_distill(&m, &x_w, &x_s, &tau, &cfg).map_err(err)?;
    ensure(d.gated_count() == 0, format!("{} rows confident at 0.98", d.gated_count()))?;
    let d_max = d.grads.max_abs();
    let c = l_composite(&m, &x_w, &x_s, &tau, &cfg).map_err(err)?;
    let c_norm = c.grads.squared_norm().sqrt();
    let detail = format!("distill |g|max = {d_max:e}, composite |g| = {c_norm:.3e}, degenerate = {}", c.degenerate);
    ensure(d_max == 0.0 && c_norm > 1e-8, detail.clone())?;
    Ok(detail)
}

fn scarcity_monotone() -> Check {
    let blobs = BlobSpec {
        num_classes: 5,
        dim: 8,
        separation: 3.0,
        spread: 2.0,
        per_class_count: 40,
    };
    let mut rng = Rng::new(5);
    let pool = generate_blobs(&blobs, &mut rng).map_err(err)?;
    let pool = split_barely(pool, 1, &mut rng).map_err(err)?;
    let weak = AugmentationFamily::weak(0.1).map_err(err)?;
    let taus = [0.90, 0.95, 0.98, 0.995, 1.0];
    let mut sample = String::new();
    for i in 0..10u64 {
        let mut m = ModelState::init(ModelSpec::new(8, 5), SgdConfig::default(), &mut Rng::new(50 + i)).map_err(err)?;
        // sharpen the head so confidences spread over the interesting range
        m.params.class_head.weight = m.params.class_head.weight.scale(3.0 + i as f64);
        let r: Vec<f64> = taus
            .iter()
            .map(|&t| signal_scarcity(&m, &pool, t, &weak, &mut Rng::new(77), 4))
            .collect::<lesslab::Result<_>>()
            .map_err(err)?;
        ensure(r.windows(2).all(|w| w[0] <= w[1]), format!("model {i}: {r:?}"))?;
        if i == 5 {
            sample = r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
        }
    }
    Ok(format!("10 models non-decreasing; e.g. r(tau) = {sample}"))
}

fn rule_of_three() -> Check {
    let cfg = RefinerConfig::default();
    let mut pure = History::new(3, 30);
    for _ in 0..30 {
        pure.push(2, true);
    }
    let lb = rule_of_three_test(&pure, &cfg).lower_bound;
    ensure(lb == 0.9, format!("N=30 pure lower bound {lb}"))?;

    let trials = 100_000;
    let mut rates = Vec::new();
    for (n, seed) in [(30usize, 6u64), (64, 7)] {
        let mut rng = Rng::new(seed);
        let mut accepts = 0usize;
        for _ in 0..trials {
            let mut h = History::new(2, n);
            for _ in 0..n {
                h.push(usize::from(!rng.bernoulli(cfg.lambda)), true);
            }
            accepts += usize::from(rule_of_three_test(&h, &cfg).accept);
        }
        rates.push((n, accepts as f64 / trials as f64));
    }
    let detail = format!(
        "N=30 bound {lb}; false-accept at lambda={}: {}",
        cfg.lambda,
        rates.iter().map(|(n, r)| format!("N={n} {r:.4}")).collect::<Vec<_>>().join(", ")
    );
    ensure(rates.iter().all(|&(_, r)| r <= 0.06), detail.clone())?;
    Ok(detail)
}

fn threshold_controller() -> Check {
    let mut ts = ThresholdState::constant(0.98, vec![0.2; 5]).map_err(err)?;
    let mut steps = 0;
    let mut worst = 0.0f64;
    while ts.tau_c[0] > ts.tau_min {
        let prev = ts.tau_c.clone();
        ts.update(&[0; 5], 56).map_err(err)?;
        steps += 1;
        for c in 0..5 {
            let drop = prev[c] - ts.tau_c[c];
            if prev[c] - 0.001 >= ts.tau_min - 1e-12 {
                worst = worst.max((drop - 0.001).abs());
            } else {
                ensure(ts.tau_c[c] == ts.tau_min, format!("step {steps}: not clamped"))?;
            }
        }
        ensure(steps <= 1000, "never reached tau_min")?;
    }
    for _ in 0..10 {
        ts.update(&[0; 5], 56).map_err(err)?;
    }
    ensure(ts.tau_c.iter().all(|&t| t == ts.tau_min), "left tau_min")?;
    let detail = format!("{steps} steps 0.98 -> {}, max |step - 0.001| = {worst:.1e}", ts.tau_min);
    ensure(worst < 1e-12 && steps == 380, detail.clone())?;
    Ok(detail)
}

fn config(method: &str, tau: &str, seed: u64, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set("method", method).unwrap();
    cfg.set("tau", tau).unwrap();
    cfg.seed = seed;
    cfg.output = dir.join(format!("{method}-{tau}-{seed}"));
    cfg
}

fn csv_without_method(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(2);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn reduction_identities(dir: &Path) -> Check {
    let mut less = config("less", "0.98", 11, dir);
    less.set("adaptive", "false").unwrap();
    less.set("refine", "false").unwrap();
    let composite = config("composite", "0.98", 11, dir);
    let a = run(&less).map_err(err)?;
    let b = run(&composite).map_err(err)?;
    let same_lattice = csv_without_method(&a.summary.metrics_path) == csv_without_method(&b.summary.metrics_path);

    // 1/k + 0.001: every weak-view max probability clears it in practice
    let c = run(&config("composite", "0.201", 12, dir)).map_err(err)?;
    let f = run(&config("fixmatch", "0.201", 12, dir)).map_err(err)?;
    let all_gated = c.rows.iter().all(|r| r.gated_frac == 1.0);
    let same_gated = csv_without_method(&c.summary.metrics_path) == csv_without_method(&f.summary.metrics_path);
    let detail = format!(
        "less(no adaptive, no refine) == composite: {same_lattice}; composite == fixmatch with every row gated \
         ({all_gated}): {same_gated}; {} epochs each",
        a.rows.len()
    );
    ensure(same_lattice && all_gated && same_gated, detail.clone())?;
    Ok(detail)
}

struct Group {
    label: &'static str,
    runs: Vec<RunOutcome>,
}

impl Group {
    fn finals(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.summary.final_test_acc).collect()
    }

    fn mean(&self) -> f64 {
        let f = self.finals();
        f.iter().sum::<f64>() / f.len() as f64
    }

    fn std(&self) -> f64 {
        unbiased_std(&self.finals())
    }
}

fn pooled(a: &Group, b: &Group) -> f64 {
    ((a.std().powi(2) + b.std().powi(2)) / 2.0).sqrt()
}

fn phenomenology(dir: &Path) -> Check {
    let seeds = 1..=5u64;
    let mut slowest = 0.0f64;
    let mut group = |label: &'static str, method: &str, tau: &str| -> Result<Group, String> {
        let mut runs = Vec::new();
        for s in seeds.clone() {
            let cfg = config(method, tau, s, dir);
            let t = Instant::now();
            runs.push(run(&cfg).map_err(err)?);
            slowest = slowest.max(t.elapsed().as_secs_f64());
        }
        Ok(Group { label, runs })
    };
    let scarce = group("fixmatch@0.995", "fixmatch", "0.995")?;
    let fixmatch = group("fixmatch@0.95", "fixmatch", "0.95")?;
    let composite = group("composite@0.98", "composite", "0.98")?;
    let less = group("less@0.98", "less", "0.98")?;

    let first10 = |r: &RunOutcome| -> Vec<MetricsRow> { r.rows.iter().take(10).cloned().collect() };
    let min_unconf = scarce
        .runs
        .iter()
        .flat_map(first10)
        .map(|r| r.unconf)
        .fold(f64::INFINITY, f64::min);
    let a = min_unconf > 0.5;
    let b = composite.mean() >= fixmatch.mean() - pooled(&composite, &fixmatch);
    let c = less.mean() >= composite.mean() - pooled(&less, &composite);
    let fmt = |g: &Group| format!("{} {:.3}±{:.3}", g.label, g.mean(), g.std());
    let detail = format!(
        "(a) min unconf over first 10 epochs {min_unconf:.3} [{a}]; (b) {} vs {} [{b}]; (c) {} vs {} [{c}]; \
         slowest run {slowest:.1}s",
        fmt(&composite),
        fmt(&fixmatch),
        fmt(&less),
        fmt(&composite)
    );
    ensure(a && b && c && slowest < 300.0, detail.clone())?;
    Ok(detail)
}

fn determinism(dir: &Path) -> Check {
    let cfg_path = dir.join("det.txt");
    std::fs::write(&cfg_path, "method = less\nepochs = 15\nseed = 9\n").unwrap();
    let bin = env!("CARGO_BIN_EXE_lesslab");
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.join(format!("det-{tag}"));
        let status = Command::new(bin)
            .args(["run", "--config"])
            .arg(&cfg_path)
            .arg("--set")
            .arg(format!("output={}", out.display()))
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).to_string())?;
        outputs.push(std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    let detail = format!("two CLI runs, {} bytes each, identical: {}", outputs[0].len(), outputs[0] == outputs[1]);
    ensure(outputs[0] == outputs[1], detail.clone())?;
    Ok(detail)
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("sinkhorn invariants", Box::new(sinkhorn_invariants)),
        ("masking vs never-masked", Box::new(masking_vs_never_masked)),
        ("scarcity monotone in tau", Box::new(scarcity_monotone)),
        ("rule of three", Box::new(rule_of_three)),
        ("threshold controller", Box::new(threshold_controller)),
        ("reduction identities", Box::new(|| reduction_identities(dir.path()))),
        ("desk-scale phenomenology", Box::new(|| phenomenology(dir.path()))),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {}. {name}: {detail}", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
