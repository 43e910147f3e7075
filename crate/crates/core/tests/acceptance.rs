//! One line per acceptance criterion. Criteria listed in `KNOWN_UNMET` are
//! reported as FAIL without failing the test; any other failure, or a listed
//! criterion that starts passing, fails it.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlip_core::category_cl::{normalize_rows, sinkhorn_assign, PrototypeBank};
use mlip_core::divergence::DivergenceState;
use mlip_core::encoders::init_encoder_params;
use mlip_core::global_ita::{info_nce, Direction, TwoClassChannel};
use mlip_core::harness::config::TrainConfig;
use mlip_core::harness::gradcheck::{check_model, ModelCheckOptions};
use mlip_core::harness::model::Model;
use mlip_core::harness::train::{evaluate_checkpoint, train, RunFiles, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE};
use mlip_core::numerics::{Mat, Tensor};
use mlip_core::params::ParamStore;
use mlip_core::verify::oracle_sinkhorn_uniform;

const KNOWN_UNMET: &[usize] = &[2, 8];
const SEEDS: u64 = 5;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn gradients() -> Line {
    let start = Instant::now();
    let report = check_model(&ModelCheckOptions::default()).unwrap();
    let took = start.elapsed();
    let worst = report.worst().unwrap();
    let seeds: std::collections::BTreeSet<u64> = report.checks.iter().map(|c| c.seed).collect();
    let losses: std::collections::BTreeSet<&str> = report.checks.iter().map(|c| c.loss).collect();
    Line {
        id: 1,
        pass: report.pass && seeds.len() == 20 && losses.len() == 5 && took < Duration::from_secs(60),
        detail: format!(
            "{} tensor checks over {} seeds and {} losses, worst rel {:.2e} ({} on {}), worst abs {:.2e}, {}",
            report.checks.len(),
            seeds.len(),
            losses.len(),
            worst.max_rel_error,
            worst.loss,
            worst.tensor,
            report.checks.iter().map(|c| c.max_abs_error).fold(0.0, f64::max),
            secs(took)
        ),
    }
}

fn sinkhorn_marginals() -> Line {
    let start = Instant::now();
    let (b, c, eps, iters) = (8, 4, 0.05, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut row, mut col, mut diff) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Tensor::randn(vec![b, 64], 1.0, &mut rng).to_matrix();
        let bank = PrototypeBank::init(c, 64, 0.1, &mut rng);
        let code = sinkhorn_assign(&x, &bank, eps, iters).unwrap();
        row = row.max(code.row_error());
        col = col.max(code.col_error());
        let mut xn = x.clone();
        normalize_rows(&mut xn);
        let oracle = oracle_sinkhorn_uniform(&Tensor::from_matrix(&xn.dot(&bank.j.t())), eps).unwrap();
        for (a, o) in code.u.iter().zip(oracle.plan.data()) {
            diff = diff.max((a - o).abs());
        }
    }
    let took = start.elapsed();
    Line {
        id: 2,
        pass: row < 1e-6 && col < 1e-4 && diff < 1e-4 && took < Duration::from_secs(10),
        detail: format!("worst row err {row:.2e}, col err {col:.2e}, oracle diff {diff:.2e} over 100 instances, {}", secs(took)),
    }
}

fn infonce_closed_forms() -> Line {
    let one = Mat::from_elem((1, 3), 1.0 / 3f64.sqrt());
    let single = info_nce(&one, &one, 0.07, Direction::RowAnchored).unwrap();
    let mut worst = 0.0f64;
    for b in [2, 4, 8] {
        for tau in [0.07, 0.5, 1.0] {
            let x = Mat::eye(b);
            let e = (1.0 / tau as f64).exp();
            let closed = -(e / (e + b as f64 - 1.0)).ln();
            for dir in [Direction::RowAnchored, Direction::ColumnAnchored] {
                worst = worst.max((info_nce(&x, &x, tau, dir).unwrap() - closed).abs());
            }
        }
    }
    Line { id: 3, pass: single == 0.0 && worst < 1e-8, detail: format!("B=1 loss {single}, worst closed-form deviation {worst:.2e}") }
}

fn max_abs(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter().map(|(n, t)| t.data().iter().zip(b.get(n).unwrap().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)).fold(0.0, f64::max)
}

fn divergence_algebra() -> Line {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = init_encoder_params(&cfg.encoder(), &mut rng);
    let start = DivergenceState::init(&init_encoder_params(&cfg.encoder(), &mut rng));
    let mut copy = start.clone();
    copy.blend_update(&f, 1.0, 1.0).unwrap();
    let copies = copy.theta_ov.iter().chain(copy.theta_ot.iter()).all(|(n, t)| t == f.get(n).unwrap());
    let mut same = start.clone();
    same.blend_update(&f, 0.0, 0.0).unwrap();
    let identity = same == start;
    let mut worst = 0.0f64;
    for s in [0.1, 0.35, 0.8] {
        let mut state = start.clone();
        for n in 1..=20 {
            state.blend_update(&f, s, s).unwrap();
            let factor = (1.0 - s as f64).powi(n);
            for (now, then) in [(&state.theta_ov, &start.theta_ov), (&state.theta_ot, &start.theta_ot)] {
                for (name, t) in now.iter() {
                    let fv = f.get(name).unwrap().data();
                    for ((x, x0), y) in t.data().iter().zip(then.get(name).unwrap().data()).zip(fv) {
                        worst = worst.max(((x - y) - factor * (x0 - y)).abs());
                    }
                }
            }
        }
    }
    let moved = max_abs(&start.theta_ov, &f);
    Line {
        id: 4,
        pass: copies && identity && worst < 1e-9 && moved > 0.0,
        detail: format!("s=1 copies: {copies}, s=0 identity: {identity}, worst geometric deviation {worst:.2e} over 20 blends"),
    }
}

fn mi_bound() -> Line {
    let ch = TwoClassChannel { flip: 0.1 };
    let mi = ch.mutual_information();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let mut worst_slack = f64::INFINITY;
    let mut shown = String::new();
    for tau in [0.05, 0.5] {
        for dir in [Direction::RowAnchored, Direction::ColumnAnchored] {
            let losses: Vec<f64> = (0..n)
                .map(|_| {
                    let (v, t) = ch.sample(4, &mut rng);
                    info_nce(&v, &t, tau, dir).unwrap()
                })
                .collect();
            let mean = losses.iter().sum::<f64>() / n as f64;
            let sd = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let bound = 3f64.ln() - mean;
            let slack = mi + 3.0 * sd / (n as f64).sqrt() - bound;
            if slack < worst_slack {
                worst_slack = slack;
                shown = format!("log(B-1) - L = {bound:.4} vs MI {mi:.4} (tau {tau})");
            }
        }
    }
    Line { id: 5, pass: worst_slack >= 0.0, detail: format!("tightest case {shown}, slack {worst_slack:.4}") }
}

struct Study {
    full: Vec<TrainOutcome>,
    full_time: Duration,
    ablations: Vec<(&'static str, Vec<TrainOutcome>)>,
}

fn run_study() -> Study {
    let start = Instant::now();
    let full: Vec<TrainOutcome> = (0..SEEDS).map(|s| train(&TrainConfig { seed: s, ..Default::default() }, None).unwrap()).collect();
    let full_time = start.elapsed();
    let mut ablations = Vec::new();
    for (name, k) in [("global", 1), ("local", 2), ("category", 3)] {
        let runs = (0..SEEDS)
            .map(|s| {
                let mut cfg = TrainConfig { seed: s, ..Default::default() };
                cfg.set(&format!("lambda{k}"), "0").unwrap();
                train(&cfg, None).unwrap()
            })
            .collect();
        ablations.push((name, runs));
    }
    Study { full, full_time, ablations }
}

fn end_to_end(study: &Study) -> Line {
    let r1 = median(study.full.iter().map(|o| o.final_eval.recall_at_1).collect());
    let purity = median(study.full.iter().map(|o| o.final_eval.cluster_purity).collect());
    let decreased = study.full.iter().filter(|o| o.last_loss < o.first_loss).count();
    Line {
        id: 6,
        pass: r1 >= 0.60 && purity >= 0.70 && decreased == SEEDS as usize && study.full_time < Duration::from_secs(300),
        detail: format!("median recall@1 {r1:.3}, median purity {purity:.3}, loss decreased in {decreased}/{SEEDS}, {}", secs(study.full_time)),
    }
}

fn false_negatives(study: &Study) -> Line {
    let (_, no_cl) = &study.ablations[2];
    let wins = study.full.iter().zip(no_cl).filter(|(a, b)| a.final_eval.false_negative_gap > b.final_eval.false_negative_gap).count();
    let gaps = |runs: &[TrainOutcome]| runs.iter().map(|o| format!("{:.3}", o.final_eval.false_negative_gap)).collect::<Vec<_>>().join(" ");
    Line {
        id: 7,
        pass: wins >= 4,
        detail: format!("full gap larger in {wins}/{SEEDS} seeds (full {}; lambda3=0 {})", gaps(&study.full), gaps(no_cl)),
    }
}

fn ablation_direction(study: &Study) -> Line {
    let r1 = |runs: &[TrainOutcome]| median(runs.iter().map(|o| o.final_eval.recall_at_1).collect());
    let pur = |runs: &[TrainOutcome]| median(runs.iter().map(|o| o.final_eval.cluster_purity).collect());
    let base = r1(&study.full);
    let mut ok = true;
    let mut parts = vec![format!("full recall@1 {base:.3}")];
    for (name, runs) in &study.ablations {
        let r = r1(runs);
        ok &= r <= base + 0.02;
        parts.push(format!("no {name} {r:.3}"));
    }
    let drop = pur(&study.full) - pur(&study.ablations[2].1);
    ok &= drop >= 0.05;
    parts.push(format!("purity drop without category {drop:.3}"));
    Line { id: 8, pass: ok, detail: parts.join(", ") }
}

fn determinism() -> Line {
    let cfg = TrainConfig { seed: 3, steps: 40, ..Default::default() };
    let root = std::env::temp_dir().join(format!("mlip-acceptance-{}", std::process::id()));
    let (a, b) = (RunFiles::new(root.join("a")).unwrap(), RunFiles::new(root.join("b")).unwrap());
    let first = train(&cfg, Some(&a)).unwrap();
    train(&cfg, Some(&b)).unwrap();
    let identical = std::fs::read(a.path(METRICS_FILE)).unwrap() == std::fs::read(b.path(METRICS_FILE)).unwrap();
    let (_, reloaded) = evaluate_checkpoint(&a.path(CHECKPOINT_FILE), None).unwrap();
    let round_trip = reloaded == first.final_eval;
    let store = ParamStore::load(a.path(CHECKPOINT_FILE)).unwrap();
    let model_equal = Model::from_checkpoint(&store).unwrap().to_checkpoint() == first.model.to_checkpoint();
    std::fs::remove_dir_all(&root).ok();
    Line {
        id: 9,
        pass: identical && round_trip && model_equal,
        detail: format!("metrics.csv byte-identical: {identical}, reloaded model equal: {model_equal}, evaluation identical: {round_trip}"),
    }
}

#[test]
fn acceptance() {
    let mut lines = vec![gradients(), sinkhorn_marginals(), infonce_closed_forms(), divergence_algebra(), mi_bound()];
    let study = run_study();
    lines.push(end_to_end(&study));
    lines.push(false_negatives(&study));
    lines.push(ablation_direction(&study));
    lines.push(determinism());
    let mut unexpected = Vec::new();
    // written to the raw handle so the lines show up even when output is captured
    let mut out = std::io::stdout().lock();
    for l in &lines {
        writeln!(out, "criterion {}: {} | {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail).unwrap();
        if l.pass == KNOWN_UNMET.contains(&l.id) {
            unexpected.push(l.id);
        }
    }
    assert!(unexpected.is_empty(), "criteria with unexpected outcome: {unexpected:?}");
}
