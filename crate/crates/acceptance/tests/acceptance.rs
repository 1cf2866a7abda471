//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Training runs are cached and shared between criteria.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use gdcan_core::adaptation::{alignment_loss, AdaptationBlock, RegularizationSubset};
use gdcan_core::checks::{case_names, run_suite};
use gdcan_core::data::{generate, DomainPairSpec, LabeledImageSet};
use gdcan_core::diagnostics::attention_diff_report;
use gdcan_core::gradcheck::GradCheckOptions;
use gdcan_core::layers::ParamStore;
use gdcan_core::mmd::{mmd2, Estimator, KernelSpec};
use gdcan_core::model::{AttentionMode, Kernels, Model, Routing};
use gdcan_core::routing::{rethreshold, route_decide, routing_report, RouteDecision};
use gdcan_core::train::{train, TrainConfig, TrainOutput, EVAL_CHUNK};
use gdcan_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 3] = [0, 1, 2];

type Verdict = Result<String, String>;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = run_suite(&[], None, &GradCheckOptions::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = results
        .iter()
        .filter(|r| !r.report.pass)
        .map(|r| format!("{} ({:.2e})", r.name, r.report.max_rel_error))
        .collect();
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    if results.len() != case_names().len() || !failing.is_empty() {
        return Err(format!("failing cases: {}", failing.join(", ")));
    }
    if secs >= 120.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!("{} cases, worst relative error {worst:.2e}, {secs:.2}s", results.len()))
}

fn kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let w = 1.0 / spec.bandwidths().len() as f64;
    spec.bandwidths().iter().map(|s| w * (-d2 / (2.0 * s * s)).exp()).sum()
}

fn pair_sum(a: &Tensor, b: &Tensor, spec: &KernelSpec, unbiased: bool) -> f64 {
    let mean = |x: &Tensor, y: &Tensor, skip: bool| {
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                if !(skip && i == j) {
                    s += kernel(spec, x.row(i), y.row(j));
                    n += 1.0;
                }
            }
        }
        s / n
    };
    mean(a, a, unbiased) + mean(b, b, unbiased) - 2.0 * mean(a, b, false)
}

fn mmd_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, m, d) = (rng.random_range(2..=10), rng.random_range(2..=10), rng.random_range(1..=6));
        let (a, b) = (randn(&mut rng, n, d), randn(&mut rng, m, d));
        let spec = KernelSpec::multi_scale(rng.random_range(0.2..3.0)).unwrap();
        for (est, unbiased) in [(Estimator::Biased, false), (Estimator::Unbiased, true)] {
            let got = mmd2(&a, &b, &spec, est).unwrap();
            worst = worst.max((got - pair_sum(&a, &b, &spec, unbiased)).abs());
        }
        let self_dist = mmd2(&a, &a, &spec, Estimator::Biased).unwrap();
        if self_dist != 0.0 {
            return Err(format!("biased mmd2(A, A) = {self_dist:e}"));
        }
    }
    if worst > 1e-12 {
        return Err(format!("oracle gap {worst:e}"));
    }
    let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let v = mmd2(&a, &b, &KernelSpec::single(1.0).unwrap(), Estimator::Biased).unwrap();
    let closed = 2.0 - 2.0 * (-0.5f64).exp();
    if (v - closed).abs() > 1e-9 {
        return Err(format!("closed form {v} vs {closed}"));
    }
    Ok(format!("20 instances, worst gap {worst:.1e}, self distance exactly 0"))
}

fn routing_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let log: Vec<RouteDecision> = (0..300)
        .map(|i| {
            let m_hat = rng.random_range(0.0..1.0);
            RouteDecision {
                module_id: i % 3,
                m_s: 0.0,
                m_t: 0.0,
                m_hat,
                lambda: 0.2,
                separated: route_decide(m_hat, 0.2),
                step: i / 3,
            }
        })
        .collect();
    let lambdas = [0.0, 0.2, 0.5, 0.8, 1.0];
    let fractions: Vec<f64> = lambdas
        .iter()
        .map(|&l| routing_report(&rethreshold(&log, l)).unwrap().overall_fraction())
        .collect();
    let ok = fractions[0] == 1.0 && fractions[4] == 0.0 && fractions.windows(2).all(|w| w[0] >= w[1]);
    let text = format!("fractions over {lambdas:?}: {fractions:.3?}");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn identity_start() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Standalone blocks on raw and probability-space features.
    let mut store = ParamStore::new();
    let blocks = [
        AdaptationBlock::new(&mut store, "b0", 5, 0, false, &mut rng),
        AdaptationBlock::new(&mut store, "b1", 4, 1, true, &mut rng),
    ];
    let softmax_rows = |rng: &mut ChaCha8Rng, n: usize| {
        let raw = randn(rng, n, 4);
        let data = raw
            .data()
            .chunks(4)
            .flat_map(|r| {
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                r.iter().map(move |v| v.exp() / z)
            })
            .collect();
        Tensor::new(vec![n, 4], data).unwrap()
    };
    let src = [randn(&mut rng, 7, 5), softmax_rows(&mut rng, 7)];
    let tgt = [randn(&mut rng, 6, 5), softmax_rows(&mut rng, 6)];
    let kernels = [KernelSpec::multi_scale(1.1).unwrap(), KernelSpec::multi_scale(0.4).unwrap()];
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let s: Vec<_> = src.iter().map(|t| tape.constant(t.clone())).collect();
    let t: Vec<_> = tgt.iter().map(|t| tape.constant(t.clone())).collect();
    let l_m = alignment_loss(&mut tape, &bound, &s, &t, &blocks, &kernels).map_err(|e| e.to_string())?;
    let plain: f64 = (0..2).map(|l| mmd2(&src[l], &tgt[l], &kernels[l], Estimator::Biased).unwrap()).sum();
    let gap_blocks = (tape.value(l_m).data()[0] - plain).abs();

    // The same inside a fresh model.
    let spec = DomainPairSpec {
        samples_per_class: 2,
        ..DomainPairSpec::bundled()
    };
    let (source, target) = generate(&spec).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let mut model = Model::new(cfg.model_config(6), &mut rng).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let (xs, ys) = source.batch(&(0..8).collect::<Vec<_>>());
    let xs = tape.constant(xs);
    let xt = tape.constant(target.images.select_rows(&(2..10).collect::<Vec<_>>()));
    let empty = RegularizationSubset {
        indices: vec![],
        inclusion_prob: 0.0,
    };
    let routes = [false; 3];
    let (nodes, fwd) = model
        .loss(&mut tape, &bound, xs, &ys, xt, &empty, &cfg.weights(), &Kernels::Fixed(kernels.to_vec()), Routing::Fixed(&routes))
        .map_err(|e| e.to_string())?;
    let plain_model = mmd2(tape.value(fwd.pooled_s), tape.value(fwd.pooled_t), &kernels[0], Estimator::Biased).unwrap()
        + mmd2(tape.value(fwd.probs_s), tape.value(fwd.probs_t), &kernels[1], Estimator::Biased).unwrap();
    let gap_model = (tape.value(nodes.l_m).data()[0] - plain_model).abs();
    if gap_blocks > 1e-12 || gap_model > 1e-12 {
        return Err(format!("L_M gap {gap_blocks:e} (blocks), {gap_model:e} (model)"));
    }

    // Synchronized branches: every route gives the same bits.
    for stage in &model.stages {
        if let Some(aam) = &stage.aam {
            let fc_s = aam.attention.fc_s.weight;
            let perturbed = model.store.get(fc_s).map(|v| v * 1.3 + 0.05);
            *model.store.get_mut(fc_s) = perturbed;
            aam.attention.synchronize(&mut model.store);
        }
    }
    let mut outputs = Vec::new();
    for routes in [[false; 3], [true; 3], [true, false, true]] {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let xs = tape.constant(source.images.select_rows(&[0, 3, 5]));
        let xt = tape.constant(target.images.select_rows(&[1, 4, 7]));
        let fwd = model.forward(&mut tape, &bound, xs, xt, Routing::Fixed(&routes)).map_err(|e| e.to_string())?;
        outputs.push((tape.value(fwd.pooled_t).clone(), tape.value(fwd.adapted2_t).clone()));
    }
    if outputs.windows(2).any(|w| w[0] != w[1]) {
        return Err("routes disagree with synchronized branches".into());
    }
    Ok(format!("L_M gaps {gap_blocks:.1e} / {gap_model:.1e}, 3 route patterns bit-identical"))
}

/// Final accuracies or the reason a run stopped.
#[derive(Clone)]
enum Run {
    Done(Box<TrainOutput>),
    Diverged(String),
}

struct Bench {
    data: BTreeMap<u64, (LabeledImageSet, LabeledImageSet)>,
    runs: BTreeMap<String, Run>,
}

impl Bench {
    fn sets(&mut self, magnitude: f64) -> &(LabeledImageSet, LabeledImageSet) {
        self.data.entry(magnitude.to_bits()).or_insert_with(|| {
            generate(&DomainPairSpec {
                shift_magnitude: magnitude,
                ..DomainPairSpec::bundled()
            })
            .unwrap()
        })
    }

    fn run(&mut self, label: &str, magnitude: f64, cfg: &TrainConfig) -> Run {
        let key = format!("{label}/{magnitude}/{}", cfg.seed);
        if let Some(r) = self.runs.get(&key) {
            return r.clone();
        }
        let start = Instant::now();
        let (s, t) = self.sets(magnitude).clone();
        let run = match train(cfg, &s, &t) {
            Ok(out) => Run::Done(Box::new(out)),
            Err(e) => Run::Diverged(e.to_string()),
        };
        let summary = match &run {
            Run::Done(o) => format!("src {:.3} tgt {:.3}", o.final_metrics().src_acc, o.final_metrics().tgt_acc),
            Run::Diverged(e) => e.clone(),
        };
        eprintln!("  run {key}: {summary} ({:.0}s)", start.elapsed().as_secs_f64());
        self.runs.insert(key, run.clone());
        run
    }

    /// Mean final (source, target) accuracy over the seeds, or every failed seed.
    fn mean_acc(&mut self, label: &str, magnitude: f64, base: &TrainConfig) -> Result<(f64, f64), String> {
        let mut sums = (0.0, 0.0);
        let mut failed = Vec::new();
        for seed in SEEDS {
            let cfg = TrainConfig { seed, ..base.clone() };
            match self.run(label, magnitude, &cfg) {
                Run::Done(o) => {
                    sums.0 += o.final_metrics().src_acc;
                    sums.1 += o.final_metrics().tgt_acc;
                }
                Run::Diverged(e) => failed.push(format!("seed {seed}: {e}")),
            }
        }
        if !failed.is_empty() {
            return Err(format!("{label} {}", failed.join(", ")));
        }
        let n = SEEDS.len() as f64;
        Ok((sums.0 / n, sums.1 / n))
    }
}

fn full() -> TrainConfig {
    TrainConfig::default()
}

fn source_only() -> TrainConfig {
    TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..TrainConfig::default()
    }
}

fn adaptation_benefit(bench: &mut Bench) -> Verdict {
    let start = Instant::now();
    let src_only = bench.mean_acc("source_only", 0.8, &source_only());
    let gdcan = bench.mean_acc("full", 0.8, &full());
    let secs = start.elapsed().as_secs_f64();
    let (so, fu) = match (src_only, gdcan) {
        (Ok(so), Ok(fu)) => (so, fu),
        (so, fu) => {
            let reasons: Vec<String> = [so.err(), fu.err()].into_iter().flatten().collect();
            return Err(format!("{} ({secs:.0}s)", reasons.join("; ")));
        }
    };
    let gain = fu.1 - so.1;
    let src_gap = (fu.0 - so.0).abs();
    let text = format!(
        "target {:.3} vs {:.3} (gain {:+.3}), source {:.3} vs {:.3}, {secs:.0}s",
        fu.1, so.1, gain, fu.0, so.0
    );
    if gain >= 0.08 && src_gap <= 0.03 && secs <= 900.0 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn ablation_ordering(bench: &mut Bench) -> Verdict {
    let no_alignment = TrainConfig {
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let no_entropy = TrainConfig {
        beta: 0.0,
        ..TrainConfig::default()
    };
    let no_aam = TrainConfig {
        attention: AttentionMode::SharedSe,
        ..TrainConfig::default()
    };
    let results = [
        ("full", bench.mean_acc("full", 0.8, &full())),
        ("w/o L_M+L_reg", bench.mean_acc("no_alignment", 0.8, &no_alignment)),
        ("w/o L_e", bench.mean_acc("no_entropy", 0.8, &no_entropy)),
        ("w/o AAM", bench.mean_acc("no_aam", 0.8, &no_aam)),
    ];
    let mut target = Vec::new();
    let mut errors = Vec::new();
    for (_, r) in &results {
        match r {
            Ok((_, t)) => target.push(*t),
            Err(e) => errors.push(e.clone()),
        }
    }
    if !errors.is_empty() {
        return Err(errors.join("; "));
    }
    let text = format!(
        "target accuracy full {:.3}, w/o L_M+L_reg {:.3}, w/o L_e {:.3}, w/o AAM {:.3}",
        target[0], target[1], target[2], target[3]
    );
    if target[1] < target[2] && target[3] < target[0] {
        Ok(text)
    } else {
        Err(text)
    }
}

fn shift_coupling(bench: &mut Bench) -> Verdict {
    let mut wins = 0;
    let mut details = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig { seed, ..full() };
        let mut stats = Vec::new();
        for magnitude in [0.25, 1.0] {
            match bench.run("full", magnitude, &cfg) {
                Run::Done(out) => {
                    let fraction = routing_report(&out.decisions).map_err(|e| e.to_string())?.overall_fraction();
                    let (s, t) = bench.sets(magnitude);
                    let diff = attention_diff_report(&out.model, &s.images, &t.images, &cfg.policy(), EVAL_CHUNK)
                        .map_err(|e| e.to_string())?
                        .stage_means;
                    stats.push((fraction, diff));
                }
                Run::Diverged(e) => {
                    details.push(format!("seed {seed} shift {magnitude}: {e}"));
                }
            }
        }
        if let [(f_lo, d_lo), (f_hi, d_hi)] = &stats[..] {
            // Every stage must grow, not just the average over stages.
            let ok = f_hi > f_lo && d_lo.len() == d_hi.len() && d_lo.iter().zip(d_hi).all(|(lo, hi)| hi > lo);
            wins += ok as usize;
            details.push(format!(
                "seed {seed}: separation {f_lo:.3} -> {f_hi:.3}, stage attention diff {d_lo:.4?} -> {d_hi:.4?}"
            ));
        }
    }
    let text = details.join("; ");
    if wins * 2 > SEEDS.len() {
        Ok(text)
    } else {
        Err(text)
    }
}

fn loss_bounds(bench: &mut Bench) -> Verdict {
    // The first default run that produces a complete log; diverged seeds are named.
    let mut diverged = Vec::new();
    let mut found = None;
    for seed in SEEDS {
        match bench.run("full", 0.8, &TrainConfig { seed, ..full() }) {
            Run::Done(out) => {
                found = Some((seed, out));
                break;
            }
            Run::Diverged(e) => diverged.push(format!("seed {seed}: {e}")),
        }
    }
    let Some((seed, out)) = found else {
        return Err(format!("no complete run to inspect ({})", diverged.join(", ")));
    };
    let skipped = if diverged.is_empty() { String::new() } else { format!("; diverged {}", diverged.join(", ")) };
    let ln_c = (6f64).ln();
    for r in &out.steps {
        if !(r.l_e >= 0.0 && r.l_e <= ln_c && r.l_m >= 0.0 && r.l_reg >= 0.0) {
            return Err(format!("seed {seed} step {}: L_e {}, L_M {}, L_reg {}", r.step, r.l_e, r.l_m, r.l_reg));
        }
    }
    if let Some(d) = out.decisions.iter().find(|d| !(0.0..1.0).contains(&d.m_hat)) {
        return Err(format!("seed {seed}: m_hat {} at step {}", d.m_hat, d.step));
    }
    Ok(format!(
        "seed {seed}: {} steps and {} routing decisions in bounds{skipped}",
        out.steps.len(),
        out.decisions.len()
    ))
}

fn main() -> ExitCode {
    let mut bench = Bench {
        data: BTreeMap::new(),
        runs: BTreeMap::new(),
    };
    type Check<'a> = Box<dyn FnMut(&mut Bench) -> Verdict + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient suite", Box::new(|_| gradient_suite())),
        ("mmd oracle", Box::new(|_| mmd_oracle())),
        ("routing algebra", Box::new(|_| routing_algebra())),
        ("identity-start equivalence", Box::new(|_| identity_start())),
        ("adaptation benefit", Box::new(adaptation_benefit)),
        ("ablation ordering", Box::new(ablation_ordering)),
        ("shift-separation coupling", Box::new(shift_coupling)),
        ("entropy and loss bounds", Box::new(loss_bounds)),
    ];
    let mut lines = Vec::new();
    for (i, (name, mut check)) in criteria.into_iter().enumerate() {
        let line = match check(&mut bench) {
            Ok(detail) => format!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => format!("criterion {} {name}: FAIL ({detail})", i + 1),
        };
        println!("{line}");
        lines.push(line);
    }
    println!();
    for l in &lines {
        println!("{l}");
    }
    if lines.iter().all(|l| l.contains(": PASS")) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
