//! Acceptance gate. Every test prints one `ACCEPTANCE <n> <name>: PASS|FAIL`
//! line to stderr (uncaptured) and then asserts the verdict.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::Rng as _;

use lil_cli::commands::{self, Report};
use lil_cli::config::ExperimentConfig;
use lil_core::autodiff::{max_relative_error, numeric_gradients, ParamId, Tape};
use lil_core::eval::{compute_metrics, rollout_success, rollout_success_parallel, GreedyPolicy, Metrics, SuccessTensor};
use lil_core::gmm::{gaussian_kl_closed_form, gmm_log_pdf, mc_kl, GaussianDiag, GmmParams};
use lil_core::losses::{bc_nll, total_loss, Batch, KlNoise, LossBreakdown, LossWeights};
use lil_core::policy::{forward, init_params, Binding, ObsBatch, PolicyConfig, PolicyParams};
use lil_core::seed::rng_from;
use lil_core::synth::{collect_demos, make_suite, SuiteKind, ACTION_DIM, OBS_DIM};
use lil_core::trainer::{run_lifelong, Method, ReplayBuffer, TrainConfig, TrainEvent};
use lil_core::Tensor;

const GRAD_REL_TOL: f64 = 1e-4;
/// Truncation dominates at the larger step and cancellation at the smaller.
const GRAD_FD_STEPS: [f64; 2] = [1e-4, 1e-5];
const GRAD_BUDGET_SECS: f64 = 120.0;
const KL_SAMPLES: usize = 200_000;
const KL_CASES: usize = 20;
const KL_MAX: f64 = 2.0;
const KL_GAUSS_TOL: f64 = 0.01;
const KL_MIXTURE_TOL: f64 = 0.02;
const KL_BUDGET_SECS: f64 = 60.0;
const DENSITY_TOL: f64 = 1e-3;
const DENSITY_CASES: usize = 10;
const REPLAY_CAPACITY: usize = 1000;
const REPLAY_SCHEDULES: u32 = 1000;
const NBT_MARGIN_M2_ER: f64 = 0.02;
const NBT_MARGIN_ER_SEQ: f64 = 0.10;
const AUC_MARGIN: f64 = 0.02;
const EXPERIMENT_BUDGET_SECS: f64 = 45.0 * 60.0;
const DRIFT_MIN_STEPS: usize = 3;
const LINEARITY_TOL: f64 = 1e-10;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "ACCEPTANCE {n:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

fn random_batch(b: usize, l: usize, seed: u64) -> Batch {
    let mut rng = rng_from(&[seed, 0xACC]);
    let obs = (0..b * l * OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let acts = (0..b * ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    Batch::new(ObsBatch::new(b, l, obs).unwrap(), acts).unwrap()
}

fn small_policy() -> PolicyConfig {
    PolicyConfig {
        latent_dim: 16,
        context_len: 2,
        components: 2,
        action_dim: ACTION_DIM,
        hidden: 16,
    }
}

fn with_tensors(p: &PolicyParams, ts: &[Tensor]) -> PolicyParams {
    PolicyParams {
        tensors: ts.to_vec(),
        ..p.clone()
    }
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let cfg = small_policy();
    let student = init_params(&cfg, 11).unwrap();
    let teacher = init_params(&cfg, 12).unwrap();
    let cur = random_batch(3, 2, 1);
    let ex = random_batch(3, 2, 2);
    let w = LossWeights { lambda_i: 0.3, lambda_t: 0.2, lambda_e: 0.4, lambda_p: 0.5 };

    let mut tape = Tape::new();
    let mut rng = rng_from(&[5]);
    let t = total_loss(&mut tape, &student, Some(&teacher), &cur, Some(&ex), &w, 4, KlNoise::Sample(&mut rng)).unwrap();
    let noise = t.noise.clone().expect("distillation active");
    let g = tape.backward(t.loss).unwrap();
    let analytic: Vec<Tensor> = (0..student.tensors.len())
        .map(|i| g.get(ParamId(i)).cloned().unwrap_or_else(|| Tensor::zeros(student.tensors[i].shape())))
        .collect();
    let objective = |ts: &[Tensor]| -> lil_core::Result<f64> {
        let q = with_tensors(&student, ts);
        let mut tape = Tape::new();
        let t = total_loss(&mut tape, &q, Some(&teacher), &cur, Some(&ex), &w, 4, KlNoise::Frozen(&noise))?;
        Ok(t.breakdown.total)
    };
    let numeric: Vec<Vec<Tensor>> = GRAD_FD_STEPS
        .iter()
        .map(|&eps| numeric_gradients(objective, &student.tensors, eps).unwrap())
        .collect();
    let mut per_step = [0.0f64; GRAD_FD_STEPS.len()];
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (t, a) in analytic.iter().enumerate() {
        for (i, &a) in a.data().iter().enumerate() {
            let errs: Vec<f64> = numeric.iter().map(|n| max_relative_error(a, n[t].data()[i])).collect();
            for (m, e) in per_step.iter_mut().zip(&errs) {
                *m = m.max(*e);
            }
            worst = worst.max(errs.iter().copied().fold(f64::INFINITY, f64::min));
            coordinates += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= GRAD_REL_TOL && secs <= GRAD_BUDGET_SECS;
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{coordinates} coordinates, max rel err {worst:.2e} <= {GRAD_REL_TOL:e} scoring each coordinate at the better \
             of steps {GRAD_FD_STEPS:?} (single-step maxima {:.2e} and {:.2e}), {secs:.1}s <= {GRAD_BUDGET_SECS}s",
            per_step[0], per_step[1]
        ),
    );
}

fn random_mixture(rng: &mut lil_core::seed::Rng, c: usize, a: usize) -> GmmParams {
    GmmParams::new(
        (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..c * a).map(|_| rng.random_range(-1.5..1.5)).collect(),
        (0..c * a).map(|_| rng.random_range(0.2f64.ln()..0.0)).collect(),
        a,
    )
    .unwrap()
}

fn quadrature_kl_1d(p: &GmmParams, q: &GmmParams) -> f64 {
    let (lo, hi, h) = (-10.0, 10.0, 1e-3);
    let n = ((hi - lo) / h) as usize;
    (0..n)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            let lp = gmm_log_pdf(p, &[x]).unwrap();
            let lq = gmm_log_pdf(q, &[x]).unwrap();
            lp.exp() * (lp - lq) * h
        })
        .sum()
}

#[test]
fn c02_kl_oracle() {
    let start = Instant::now();
    let mut rng = rng_from(&[0xC2]);
    let mut gauss_err = 0.0f64;
    let mut cases = 0;
    while cases < KL_CASES {
        let a = rng.random_range(1..=3);
        let draw = |rng: &mut lil_core::seed::Rng| -> (Vec<f64>, Vec<f64>) {
            (
                (0..a).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..a).map(|_| rng.random_range(-1.0f64..0.5).exp()).collect(),
            )
        };
        let (mp, sp) = draw(&mut rng);
        let (mq, sq) = draw(&mut rng);
        let exact = gaussian_kl_closed_form(
            &GaussianDiag::new(mp.clone(), sp.clone()).unwrap(),
            &GaussianDiag::new(mq.clone(), sq.clone()).unwrap(),
        )
        .unwrap();
        if exact > KL_MAX {
            continue;
        }
        let p = GmmParams::gaussian(&mp, &sp).unwrap();
        let q = GmmParams::gaussian(&mq, &sq).unwrap();
        let est = mc_kl(&p, &q, KL_SAMPLES, &mut rng).unwrap().value;
        gauss_err = gauss_err.max((est - exact).abs());
        cases += 1;
    }

    let self_zero = (0..10).all(|_| {
        let p = random_mixture(&mut rng, 3, 3);
        mc_kl(&p, &p, 1000, &mut rng).unwrap().value == 0.0
    });

    let mut mix_err = 0.0f64;
    for _ in 0..5 {
        let p = random_mixture(&mut rng, 2, 1);
        let q = random_mixture(&mut rng, 2, 1);
        let exact = quadrature_kl_1d(&p, &q);
        let est = mc_kl(&p, &q, KL_SAMPLES, &mut rng).unwrap().value;
        mix_err = mix_err.max((est - exact).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = gauss_err <= KL_GAUSS_TOL && self_zero && mix_err <= KL_MIXTURE_TOL && secs <= KL_BUDGET_SECS;
    verdict(
        2,
        "KL oracle",
        pass,
        &format!(
            "gaussian max err {gauss_err:.4} <= {KL_GAUSS_TOL} over {KL_CASES} cases, self-KL zero {self_zero}, \
             mixture max err {mix_err:.4} <= {KL_MIXTURE_TOL}, {secs:.1}s <= {KL_BUDGET_SECS}s"
        ),
    );
}

#[test]
fn c03_density_normalization() {
    let mut rng = rng_from(&[0xC3]);
    let mut worst = 0.0f64;
    for _ in 0..DENSITY_CASES {
        let c = rng.random_range(1..=4);
        let p = random_mixture(&mut rng, c, 1);
        let (lo, h) = (-8.0, 1e-3);
        let mass: f64 = (0..16_000)
            .map(|i| gmm_log_pdf(&p, &[lo + (i as f64 + 0.5) * h]).unwrap().exp() * h)
            .sum();
        worst = worst.max((mass - 1.0).abs());

        let p = random_mixture(&mut rng, c, 2);
        let (lo, h, n) = (-6.0, 0.01, 1200);
        let mut mass = 0.0;
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * h;
            for j in 0..n {
                let y = lo + (j as f64 + 0.5) * h;
                mass += gmm_log_pdf(&p, &[x, y]).unwrap().exp() * h * h;
            }
        }
        worst = worst.max((mass - 1.0).abs());
    }
    verdict(
        3,
        "density normalization",
        worst <= DENSITY_TOL,
        &format!("{DENSITY_CASES} mixtures in 1-d and 2-d, max |mass - 1| {worst:.2e} <= {DENSITY_TOL:e}"),
    );
}

#[test]
fn c04_distillation_zero_point() {
    let cfg = small_policy();
    let p = init_params(&cfg, 21).unwrap();
    let cur = random_batch(4, 2, 3);
    let ex = random_batch(4, 2, 4);
    let w = LossWeights::uniform(0.25);
    let mut tape = Tape::new();
    let mut rng = rng_from(&[0xC4]);
    let br = total_loss(&mut tape, &p, Some(&p), &cur, Some(&ex), &w, 16, KlNoise::Sample(&mut rng))
        .unwrap()
        .breakdown;

    let mut tape = Tape::new();
    let union = Batch::concat(&[&cur, &ex]).unwrap();
    let out = forward(&mut tape, &p, &union.obs, Binding::Frozen).unwrap();
    let bc = bc_nll(&mut tape, &out.head, &union.actions).unwrap();
    let bc = tape.value(bc).data()[0];

    let zero = br.l_image() == 0.0 && br.l_text == 0.0 && br.l_extra == 0.0 && br.l_policy == 0.0;
    let pass = zero && br.total == br.bc_nll && br.total == bc;
    verdict(
        4,
        "distillation zero-point",
        pass,
        &format!(
            "l_image {} l_text {} l_extra {} l_policy {}, total {} vs bc_nll {}",
            br.l_image(),
            br.l_text,
            br.l_extra,
            br.l_policy,
            br.total,
            bc
        ),
    );
}

fn tensor(k: usize, epochs: &[usize], rate: impl Fn(usize, usize, usize) -> f64) -> SuccessTensor {
    let mut c = SuccessTensor::new(k, epochs.to_vec()).unwrap();
    for i in 0..k {
        for j in 0..=i {
            for e in 0..epochs.len() {
                c.set(i, j, e, rate(i, j, e)).unwrap();
            }
        }
    }
    c
}

#[test]
fn c05_metric_arithmetic() {
    let two = tensor(2, &[50], |i, j, _| if i == 1 && j == 0 { 0.5 } else { 1.0 });
    let own = [0.5, 0.8];
    let retained = tensor(3, &[10, 20], |i, j, e| if i == j { own[e] } else { 0.8 });
    let zero = tensor(3, &[10, 20], |_, _, _| 0.0);
    let got = [two, retained, zero].map(|c| compute_metrics(&c).unwrap());
    let want_two = Metrics { fwt: 1.0, nbt: 0.5, auc: 0.875 };
    let want_zero = Metrics { fwt: 0.0, nbt: 0.0, auc: 0.0 };
    let pass = got[0] == want_two && got[1].nbt == 0.0 && got[2] == want_zero;
    verdict(
        5,
        "metric arithmetic",
        pass,
        &format!("K=2 {:?}, retention NBT {}, zero {:?}", got[0], got[1].nbt, got[2]),
    );
}

fn check_push(
    buf: &mut ReplayBuffer<u32>,
    task: usize,
    n: usize,
    rng: &mut lil_core::seed::Rng,
) -> Result<(), TestCaseError> {
    let mut before = buf.counts();
    *before.entry(task).or_default() += n;
    let seen = before.len();
    let evicted = buf.push(task, vec![0; n], rng);
    let after = buf.counts();
    prop_assert!(buf.total() <= buf.capacity, "total {} over capacity", buf.total());
    if evicted > 0 {
        let quota = buf.capacity / seen;
        let max = after.values().copied().max().unwrap_or(0);
        for (id, &c) in &after {
            if c < before[id] {
                prop_assert!(c + 1 >= max, "task {id} evicted to {c} while the fullest holds {max}");
                prop_assert!(c >= quota, "task {id} evicted below quota {quota}");
            }
        }
    }
    Ok(())
}

#[test]
fn c06_replay_discipline() {
    let cfg = PropConfig {
        cases: REPLAY_SCHEDULES,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let mut runner = TestRunner::new(cfg.clone());
    let free = runner.run(
        &(any::<u64>(), prop::collection::vec((0usize..12, 0usize..1500), 1..20)),
        |(seed, schedule)| {
            let mut rng = rng_from(&[seed]);
            let mut buf = ReplayBuffer::new(REPLAY_CAPACITY);
            for (task, n) in schedule {
                check_push(&mut buf, task, n, &mut rng)?;
            }
            Ok(())
        },
    );

    let mut runner = TestRunner::new(cfg);
    let lifelong = runner.run(&(any::<u64>(), 1usize..1500, 1usize..16), |(seed, n, tasks)| {
        let mut rng = rng_from(&[seed]);
        let mut buf = ReplayBuffer::new(REPLAY_CAPACITY);
        for task in 0..tasks {
            check_push(&mut buf, task, n, &mut rng)?;
            let counts = buf.counts();
            let max = counts.values().max().unwrap();
            let min = counts.values().min().unwrap();
            prop_assert!(max - min <= 1, "counts {counts:?} after task {task}");
        }
        Ok(())
    });

    let mut rng = rng_from(&[6]);
    let mut buf = ReplayBuffer::new(REPLAY_CAPACITY);
    buf.push(0, vec![0u32; 600], &mut rng);
    buf.push(1, vec![0u32; 600], &mut rng);
    let example = buf.counts().into_values().collect::<Vec<_>>() == [500, 500];

    let pass = free.is_ok() && lifelong.is_ok() && example;
    verdict(
        6,
        "replay discipline",
        pass,
        &format!(
            "capacity {REPLAY_CAPACITY}, {REPLAY_SCHEDULES} arbitrary schedules {}, {REPLAY_SCHEDULES} equal-push schedules {}, \
             600+600 -> 500/500 {example}",
            if free.is_ok() { "ok".to_string() } else { format!("{free:?}") },
            if lifelong.is_ok() { "ok".to_string() } else { format!("{lifelong:?}") },
        ),
    );
}

struct Experiment {
    report: Report,
    secs: f64,
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn object_experiment() -> &'static Experiment {
    static RUN: OnceLock<Experiment> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = fresh_dir("acceptance-object");
        let text = format!(
            "suite = \"OBJECT\"\ntasks = 5\ndemos_per_task = 20\nsuite_seed = 100\nseeds = [0, 1, 2]\nout_dir = {:?}\n",
            dir.join("out").display().to_string()
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let start = Instant::now();
        commands::gen_data(&cfg).unwrap();
        let methods = [Method::Sequential, Method::Er, Method::M2distill];
        for m in methods {
            commands::train(&cfg, m, true).unwrap();
        }
        let dirs: Vec<PathBuf> = methods.iter().map(|&m| cfg.method_dir(m)).collect();
        let report = commands::report(&dirs, &dir.join("report")).unwrap();
        Experiment {
            report,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn mean_metrics(r: &Report, m: Method) -> Metrics {
    let row = r
        .comparison
        .iter()
        .find(|row| row.run_id == "mean" && row.method == m.as_str())
        .unwrap_or_else(|| panic!("no mean row for {m}"));
    Metrics { fwt: row.fwt, nbt: row.nbt, auc: row.auc }
}

#[test]
fn c07_directional_experiment() {
    let x = object_experiment();
    let [seq, er, m2] = [Method::Sequential, Method::Er, Method::M2distill].map(|m| mean_metrics(&x.report, m));
    let nbt_ok = m2.nbt + NBT_MARGIN_M2_ER <= er.nbt && er.nbt + NBT_MARGIN_ER_SEQ <= seq.nbt;
    let auc_ok = m2.auc >= er.auc + AUC_MARGIN && er.auc >= seq.auc + AUC_MARGIN;
    let time_ok = x.secs <= EXPERIMENT_BUDGET_SECS;
    verdict(
        7,
        "directional experiment",
        nbt_ok && auc_ok && time_ok,
        &format!(
            "NBT m2 {:.3} / er {:.3} / seq {:.3} ({}), AUC m2 {:.3} / er {:.3} / seq {:.3} ({}), \
             FWT m2 {:.3} / er {:.3} / seq {:.3}, {:.0}s <= {EXPERIMENT_BUDGET_SECS}s",
            m2.nbt,
            er.nbt,
            seq.nbt,
            if nbt_ok { "ordered" } else { "not ordered" },
            m2.auc,
            er.auc,
            seq.auc,
            if auc_ok { "ordered" } else { "not ordered" },
            m2.fwt,
            er.fwt,
            seq.fwt,
            x.secs
        ),
    );
}

#[test]
fn c08_drift_reduction() {
    let x = object_experiment();
    let curve = |m: Method| -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = x
            .report
            .drift_curves
            .iter()
            .filter(|r| r.method == m && r.modality == "agentview")
            .map(|r| (r.step, r.mean))
            .collect();
        v.sort_by_key(|&(s, _)| s);
        v
    };
    let (m2, er) = (curve(Method::M2distill), curve(Method::Er));
    let lower = m2.iter().zip(&er).filter(|(a, b)| a.0 == b.0 && a.1 < b.1).count();
    let pass = m2.len() == 4 && er.len() == 4 && lower >= DRIFT_MIN_STEPS;
    let fmt = |v: &[(usize, f64)]| v.iter().map(|(_, d)| format!("{d:.4}")).collect::<Vec<_>>().join(" ");
    verdict(
        8,
        "drift reduction",
        pass,
        &format!(
            "agentview drift m2 [{}] vs er [{}], lower at {lower}/4 steps (need {DRIFT_MIN_STEPS})",
            fmt(&m2),
            fmt(&er)
        ),
    );
}

fn small_experiment(dir: &Path, parallel: bool) -> ExperimentConfig {
    let text = format!(
        r#"suite = "OBJECT"
tasks = 2
demos_per_task = 3
suite_seed = 100
seeds = [0]
out_dir = {:?}

[policy]
latent_dim = 16
context_len = 2
components = 2
hidden = 16

[train]
epochs = 4
eval_epochs = [2, 4]
eval_episodes = 4
kl_samples = 4
parallel_eval = {parallel}
"#,
        dir.display().to_string()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn c09_determinism() {
    let files = ["metrics.csv", "success.csv", "drift.csv"];
    let run = |name: &str, parallel: bool| -> (PathBuf, Vec<Vec<u8>>) {
        let cfg = small_experiment(&fresh_dir(name), parallel);
        commands::gen_data(&cfg).unwrap();
        let out = commands::train(&cfg, Method::M2distill, true).unwrap();
        let dir = out[0].run_dir.clone();
        let bytes = files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect();
        (dir, bytes)
    };
    let (dir_a, a) = run("acceptance-det-a", false);
    let (_, b) = run("acceptance-det-b", false);
    let (dir_p, p) = run("acceptance-det-par", true);
    let serial_identical = a == b;
    let parallel_success = a[1] == p[1] && a[0] == p[0];

    let saved = commands::load_saved(&dir_a).unwrap();
    let ckpt = saved.manifest.checkpoints.last().unwrap();
    let params = lil_core::io::read_checkpoint(&dir_a.join(&ckpt.path)).unwrap().params;
    let suite = make_suite(SuiteKind::Object, 2, 100).unwrap();
    let direct = suite.tasks.iter().all(|t| {
        rollout_success(&GreedyPolicy(&params), t, 8, 3).unwrap()
            == rollout_success_parallel(&GreedyPolicy(&params), t, 8, 3).unwrap()
    });
    let _ = dir_p;
    verdict(
        9,
        "determinism",
        serial_identical && parallel_success && direct,
        &format!(
            "repeat run byte-identical {serial_identical}, parallel-eval run success identical {parallel_success}, \
             serial vs parallel rollouts identical {direct}"
        ),
    );
}

fn distill_component(br: &LossBreakdown, which: usize) -> f64 {
    match which {
        0 => br.l_image(),
        1 => br.l_text,
        2 => br.l_extra,
        _ => br.l_policy,
    }
}

fn zero_one(w: &LossWeights, which: usize) -> (LossWeights, f64) {
    let mut z = *w;
    let lambda = match which {
        0 => std::mem::replace(&mut z.lambda_i, 0.0),
        1 => std::mem::replace(&mut z.lambda_t, 0.0),
        2 => std::mem::replace(&mut z.lambda_e, 0.0),
        _ => std::mem::replace(&mut z.lambda_p, 0.0),
    };
    (z, lambda)
}

fn loss_trace(method: Method, weights: LossWeights) -> (Vec<f64>, SuccessTensor) {
    let suite = make_suite(SuiteKind::Object, 2, 100).unwrap();
    let demos = suite.tasks.iter().map(|t| collect_demos(t, 3, 100).unwrap()).collect();
    let cfg = TrainConfig {
        method,
        weights,
        epochs: 3,
        eval_epochs: vec![3],
        eval_episodes: 2,
        kl_samples: 4,
        ..TrainConfig::default()
    };
    let mut totals = Vec::new();
    let mut hook = |ev: TrainEvent<'_>| {
        if let TrainEvent::Batch { loss, .. } = ev {
            totals.push(loss.total);
        }
        Ok(())
    };
    let r = run_lifelong(&suite, demos, &small_policy(), &cfg, &mut hook).unwrap();
    (totals, r.success)
}

#[test]
fn c10_ablation_linearity() {
    let cfg = small_policy();
    let student = init_params(&cfg, 31).unwrap();
    let teacher = init_params(&cfg, 32).unwrap();
    let cur = random_batch(4, 2, 7);
    let ex = random_batch(4, 2, 8);
    let w = LossWeights { lambda_i: 0.3, lambda_t: 0.2, lambda_e: 0.4, lambda_p: 0.5 };
    let mut rng = rng_from(&[0xCA]);
    let mut tape = Tape::new();
    let full = total_loss(&mut tape, &student, Some(&teacher), &cur, Some(&ex), &w, 8, KlNoise::Sample(&mut rng)).unwrap();
    let noise = full.noise.clone().unwrap();
    let br = full.breakdown;
    let mut worst = 0.0f64;
    for which in 0..4 {
        let (z, lambda) = zero_one(&w, which);
        let mut tape = Tape::new();
        let t = total_loss(&mut tape, &student, Some(&teacher), &cur, Some(&ex), &z, 8, KlNoise::Frozen(&noise)).unwrap();
        let diff = br.total - t.breakdown.total;
        worst = worst.max((diff - lambda * distill_component(&br, which)).abs());
    }

    let (er_loss, er_success) = loss_trace(Method::Er, w);
    let (m2_loss, m2_success) = loss_trace(Method::M2distill, LossWeights::ZERO);
    let equivalent = !er_loss.is_empty() && er_loss == m2_loss && er_success == m2_success;
    verdict(
        10,
        "ablation linearity",
        worst <= LINEARITY_TOL && equivalent,
        &format!(
            "max |delta total - lambda * term| {worst:.2e} <= {LINEARITY_TOL:e}, \
             all-zero M2DISTILL equals ER over {} batches {equivalent}",
            er_loss.len()
        ),
    );
}
