//! Acceptance criteria. Each test prints one `criterion N PASS|FAIL` line.
//!
//! Run with `cargo test --release -p twassl-core --test acceptance -- --nocapture`.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twassl_core::config::{HeadName, RunConfig};
use twassl_core::heads::{apply_head, dct_key_matrix, pe_key_matrix, HeadConfig, HeadKind, KeyKind, KeyMatrix};
use twassl_core::linalg::{DiffGraph, Tensor};
use twassl_core::losses::{infonce_twd_loss, simsiam_twd_loss, Objective};
use twassl_core::ot::{rtwd_bruteforce, sinkhorn, solve_ot_exact};
use twassl_core::train::{train, RunRecord};
use twassl_core::tree::{SimplexVector, TreeTopology};
use twassl_core::twd::{jeffrey_divergence, twd, JD_EPS};

const LEAVES: [usize; 4] = [2, 4, 8, 16];

fn report(n: &str, ok: bool, detail: String) {
    println!("criterion {n} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n}: {detail}");
}

fn pair(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    (
        SimplexVector::<f64>::random(n, rng).into_inner(),
        SimplexVector::<f64>::random(n, rng).into_inner(),
    )
}

fn half_l1(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
}

fn topologies(n: usize, rng: &mut ChaCha8Rng) -> Vec<(&'static str, TreeTopology<f64>)> {
    let clusters = if n >= 4 { n / 2 } else { n };
    let gaps: Vec<f64> = (1..n).map(|_| rng.random_range(0.1..2.0)).collect();
    vec![
        ("tv", TreeTopology::tv(n, 0.5).unwrap()),
        ("cluster", TreeTopology::cluster(clusters, n / clusters, 0.5, 0.5).unwrap()),
        ("chain", TreeTopology::chain(n, &gaps).unwrap()),
    ]
}

#[test]
fn criterion_1_closed_form_matches_lp() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for n in LEAVES {
        for (_, t) in topologies(n, &mut rng) {
            let cost = t.shortest_path_matrix();
            for _ in 0..100 {
                let (a, b) = pair(n, &mut rng);
                let lp = solve_ot_exact(&cost, &a, &b).unwrap().value;
                worst = worst.max((twd(&t, &a, &b).unwrap() - lp).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report("1", worst <= 1e-9 && secs < 30.0, format!("max |twd - lp| = {worst:.2e}, {secs:.1} s"));
}

#[test]
fn criterion_2_robust_twd_is_total_variation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for n in LEAVES {
        for (_, t) in topologies(n, &mut rng) {
            for _ in 0..100 {
                let (a, b) = pair(n, &mut rng);
                worst = worst.max((rtwd_bruteforce(&t, &a, &b).unwrap() - half_l1(&a, &b)).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report("2", worst <= 1e-7 && secs < 60.0, format!("max |rtwd - tv| = {worst:.2e}, {secs:.1} s"));
}

#[test]
fn criterion_3_jeffrey_bound_and_pinsker() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut jd_bad, mut pinsker_bad, mut pairs) = (0, 0, 0);
    for n in LEAVES {
        let clusters = if n >= 4 { n / 2 } else { n };
        let unit = [
            TreeTopology::tv(n, 1.0).unwrap(),
            TreeTopology::cluster(clusters, n / clusters, 0.5, 0.5).unwrap(),
        ];
        for t in &unit {
            // unit root-to-leaf path weight
            assert!(t.path_weights().iter().all(|w: &f64| (w - 1.0).abs() <= 1e-12));
            for _ in 0..1000 {
                let (a, b) = pair(n, &mut rng);
                let w = twd(t, &a, &b).unwrap();
                if w * w > jeffrey_divergence(t, &a, &b, JD_EPS).unwrap() {
                    jd_bad += 1;
                }
                let l1 = 2.0 * half_l1(&a, &b);
                if l1 > (2.0 * kl(&a, &b)).sqrt() {
                    pinsker_bad += 1;
                }
                pairs += 1;
            }
        }
    }
    report(
        "3",
        jd_bad == 0 && pinsker_bad == 0,
        format!("{jd_bad} JD violations, {pinsker_bad} Pinsker violations over {pairs} pairs"),
    );
}

#[test]
fn criterion_4_half_weight_star_is_tv() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=32);
        let (a, b) = pair(n, &mut rng);
        let t = TreeTopology::tv(n, 0.5).unwrap();
        worst = worst.max((twd(&t, &a, &b).unwrap() - half_l1(&a, &b)).abs());
    }
    report("4", worst <= 1e-12, format!("max |twd - tv| = {worst:.2e}"));
}

fn gram_error(k: &Tensor<f64>) -> f64 {
    let (r, c) = (k.rows(), k.cols());
    let mut worst = 0.0f64;
    for i in 0..c {
        for j in 0..c {
            let dot: f64 = (0..r).map(|m| k.get(m, i) * k.get(m, j)).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn column_norm_error(k: &Tensor<f64>) -> f64 {
    (0..k.cols())
        .map(|j| ((0..k.rows()).map(|i| k.get(i, j).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_5_heads_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let d = 16;
    let arc = |key| HeadConfig::new(HeadKind::ArcFace { key, eta: 0.1 }, d).unwrap();
    let heads = [
        (HeadConfig::new(HeadKind::Softmax, d).unwrap(), None),
        (HeadConfig::new(HeadKind::Sem { l: 4, v: 4 }, d).unwrap(), None),
        (arc(KeyKind::Dct), Some(dct_key_matrix::<f64>(d))),
        (arc(KeyKind::Pe), Some(pe_key_matrix::<f64>(d, d).unwrap())),
        (arc(KeyKind::Learned), Some(KeyMatrix::<f64>::learned(d, d, &mut rng))),
    ];
    let mut simplex_err = 0.0f64;
    let mut negative = 0;
    for _ in 0..10_000 {
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let f: Vec<f64> = (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        for (cfg, key) in &heads {
            let p = apply_head(cfg, &f, key.as_ref()).unwrap();
            negative += p.iter().filter(|&&v| v < 0.0).count();
            simplex_err = simplex_err.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let dct = (2..=64).map(|d| gram_error(dct_key_matrix::<f64>(d).as_tensor())).fold(0.0, f64::max);
    let mut norms = 0.0f64;
    for d in (2..=64).step_by(2) {
        norms = norms.max(column_norm_error(pe_key_matrix::<f64>(d, d).unwrap().as_tensor()));
        norms = norms.max(column_norm_error(KeyMatrix::<f64>::learned(d, d, &mut rng).as_tensor()));
    }
    report(
        "5",
        negative == 0 && simplex_err <= 1e-9 && dct <= 1e-10 && norms <= 1e-9,
        format!(
            "{negative} negative entries, max |sum - 1| = {simplex_err:.2e}, \
             DCT gram error {dct:.2e}, PE/learned norm error {norms:.2e}"
        ),
    );
}

fn logits(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn criterion_6_gradient_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let t = TreeTopology::cluster(2, 2, 0.5, 0.5).unwrap();
    let (mut infonce, mut simsiam, mut leak) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let mut g = DiffGraph::new();
        let (x1, x2) = (g.leaf(logits(&mut rng)), g.leaf(logits(&mut rng)));
        let (a1, a2) = (g.softmax(x1), g.softmax(x2));
        let loss = infonce_twd_loss(&mut g, a1, a2, 4, &t, 0.07, 0.1).unwrap();
        for x in [x1, x2] {
            infonce = infonce.max(g.grad_check(loss, x, 1e-6).unwrap());
        }

        let mut g = DiffGraph::new();
        let online = [g.leaf(logits(&mut rng)), g.leaf(logits(&mut rng))];
        let target = [g.leaf(logits(&mut rng)), g.leaf(logits(&mut rng))];
        let p: Vec<_> = online.iter().map(|&x| g.softmax(x)).collect();
        let z: Vec<_> = target
            .iter()
            .map(|&x| {
                let s = g.softmax(x);
                g.stop_grad(s)
            })
            .collect();
        let loss = simsiam_twd_loss(&mut g, (p[0], p[1]), (z[0], z[1]), &t, 0.1).unwrap();
        for x in online {
            simsiam = simsiam.max(g.grad_check(loss, x, 1e-6).unwrap());
        }
        let grads = g.backward(loss).unwrap();
        for x in target {
            leak = leak.max(grads.get(x).data().iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    report(
        "6",
        infonce <= 1e-4 && simsiam <= 1e-4 && leak == 0.0,
        format!("InfoNCE-TWD+JD {infonce:.2e}, SimSiam-TWD {simsiam:.2e}, stop-gradient adjoint {leak:e}"),
    );
}

#[test]
fn criterion_7_sinkhorn_near_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let (mut gap, mut marginal) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> { (0..8).map(|_| (rng.random(), rng.random())).collect() };
        let (xs, ys) = (pts(&mut rng), pts(&mut rng));
        let cost: Vec<Vec<f64>> =
            xs.iter().map(|p| ys.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).collect()).collect();
        let (a, b) = pair(8, &mut rng);
        let mean = cost.iter().flatten().sum::<f64>() / 64.0;
        let exact = solve_ot_exact(&cost, &a, &b).unwrap().value;
        let res = sinkhorn(&cost, &a, &b, 0.01 * mean, 100_000, 1e-10).unwrap();
        gap = gap.max((res.plan.value - exact).abs() / exact);
        let plan = &res.plan.plan;
        for i in 0..8 {
            marginal = marginal.max((plan[i].iter().sum::<f64>() - a[i]).abs());
            marginal = marginal.max(((0..8).map(|r| plan[r][i]).sum::<f64>() - b[i]).abs());
        }
    }
    report(
        "7",
        gap <= 0.01 && marginal <= 1e-6,
        format!("max relative gap {gap:.2e}, max marginal error {marginal:.2e}"),
    );
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn variant(name: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    match name {
        "infonce af(dct)+jd" => {
            cfg.head.kind = HeadName::Arcface;
            cfg.head.key = KeyKind::Dct;
        }
        "infonce softmax+jd" => {}
        "infonce softmax" => cfg.loss.lambda_jd = 0.0,
        "simsiam softmax" => {
            cfg.loss.objective = Objective::SimsiamTwd;
            cfg.loss.lambda_jd = 0.0;
        }
        "simsiam af(dct)+jd" => {
            cfg.loss.objective = Objective::SimsiamTwd;
            cfg.head.kind = HeadName::Arcface;
            cfg.head.key = KeyKind::Dct;
        }
        _ => unreachable!(),
    }
    cfg
}

const VARIANTS: [&str; 5] =
    ["infonce af(dct)+jd", "infonce softmax+jd", "infonce softmax", "simsiam softmax", "simsiam af(dct)+jd"];

struct Runs {
    records: Vec<(&'static str, Vec<Result<RunRecord, String>>)>,
    secs: f64,
}

impl Runs {
    fn get(&self, name: &str) -> &[Result<RunRecord, String>] {
        &self.records.iter().find(|r| r.0 == name).unwrap().1
    }

    fn accuracies(&self, name: &str) -> Vec<f64> {
        self.get(name)
            .iter()
            .map(|r| r.as_ref().ok().and_then(|r| r.final_accuracy).unwrap_or(f64::NAN))
            .collect()
    }
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let records = VARIANTS
            .iter()
            .map(|&name| {
                let cfg = variant(name);
                (name, SEEDS.iter().map(|&s| train(&cfg, s).map_err(|e| e.to_string())).collect())
            })
            .collect();
        Runs { records, secs: start.elapsed().as_secs_f64() }
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

#[test]
fn criterion_8_desk_scale_directions() {
    let runs = runs();
    for (name, recs) in &runs.records {
        for (seed, r) in SEEDS.iter().zip(recs) {
            match r {
                Ok(r) => println!(
                    "  {name} seed {seed}: accuracy {:.4}, final mean pairwise TWD {:.3e}, collapsed {}",
                    r.final_accuracy.unwrap_or(f64::NAN),
                    r.epochs.last().map_or(f64::NAN, |e| e.collapse.mean_pairwise_twd),
                    r.collapsed
                ),
                Err(e) => println!("  {name} seed {seed}: failed: {e}"),
            }
        }
    }

    let af = runs.accuracies("infonce af(dct)+jd");
    let a = mean(&af) >= 0.90;

    let (jd, plain) = (runs.accuracies("infonce softmax+jd"), runs.accuracies("infonce softmax"));
    let jd_clean = runs
        .get("infonce softmax+jd")
        .iter()
        .all(|r| r.as_ref().is_ok_and(|r| r.aborted.is_none() && r.loss_series().iter().all(|l| l.is_finite())));
    let b = jd_clean && mean(&jd) >= mean(&plain);

    let collapsed = runs.get("simsiam softmax").iter().all(|r| r.as_ref().is_ok_and(|r| r.collapsed));
    let ss = runs.accuracies("simsiam softmax");
    let near_chance = (mean(&ss) - 0.25).abs() <= 0.05;
    let ss_af = runs.accuracies("simsiam af(dct)+jd");
    let c = (collapsed || near_chance) && mean(&ss_af) >= 0.85;

    let detail = format!(
        "a {} (af(dct)+jd {} mean {:.4}); b {} (softmax+jd mean {:.4} vs softmax {:.4}); \
         c {} (simsiam softmax {} collapsed {collapsed}, simsiam af(dct)+jd {} mean {:.4}); {:.0} s",
        if a { "PASS" } else { "FAIL" },
        fmt(&af),
        mean(&af),
        if b { "PASS" } else { "FAIL" },
        mean(&jd),
        mean(&plain),
        if c { "PASS" } else { "FAIL" },
        fmt(&ss),
        fmt(&ss_af),
        mean(&ss_af),
        runs.secs,
    );
    report("8", a && b && c && runs.secs < 900.0, detail);
}

#[test]
fn criterion_9_runs_repeat_bitwise() {
    let runs = runs();
    let bits = |r: &RunRecord| r.loss_series().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut same = true;
    let mut checked = Vec::new();
    for name in ["infonce af(dct)+jd", "simsiam softmax"] {
        let first = runs.get(name)[0].as_ref().expect("criterion 8 run");
        let again = train(&variant(name), SEEDS[0]).expect("repeat run");
        same &= !first.epochs.is_empty() && bits(first) == bits(&again);
        checked.push(name);
    }
    report("9", same, format!("loss series of {} (seed {}) repeat bit for bit: {same}", checked.join(", "), SEEDS[0]));
}
