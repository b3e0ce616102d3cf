//! Acceptance suite: one pass/fail line per criterion. Long-running pieces
//! share a persistent workspace so trained agents are reused across runs.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use workbench::attacks::{
    make_adversary, pgd_maximize, AttackBundle, AttackKind, AttackMode, AttackSpec, PerturbationBall, PgdParams,
};
use workbench::diffcore::Tensor;
use workbench::harness::{
    denoiser_train, median, run_experiment, training_seconds, EvalReport, ExperimentConfig, Workspace,
};
use workbench::rng::{derive_seed, seeded};
use workbench::sac::{ReplayBuffer, SacAgent};
use workbench::theory::{gaussian_kl_diag, gaussian_kl_monte_carlo, kl_chain_check, tv_pinsker_check};
use workbench::transforms::{Bdr, Codebook, DenoiserConfig, Transform};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Experiments are trained and evaluated at most once per invocation.
struct Suite {
    ws: Workspace,
    reports: HashMap<String, EvalReport>,
}

const GRAY: &str = r#"attack.kind = ["none", "random", "actiondiff", "minq"]
attack.eps = 0.1
attack.mode = "gray-box""#;
const WHITE: &str = r#"attack.kind = ["none", "actiondiff", "minq"]
attack.eps = 0.1
attack.mode = "white-box""#;

impl Suite {
    fn config(name: &str) -> ExperimentConfig {
        let (transform, attacks) = match name {
            "vanilla" => ("", GRAY),
            "tirl-vq" => ("transform.kind = \"vq\"", GRAY),
            "tirl-bdr" => ("transform.kind = \"bdr\"", GRAY),
            "tirl-vq-white" => ("transform.kind = \"vq\"", WHITE),
            "tirl-aed-white" => ("transform.kind = \"aed\"\ntransform.eps = 0.1", WHITE),
            other => panic!("no experiment `{other}`"),
        };
        common::pendulum(name, &format!("{transform}\n{attacks}"))
    }

    fn report(&mut self, name: &str) -> Result<&EvalReport, String> {
        if !self.reports.contains_key(name) {
            let clock = Instant::now();
            let report = run_experiment(&Self::config(name), &self.ws, false).map_err(|e| e.to_string())?;
            eprintln!("  [{name}: {:.0}s]", clock.elapsed().as_secs_f64());
            self.reports.insert(name.to_string(), report);
        }
        Ok(&self.reports[name])
    }

    /// Median over runs of the cross-attack Average; every run must succeed.
    fn median_average(&mut self, name: &str) -> Result<f64, String> {
        let r = self.report(name)?;
        if let Some(f) = r.runs.iter().find(|r| r.failed.is_some()) {
            return Err(format!("{name} run {} failed: {}", f.index, f.failed.as_deref().unwrap_or("")));
        }
        let avgs: Vec<f64> = r.runs.iter().filter_map(|run| r.run_average(run)).collect();
        Ok(median(&avgs))
    }

    /// First vanilla agent and its replay states.
    fn vanilla_run0(&mut self) -> Result<(SacAgent, Tensor), String> {
        self.report("vanilla")?;
        let dir = self.ws.run_dir("vanilla", 0);
        let agent = SacAgent::load(&dir.join("checkpoint")).map_err(|e| e.to_string())?;
        let buffer = ReplayBuffer::load(&dir.join("buffer.bin")).map_err(|e| e.to_string())?;
        Ok((agent, buffer.states()))
    }
}

fn gradients() -> Verdict {
    let clock = Instant::now();
    let results = common::gradient_suite(2024);
    let secs = clock.elapsed().as_secs_f64();
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        worst < common::GRAD_TOL && secs < 60.0,
        format!("{} points each, {secs:.1}s; worst: {detail}", common::GRAD_POINTS),
    )
}

fn sac_sanity(s: &mut Suite) -> Verdict {
    let cfg = Suite::config("vanilla");
    s.report("vanilla")?;
    let r = &s.reports["vanilla"];
    let natural = r.column_index("Natural").ok_or("no Natural column")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for run in &r.runs {
        let Some(cell) = run.cells.get(natural) else {
            return Err(format!("run {} has no Natural cell: {:?}", run.index, run.failed));
        };
        let secs = training_seconds(&cfg, &s.ws, run.index).unwrap_or(f64::INFINITY);
        ok &= cell.mean >= 950.0 && secs < 600.0;
        parts.push(format!("{:.1} ({secs:.0}s)", cell.mean));
    }
    check(ok && r.runs.len() == 5, format!("natural returns {}", parts.join(", ")))
}

fn robustness_ordering(s: &mut Suite) -> Verdict {
    let clock = Instant::now();
    let vanilla = s.median_average("vanilla")?;
    let vq = s.median_average("tirl-vq")?;
    let bdr = s.median_average("tirl-bdr")?;
    let secs = clock.elapsed().as_secs_f64();
    check(
        vq >= 1.2 * vanilla && bdr >= 1.2 * vanilla && secs < 7200.0,
        format!("median Average: vanilla {vanilla:.1}, vq {vq:.1}, bdr {bdr:.1} (need >= {:.1})", 1.2 * vanilla),
    )
}

fn white_box_ordering(s: &mut Suite) -> Verdict {
    let vq = s.median_average("tirl-vq-white")?;
    let aed = s.median_average("tirl-aed-white")?;
    check(vq >= aed, format!("median white-box Average: vq {vq:.1}, aed {aed:.1}"))
}

fn bounded_transformation() -> Verdict {
    let mut rng = seeded(5);
    let mut violations = 0;
    for _ in 0..100_000 {
        let bw = rng.gen_range(0.02..0.4);
        let eps = rng.gen_range(0.0..bw / 2.0);
        let bdr = Bdr::new(bw).unwrap();
        let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = PerturbationBall::new(&s, eps).sample(&mut rng);
        let gap = bdr
            .apply(&s)
            .iter()
            .zip(bdr.apply(&t))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // One grid step, up to rounding of the grid points themselves.
        if gap > bw * (1.0 + 1e-12) {
            violations += 1;
        }
    }

    let data = Tensor::matrix(
        2000,
        3,
        (0..6000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let k = 64;
    let cb = Codebook::init(&data, k, 1, true).unwrap();
    let centroids: Vec<&[f64]> = (0..k).map(|i| cb.centroid(i)).collect();
    let (mut off_codebook, mut max_image) = (0, 0);
    for _ in 0..10_000 {
        let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ball = PerturbationBall::new(&s, rng.gen_range(0.0..0.3));
        let mut image: Vec<usize> = Vec::new();
        for _ in 0..20 {
            let q = cb.quantize(&ball.sample(&mut rng));
            match centroids.iter().position(|c| *c == q.as_slice()) {
                Some(i) => image.push(i),
                None => off_codebook += 1,
            }
        }
        image.sort_unstable();
        image.dedup();
        max_image = max_image.max(image.len());
    }
    check(
        violations == 0 && off_codebook == 0 && max_image <= k,
        format!("bdr violations {violations}/100000; vq outputs off the codebook {off_codebook}, largest ball image {max_image} <= K={k}"),
    )
}

fn pgd_oracle() -> Verdict {
    let mut rng = seeded(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let d = rng.gen_range(1..10);
        let g: Vec<f64> = (0..d)
            .map(|_| rng.gen_range(0.01..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let eps = rng.gen_range(0.01..0.5);
        let objective = |x: &[f64]| (x.iter().zip(&g).map(|(a, b)| a * b).sum(), g.clone());
        let got = pgd_maximize(objective, &s, PgdParams::new(eps, 0.1, 10).unwrap()).unwrap();
        let want: Vec<f64> = s.iter().zip(&g).map(|(v, gi)| v + eps * gi.signum()).collect();
        if got != want {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/100 objectives differ from s + eps*sign(g)"))
}

fn kmeans() -> Verdict {
    let mut rng = seeded(7);
    let mut increases = 0;
    for set in 0..20 {
        let (n, d) = (rng.gen_range(100..400), rng.gen_range(1..5));
        let data = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut cb = Codebook::init(&data, rng.gen_range(2..12), set, false).unwrap();
        let mut prev = cb.objective(&data);
        for _ in 0..50 {
            let obj = cb.lloyd_step(&data);
            if obj > prev * (1.0 + 1e-12) {
                increases += 1;
            }
            prev = obj;
        }
    }

    let centers = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
    let draw = |rng: &mut workbench::rng::Rng, n: usize| {
        let mut v = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = centers[rng.gen_range(0..4)];
            for x in c {
                v.push(x + rand_distr::Distribution::sample(&rand_distr::Normal::new(0.0, 0.1).unwrap(), rng));
            }
        }
        Tensor::matrix(n, 2, v)
    };
    let first = draw(&mut rng, 256);
    let mut cb = Codebook::init(&first, 4, 3, true).unwrap();
    for _ in 0..300 {
        let batch = draw(&mut rng, 64);
        cb.kmeans_update(&batch, &mut rng).unwrap();
    }
    let err = centers
        .iter()
        .map(|c| {
            (0..4)
                .map(|i| {
                    let q = cb.centroid(i);
                    ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    check(
        increases == 0 && err <= 0.1,
        format!("lloyd increases {increases} over 20x50 steps; streaming centroid error {err:.4}"),
    )
}

fn theory(s: &mut Suite) -> Verdict {
    let clock = Instant::now();
    let mut rng = seeded(8);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..5);
        let mu1: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu2: Vec<f64> = mu1.iter().map(|m| m + rng.gen_range(0.5..1.5)).collect();
        let var1: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..2.0)).collect();
        let var2: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..2.0)).collect();
        let exact = gaussian_kl_diag(&mu1, &var1, &mu2, &var2).unwrap();
        let mc = gaussian_kl_monte_carlo(&mu1, &var1, &mu2, &var2, 200_000, &mut rng).unwrap();
        worst_rel = worst_rel.max((mc - exact).abs() / exact);
    }

    let mut pinsker_fail = 0;
    for _ in 0..1000 {
        let d = rng.gen_range(1..4);
        let mu1: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu2: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var1: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..2.0)).collect();
        let var2: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..2.0)).collect();
        if !tv_pinsker_check(&mu1, &var1, &mu2, &var2, 20_000, &mut rng).unwrap().holds {
            pinsker_fail += 1;
        }
    }
    let theory_secs = clock.elapsed().as_secs_f64();

    let (agent, states) = s.vanilla_run0()?;
    let clock = Instant::now();
    let chain = kl_chain_check(&agent.policy, &states, 0.1, 10_000, 10_000, &mut rng).map_err(|e| e.to_string())?;
    let secs = theory_secs + clock.elapsed().as_secs_f64();
    if !chain.violations_frozen.is_empty() {
        eprintln!(
            "  chain violations (frozen sigma): {} of {} pairs, first rows {:?}",
            chain.violations_frozen.len(),
            chain.pairs,
            &chain.violations_frozen[..chain.violations_frozen.len().min(10)]
        );
    }
    check(
        worst_rel <= 0.02 && pinsker_fail == 0 && chain.holds_frozen >= 0.99 && secs < 300.0,
        format!(
            "kl vs mc worst {:.2}%; pinsker failures {pinsker_fail}/1000; chain holds {:.2}% frozen sigma, {:.2}% live sigma (K={:.3}); {secs:.0}s",
            100.0 * worst_rel,
            100.0 * chain.holds_frozen,
            100.0 * chain.holds_live,
            chain.k_hat
        ),
    )
}

fn denoiser_efficacy(s: &mut Suite) -> Verdict {
    let (agent, states) = s.vanilla_run0()?;
    let clock = Instant::now();
    let mut rng = seeded(9);
    let mut rows: Vec<usize> = (0..states.rows()).collect();
    rows.shuffle(&mut rng);
    let cut = rows.len() * 4 / 5;
    let (train, held) = (states.gather_rows(&rows[..cut]), states.gather_rows(&rows[cut..]));
    let model = denoiser_train(&agent, &train, AttackKind::MinQ, 0.1, &DenoiserConfig::default(), 9)
        .map_err(|e| e.to_string())?;

    let plain = agent.with_transform(Transform::Identity);
    let attack = make_adversary(
        &AttackSpec::new(AttackKind::MinQ, 0.1, AttackMode::GrayBox),
        &AttackBundle::from_agent(&plain),
    )
    .map_err(|e| e.to_string())?;
    let mut rngs: Vec<_> = (0..held.rows()).map(|i| seeded(derive_seed(99, i as u64))).collect();
    let noisy = attack.perturb_batch(&held, &mut rngs).map_err(|e| e.to_string())?;
    let cleaned = model.denoise_batch(&noisy).map_err(|e| e.to_string())?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let improved = (0..held.rows())
        .filter(|&r| dist(cleaned.row_slice(r), held.row_slice(r)) < dist(noisy.row_slice(r), held.row_slice(r)))
        .count();
    let frac = improved as f64 / held.rows() as f64;
    let secs = clock.elapsed().as_secs_f64();
    check(
        frac >= 0.8 && secs < 600.0,
        format!("{improved}/{} held-out states closer after denoising ({:.1}%), {secs:.0}s", held.rows(), 100.0 * frac),
    )
}

fn determinism() -> Verdict {
    let text = r#"name = "det"
sac.total_steps = 1500
sac.warmup_steps = 300
sac.batch_size = 64
sac.hidden = 32
transform.kind = "vq"
transform.k = 64
experiment.n_runs = 2
experiment.episodes = 4
attack.kind = ["none", "random", "actiondiff", "minq", "rs", "paad"]
attack.eps = 0.1
rs.collect_steps = 500
rs.train_steps = 100
ppo.total_steps = 512
ppo.rollout = 256
"#;
    let cfg = ExperimentConfig::parse(text).map_err(|e| e.to_string())?;
    let run = || -> Result<Vec<u8>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ws = Workspace::new(dir.path());
        run_experiment(&cfg, &ws, true).map_err(|e| e.to_string())?;
        std::fs::read(ws.experiment_dir("det").join("report.csv")).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    check(a == b, format!("two fresh serial runs: report.csv {} bytes, identical = {}", a.len(), a == b))
}

fn main() {
    let mut suite = Suite {
        ws: common::acceptance_workspace(),
        reports: HashMap::new(),
    };
    eprintln!("acceptance workspace: {}", suite.ws.root.display());
    let mut criteria: Vec<(&str, Box<dyn FnOnce(&mut Suite) -> Verdict>)> = vec![
        ("gradient correctness", Box::new(|_| gradients())),
        ("sac sanity", Box::new(sac_sanity)),
        ("robustness ordering", Box::new(robustness_ordering)),
        ("white-box ordering", Box::new(white_box_ordering)),
        ("bounded transformation", Box::new(|_| bounded_transformation())),
        ("pgd oracle", Box::new(|_| pgd_oracle())),
        ("k-means", Box::new(|_| kmeans())),
        ("theory", Box::new(theory)),
        ("denoiser efficacy", Box::new(denoiser_efficacy)),
        ("determinism", Box::new(|_| determinism())),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.drain(..).enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let clock = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| f(&mut suite)))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())))));
        let secs = clock.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("criterion {n:>2} PASS [{name}] ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL [{name}] ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
