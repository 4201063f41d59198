//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.

use lgb::energy::{pi_ratio, solve_capacity, CapacityProblem, EnergyGraph};
use lgb::scaling::{
    check_admissible, derive_gb, fit_exponents, pow2, synthesize_branching, BranchingProfile,
    DigitRole, DyadicProfile,
};
use lgb::tree::TreeFunction;
use lgb::verify::{
    geodesic_campaign, item_rng, run_suite, slack_bound, test_function, Fixture, GeodesicTally, SuiteConfig,
    VerificationReport, PENCIL_LIMIT, VOLUME_LIMIT,
};
use rand::Rng;
use std::path::Path;
use std::time::Instant;

const BUDGET: usize = 200_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn synthesized() -> (BranchingProfile, BranchingProfile) {
    let phi = DyadicProfile::power_law(2.0, -4, 10).unwrap();
    let psi = DyadicProfile::power_law(2.5, -4, 10).unwrap();
    let gb = derive_gb(&phi, &psi, 2.0, 1.0).unwrap();
    (gb.g.profile, gb.b.profile)
}

fn geodesics(report: &VerificationReport) -> Outcome {
    let (g, b) = synthesized();
    let flat = BranchingProfile::constant(1, g.lo_level, g.hi_level, DigitRole::Gluing).unwrap();
    let single = BranchingProfile::new(
        g.lo_level,
        g.hi_level,
        g.levels().map(|k| if k == 3 { 2 } else { 1 }).collect(),
        DigitRole::Gluing,
    )
    .unwrap();
    let mut tallies: Vec<(&str, GeodesicTally)> = Vec::new();
    for (name, gp) in [("g=1", &flat), ("single glued level", &single)] {
        let fx = Fixture::build(gp, &b, (0, 6), BUDGET).unwrap();
        tallies.push((name, geodesic_campaign(&fx.model, &fx.graph, 1000, 1).unwrap()));
    }
    tallies.push(("synthesized (2, 2.5, 2)", report.geodesic.clone()));
    let mismatches: usize = tallies.iter().map(|t| t.1.mismatches).sum();
    let enough = tallies.iter().all(|t| t.1.pairs >= 1000);
    let kinds = [
        tallies.iter().map(|t| t.1.monotone).sum::<usize>(),
        tallies.iter().map(|t| t.1.one_inversion).sum(),
        tallies.iter().map(|t| t.1.two_inversions).sum(),
    ];
    let detail = tallies
        .iter()
        .map(|(n, t)| format!("{n}: {} pairs, {} mismatches", t.pairs, t.mismatches))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        mismatches == 0 && enough && kinds.iter().all(|&k| k > 0),
        format!("{detail}; kinds monotone/one/two = {kinds:?}"),
    )
}

fn metric(report: &VerificationReport) -> Outcome {
    let m = &report.metric;
    outcome(
        m.triples >= 1000 && m.symmetry_failures == 0 && m.triangle_failures == 0 && m.lipschitz_failures == 0,
        format!(
            "{} triples, failures symmetry {} triangle {} lipschitz {}, max d_L/max(d_U,d_T) = {}",
            m.triples, m.symmetry_failures, m.triangle_failures, m.lipschitz_failures, m.max_lipschitz_ratio
        ),
    )
}

fn volume(report: &VerificationReport) -> Outcome {
    let c = report.volume_constant;
    let refined = report.refined_volume_constant.unwrap_or(f64::INFINITY);
    outcome(
        c <= VOLUME_LIMIT && refined <= c && report.volume_ratio_constant <= c,
        format!("certified C = {c}, refined C = {refined}, atomic ratios within {}", report.volume_ratio_constant),
    )
}

/// Largest two-sided ratio of `Φ(2^n)/Φ(1)` to the running digit product,
/// taken from level 0 upwards and mirrored below it.
fn slack_oracle(phi: &DyadicProfile, digits: &[u64]) -> f64 {
    let lo = phi.lo_level;
    let a = |n: i32| (digits[(n - lo) as usize] as f64).log2();
    let log_ratio = |n: i32| phi.log2_at(n) - phi.log2_at(0);
    let mut log_prod = 0.0;
    let mut worst: f64 = 0.0;
    for n in 0..=phi.hi_level {
        log_prod += a(n);
        worst = worst.max((log_ratio(n) - log_prod).abs());
    }
    log_prod = a(0);
    for n in (lo..0).rev() {
        log_prod += a(n);
        worst = worst.max((-log_ratio(n) - log_prod).abs());
    }
    worst.exp2()
}

fn synthesis(report: &VerificationReport) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for dh in [1.0, 2.0, 3.0] {
        let phi = DyadicProfile::power_law(dh, -4, 10).unwrap();
        let s = synthesize_branching(&phi, &fit_exponents(&phi).unwrap()).unwrap();
        let want = dh.exp2() as u64;
        let constant = s.profile.digits.iter().all(|&d| d == want);
        pass &= constant && (slack_oracle(&phi, &s.profile.digits) - s.slack).abs() <= 1e-9 * s.slack;
        notes.push(format!("r^{dh}: constant {want} {constant}"));
    }
    let two_slope = DyadicProfile::from_fn(-3, 10, |n| {
        if n <= 4 { pow2(n as i64) } else { pow2(2 * (n as i64 - 4)) * pow2(4) }
    })
    .unwrap();
    let bounds = fit_exponents(&two_slope).unwrap();
    let s = synthesize_branching(&two_slope, &bounds).unwrap();
    let (lo, hi) = (bounds.theta1.floor().exp2() as u64, bounds.theta2.ceil().exp2() as u64);
    let alphabet = s.profile.digits.iter().all(|&d| d == lo || d == hi);
    let slack = slack_oracle(&two_slope, &s.profile.digits);
    let bound = slack_bound(bounds.theta2, bounds.c);
    pass &= alphabet && slack <= bound && (slack - s.slack).abs() <= 1e-9 * slack;
    notes.push(format!("two-slope: slack {slack:.6} <= {bound}, alphabet {{{lo}, {hi}}} {alphabet}"));
    let fixture = report.check("synthesis").map_or(false, |c| c.pass);
    pass &= fixture;
    notes.push(format!("fixture pair within bounds {fixture}"));
    outcome(pass, notes.join("; "))
}

fn capacity(report: &VerificationReport) -> Outcome {
    let mut worst: f64 = 0.0;
    let lengths = [0.5, 1.0, 0.25, 2.0, 0.75];
    let series: Vec<(usize, usize, f64, f64)> = lengths.iter().enumerate().map(|(i, &l)| (i, i + 1, l, 1.0)).collect();
    let series = EnergyGraph::new(vec![1.0; lengths.len() + 1], series).unwrap();
    let total: f64 = lengths.iter().sum();
    let parallel = EnergyGraph::new(
        vec![1.0; 5],
        vec![(0, 2, 1.0, 1.0), (2, 1, 1.0, 1.0), (0, 3, 1.0, 1.0), (3, 4, 1.0, 1.0), (4, 1, 1.0, 1.0)],
    )
    .unwrap();
    for p in [1.5, 2.0, 3.0] {
        let s = solve_capacity(&series, &CapacityProblem::new(vec![0], vec![lengths.len()], p), None).unwrap();
        let want = total.powf(1.0 - p);
        worst = worst.max((s.value - want).abs() / want);
        let q = solve_capacity(&parallel, &CapacityProblem::new(vec![0], vec![1], p), None).unwrap();
        let want = 2f64.powf(1.0 - p) + 3f64.powf(1.0 - p);
        worst = worst.max((q.value - want).abs() / want);
    }
    let fixture = report.check("capacity").map_or(false, |c| c.pass);
    outcome(
        worst <= 1e-8 && fixture && report.capacity_envelope.is_finite(),
        format!(
            "toy relative error {worst:.2e}; cap <= cutoff energy on every ball {fixture}; envelope {}",
            report.capacity_envelope
        ),
    )
}

fn pi(report: &VerificationReport) -> Outcome {
    let refined = report.refined_pi_certified.unwrap_or(f64::INFINITY);
    let sweep_ok = report.pi_constant.is_finite() && report.pi_certified.is_finite() && refined <= report.pi_certified;

    let (_, b) = synthesized();
    let flat = BranchingProfile::constant(1, b.lo_level, b.hi_level, DigitRole::Gluing).unwrap();
    let fx = Fixture::build(&flat, &b, (0, 6), BUDGET).unwrap();
    let tree = &fx.model.tree;
    let mut worst: f64 = 0.0;
    let (mut max_l, mut max_t): (f64, f64) = (0.0, 0.0);
    for ball in 0..50u64 {
        let mut rng = item_rng(3, 0, ball);
        let c = fx.sample_center(&mut rng);
        let r = (rng.gen_range(fx.model.m..=fx.model.n - 2) as f64).exp2();
        let t = fx.center_point(c).t;
        let dist = fx.energy.hops(c);
        for i in 0..30 {
            let f = test_function(&fx, &dist, r, i, &mut item_rng(3, 1, (ball << 16) | i as u64));
            let tf = TreeFunction { values: (0..tree.num_vertices()).map(|v| f.values[fx.graph.node(0, v)]).collect() };
            let ours = pi_ratio(&fx.model, &fx.energy, &dist, r, &f, 2.0, 4.0).unwrap();
            let theirs = tree.pi_ratio(&tf, 2.0, t, r, 4.0).unwrap();
            worst = worst.max((ours - theirs).abs() / theirs.abs().max(f64::MIN_POSITIVE));
            max_l = max_l.max(ours);
            max_t = max_t.max(theirs);
        }
    }
    outcome(
        sweep_ok && worst <= 1e-12,
        format!(
            "max ratio {} (certified {} -> refined {refined}); g=1 vs tree: max {max_l:.6} vs {max_t:.6}, relative gap {worst:.1e}",
            report.pi_constant, report.pi_certified
        ),
    )
}

fn cs(report: &VerificationReport) -> Outcome {
    let (c2, c3) = report.cs_envelope;
    let pass = report.check("cs").map_or(false, |c| c.pass);
    outcome(pass && c2.is_finite() && c3.is_finite(), format!("C2 = {c2}, C3 = {c3}, glued pairs consistent {pass}"))
}

fn energy_axioms(report: &VerificationReport) -> Outcome {
    let ps: Vec<f64> = report.energy_axioms.iter().map(|t| t.p).collect();
    let ok = ps == [1.5, 2.0, 3.0]
        && report
            .energy_axioms
            .iter()
            .all(|t| t.pairs >= 200 && t.clarkson_failures == 0 && t.subadditivity_failures == 0);
    let detail = report
        .energy_axioms
        .iter()
        .map(|t| format!("p={}: {} pairs, margins {} / {}", t.p, t.pairs, t.clarkson_margin, t.subadditivity_margin))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(ok, detail)
}

fn pencil(report: &VerificationReport) -> Outcome {
    let p = &report.pencil;
    outcome(
        p.samples >= 10_000 && p.wrong_lengths == 0 && p.rows > 0 && p.percentile99 <= PENCIL_LIMIT,
        format!(
            "{} samples of length {} ({} distinct), wrong lengths {}, 99th percentile {} over {} rows",
            p.samples, p.length, p.distinct_paths, p.wrong_lengths, p.percentile99, p.rows
        ),
    )
}

fn admissibility() -> Outcome {
    let mut cases = 0;
    let mut wrong = Vec::new();
    for p in [1.5, 2.0, 3.0] {
        for dh in 1..=4 {
            let phi = DyadicProfile::power_law(dh as f64, -4, 10).unwrap();
            for step in 0..=20 {
                let beta = 1.0 + 0.25 * step as f64;
                let psi = DyadicProfile::power_law(beta, -4, 10).unwrap();
                let got = check_admissible(&phi, &psi, p, 1.0).unwrap().admissible;
                let want = p <= beta && beta <= dh as f64 + p - 1.0;
                cases += 1;
                if got != want {
                    wrong.push(format!("(p={p}, dh={dh}, beta={beta})"));
                }
            }
        }
    }
    outcome(wrong.is_empty(), format!("{cases} grid points, {} disagreements {}", wrong.len(), wrong.join(" ")))
}

fn main() {
    let start = Instant::now();
    let cfg = SuiteConfig { node_budget: BUDGET, ..SuiteConfig::power_law(2.0, 2.0, 2.5, (0, 6)) };
    let report = run_suite(&cfg, Path::new(".")).expect("suite runs");
    let rows: Vec<(&str, Outcome)> = vec![
        ("geodesic exactness", geodesics(&report)),
        ("metric axioms", metric(&report)),
        ("volume regularity", volume(&report)),
        ("synthesis", synthesis(&report)),
        ("capacity", capacity(&report)),
        ("poincare sweep", pi(&report)),
        ("cutoff sobolev sweep", cs(&report)),
        ("energy axioms", energy_axioms(&report)),
        ("pencil of curves", pencil(&report)),
        ("admissibility boundary", admissibility()),
    ];
    let mut failed = 0;
    for (name, o) in &rows {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    println!(
        "acceptance: {} of {} criteria pass in {:.1}s",
        rows.len() - failed,
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
