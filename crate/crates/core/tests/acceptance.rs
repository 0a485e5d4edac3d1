//! Acceptance criteria 1 to 10. Each test prints one PASS/FAIL line.

use std::time::Instant;

use structgp::verify::{
    collapse_identities, exactness_at_inputs, general_c_optimality, gradient_checks, limit_lattice, ordering_chain,
    pep_fixed_point, qualitative_reproduction, run_all, stochastic_unbiasedness, CriterionResult, VerifyConfig,
};

fn report(r: &CriterionResult) {
    println!("{} ({:.2}s)", r.line(), r.seconds);
    assert!(r.passed(), "{}", r.line());
}

#[test]
fn criterion_01_ordering_chain() {
    report(&ordering_chain(&VerifyConfig::default()));
}

#[test]
fn criterion_02_collapse_identities() {
    report(&collapse_identities(&VerifyConfig::default()));
}

#[test]
fn criterion_03_limit_lattice() {
    report(&limit_lattice(&VerifyConfig::default()));
}

#[test]
fn criterion_04_pep_fixed_point() {
    report(&pep_fixed_point(&VerifyConfig::default()));
}

#[test]
fn criterion_05_stochastic_unbiasedness() {
    report(&stochastic_unbiasedness(&VerifyConfig::default()));
}

#[test]
fn criterion_06_general_c_optimality() {
    report(&general_c_optimality(&VerifyConfig::default()));
}

#[test]
fn criterion_07_gradient_checks() {
    report(&gradient_checks(&VerifyConfig::default()));
}

#[test]
fn criterion_08_qualitative_reproduction() {
    let (r, fits) = qualitative_reproduction(&VerifyConfig::default());
    for f in &fits {
        println!("    {:<14} objective={:.6} sigma2={:.6} kernel_variance={:.6}", f.label, f.objective, f.sigma2, f.kernel_variance);
    }
    report(&r);
}

#[test]
fn criterion_09_exactness_at_inputs() {
    report(&exactness_at_inputs(&VerifyConfig::default()));
}

#[test]
fn criterion_10_verify_small() {
    let started = Instant::now();
    let rep = run_all(&VerifyConfig::default());
    let secs = started.elapsed().as_secs_f64();
    let embedded = (1..=7).all(|id| rep.results.iter().any(|r| r.id == id));
    let ok = secs < 60.0 && embedded && rep.passed();
    println!(
        "[{}] criterion 10 verify-small                 seconds={secs:.1} criteria 1-7 embedded={embedded} failed={:?}",
        if ok { "PASS" } else { "FAIL" },
        rep.failed_names()
    );
    assert!(ok);
}
