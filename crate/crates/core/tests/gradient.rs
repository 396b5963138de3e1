//! Central finite differences against the analytic gradient of the full
//! reweighted objective.

mod common;

use common::fd::{gradient_check, GradCheckCase};

#[test]
fn analytic_gradient_matches_finite_differences_on_five_seeds() {
    for seed in 0..5u64 {
        let case = GradCheckCase::random(seed, 8, 2, false);
        let report = gradient_check(&case, 1e-5);
        println!(
            "seed {seed}: {} coords, max rel err {:.3e}, kink-refined {}",
            report.coords, report.max_rel_err, report.refined
        );
        assert!(report.max_rel_err < 1e-6, "seed {seed}: {report:?}");
    }
}
