//! Finite-difference check of the full loss, then the same check with a
//! deliberately wrong backward rule.

use clang_nlg::autograd::BackwardFault;
use clang_nlg::training::{grad_check, GradCheckCase};

fn main() -> clang_nlg::Result<()> {
    for fault in [BackwardFault::None, BackwardFault::GeluDerivative] {
        let mut case = GradCheckCase::tiny(0)?;
        let report = grad_check(&mut case, 1e-4, fault, 0)?;
        println!("{fault:?}: max relative error {:.3e}, passed {}", report.max_rel_error(), report.passed());
        for t in report.failures().iter().take(5) {
            println!("    {} analytic {:.6e} numeric {:.6e}", t.name, t.analytic, t.numeric);
        }
    }
    Ok(())
}
