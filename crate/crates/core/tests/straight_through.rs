//! Controller-logit gradients of the straight-through route against
//! central differences of a frozen-decision surrogate.

mod common;

use common::{rel_err, StProblem};

#[test]
fn controller_logit_gradients_match_surrogate_differences() {
    let problem = StProblem::new(11);
    let rows = problem.compare(50, 3);
    let mut nonzero = 0;
    for (r, an, fd) in &rows {
        assert!(rel_err(*an, *fd) < 1e-3, "{r:?}: analytic {an}, numeric {fd}");
        nonzero += usize::from(an.abs() > 1e-9);
    }
    assert!(nonzero > 10, "only {nonzero} informative logits");
}
