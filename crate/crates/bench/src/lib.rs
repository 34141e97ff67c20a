//! Shared fixtures for the benchmarks.

use metflow::config::{preset, Setup};
use metflow::flows::randomize_params;
use metflow::rng;

/// The mog2d preset with `k` steps and flows moved away from the identity.
pub fn perturbed_mog2d(k: usize) -> Setup {
    let mut c = preset("mog2d").expect("mog2d preset");
    c.steps = k;
    let mut s = Setup::build(&c, None).expect("preset builds");
    randomize_params(&mut s.params, "flow", 0.3, &mut rng::stream(0, 999, 0));
    s
}
