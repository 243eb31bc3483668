use rand_distr::{Distribution, Normal};

use super::trajectory::Trajectory;
use crate::error::{Error, Result};
use crate::seeds;

/// Adds i.i.d. `N(0, sigma²)` noise to every measured channel.
///
/// Channels are visited in a fixed order (voltages, branch currents, load
/// currents; each time-major) so the realization depends only on the seed.
pub fn add_noise(t: &Trajectory, sigma_pu: f64, rng_seed: u64) -> Result<Trajectory> {
    if !(sigma_pu >= 0.0 && sigma_pu.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma_pu}")));
    }
    let mut out = t.clone();
    out.noisy = true;
    if sigma_pu == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma_pu).expect("sigma validated");
    let mut rng = seeds::rng_from(rng_seed);
    for channel in out.channels_mut() {
        for v in channel.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}
