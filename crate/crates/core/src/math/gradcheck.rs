use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Coordinates to probe; all of them when the parameter count is smaller.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: 200,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (the gradient of `loss` at `point`) against central
/// differences on a seeded subset of coordinates.
pub fn finite_diff_check<F>(mut loss: F, point: &[f64], analytic: &[f64], config: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(config.h > 0.0, "finite-difference step must be positive");
    assert_eq!(point.len(), analytic.len());
    let n = point.len();
    let coords: Vec<usize> = if n <= config.max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut c = sample(&mut rng, n, config.max_coords).into_vec();
        c.sort_unstable();
        c
    };

    let mut x = point.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + config.h;
        let up = loss(&x);
        x[i] = orig - config.h;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * config.h);
        let err = relative_error(analytic[i], numeric, config.floor);
        if err > max_rel_err || err.is_nan() {
            max_rel_err = err;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: coords.len(),
        pass: max_rel_err < config.tol,
    }
}
