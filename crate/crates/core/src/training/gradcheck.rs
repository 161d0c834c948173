//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// Outcome of a gradient check. `skipped` lists coordinates the kink guard
/// excluded because the left and right slopes disagree (the function is not
/// differentiable there, e.g. a hinge boundary).
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: Vec<usize>,
}

/// Relative slope jump beyond which a coordinate counts as non-smooth. Smooth
/// f64 losses show jumps of order `|f''| * eps`; a hinge shows an O(1) jump.
const KINK_TOLERANCE: f64 = 1e-2;

/// Compares `analytic` against central finite differences of `f` at `point`
/// on at most `max_coords` coordinates (seeded sample when the point is
/// larger). Returns the worst relative error over the smooth coordinates.
pub fn gradcheck(
    f: &dyn Fn(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(TrainError::Config("gradcheck eps must be > 0".into()));
    }
    if point.len() != analytic.len() {
        return Err(TrainError::DimMismatch(point.len(), analytic.len()));
    }
    if point.is_empty() {
        return Err(TrainError::Config("gradcheck point is empty".into()));
    }
    let coords: Vec<usize> = if point.len() <= max_coords {
        (0..point.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> =
            rand::seq::index::sample(&mut rng, point.len(), max_coords)
                .into_iter()
                .collect();
        picked.sort_unstable();
        picked
    };

    let f0 = f(point);
    if !f0.is_finite() {
        return Err(TrainError::NonFinite("gradcheck base point".into()));
    }
    let mut probe = point.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = Vec::new();
    for &i in &coords {
        probe[i] = point[i] + eps;
        let f_plus = f(&probe);
        probe[i] = point[i] - eps;
        let f_minus = f(&probe);
        probe[i] = point[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(TrainError::NonFinite(format!("gradcheck coordinate {i}")));
        }
        let slope_right = (f_plus - f0) / eps;
        let slope_left = (f0 - f_minus) / eps;
        let jump = (slope_right - slope_left).abs();
        if jump > KINK_TOLERANCE * (1.0 + slope_right.abs().max(slope_left.abs())) {
            skipped.push(i);
            continue;
        }
        let central = (f_plus - f_minus) / (2.0 * eps);
        let denom = central.abs().max(analytic[i].abs()).max(1e-6);
        max_rel_error = max_rel_error.max((central - analytic[i]).abs() / denom);
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked,
        skipped,
    })
}
