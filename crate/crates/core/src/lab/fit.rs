//! Log-log rate fits and radial decay fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::Discretization;
use crate::incompressible::PotentialField;

/// Least-squares fit of `log value = slope · log ε + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Half-width of the 95% confidence interval of the slope; `None` with
    /// only two points.
    pub slope_ci95: Option<f64>,
    pub points: usize,
}

/// Two-sided 95% Student-t quantiles for 1..=10 degrees of freedom.
const T95: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];

pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 2 {
        return Err(Error::Input(format!("need at least 2 points, got {}", pairs.len())));
    }
    if let Some((x, y)) = pairs.iter().find(|(x, y)| !(*x > 0.0) || !(*y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(Error::Input(format!("log-log fit needs positive finite data, got ({x}, {y})")));
    }
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("log-log fit needs at least two distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    let dof = pairs.len() - 2;
    let slope_ci95 = if dof == 0 {
        None
    } else {
        let t = if dof <= T95.len() { T95[dof - 1] } else { 1.96 };
        Some(t * (sse / dof as f64 / sxx).sqrt())
    };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        slope_ci95,
        points: pairs.len(),
    })
}

/// Decay exponent `k` in `|f| ~ (1+r)^{−k}` along one ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub angle: f64,
    pub r_window: (f64, f64),
    /// `None` when the field vanishes in the window ("decay unresolved").
    pub exponent: Option<f64>,
    pub r2: Option<f64>,
    pub samples: usize,
}

/// Fits the decay of the gradient magnitude of a nodal field along the ray
/// at polar angle `angle`, sampled geometrically in `r_window`.
pub fn decay_fit(
    disc: &Discretization,
    field: &PotentialField,
    angle: f64,
    r_window: (f64, f64),
) -> Result<DecayFit> {
    decay_fit_with(disc, angle, r_window, |x| {
        let (_, g) = crate::fem::evaluate(&disc.mesh, &field.values, x)?;
        Ok(g[0].hypot(g[1]))
    })
}

/// [`decay_fit`] for an arbitrary sampled quantity.
pub fn decay_fit_with<F>(disc: &Discretization, angle: f64, r_window: (f64, f64), f: F) -> Result<DecayFit>
where
    F: Fn([f64; 2]) -> Result<f64>,
{
    let a = disc.mesh.obstacle_radius();
    let r_far = disc.mesh.params.r_far;
    let (r0, r1) = r_window;
    if !(r0 >= 2.0 * a * (1.0 - 1e-12) && r1 <= 0.8 * r_far * (1.0 + 1e-12) && r0 < r1) {
        return Err(Error::Input(format!(
            "decay window ({r0}, {r1}) must lie inside ({}, {})",
            2.0 * a,
            0.8 * r_far
        )));
    }
    let samples = 24;
    let mut pairs = Vec::with_capacity(samples);
    for i in 0..samples {
        let r = r0 * (r1 / r0).powf(i as f64 / (samples - 1) as f64);
        let v = f([r * angle.cos(), r * angle.sin()])?;
        pairs.push((1.0 + r, v.abs()));
    }
    if pairs.iter().all(|(_, v)| *v == 0.0) {
        return Ok(DecayFit {
            angle,
            r_window,
            exponent: None,
            r2: None,
            samples,
        });
    }
    // Isolated zeros carry no slope information.
    let positive: Vec<(f64, f64)> = pairs.into_iter().filter(|(_, v)| *v > 0.0).collect();
    let fit = fit_rate(&positive)?;
    Ok(DecayFit {
        angle,
        r_window,
        exponent: Some(-fit.slope),
        r2: Some(fit.r2),
        samples,
    })
}
