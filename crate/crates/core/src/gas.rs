//! Isentropic gas closure for the rescaled pressure law `p̃(ρ) = ρ^γ`.
//!
//! Every quantity here is a pure function of its arguments. The enthalpy is
//! normalised so that `h̃(1) = 0`, which removes the `h̃(1)` offsets from the
//! Bernoulli relations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussRule;
use crate::roots::solve_monotone;

/// Relative tolerance of every inverse function in this module.
pub const INVERSE_TOL: f64 = 1e-14;

/// Number of points of the geometric ε-grid used to approximate the infimum
/// over `(0, ε₀)` of the Mach-threshold speed.
pub const EPS_GRID_POINTS: usize = 64;

/// Polytropic gas with compressibility parameter ε and far-field speed q∞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasModel {
    pub gamma: f64,
    pub epsilon: f64,
    pub q_inf: f64,
}

impl GasModel {
    /// `q_inf = 0` is accepted and describes fluid at rest.
    pub fn new(gamma: f64, epsilon: f64, q_inf: f64) -> Result<Self> {
        if !(gamma >= 1.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 1, got {gamma}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(q_inf >= 0.0 && q_inf.is_finite()) {
            return Err(Error::Config(format!("q_inf must be >= 0, got {q_inf}")));
        }
        Ok(Self {
            gamma,
            epsilon,
            q_inf,
        })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.gamma, epsilon, self.q_inf)
    }

    fn is_isothermal(&self) -> bool {
        self.gamma == 1.0
    }

    /// `p̃(ρ) = ρ^γ`.
    pub fn pressure(&self, rho: f64) -> f64 {
        rho.powf(self.gamma)
    }

    /// `p̃′(ρ) = γ ρ^{γ-1}`, the rescaled squared sound speed.
    pub fn pressure_slope(&self, rho: f64) -> f64 {
        if self.is_isothermal() {
            1.0
        } else {
            self.gamma * rho.powf(self.gamma - 1.0)
        }
    }

    /// `p̃″(ρ)`.
    pub fn pressure_curvature(&self, rho: f64) -> f64 {
        if self.is_isothermal() {
            0.0
        } else {
            self.gamma * (self.gamma - 1.0) * rho.powf(self.gamma - 2.0)
        }
    }

    /// Infimum of the range of `h̃`; `-∞` for γ = 1.
    pub fn enthalpy_floor(&self) -> f64 {
        if self.is_isothermal() {
            f64::NEG_INFINITY
        } else {
            -self.gamma / (self.gamma - 1.0)
        }
    }

    /// `h̃(ρ) = ∫₁^ρ p̃′(s)/s ds` without argument checks.
    fn enthalpy_raw(&self, rho: f64) -> f64 {
        if self.is_isothermal() {
            rho.ln()
        } else {
            let k = self.gamma - 1.0;
            self.gamma / k * (rho.powf(k) - 1.0).max(-1.0)
        }
    }

    /// `H̃(ρ) = p̃′(ρ)/2 + h̃(ρ)`, the Bernoulli level at the sonic state.
    pub fn sonic_level(&self, rho: f64) -> f64 {
        0.5 * self.pressure_slope(rho) + self.enthalpy_raw(rho)
    }

    /// Closed-form `h̃⁻¹(y) − 1`, evaluated without cancellation for small
    /// `y`. Returns `None` below the range of `h̃`.
    pub fn density_excess(&self, y: f64) -> Option<f64> {
        if self.is_isothermal() {
            return Some(y.exp_m1());
        }
        let k = self.gamma - 1.0;
        let arg = k * y / self.gamma;
        if arg <= -1.0 {
            return None;
        }
        Some((arg.ln_1p() / k).exp_m1())
    }

    /// Derivative of `h̃⁻¹` at the level `h̃(ρ)`, i.e. `ρ / p̃′(ρ)`.
    pub fn inverse_enthalpy_slope(&self, rho: f64) -> f64 {
        rho / self.pressure_slope(rho)
    }

    /// Checks `p̃′ > 0` and `2p̃′ + ρp̃″ > 0` on a logarithmic density grid.
    pub fn check_pressure_law(&self) -> Result<()> {
        for k in -200..=200 {
            let rho = 10f64.powf(k as f64 / 50.0);
            let d1 = self.pressure_slope(rho);
            let d2 = self.pressure_curvature(rho);
            if !(d1 > 0.0 && 2.0 * d1 + rho * d2 > 0.0) {
                return Err(Error::Config(format!(
                    "pressure law violates monotonicity/convexity at rho = {rho}"
                )));
            }
        }
        Ok(())
    }
}

/// Conservative body-force potential at one point, with its gradient in the
/// computational plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForceValue {
    pub phi: f64,
    pub grad_phi: [f64; 2],
}

impl ForceValue {
    pub const ZERO: ForceValue = ForceValue {
        phi: 0.0,
        grad_phi: [0.0, 0.0],
    };

    pub fn potential(phi: f64) -> Self {
        Self {
            phi,
            grad_phi: [0.0, 0.0],
        }
    }
}

/// `h̃(ρ)`.
pub fn enthalpy(rho: f64, gas: &GasModel) -> Result<f64> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Domain(format!("density must be positive, got {rho}")));
    }
    Ok(gas.enthalpy_raw(rho))
}

/// `h̃⁻¹(y)` by safeguarded bisection with Newton polishing.
pub fn enthalpy_inv(y: f64, gas: &GasModel) -> Result<f64> {
    if !y.is_finite() || gas.density_excess(y).is_none() {
        return Err(Error::Domain(format!(
            "enthalpy {y} lies below the range infimum {}",
            gas.enthalpy_floor()
        )));
    }
    let (lo, hi) = bracket(|r| gas.enthalpy_raw(r) - y)?;
    solve_monotone(
        |r| (gas.enthalpy_raw(r) - y, gas.pressure_slope(r) / r),
        lo,
        hi,
        INVERSE_TOL,
    )
}

/// Brackets the root of an increasing function on `(0, ∞)` by doubling.
fn bracket<F: Fn(f64) -> f64>(f: F) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (0.5, 2.0);
    for _ in 0..1100 {
        if f(lo) <= 0.0 {
            break;
        }
        lo *= 0.5;
    }
    for _ in 0..1100 {
        if f(hi) >= 0.0 {
            break;
        }
        hi *= 2.0;
    }
    if f(lo) > 0.0 || f(hi) < 0.0 || lo == 0.0 || !hi.is_finite() {
        return Err(Error::Domain("unable to bracket inverse".into()));
    }
    Ok((lo, hi))
}

/// Bernoulli level `ε²(q∞² − q²)/2 + ε²φ` relative to `h̃(1) = 0`.
fn bernoulli_level(q2: f64, phi: f64, gas: &GasModel) -> f64 {
    let e2 = gas.epsilon * gas.epsilon;
    e2 * (0.5 * (gas.q_inf * gas.q_inf - q2) + phi)
}

/// Untruncated density `ρ^ε(q², φ)` from Bernoulli's law.
pub fn density_from_speed(q2: f64, f: &ForceValue, gas: &GasModel) -> Result<f64> {
    let y = bernoulli_level(q2, f.phi, gas);
    gas.density_excess(y)
        .map(|d| 1.0 + d)
        .ok_or_else(|| {
            Error::Domain(format!(
                "vacuum: speed squared {q2} exceeds the Bernoulli limit (phi = {})",
                f.phi
            ))
        })
}

/// `M^ε = ε q / √p̃′(ρ)`.
pub fn mach(q: f64, rho: f64, gas: &GasModel) -> Result<f64> {
    if !(q >= 0.0) || !(rho > 0.0) {
        return Err(Error::Domain(format!(
            "mach needs q >= 0 and rho > 0, got q = {q}, rho = {rho}"
        )));
    }
    Ok(gas.epsilon * q / gas.pressure_slope(rho).sqrt())
}

/// Sonic density `H̃⁻¹(ε²q∞²/2 + ε²φ)`.
pub fn critical_density(f: &ForceValue, gas: &GasModel) -> Result<f64> {
    let e2 = gas.epsilon * gas.epsilon;
    let level = e2 * (0.5 * gas.q_inf * gas.q_inf + f.phi);
    sonic_density_at_level(level, gas).map_err(|_| {
        Error::Config(format!(
            "epsilon {} too large for phi {}: Bernoulli level {level} outside the range of H",
            gas.epsilon, f.phi
        ))
    })
}

/// `H̃⁻¹(level)`; the ε → 0 limit of the sonic density is `level = 0`.
pub fn sonic_density_at_level(level: f64, gas: &GasModel) -> Result<f64> {
    if !level.is_finite() || level <= gas.enthalpy_floor() {
        return Err(Error::Domain(format!("level {level} outside range of H")));
    }
    let (lo, hi) = bracket(|r| gas.sonic_level(r) - level)?;
    solve_monotone(
        |r| {
            let slope = 0.5 * gas.pressure_curvature(r) + gas.pressure_slope(r) / r;
            (gas.sonic_level(r) - level, slope)
        },
        lo,
        hi,
        INVERSE_TOL,
    )
}

/// Sonic speed `q_cr = √p̃′(ρ_cr) / ε`.
pub fn critical_speed(f: &ForceValue, gas: &GasModel) -> Result<f64> {
    let rho = critical_density(f, gas)?;
    Ok(gas.pressure_slope(rho).sqrt() / gas.epsilon)
}

/// Speed at which the local Mach number equals `theta`.
pub fn theta_speed(theta: f64, f: &ForceValue, gas: &GasModel) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!("theta must lie in (0,1), got {theta}")));
    }
    let q_cr = critical_speed(f, gas)?;
    let eps = gas.epsilon;
    let e2 = eps * eps;
    let residual = |q: f64| -> (f64, f64) {
        let rho = match density_from_speed(q * q, f, gas) {
            Ok(r) => r,
            Err(_) => return (f64::INFINITY, f64::NAN),
        };
        let c2 = gas.pressure_slope(rho);
        let c = c2.sqrt();
        let drho = -e2 * q * rho / c2;
        let dc = gas.pressure_curvature(rho) * drho / (2.0 * c);
        (eps * q / c - theta, eps * (c - q * dc) / c2)
    };
    solve_monotone(residual, 0.0, q_cr, INVERSE_TOL).map_err(|e| {
        Error::Config(format!("no subsonic root for theta = {theta}: {e}"))
    })
}

/// Cut-off value `q̂` with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffValue {
    pub q_hat: f64,
    pub d_lambda: f64,
    pub d_phi: f64,
}

/// Cubic Hermite bridge on `[s_lower, s_upper]` in the speed-squared variable,
/// joining `s − 2φ` (slope 1) to the saturation constant (slope 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermiteBridge {
    pub s_lower: f64,
    pub s_upper: f64,
    pub value_lower: f64,
    pub value_upper: f64,
}

impl HermiteBridge {
    fn eval(&self, s: f64) -> (f64, f64) {
        let len = self.s_upper - self.s_lower;
        let t = (s - self.s_lower) / len;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let value = h00 * self.value_lower + h10 * len + h01 * self.value_upper;
        let slope = (d00 * self.value_lower + d10 * len + d01 * self.value_upper) / len;
        (value, slope)
    }

    /// Fritsch–Carlson monotonicity for end slopes (1, 0).
    fn is_monotone(&self) -> bool {
        let secant = (self.value_upper - self.value_lower) / (self.s_upper - self.s_lower);
        secant > 0.0 && (1.0 / secant).powi(2) <= 9.0
    }
}

/// Speed thresholds of the cut-off at one value of the force potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffWindow {
    pub phi: f64,
    pub q_lower: f64,
    pub q_upper: f64,
    pub bridge: HermiteBridge,
}

impl CutoffWindow {
    /// `(q̂, q̂_Λ)` at speed squared `q2`. The φ-derivative is supplied by
    /// [`CutoffSpec::cutoff_q`].
    pub fn q_hat(&self, q2: f64) -> (f64, f64) {
        if q2 <= self.bridge.s_lower {
            (q2 - 2.0 * self.phi, 1.0)
        } else if q2 >= self.bridge.s_upper {
            (self.bridge.value_upper, 0.0)
        } else {
            self.bridge.eval(q2)
        }
    }

    /// Branch break points in the speed-squared variable.
    pub fn breakpoints(&self) -> [f64; 2] {
        [self.bridge.s_lower, self.bridge.s_upper]
    }
}

/// Phase-plane cut-off parameters `(θ, ε₀)` and the speed thresholds they
/// induce.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffSpec {
    pub theta: f64,
    pub eps0: f64,
    /// Largest ε of the infimum grid; equals `eps0` unless a solve is run
    /// above `eps0`, in which case the grid is extended to that ε.
    pub eps_reference: f64,
    /// Thresholds at φ = 0.
    pub q_lower: f64,
    pub q_upper: f64,
    /// `sup (q̊_{(θ+1)/2}² − 2φ)` over the sampled points.
    pub saturation: f64,
    pub gamma: f64,
    pub q_inf: f64,
    pub blend: HermiteBridge,
}

impl CutoffSpec {
    /// Builds the cut-off for ε up to `max(eps0, gas.epsilon)`; `phi_samples`
    /// are the force-potential values of the active domain (the saturation
    /// constant is their supremum).
    pub fn new(theta: f64, eps0: f64, gas: &GasModel, phi_samples: &[f64]) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::Config(format!("cutoff theta must lie in (0,1), got {theta}")));
        }
        if !(eps0 > 0.0 && eps0 < 1.0) {
            return Err(Error::Config(format!("cutoff eps0 must lie in (0,1), got {eps0}")));
        }
        let eps_reference = eps0.max(gas.epsilon);
        let mut spec = Self {
            theta,
            eps0,
            eps_reference,
            q_lower: 0.0,
            q_upper: 0.0,
            saturation: f64::NEG_INFINITY,
            gamma: gas.gamma,
            q_inf: gas.q_inf,
            blend: HermiteBridge {
                s_lower: 0.0,
                s_upper: 1.0,
                value_lower: 0.0,
                value_upper: 1.0,
            },
        };
        let upper_theta = 0.5 * (theta + 1.0);
        let (mut phi_min, mut phi_max) = (0.0f64, 0.0f64);
        for &phi in phi_samples {
            phi_min = phi_min.min(phi);
            phi_max = phi_max.max(phi);
        }
        // The infimum over the ε-grid is attained at the reference ε; verify
        // on the extreme potentials before relying on it pointwise.
        for phi in [phi_min, 0.0, phi_max] {
            spec.grid_infimum(theta, phi)?;
            spec.grid_infimum(upper_theta, phi)?;
        }
        let mut sat = f64::NEG_INFINITY;
        for &phi in phi_samples.iter().chain(std::iter::once(&0.0)) {
            let qu = spec.reference_speed(upper_theta, phi)?;
            sat = sat.max(qu * qu - 2.0 * phi);
        }
        spec.saturation = sat;
        let w0 = spec.window(0.0)?;
        spec.q_lower = w0.q_lower;
        spec.q_upper = w0.q_upper;
        spec.blend = w0.bridge;
        Ok(spec)
    }

    fn reference_gas(&self, eps: f64) -> Result<GasModel> {
        GasModel::new(self.gamma, eps, self.q_inf)
    }

    /// The ε-grid `eps_reference · 10^{-3k/63}`, k = 0..63.
    pub fn eps_grid(&self) -> Vec<f64> {
        (0..EPS_GRID_POINTS)
            .map(|k| self.eps_reference * 10f64.powf(-3.0 * k as f64 / (EPS_GRID_POINTS - 1) as f64))
            .collect()
    }

    /// Infimum of the θ-speed over the ε-grid, asserting that the speed
    /// grows monotonically as ε decreases.
    pub fn grid_infimum(&self, theta: f64, phi: f64) -> Result<f64> {
        let f = ForceValue::potential(phi);
        let mut prev = 0.0;
        let mut inf = f64::INFINITY;
        for eps in self.eps_grid() {
            let q = theta_speed(theta, &f, &self.reference_gas(eps)?)?;
            if q < prev * (1.0 - 1e-12) {
                return Err(Error::Config(format!(
                    "theta-speed not monotone in epsilon at eps = {eps}, phi = {phi}"
                )));
            }
            prev = q;
            inf = inf.min(q);
        }
        Ok(inf)
    }

    fn reference_speed(&self, theta: f64, phi: f64) -> Result<f64> {
        theta_speed(theta, &ForceValue::potential(phi), &self.reference_gas(self.eps_reference)?)
    }

    /// Thresholds and bridge at potential `phi`.
    pub fn window(&self, phi: f64) -> Result<CutoffWindow> {
        let q_lower = self.reference_speed(self.theta, phi)?;
        let q_upper = self.reference_speed(0.5 * (self.theta + 1.0), phi)?;
        let bridge = HermiteBridge {
            s_lower: q_lower * q_lower,
            s_upper: q_upper * q_upper,
            value_lower: q_lower * q_lower - 2.0 * phi,
            value_upper: self.saturation,
        };
        if !(q_lower < q_upper) {
            return Err(Error::Config(format!(
                "cutoff thresholds not ordered: {q_lower} >= {q_upper}"
            )));
        }
        if !bridge.is_monotone() {
            return Err(Error::Config(format!(
                "cutoff bridge not monotone at phi = {phi} (saturation {})",
                self.saturation
            )));
        }
        Ok(CutoffWindow {
            phi,
            q_lower,
            q_upper,
            bridge,
        })
    }

    /// `(q̂, q̂_Λ, q̂_φ)`. Inside the bridge the φ-derivative is taken by
    /// central differences of the window construction.
    pub fn cutoff_q(&self, q2: f64, phi: f64) -> Result<CutoffValue> {
        let w = self.window(phi)?;
        let (q_hat, d_lambda) = w.q_hat(q2);
        let d_phi = if q2 <= w.bridge.s_lower {
            -2.0
        } else if q2 >= w.bridge.s_upper {
            0.0
        } else {
            let h = 1e-6 * (1.0 + phi.abs());
            let plus = self.window(phi + h)?.q_hat(q2).0;
            let minus = self.window(phi - h)?.q_hat(q2).0;
            (plus - minus) / (2.0 * h)
        };
        Ok(CutoffValue {
            q_hat,
            d_lambda,
            d_phi,
        })
    }
}

/// Truncated density `ρ̂ = h̃⁻¹(ε²(q∞² − q̂)/2)`.
pub fn truncated_density(q2: f64, window: &CutoffWindow, gas: &GasModel) -> Result<f64> {
    truncated_excess(q2, window, gas).map(|d| 1.0 + d)
}

/// `ρ̂ − 1`, accurate for small ε.
pub fn truncated_excess(q2: f64, window: &CutoffWindow, gas: &GasModel) -> Result<f64> {
    let (q_hat, _) = window.q_hat(q2);
    let e2 = gas.epsilon * gas.epsilon;
    let y = 0.5 * e2 * (gas.q_inf * gas.q_inf - q_hat);
    gas.density_excess(y).ok_or_else(|| {
        Error::Config(format!(
            "epsilon {} too large: truncated Bernoulli level {y} leaves the range of h",
            gas.epsilon
        ))
    })
}

/// Two-sided bound on the truncated density for `ε ≤ 1`:
/// `H̃⁻¹(−φ⋆) < ρ̂ ≤ h̃⁻¹(q∞²/2 + φ⋆)`.
pub fn density_bounds(phi_star: f64, gas: &GasModel) -> Result<(f64, f64)> {
    let lower = sonic_density_at_level(-phi_star, gas)?;
    let upper = enthalpy_inv(0.5 * gas.q_inf * gas.q_inf + phi_star, gas)?;
    Ok((lower, upper))
}

/// `G(Λ, φ) = ½∫₀^Λ ρ̂(λ, φ) dλ` by piecewise 64-point Gauss quadrature split
/// at the cut-off break points.
pub fn energy_density_g(lambda: f64, window: &CutoffWindow, gas: &GasModel) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("Lambda must be >= 0, got {lambda}")));
    }
    let rule = GaussRule::new(64);
    let mut cuts = vec![0.0];
    for b in window.breakpoints() {
        if b > 0.0 && b < lambda {
            cuts.push(b);
        }
    }
    cuts.push(lambda);
    let mut total = 0.0;
    let mut err = None;
    for pair in cuts.windows(2) {
        total += rule.integrate(pair[0], pair[1], |l| match truncated_density(l, window, gas) {
            Ok(r) => r,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(0.5 * total)
}

/// Coefficients of the truncated equation in non-divergence form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticCoeffs<const N: usize> {
    pub a: [[f64; N]; N],
    pub b: [f64; N],
}

/// `â_ij = ρ̂(δ_ij − ε²q̂_Λ ∂_iφ∂_jφ/p̃′(ρ̂))`, `b̂_i = ε²ρ̂q̂_φ ∂_iφ_f/p̃′(ρ̂)`.
pub fn elliptic_coeffs<const N: usize>(
    velocity: [f64; N],
    phi: f64,
    grad_force: [f64; N],
    spec: &CutoffSpec,
    gas: &GasModel,
) -> Result<EllipticCoeffs<N>> {
    let q2: f64 = velocity.iter().map(|v| v * v).sum();
    let window = spec.window(phi)?;
    let cut = spec.cutoff_q(q2, phi)?;
    let rho = truncated_density(q2, &window, gas)?;
    let e2 = gas.epsilon * gas.epsilon;
    let c2 = gas.pressure_slope(rho);
    let mut a = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..N {
            let delta = if i == j { 1.0 } else { 0.0 };
            a[i][j] = rho * (delta - e2 * cut.d_lambda * velocity[i] * velocity[j] / c2);
        }
    }
    let mut b = [0.0; N];
    for i in 0..N {
        b[i] = e2 * rho * cut.d_phi * grad_force[i] / c2;
    }
    Ok(EllipticCoeffs { a, b })
}

/// Hessian of `p ↦ G(|p|², φ)` for a two-component gradient, given the
/// window. This is the hot-path form of [`elliptic_coeffs`] used in assembly.
#[inline]
pub fn hessian_2d(p: [f64; 2], window: &CutoffWindow, gas: &GasModel) -> Result<([[f64; 2]; 2], f64)> {
    let q2 = p[0] * p[0] + p[1] * p[1];
    let (_, d_lambda) = window.q_hat(q2);
    let rho = truncated_density(q2, window, gas)?;
    let e2 = gas.epsilon * gas.epsilon;
    let s = e2 * d_lambda / gas.pressure_slope(rho);
    let a = [
        [rho * (1.0 - s * p[0] * p[0]), -rho * s * p[0] * p[1]],
        [-rho * s * p[1] * p[0], rho * (1.0 - s * p[1] * p[1])],
    ];
    Ok((a, rho))
}

/// Ellipticity bounds `λ̂₁ |ξ|² ≤ ξᵀâξ ≤ λ̂₂ |ξ|²` and the drift constant
/// `|b̂·ξ| ≤ C |∇φ_f| |ξ|`, valid for all ε in `(0, eps_reference]`, all
/// speeds and all `|φ| ≤ φ⋆`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticityBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub drift: f64,
}

impl EllipticityBounds {
    /// Scans the state space on a dense grid and widens the extremes by 1%.
    pub fn compute(spec: &CutoffSpec, phi_star: f64) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        let mut drift = 0.0f64;
        let phis = if phi_star > 0.0 {
            vec![-phi_star, 0.0, phi_star]
        } else {
            vec![0.0]
        };
        let eps_grid: Vec<f64> = (0..16)
            .map(|k| spec.eps_reference * 10f64.powf(-3.0 * k as f64 / 15.0))
            .collect();
        for &phi in &phis {
            let w = spec.window(phi)?;
            let s_max = 1.2 * w.bridge.s_upper;
            let n = 600;
            for &eps in &eps_grid {
                let gas = GasModel::new(spec.gamma, eps, spec.q_inf)?;
                let e2 = eps * eps;
                for k in 0..=n {
                    let q2 = s_max * k as f64 / n as f64;
                    let (_, d_lambda) = w.q_hat(q2);
                    let rho = truncated_density(q2, &w, &gas)?;
                    let c2 = gas.pressure_slope(rho);
                    let radial = rho * (1.0 - e2 * d_lambda * q2 / c2);
                    lo = lo.min(radial.min(rho));
                    hi = hi.max(radial.max(rho));
                    if q2 <= w.bridge.s_lower {
                        drift = drift.max(2.0 * e2 * rho / c2);
                    }
                }
            }
            // Bridge contribution of q̂_φ at the reference ε.
            let gas = GasModel::new(spec.gamma, spec.eps_reference, spec.q_inf)?;
            let e2 = spec.eps_reference * spec.eps_reference;
            for k in 1..8 {
                let q2 = w.bridge.s_lower + (w.bridge.s_upper - w.bridge.s_lower) * k as f64 / 8.0;
                let cut = spec.cutoff_q(q2, phi)?;
                let rho = truncated_density(q2, &w, &gas)?;
                drift = drift.max(e2 * rho * cut.d_phi.abs() / gas.pressure_slope(rho));
            }
        }
        if !(lo > 0.0) {
            return Err(Error::Config(format!(
                "cutoff (theta = {}, eps0 = {}) loses ellipticity: min eigenvalue {lo}",
                spec.theta, spec.eps0
            )));
        }
        Ok(Self {
            lambda_min: 0.99 * lo,
            lambda_max: 1.01 * hi,
            drift: 1.01 * drift,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roots::bisect;
    use approx::assert_relative_eq;

    fn air(eps: f64) -> GasModel {
        GasModel::new(1.4, eps, 1.0).unwrap()
    }

    /// Oracle: `∫₁^ρ p̃′(s)/s ds` by composite Simpson.
    fn enthalpy_quadrature(rho: f64, gamma: f64) -> f64 {
        let n = 20_000;
        let h = (rho - 1.0) / n as f64;
        let f = |s: f64| gamma * s.powf(gamma - 1.0) / s;
        let mut sum = f(1.0) + f(rho);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * f(1.0 + k as f64 * h);
        }
        sum * h / 3.0
    }

    #[test]
    fn enthalpy_matches_quadrature() {
        assert_eq!(enthalpy(1.0, &air(0.1)).unwrap(), 0.0);
        let h = enthalpy(2.0, &air(0.1)).unwrap();
        assert_relative_eq!(h, enthalpy_quadrature(2.0, 1.4), max_relative = 1e-10);
        assert_relative_eq!(h, 1.119, epsilon = 1e-3);
        let iso = GasModel::new(1.0, 0.1, 1.0).unwrap();
        let h1 = enthalpy(2.0, &iso).unwrap();
        assert_relative_eq!(h1, enthalpy_quadrature(2.0, 1.0), max_relative = 1e-10);
        assert_relative_eq!(h1, 2f64.ln(), max_relative = 1e-14);
        assert!(enthalpy(0.0, &iso).is_err());
        assert!(enthalpy(-1.0, &air(0.1)).is_err());
    }

    #[test]
    fn enthalpy_inverse_matches_bisection() {
        let gas = air(0.1);
        assert_relative_eq!(enthalpy_inv(0.0, &gas).unwrap(), 1.0, max_relative = 1e-15);
        let oracle = bisect(|r| enthalpy(r, &gas).unwrap() - 0.005, 0.5, 2.0, 1e-13).unwrap();
        let got = enthalpy_inv(0.005, &gas).unwrap();
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
        assert_relative_eq!(got, 1.003575, epsilon = 1e-6);
        let iso = GasModel::new(1.0, 0.1, 1.0).unwrap();
        assert_relative_eq!(enthalpy_inv(2f64.ln(), &iso).unwrap(), 2.0, max_relative = 1e-12);
        assert!(enthalpy_inv(-3.500_000_1, &gas).is_err());
        assert!(enthalpy_inv(-4.0, &gas).is_err());
    }

    #[test]
    fn closed_form_excess_agrees_with_root_finder() {
        for gamma in [1.0, 1.4, 5.0 / 3.0] {
            let gas = GasModel::new(gamma, 0.1, 1.0).unwrap();
            for y in [-0.9, -0.1, -1e-6, 1e-9, 0.3, 2.0] {
                let a = 1.0 + gas.density_excess(y).unwrap();
                let b = enthalpy_inv(y, &gas).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn enthalpy_round_trip() {
        for gamma in [1.0, 1.4, 5.0 / 3.0] {
            let gas = GasModel::new(gamma, 0.2, 1.0).unwrap();
            gas.check_pressure_law().unwrap();
            for k in 0..=60 {
                let rho = 0.5 + 1.5 * k as f64 / 60.0;
                let back = enthalpy_inv(enthalpy(rho, &gas).unwrap(), &gas).unwrap();
                assert_relative_eq!(back, rho, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn density_from_speed_examples() {
        let gas = air(0.1);
        assert_eq!(density_from_speed(1.0, &ForceValue::ZERO, &gas).unwrap(), 1.0);
        let at_rest = density_from_speed(0.0, &ForceValue::ZERO, &gas).unwrap();
        let oracle = bisect(|r| enthalpy(r, &gas).unwrap() - 0.005, 0.5, 2.0, 1e-13).unwrap();
        assert_relative_eq!(at_rest, oracle, max_relative = 1e-12);
        let forced = density_from_speed(1.0, &ForceValue::potential(0.5), &gas).unwrap();
        assert_relative_eq!(forced, oracle, max_relative = 1e-12);
        let err = density_from_speed(1e6, &ForceValue::ZERO, &gas).unwrap_err();
        assert!(err.to_string().contains("1000000"));
    }

    #[test]
    fn density_monotonicity() {
        let gas = air(0.3);
        let h = 1e-4;
        for i in 0..20 {
            let q2 = 0.2 * i as f64;
            for j in -5..=5 {
                let phi = 0.1 * j as f64;
                let f = ForceValue::potential(phi);
                let r = density_from_speed(q2, &f, &gas).unwrap();
                let r_q = density_from_speed(q2 + h, &f, &gas).unwrap();
                let r_phi = density_from_speed(q2, &ForceValue::potential(phi + h), &gas).unwrap();
                assert!(r_q < r, "not decreasing in q2");
                assert!(r_phi > r, "not increasing in phi");
            }
        }
    }

    #[test]
    fn mach_examples() {
        assert_eq!(mach(0.0, 1.0, &air(0.1)).unwrap(), 0.0);
        let m = mach(1.0, 1.0, &air(0.1)).unwrap();
        let independent = 0.1 * 1.0 * 1f64.powf((1.0 - 1.4) / 2.0) / 1.4f64.sqrt();
        assert_relative_eq!(m, independent, max_relative = 1e-15);
        assert_relative_eq!(m, 0.08452, epsilon = 1e-5);
        let iso = GasModel::new(1.0, 0.1, 1.0).unwrap();
        assert_relative_eq!(mach(1.0, 1.0, &iso).unwrap(), 0.1, max_relative = 1e-15);
        assert!(mach(-1.0, 1.0, &iso).is_err());
    }

    #[test]
    fn critical_density_limits() {
        // ε → 0: level 0.
        let gas = air(1e-9);
        let rho = critical_density(&ForceValue::ZERO, &gas).unwrap();
        let closed = (2.0f64 / 2.4).powf(1.0 / 0.4);
        let oracle = bisect(|r| gas.sonic_level(r), 0.1, 1.0, 1e-14).unwrap();
        assert_relative_eq!(rho, closed, max_relative = 1e-10);
        assert_relative_eq!(rho, oracle, max_relative = 1e-10);
        assert_relative_eq!(rho, 0.63394, epsilon = 1e-5);

        let gas = air(0.1);
        let rho = critical_density(&ForceValue::ZERO, &gas).unwrap();
        let oracle = bisect(|r| gas.sonic_level(r) - 0.005, 0.1, 1.0, 1e-14).unwrap();
        assert_relative_eq!(rho, oracle, max_relative = 1e-12);

        let iso = GasModel::new(1.0, 1e-9, 1.0).unwrap();
        let rho = critical_density(&ForceValue::ZERO, &iso).unwrap();
        assert_relative_eq!(rho, (-0.5f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn critical_speed_examples() {
        let gas = air(1e-8);
        let scaled = gas.epsilon * critical_speed(&ForceValue::ZERO, &gas).unwrap();
        assert_relative_eq!(scaled, (2.0f64 * 1.4 / 2.4).sqrt(), max_relative = 1e-8);
        assert_relative_eq!(scaled, 1.08012, epsilon = 1e-5);

        let gas = air(0.5);
        let rho = bisect(|r| gas.sonic_level(r) - 0.125, 0.1, 1.0, 1e-14).unwrap();
        let expected = (1.4 * rho.powf(0.4)).sqrt() / 0.5;
        assert_relative_eq!(
            critical_speed(&ForceValue::ZERO, &gas).unwrap(),
            expected,
            max_relative = 1e-10
        );
        assert!(
            critical_speed(&ForceValue::ZERO, &air(0.1)).unwrap()
                > critical_speed(&ForceValue::ZERO, &air(0.5)).unwrap()
        );
    }

    #[test]
    fn theta_speed_round_trip_and_ordering() {
        let gas = air(0.1);
        let rho = density_from_speed(1.0, &ForceValue::ZERO, &gas).unwrap();
        let theta = mach(1.0, rho, &gas).unwrap();
        let q = theta_speed(theta, &ForceValue::ZERO, &gas).unwrap();
        assert_relative_eq!(q, 1.0, max_relative = 1e-12);

        // Bisection oracle on q ↦ M(q) for θ = 0.5.
        let q_cr = critical_speed(&ForceValue::ZERO, &gas).unwrap();
        let m = |q: f64| {
            let r = density_from_speed(q * q, &ForceValue::ZERO, &gas).unwrap();
            mach(q, r, &gas).unwrap() - 0.5
        };
        let oracle = bisect(m, 0.0, q_cr, 1e-14).unwrap();
        let q = theta_speed(0.5, &ForceValue::ZERO, &gas).unwrap();
        assert_relative_eq!(q, oracle, max_relative = 1e-11);
        assert!(q < q_cr);

        let q3 = theta_speed(0.3, &ForceValue::ZERO, &gas).unwrap();
        let q6 = theta_speed(0.6, &ForceValue::ZERO, &gas).unwrap();
        assert!(q3 < q6 && q6 < q_cr);
        let near_sonic = theta_speed(1.0 - 1e-9, &ForceValue::ZERO, &gas).unwrap();
        assert_relative_eq!(near_sonic, q_cr, max_relative = 1e-6);
    }

    #[test]
    fn theta_speed_matches_closed_form() {
        // With c² = p̃′(ρ) and ε²q² = θ²c², Bernoulli gives
        // c² = (B + γ/(γ−1)) / (θ²/2 + 1/(γ−1)), B = ε²(q∞²/2 + φ).
        let (gamma, theta, phi) = (1.4f64, 0.7f64, 0.2f64);
        let gas = GasModel::new(gamma, 0.3, 1.2).unwrap();
        let b = 0.09 * (0.5 * 1.44 + phi);
        let c2 = (b + gamma / (gamma - 1.0)) / (0.5 * theta * theta + 1.0 / (gamma - 1.0));
        let q = theta * c2.sqrt() / 0.3;
        let got = theta_speed(theta, &ForceValue::potential(phi), &gas).unwrap();
        assert_relative_eq!(got, q, max_relative = 1e-12);
    }

    fn default_spec(phis: &[f64]) -> CutoffSpec {
        CutoffSpec::new(0.7, 0.45, &air(0.1), phis).unwrap()
    }

    #[test]
    fn cutoff_branches() {
        let spec = default_spec(&[0.0]);
        assert!(spec.q_lower > 1.0 && spec.q_lower < spec.q_upper);
        let c = spec.cutoff_q(0.25, 0.0).unwrap();
        assert_eq!((c.q_hat, c.d_lambda, c.d_phi), (0.25, 1.0, -2.0));
        let spec_f = default_spec(&[-0.2, 0.1, 0.2]);
        let c = spec_f.cutoff_q(0.25, 0.1).unwrap();
        assert_relative_eq!(c.q_hat, 0.05, max_relative = 1e-14);
        assert_eq!((c.d_lambda, c.d_phi), (1.0, -2.0));
        let big = 4.0 * spec.q_upper * spec.q_upper;
        let c = spec.cutoff_q(big, 0.0).unwrap();
        assert_eq!((c.q_hat, c.d_lambda, c.d_phi), (spec.saturation, 0.0, 0.0));
    }

    #[test]
    fn cutoff_is_c1_and_monotone() {
        let spec = default_spec(&[-0.1, 0.0, 0.1]);
        for phi in [-0.1, 0.0, 0.1] {
            let w = spec.window(phi).unwrap();
            let [a, b] = w.breakpoints();
            for s in [a, b] {
                let h = 1e-7 * s;
                let (vl, dl) = w.q_hat(s - h);
                let (vr, dr) = w.q_hat(s + h);
                assert!((vr - vl).abs() < 1e-5 * s);
                assert!((dr - dl).abs() < 1e-5);
            }
            let n = 1000;
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=n {
                let s = 1.5 * b * k as f64 / n as f64;
                let (v, d) = w.q_hat(s);
                assert!(v >= prev - 1e-14 && d >= -1e-14);
                prev = v;
                // Derivative matches finite differences.
                let h = 1e-6;
                if s > h {
                    let fd = (w.q_hat(s + h).0 - w.q_hat(s - h).0) / (2.0 * h);
                    assert!((fd - d).abs() < 1e-5, "slope mismatch at {s}: {fd} vs {d}");
                }
            }
        }
    }

    #[test]
    fn truncated_density_examples_and_bounds() {
        let gas = air(0.1);
        let spec = default_spec(&[0.0]);
        let w = spec.window(0.0).unwrap();
        assert_eq!(truncated_density(1.0, &w, &gas).unwrap(), 1.0);
        let r0 = truncated_density(0.0, &w, &gas).unwrap();
        assert_relative_eq!(r0, enthalpy_inv(0.005, &gas).unwrap(), max_relative = 1e-12);
        let far = 10.0 * w.bridge.s_upper;
        assert_eq!(
            truncated_density(far, &w, &gas).unwrap(),
            truncated_density(2.0 * far, &w, &gas).unwrap()
        );
        // Coincides with the untruncated density on the identity branch.
        let forced = default_spec(&[-0.3, 0.3]);
        for phi in [-0.3, 0.0, 0.3] {
            let w = forced.window(phi).unwrap();
            for k in 0..50 {
                let q2 = w.bridge.s_lower * k as f64 / 49.0;
                let a = truncated_density(q2, &w, &gas).unwrap();
                let b = density_from_speed(q2, &ForceValue::potential(phi), &gas).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-15);
            }
            let (lo, hi) = density_bounds(0.3, &gas).unwrap();
            for k in 0..200 {
                let q2 = 3.0 * w.bridge.s_upper * k as f64 / 199.0;
                let r = truncated_density(q2, &w, &gas).unwrap();
                assert!(lo < r && r <= hi, "{lo} < {r} <= {hi}");
            }
        }
    }

    #[test]
    fn energy_density_examples() {
        let spec = default_spec(&[0.0]);
        let w = spec.window(0.0).unwrap();
        let gas = air(0.1);
        assert_eq!(energy_density_g(0.0, &w, &gas).unwrap(), 0.0);
        let tiny = air(1e-6);
        assert_relative_eq!(energy_density_g(1.0, &w, &tiny).unwrap(), 0.5, max_relative = 1e-10);
        // 10⁶-point trapezoid oracle.
        let g = energy_density_g(1.0, &w, &gas).unwrap();
        let n = 1_000_000;
        let h = 1.0 / n as f64;
        let mut trap = 0.5 * (truncated_density(0.0, &w, &gas).unwrap()
            + truncated_density(1.0, &w, &gas).unwrap());
        for k in 1..n {
            trap += truncated_density(k as f64 * h, &w, &gas).unwrap();
        }
        assert_relative_eq!(g, 0.5 * trap * h, max_relative = 1e-11);
        // ∂G/∂Λ = ρ̂/2, also across the bridge.
        let gas = air(0.4);
        for lam in [0.3, 1.0, w.bridge.s_lower + 0.1, w.bridge.s_upper + 0.2] {
            let h = 1e-4;
            let fd = (energy_density_g(lam + h, &w, &gas).unwrap()
                - energy_density_g(lam - h, &w, &gas).unwrap())
                / (2.0 * h);
            let rho = truncated_density(lam, &w, &gas).unwrap();
            assert!((fd - 0.5 * rho).abs() < 1e-6, "{fd} vs {}", 0.5 * rho);
        }
    }

    #[test]
    fn rescaled_density_limit() {
        // (ρ̂ − 1)/ε² → (q∞² − q² + 2φ)/(2h̃′(1)) with h̃′(1) = γ.
        let spec = default_spec(&[0.2]);
        let w = spec.window(0.2).unwrap();
        let (q2, phi) = (0.7, 0.2);
        let limit = (1.0 - q2 + 2.0 * phi) / (2.0 * 1.4);
        let mut prev_err = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let gas = air(eps);
            let v = truncated_excess(q2, &w, &gas).unwrap() / (eps * eps);
            let err = (v - limit).abs();
            assert!(err < prev_err);
            prev_err = err;
        }
        assert!(prev_err < 1e-7);
        // Integral representation oracle at ε = 0.1.
        let gas = air(0.1);
        let s = 0.5 * (1.0 - q2 + 2.0 * phi);
        let rule = GaussRule::new(8);
        let integral = rule.integrate(0.0, 1.0, |t| {
            let rho = enthalpy_inv(t * 0.01 * s, &gas).unwrap();
            gas.inverse_enthalpy_slope(rho)
        });
        let v = truncated_excess(q2, &w, &gas).unwrap() / 0.01;
        assert_relative_eq!(v, s * integral, max_relative = 1e-12);
    }

    #[test]
    fn elliptic_coeff_examples() {
        let spec = default_spec(&[0.0]);
        let gas = air(0.1);
        let w = spec.window(0.0).unwrap();
        let c = elliptic_coeffs([0.0; 3], 0.0, [0.0; 3], &spec, &gas).unwrap();
        let r0 = truncated_density(0.0, &w, &gas).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { r0 } else { 0.0 };
                assert_relative_eq!(c.a[i][j], expect, epsilon = 1e-15);
            }
            assert_eq!(c.b[i], 0.0);
        }
        let c = elliptic_coeffs([1.0, 0.0, 0.0], 0.0, [0.0; 3], &spec, &gas).unwrap();
        let m = nalgebra::Matrix3::from_fn(|i, j| c.a[i][j]);
        let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let expect = 1.0 - 0.01 / 1.4;
        assert_relative_eq!(eig[0], expect, max_relative = 1e-13);
        assert_relative_eq!(eig[1], 1.0, max_relative = 1e-13);
        assert_relative_eq!(eig[2], 1.0, max_relative = 1e-13);

        let fast = 2.0 * spec.q_upper;
        let c = elliptic_coeffs([fast, 0.0], 0.0, [0.0; 2], &spec, &gas).unwrap();
        let rho = truncated_density(fast * fast, &w, &gas).unwrap();
        assert_eq!(c.a, [[rho, 0.0], [0.0, rho]]);
    }

    #[test]
    fn ellipticity_bounds_hold_on_random_states() {
        use rand::{Rng, SeedableRng};
        let spec = CutoffSpec::new(0.7, 0.45, &air(0.1), &[-0.05, 0.05]).unwrap();
        let bounds = EllipticityBounds::compute(&spec, 0.05).unwrap();
        assert!(bounds.lambda_min > 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let eps = rng.gen_range(1e-3..0.45);
            let gas = air(eps);
            let phi = rng.gen_range(-0.05..0.05);
            let speed = rng.gen_range(0.0..1.3 * spec.q_upper);
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let u = [speed * ang.cos(), speed * ang.sin()];
            let gf = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let c = elliptic_coeffs(u, phi, gf, &spec, &gas).unwrap();
            let xi = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n2 = xi[0] * xi[0] + xi[1] * xi[1];
            let quad: f64 = (0..2).map(|i| (0..2).map(|j| c.a[i][j] * xi[i] * xi[j]).sum::<f64>()).sum();
            assert!(quad >= bounds.lambda_min * n2 && quad <= bounds.lambda_max * n2);
            assert!((c.a[0][1] - c.a[1][0]).abs() < 1e-15);
            let bxi = (c.b[0] * xi[0] + c.b[1] * xi[1]).abs();
            let gnorm = (gf[0] * gf[0] + gf[1] * gf[1]).sqrt();
            assert!(bxi <= bounds.drift * gnorm * n2.sqrt() + 1e-15);
        }
    }

    #[test]
    fn cutoff_grid_is_monotone_and_attains_infimum_at_eps0() {
        let spec = default_spec(&[0.0]);
        let inf = spec.grid_infimum(spec.theta, 0.0).unwrap();
        assert_relative_eq!(inf, spec.q_lower, max_relative = 1e-14);
        assert_eq!(spec.eps_grid().len(), EPS_GRID_POINTS);
    }
}
