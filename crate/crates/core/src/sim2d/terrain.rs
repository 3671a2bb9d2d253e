//! Terrain parameters and heightfield generation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    RoughTerrain,
    GapCrosser,
}

/// Terrain-generation parameters of one training environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub env_kind: EnvKind,
    pub max_height: f64,
    pub height_variance: f64,
    pub gap_width: f64,
}

/// Bounds on the tunable environment parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvBounds {
    pub max_height: f64,
    pub variance_min: f64,
    pub variance_max: f64,
    pub gap_min: f64,
    pub gap_max: f64,
}

impl Default for EnvBounds {
    fn default() -> Self {
        Self {
            max_height: 2.4,
            variance_min: 2.4,
            variance_max: 7.2,
            gap_min: 0.5,
            gap_max: 3.0,
        }
    }
}

impl EnvBounds {
    /// Lower and upper bound of each tunable parameter of `kind`, in the
    /// order used by [`EnvParams::tunable`].
    pub fn ranges(&self, kind: EnvKind) -> Vec<(f64, f64)> {
        match kind {
            EnvKind::RoughTerrain => vec![
                (0.0, self.max_height),
                (self.variance_min, self.variance_max),
            ],
            EnvKind::GapCrosser => vec![(self.gap_min, self.gap_max)],
        }
    }
}

impl EnvParams {
    pub fn rough(max_height: f64, height_variance: f64) -> Self {
        Self {
            env_kind: EnvKind::RoughTerrain,
            max_height,
            height_variance,
            gap_width: 0.0,
        }
    }

    pub fn gap(gap_width: f64) -> Self {
        Self {
            env_kind: EnvKind::GapCrosser,
            max_height: 0.0,
            height_variance: 0.0,
            gap_width,
        }
    }

    /// The easy starting corner: minimum variance and half the height cap,
    /// or the narrowest gap.
    pub fn easy(kind: EnvKind, bounds: &EnvBounds) -> Self {
        match kind {
            EnvKind::RoughTerrain => Self::rough(0.5 * bounds.max_height, bounds.variance_min),
            EnvKind::GapCrosser => Self::gap(bounds.gap_min),
        }
    }

    pub fn validate(&self, bounds: &EnvBounds) -> Result<(), SimError> {
        let bad = |name: &str, v: f64| SimError::InvalidParams(format!("{name} = {v} out of bounds"));
        match self.env_kind {
            EnvKind::RoughTerrain => {
                if !(0.0..=bounds.max_height).contains(&self.max_height) {
                    return Err(bad("max_height", self.max_height));
                }
                if !(bounds.variance_min..=bounds.variance_max).contains(&self.height_variance) {
                    return Err(bad("height_variance", self.height_variance));
                }
            }
            EnvKind::GapCrosser => {
                if !(bounds.gap_min..=bounds.gap_max).contains(&self.gap_width) {
                    return Err(bad("gap_width", self.gap_width));
                }
            }
        }
        Ok(())
    }

    /// The parameters the environment policy may change.
    pub fn tunable(&self) -> Vec<f64> {
        match self.env_kind {
            EnvKind::RoughTerrain => vec![self.max_height, self.height_variance],
            EnvKind::GapCrosser => vec![self.gap_width],
        }
    }

    pub fn with_tunable(&self, values: &[f64]) -> Self {
        let mut out = *self;
        match self.env_kind {
            EnvKind::RoughTerrain => {
                out.max_height = values[0];
                out.height_variance = values[1];
            }
            EnvKind::GapCrosser => out.gap_width = values[0],
        }
        out
    }

    pub fn clipped(&self, bounds: &EnvBounds) -> Self {
        let vals: Vec<f64> = self
            .tunable()
            .iter()
            .zip(bounds.ranges(self.env_kind))
            .map(|(v, (lo, hi))| v.clamp(lo, hi))
            .collect();
        self.with_tunable(&vals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub x_spacing: f64,
    /// Mixture components per 50 world units of span.
    pub components_per_50: f64,
    /// Component spread is `height_variance * U[sigma_lo, sigma_hi]`.
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub gap_period: f64,
    pub gap_base_height: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            x_min: -60.0,
            x_max: 60.0,
            x_spacing: 0.1,
            components_per_50: 8.0,
            sigma_lo: 0.25,
            sigma_hi: 0.5,
            gap_period: 6.0,
            gap_base_height: 0.2,
        }
    }
}

/// Periodic bottomless gaps: gap `k` covers `[k*period + offset, k*period + offset + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapLayout {
    pub period: f64,
    pub width: f64,
    pub offset: f64,
}

impl GapLayout {
    pub fn contains(&self, x: f64) -> bool {
        (x - self.offset).rem_euclid(self.period) < self.width
    }
}

/// Uniformly sampled terrain heights, linearly interpolated between samples
/// and held constant beyond the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heightfield {
    pub x_start: f64,
    pub x_spacing: f64,
    pub base_height: f64,
    pub samples: Vec<f64>,
    #[serde(default)]
    pub gaps: Option<GapLayout>,
}

impl Heightfield {
    pub fn flat(height: f64, cfg: &TerrainConfig) -> Self {
        let n = ((cfg.x_max - cfg.x_min) / cfg.x_spacing).round() as usize + 1;
        Self {
            x_start: cfg.x_min,
            x_spacing: cfg.x_spacing,
            base_height: height,
            samples: vec![height; n],
            gaps: None,
        }
    }

    pub fn x_end(&self) -> f64 {
        self.x_start + self.x_spacing * (self.samples.len().saturating_sub(1)) as f64
    }

    pub fn is_gap(&self, x: f64) -> bool {
        self.gaps.is_some_and(|g| g.contains(x))
    }

    fn cell(&self, x: f64) -> (usize, f64) {
        let n = self.samples.len();
        let u = ((x - self.x_start) / self.x_spacing).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n.saturating_sub(2));
        (i, u - i as f64)
    }

    /// Surface height at `x`, ignoring gaps.
    pub fn surface(&self, x: f64) -> f64 {
        if self.samples.len() == 1 {
            return self.samples[0];
        }
        let (i, t) = self.cell(x);
        self.samples[i] * (1.0 - t) + self.samples[i + 1] * t
    }

    /// Surface height, or `None` over a gap.
    pub fn height(&self, x: f64) -> Option<f64> {
        if self.is_gap(x) {
            None
        } else {
            Some(self.surface(x))
        }
    }

    pub fn slope(&self, x: f64) -> f64 {
        if self.samples.len() < 2 || x <= self.x_start || x >= self.x_end() {
            return 0.0;
        }
        let (i, _) = self.cell(x);
        (self.samples[i + 1] - self.samples[i]) / self.x_spacing
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, h| m.max(h.abs()))
    }

    pub fn max_over(&self, lo: f64, hi: f64) -> f64 {
        let mut m = self.surface(lo).max(self.surface(hi));
        let last = self.samples.len() as f64 - 1.0;
        let i0 = ((lo - self.x_start) / self.x_spacing).ceil().clamp(0.0, last) as usize;
        let i1 = ((hi - self.x_start) / self.x_spacing).floor().clamp(0.0, last) as usize;
        if i0 <= i1 {
            for h in &self.samples[i0..=i1] {
                m = m.max(*h);
            }
        }
        m
    }

    /// Standard deviation of the samples.
    pub fn roughness(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        (self.samples.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Builds a heightfield for `params`. Rough terrain is a Gaussian mixture
/// with amplitudes in `[0, max_height]`, rescaled if overlapping components
/// would exceed `max_height`; gap terrain is flat with periodic gaps.
pub fn generate_terrain(
    params: &EnvParams,
    seed: u64,
    cfg: &TerrainConfig,
    bounds: &EnvBounds,
) -> Result<Heightfield, SimError> {
    params.validate(bounds)?;
    match params.env_kind {
        EnvKind::RoughTerrain => {
            let mut hf = Heightfield::flat(0.0, cfg);
            if params.max_height == 0.0 {
                return Ok(hf);
            }
            let mut rng = rng_from_seed(seed);
            let span = cfg.x_max - cfg.x_min;
            let k = ((cfg.components_per_50 * span / 50.0).round() as usize).max(1);
            let comps: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    let mu = rng.random_range(cfg.x_min..cfg.x_max);
                    let sigma = params.height_variance * rng.random_range(cfg.sigma_lo..cfg.sigma_hi);
                    let amp = rng.random_range(0.0..params.max_height);
                    (mu, sigma, amp)
                })
                .collect();
            for (i, h) in hf.samples.iter_mut().enumerate() {
                let x = cfg.x_min + i as f64 * cfg.x_spacing;
                *h = comps
                    .iter()
                    .map(|&(mu, sigma, amp)| amp * (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp())
                    .sum();
            }
            let peak = hf.max_abs();
            if peak > params.max_height {
                let scale = params.max_height / peak;
                for h in &mut hf.samples {
                    *h = (*h * scale).min(params.max_height);
                }
            }
            Ok(hf)
        }
        EnvKind::GapCrosser => {
            let mut hf = Heightfield::flat(cfg.gap_base_height, cfg);
            hf.gaps = Some(GapLayout {
                period: cfg.gap_period,
                width: params.gap_width,
                offset: 0.5 * (cfg.gap_period - params.gap_width),
            });
            Ok(hf)
        }
    }
}

/// Difficulty scalar reported for an environment: sample standard deviation
/// for rough terrain, gap width for the gap crosser.
pub fn roughness(params: &EnvParams, seed: u64, cfg: &TerrainConfig, bounds: &EnvBounds) -> f64 {
    match params.env_kind {
        EnvKind::GapCrosser => params.gap_width,
        EnvKind::RoughTerrain => generate_terrain(params, seed, cfg, bounds)
            .map(|h| h.roughness())
            .unwrap_or(f64::NAN),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> (TerrainConfig, EnvBounds) {
        (TerrainConfig::default(), EnvBounds::default())
    }

    #[test]
    fn zero_height_is_flat_zero() {
        let (c, b) = cfg();
        for var in [2.4, 5.0, 7.2] {
            let hf = generate_terrain(&EnvParams::rough(0.0, var), 3, &c, &b).unwrap();
            assert!(hf.samples.iter().all(|&h| h == 0.0));
        }
    }

    #[test]
    fn same_seed_same_field() {
        let (c, b) = cfg();
        let p = EnvParams::rough(1.7, 4.0);
        assert_eq!(
            generate_terrain(&p, 11, &c, &b).unwrap(),
            generate_terrain(&p, 11, &c, &b).unwrap()
        );
        assert_ne!(
            generate_terrain(&p, 11, &c, &b).unwrap(),
            generate_terrain(&p, 12, &c, &b).unwrap()
        );
    }

    #[test]
    fn out_of_bounds_rejected() {
        let (c, b) = cfg();
        assert!(generate_terrain(&EnvParams::rough(2.5, 3.0), 0, &c, &b).is_err());
        assert!(generate_terrain(&EnvParams::rough(1.0, 7.3), 0, &c, &b).is_err());
        assert!(generate_terrain(&EnvParams::gap(3.1), 0, &c, &b).is_err());
    }

    #[test]
    fn gaps_have_exact_width_and_period() {
        let (c, b) = cfg();
        let hf = generate_terrain(&EnvParams::gap(1.3), 0, &c, &b).unwrap();
        assert!(hf.samples.iter().all(|&h| h == 0.2));
        let g = hf.gaps.unwrap();
        assert_eq!(g.period, 6.0);
        assert!(!hf.is_gap(0.0));
        // scan one period at fine resolution and measure the gap run
        let step = 1e-4;
        let mut run = 0usize;
        let mut x = 0.0;
        while x < 6.0 {
            if hf.is_gap(x) {
                run += 1;
            }
            x += step;
        }
        assert!((run as f64 * step - 1.3).abs() < 2.0 * step);
        assert!(hf.height(g.offset + 0.5 * g.width).is_none());
        assert!(hf.is_gap(g.offset + 6.0 * 3.0 + 0.01));
    }

    #[test]
    fn interpolation_and_slope() {
        let mut hf = Heightfield::flat(0.0, &TerrainConfig::default());
        hf.samples[1] = 1.0;
        let x = hf.x_start + 0.05;
        assert!((hf.surface(x) - 0.5).abs() < 1e-12);
        assert!((hf.slope(x) - 10.0).abs() < 1e-9);
        assert_eq!(hf.surface(-1e6), 0.0);
    }
}
