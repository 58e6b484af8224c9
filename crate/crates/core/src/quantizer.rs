//! Level grids for membrane-state quantization.
//!
//! A [`QuantGrid`] is an explicit, strictly increasing list of `2^n` levels.
//! Uniform grids space them evenly over `[u_min, u_max]`. Exponential grids
//! split the levels around the firing threshold and space each side
//! geometrically, so the finest gaps sit on either side of `theta`.
//! [`quantize`] clips and snaps to the nearest level; [`quantize_var`]
//! records the same forward on a graph with an identity (straight-through)
//! backward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BackwardRule, Graph, Tensor, Var};

/// Width used to open up a degenerate `u_min == u_max` range.
pub const RANGE_EPS: f32 = 1e-6;

pub const MAX_BITS: u8 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("n_bits {0} outside 1..={MAX_BITS}")]
    BitsOutOfRange(u8),
    #[error("invalid range [{u_min}, {u_max}]")]
    InvalidRange { u_min: f32, u_max: f32 },
    #[error("threshold {theta} not strictly inside ({u_min}, {u_max})")]
    ThresholdOutsideRange { theta: f32, u_min: f32, u_max: f32 },
    #[error("geometric ratio {0} must be > 1")]
    InvalidRatio(f32),
    #[error("levels per side ({below} below, {above} above) must both be >= 1 and sum to {total}")]
    InvalidSplit { below: usize, above: usize, total: usize },
    #[error("grid levels collapse in f32 (levels {index} and {next} are equal or decreasing)")]
    DegenerateGrid { index: usize, next: usize },
    #[error("observer has no bounds yet")]
    NoBounds,
    #[error("cannot observe an empty tensor")]
    EmptyInput,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Uniform,
    #[serde(alias = "exp")]
    Exponential,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Uniform => "uniform",
            Scheme::Exponential => "exponential",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" | "uni" => Ok(Scheme::Uniform),
            "exponential" | "exp" => Ok(Scheme::Exponential),
            other => Err(format!("unknown scheme '{other}'")),
        }
    }
}

/// Geometric spacing around the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpSpacing {
    pub theta: f32,
    pub ratio_below: f32,
    pub ratio_above: f32,
    /// Number of levels strictly below `theta`; the rest sit above it.
    pub levels_below: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrid {
    levels: Vec<f32>,
    n_bits: u8,
    scheme: Scheme,
    u_min: f32,
    u_max: f32,
    spacing: Option<ExpSpacing>,
}

/// Default geometric ratio for an exponential grid with `n_bits`.
///
/// 2.0 up to 4 bits. Wider grids use `2^(8/m)` with `m = 2^(n-1)` levels per
/// side, which caps the finest-to-widest span of each side at 2^8 so that the
/// levels stay distinct in `f32`.
pub fn default_ratio(n_bits: u8) -> f32 {
    let m = 2f64.powi(n_bits.saturating_sub(1) as i32);
    2f64.powf(8.0 / m).min(2.0) as f32
}

fn check_bits(n_bits: u8) -> Result<usize, QuantError> {
    if !(1..=MAX_BITS).contains(&n_bits) {
        return Err(QuantError::BitsOutOfRange(n_bits));
    }
    Ok(1usize << n_bits)
}

fn check_range(u_min: f32, u_max: f32) -> Result<(), QuantError> {
    if !(u_min.is_finite() && u_max.is_finite() && u_min < u_max) {
        return Err(QuantError::InvalidRange { u_min, u_max });
    }
    Ok(())
}

fn check_increasing(levels: &[f32]) -> Result<(), QuantError> {
    match levels.windows(2).position(|w| !(w[0] < w[1])) {
        Some(i) => Err(QuantError::DegenerateGrid { index: i, next: i + 1 }),
        None => Ok(()),
    }
}

/// Evenly spaced levels `u_min + k * (u_max - u_min) / (2^n - 1)`.
pub fn build_uniform_grid(n_bits: u8, u_min: f32, u_max: f32) -> Result<QuantGrid, QuantError> {
    let count = check_bits(n_bits)?;
    check_range(u_min, u_max)?;
    let (lo, hi) = (u_min as f64, u_max as f64);
    let step = (hi - lo) / (count - 1) as f64;
    let mut levels: Vec<f32> = (0..count).map(|k| (lo + k as f64 * step) as f32).collect();
    levels[0] = u_min;
    levels[count - 1] = u_max;
    check_increasing(&levels)?;
    Ok(QuantGrid {
        levels,
        n_bits,
        scheme: Scheme::Uniform,
        u_min,
        u_max,
        spacing: None,
    })
}

/// Threshold-centred grid with `2^(n-1)` geometric levels on each side.
pub fn build_exponential_grid(
    n_bits: u8,
    u_min: f32,
    u_max: f32,
    theta: f32,
    ratio: f32,
) -> Result<QuantGrid, QuantError> {
    let count = check_bits(n_bits)?;
    build_exponential_grid_with(
        n_bits,
        u_min,
        u_max,
        ExpSpacing {
            theta,
            ratio_below: ratio,
            ratio_above: ratio,
            levels_below: count / 2,
        },
    )
}

/// General exponential grid with independent ratios and an arbitrary split.
///
/// Below: `theta - (theta - u_min) (r^k - 1)/(r^m - 1)` for `k = 1..=m`;
/// above: `theta + (u_max - theta) (r^k - 1)/(r^m - 1)`.
pub fn build_exponential_grid_with(
    n_bits: u8,
    u_min: f32,
    u_max: f32,
    spacing: ExpSpacing,
) -> Result<QuantGrid, QuantError> {
    let count = check_bits(n_bits)?;
    check_range(u_min, u_max)?;
    let ExpSpacing {
        theta,
        ratio_below,
        ratio_above,
        levels_below,
    } = spacing;
    if !(theta > u_min && theta < u_max) {
        return Err(QuantError::ThresholdOutsideRange { theta, u_min, u_max });
    }
    for r in [ratio_below, ratio_above] {
        if !(r > 1.0 && r.is_finite()) {
            return Err(QuantError::InvalidRatio(r));
        }
    }
    let below = levels_below;
    let above = count.saturating_sub(below);
    if below == 0 || above == 0 || below + above != count {
        return Err(QuantError::InvalidSplit {
            below,
            above,
            total: count,
        });
    }

    let side = |r: f32, m: usize, k: usize| -> f64 {
        let r = r as f64;
        (r.powi(k as i32) - 1.0) / (r.powi(m as i32) - 1.0)
    };
    let (t, lo, hi) = (theta as f64, u_min as f64, u_max as f64);
    let mut levels = Vec::with_capacity(count);
    for k in (1..=below).rev() {
        levels.push((t - (t - lo) * side(ratio_below, below, k)) as f32);
    }
    for k in 1..=above {
        levels.push((t + (hi - t) * side(ratio_above, above, k)) as f32);
    }
    levels[0] = u_min;
    levels[count - 1] = u_max;
    check_increasing(&levels)?;
    Ok(QuantGrid {
        levels,
        n_bits,
        scheme: Scheme::Exponential,
        u_min,
        u_max,
        spacing: Some(spacing),
    })
}

impl QuantGrid {
    /// Rebuilds a grid from stored parts, re-checking every invariant.
    pub fn from_parts(
        levels: Vec<f32>,
        n_bits: u8,
        scheme: Scheme,
        spacing: Option<ExpSpacing>,
    ) -> Result<Self, QuantError> {
        let count = check_bits(n_bits)?;
        if levels.len() != count {
            return Err(QuantError::InvalidGrid(format!(
                "{} levels for {n_bits} bits",
                levels.len()
            )));
        }
        check_increasing(&levels)?;
        if (scheme == Scheme::Exponential) != spacing.is_some() {
            return Err(QuantError::InvalidGrid(
                "exponential spacing present iff scheme is exponential".into(),
            ));
        }
        Ok(Self {
            u_min: levels[0],
            u_max: levels[count - 1],
            levels,
            n_bits,
            scheme,
            spacing,
        })
    }

    pub fn levels(&self) -> &[f32] {
        &self.levels
    }

    pub fn n_bits(&self) -> u8 {
        self.n_bits
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn u_min(&self) -> f32 {
        self.u_min
    }

    pub fn u_max(&self) -> f32 {
        self.u_max
    }

    pub fn spacing(&self) -> Option<ExpSpacing> {
        self.spacing
    }

    pub fn gaps(&self) -> Vec<f32> {
        self.levels.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn contains(&self, v: f32) -> bool {
        self.levels.binary_search_by(|l| l.total_cmp(&v)).is_ok()
    }

    /// Clip to the grid range, then snap to the nearest level. Exact
    /// midpoints go to the lower level. NaN passes through.
    #[inline]
    pub fn snap(&self, u: f32) -> f32 {
        if u.is_nan() {
            return u;
        }
        if u <= self.u_min {
            return self.u_min;
        }
        if u >= self.u_max {
            return self.u_max;
        }
        // levels[i - 1] <= u < levels[i]
        let i = self.levels.partition_point(|&l| l <= u);
        let (lo, hi) = (self.levels[i - 1], self.levels[i]);
        if u - lo > hi - u {
            hi
        } else {
            lo
        }
    }
}

/// Element-wise clip-and-snap of `u` onto `grid`.
pub fn quantize(u: &Tensor, grid: &QuantGrid) -> Tensor {
    u.map(|v| grid.snap(v))
}

/// Identity Jacobian: the upstream gradient passes through unchanged.
pub struct StraightThrough;

impl BackwardRule for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through"
    }

    fn backward(&self, upstream: &Tensor, _: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(ste_backward(upstream))]
    }
}

pub fn ste_backward(upstream: &Tensor) -> Tensor {
    upstream.clone()
}

/// Records `value` as the forward output of `input` with a straight-through
/// backward.
pub fn straight_through(graph: &mut Graph, input: Var, value: Tensor) -> Var {
    graph.custom(&[input], value, Box::new(StraightThrough))
}

/// `quantize(u, grid)` on the tape with straight-through gradient.
pub fn quantize_var(graph: &mut Graph, u: Var, grid: &QuantGrid) -> Var {
    let value = quantize(graph.value(u), grid);
    straight_through(graph, u, value)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ObserverMode {
    /// Bounds are the min/max of the current input.
    PerForward,
    /// Exponential moving average of per-input extrema.
    Running { momentum: f32 },
    Frozen,
}

/// Tracks the membrane range that sets quantization bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeObserver {
    mode: ObserverMode,
    bounds: Option<(f32, f32)>,
    expand_only: bool,
}

impl RangeObserver {
    pub fn new(mode: ObserverMode) -> Self {
        Self {
            mode,
            bounds: None,
            expand_only: false,
        }
    }

    pub fn per_forward() -> Self {
        Self::new(ObserverMode::PerForward)
    }

    pub fn running(momentum: f32) -> Self {
        Self::new(ObserverMode::Running { momentum })
    }

    /// Running observer whose bounds only ever move outward; with momentum
    /// 1.0 this is the union of all observed ranges.
    pub fn calibration() -> Self {
        Self {
            mode: ObserverMode::Running { momentum: 1.0 },
            bounds: None,
            expand_only: true,
        }
    }

    pub fn frozen(u_min: f32, u_max: f32) -> Self {
        Self {
            mode: ObserverMode::Frozen,
            bounds: Some((u_min.min(u_max), u_max.max(u_min))),
            expand_only: false,
        }
    }

    pub fn mode(&self) -> ObserverMode {
        self.mode
    }

    pub fn bounds(&self) -> Option<(f32, f32)> {
        self.bounds
    }

    pub fn freeze(&mut self) {
        self.mode = ObserverMode::Frozen;
    }

    pub fn observe(&mut self, u: &Tensor) -> Result<(f32, f32), QuantError> {
        let (lo, hi) = match self.mode {
            ObserverMode::Frozen => return self.bounds.ok_or(QuantError::NoBounds),
            _ => finite_min_max(u)?,
        };
        let next = match (self.mode, self.bounds) {
            (ObserverMode::PerForward, _) | (ObserverMode::Running { .. }, None) => (lo, hi),
            (ObserverMode::Running { momentum }, Some((blo, bhi))) => {
                let m = momentum.clamp(0.0, 1.0);
                let cand = ((1.0 - m) * blo + m * lo, (1.0 - m) * bhi + m * hi);
                if self.expand_only {
                    (cand.0.min(blo), cand.1.max(bhi))
                } else {
                    cand
                }
            }
            (ObserverMode::Frozen, _) => unreachable!(),
        };
        self.bounds = Some((next.0.min(next.1), next.1.max(next.0)));
        Ok(self.bounds.unwrap())
    }
}

fn finite_min_max(u: &Tensor) -> Result<(f32, f32), QuantError> {
    if u.numel() == 0 {
        return Err(QuantError::EmptyInput);
    }
    let mut it = u.data().iter().copied().filter(|v| v.is_finite());
    let first = it.next().ok_or(QuantError::InvalidRange {
        u_min: f32::NAN,
        u_max: f32::NAN,
    })?;
    Ok(it.fold((first, first), |(a, b), v| (a.min(v), b.max(v))))
}

/// Opens a degenerate range by `RANGE_EPS` on each side.
pub fn widen_degenerate(u_min: f32, u_max: f32) -> (f32, f32) {
    if u_max - u_min < RANGE_EPS {
        (u_min - RANGE_EPS, u_max + RANGE_EPS)
    } else {
        (u_min, u_max)
    }
}

/// What to build from observed bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_bits: u8,
    pub scheme: Scheme,
    /// `None` selects [`default_ratio`].
    #[serde(default)]
    pub ratio: Option<f32>,
    /// Levels below threshold for exponential grids; `None` is an even split.
    #[serde(default)]
    pub levels_below: Option<usize>,
}

impl GridSpec {
    pub fn new(n_bits: u8, scheme: Scheme) -> Self {
        Self {
            n_bits,
            scheme,
            ratio: None,
            levels_below: None,
        }
    }

    pub fn ratio(&self) -> f32 {
        self.ratio.unwrap_or_else(|| default_ratio(self.n_bits))
    }

    /// Builds a grid for observed bounds.
    ///
    /// Degenerate ranges are widened by `RANGE_EPS`. For exponential grids
    /// the range is then mirrored about `theta` if it does not already
    /// straddle it, since the threshold must lie strictly inside. Finally each
    /// side is widened, if needed, so that its finest gap stays a few ulps
    /// wide and the levels remain distinct in `f32`.
    pub fn build(&self, u_min: f32, u_max: f32, theta: f32) -> Result<QuantGrid, QuantError> {
        let (mut lo, mut hi) = widen_degenerate(u_min, u_max);
        let count = check_bits(self.n_bits)?;
        match self.scheme {
            Scheme::Uniform => {
                let min_width = min_span(lo, hi, theta, count - 1, 1.0);
                if hi - lo < min_width {
                    let mid = 0.5 * (lo + hi);
                    lo = mid - 0.5 * min_width;
                    hi = mid + 0.5 * min_width;
                }
                build_uniform_grid(self.n_bits, lo, hi)
            }
            Scheme::Exponential => {
                if hi <= theta {
                    hi = theta + (theta - lo).max(RANGE_EPS);
                }
                if lo >= theta {
                    lo = theta - (hi - theta).max(RANGE_EPS);
                }
                let ratio = self.ratio();
                let below = self.levels_below.unwrap_or(count / 2);
                let above = count.saturating_sub(below);
                let min_below = min_span(lo, hi, theta, below, ratio);
                let min_above = min_span(lo, hi, theta, above, ratio);
                lo = lo.min(theta - min_below);
                hi = hi.max(theta + min_above);
                build_exponential_grid_with(
                    self.n_bits,
                    lo,
                    hi,
                    ExpSpacing {
                        theta,
                        ratio_below: ratio,
                        ratio_above: ratio,
                        levels_below: below,
                    },
                )
            }
        }
    }
}

/// Smallest width of a side with `m` gaps growing by `ratio` whose finest
/// gap is at least four ulps at the grid's magnitude.
fn min_span(lo: f32, hi: f32, theta: f32, m: usize, ratio: f32) -> f32 {
    let scale = lo.abs().max(hi.abs()).max(theta.abs()).max(1.0) as f64;
    let r = ratio as f64;
    let sum = if r == 1.0 {
        m as f64
    } else {
        (r.powi(m as i32) - 1.0) / (r - 1.0)
    };
    (4.0 * f32::EPSILON as f64 * scale * sum) as f32
}
