//! Scalar nonlinearities with sector and slope metadata.
//!
//! A nonlinearity phi acting elementwise is *sector-bounded* in [alpha, beta]
//! when (phi(v) - alpha v)(beta v - phi(v)) >= 0 for all v, and
//! *slope-restricted* when phi'(v) stays inside the same interval. The loop
//! transformation
//!
//!   phi_tilde(v) = L^(-1) (phi(v) - S v),   S = (alpha+beta)/2, L = (beta-alpha)/2
//!
//! maps any strictly sector-bounded channel onto the normalized sector
//! [-1, 1], which is the form every certificate in this crate works in.
//! The registry covers tanh, relu, leaky_relu(a), and v - sin(v); the last
//! one is the exact nonlinearity of a pendulum written as a linear part plus
//! a sector-bounded remainder.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A scalar activation applied elementwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// tanh(v); sector and slope [0, 1].
    Tanh,
    /// max(v, 0); sector and slope [0, 1].
    Relu,
    /// v for v > 0, a v otherwise, with 0 < a < 1; sector and slope [a, 1].
    LeakyRelu(f64),
    /// v - sin(v); sector and slope [0, 2].
    VMinusSin,
}

impl Activation {
    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
            Activation::VMinusSin => v - v.sin(),
        }
    }

    pub fn deriv(&self, v: f64) -> f64 {
        match *self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::VMinusSin => 1.0 - v.cos(),
        }
    }

    /// Interval containing phi'(v) for all v.
    pub fn slope_bounds(&self) -> (f64, f64) {
        match *self {
            Activation::Tanh => (0.0, 1.0),
            Activation::Relu => (0.0, 1.0),
            Activation::LeakyRelu(a) => (a, 1.0),
            Activation::VMinusSin => (0.0, 2.0),
        }
    }

    /// The tightest sector the activation is known to satisfy globally.
    /// For these registry members it coincides with the slope bounds.
    pub fn default_sector(&self) -> (f64, f64) {
        self.slope_bounds()
    }

    /// Registry name used in structured files.
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::VMinusSin => "v_minus_sin",
        }
    }

    /// Scalar parameter for parametric members (`leaky_relu`).
    pub fn param(&self) -> Option<f64> {
        match *self {
            Activation::LeakyRelu(a) => Some(a),
            _ => None,
        }
    }

    /// Look up a registry member by name and optional parameter.
    pub fn parse(name: &str, param: Option<f64>) -> Result<Activation> {
        match (name, param) {
            ("tanh", None) => Ok(Activation::Tanh),
            ("relu", None) => Ok(Activation::Relu),
            ("leaky_relu", Some(a)) => {
                if a > 0.0 && a < 1.0 {
                    Ok(Activation::LeakyRelu(a))
                } else {
                    Err(Error::Invalid(format!(
                        "leaky_relu slope must lie in (0, 1), got {a}"
                    )))
                }
            }
            ("leaky_relu", None) => Err(Error::Invalid(
                "leaky_relu requires a slope parameter".into(),
            )),
            ("v_minus_sin", None) => Ok(Activation::VMinusSin),
            (other, Some(p)) => Err(Error::Invalid(format!(
                "unknown or non-parametric activation {other}({p})"
            ))),
            (other, None) => Err(Error::Invalid(format!("unknown activation {other}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.param() {
            Some(p) => write!(f, "{}({p})", self.name()),
            None => write!(f, "{}", self.name()),
        }
    }
}

/// Per-channel sector bounds [alpha_i, beta_i].
#[derive(Debug, Clone, PartialEq)]
pub struct SectorSpec {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
}

impl SectorSpec {
    pub fn new(alpha: DVector<f64>, beta: DVector<f64>) -> Result<SectorSpec> {
        if alpha.len() != beta.len() {
            return Err(Error::DimensionMismatch(format!(
                "sector bounds of length {} and {}",
                alpha.len(),
                beta.len()
            )));
        }
        for i in 0..alpha.len() {
            if !(alpha[i] <= beta[i]) {
                return Err(Error::Invalid(format!(
                    "sector channel {i}: alpha = {} exceeds beta = {}",
                    alpha[i], beta[i]
                )));
            }
        }
        Ok(SectorSpec { alpha, beta })
    }

    /// Same bounds on every channel.
    pub fn uniform(n: usize, alpha: f64, beta: f64) -> Result<SectorSpec> {
        SectorSpec::new(
            DVector::from_element(n, alpha),
            DVector::from_element(n, beta),
        )
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// Sector midpoints s_i = (alpha_i + beta_i)/2 (diagonal of S).
    pub fn midpoints(&self) -> DVector<f64> {
        (&self.alpha + &self.beta) * 0.5
    }

    /// Sector half-widths l_i = (beta_i - alpha_i)/2 (diagonal of L).
    pub fn half_widths(&self) -> DVector<f64> {
        (&self.beta - &self.alpha) * 0.5
    }

    /// True when some channel has zero width (beta_i == alpha_i), i.e. the
    /// channel is affine and the loop transformation is not invertible.
    pub fn has_degenerate_channel(&self) -> bool {
        (0..self.dim()).any(|i| self.beta[i] == self.alpha[i])
    }
}

/// One channel of a heterogeneous (stacked) map.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Channel {
    act: Activation,
    /// `Some((s, l))` evaluates the normalized form (act(v) - s v)/l;
    /// `None` evaluates the activation directly.
    norm: Option<(f64, f64)>,
}

impl Channel {
    fn eval(&self, v: f64) -> f64 {
        match self.norm {
            None => self.act.eval(v),
            Some((s, l)) => (self.act.eval(v) - s * v) / l,
        }
    }

    fn deriv(&self, v: f64) -> f64 {
        match self.norm {
            None => self.act.deriv(v),
            Some((s, l)) => (self.act.deriv(v) - s) / l,
        }
    }
}

/// How the scalar map of a [`Nonlinearity`] is built from its activation.
#[derive(Debug, Clone, PartialEq)]
enum ScalarMap {
    /// phi(v) directly.
    Plain(Activation),
    /// The normalized form phi_tilde(v) = (phi(v) - s v)/l per channel.
    Normalized {
        inner: Activation,
        s: DVector<f64>,
        l: DVector<f64>,
    },
    /// Channel-wise mixture, produced by stacking maps that disagree in
    /// activation or normalization (e.g. a plant nonlinearity stacked onto
    /// a controller nonlinearity in closed loop).
    Mixed(Vec<Channel>),
}

/// An elementwise nonlinearity with sector metadata, in either original or
/// normalized (loop-transformed) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Nonlinearity {
    map: ScalarMap,
    /// Sector satisfied by the map as stored ([-1, 1] once normalized).
    pub sector: SectorSpec,
    /// Per-channel flag: derivative also confined to the sector interval.
    pub slope_restricted: Vec<bool>,
}

impl Nonlinearity {
    /// A plain activation with explicit sector bounds. The slope-restriction
    /// flags are inferred by comparing the activation's slope bounds with the
    /// sector.
    pub fn new(act: Activation, sector: SectorSpec) -> Result<Nonlinearity> {
        let (slo, shi) = act.slope_bounds();
        let slope_restricted = (0..sector.dim())
            .map(|i| sector.alpha[i] <= slo && shi <= sector.beta[i])
            .collect();
        Ok(Nonlinearity {
            map: ScalarMap::Plain(act),
            sector,
            slope_restricted,
        })
    }

    /// A plain activation on `n` channels with its default sector.
    pub fn uniform(act: Activation, n: usize) -> Nonlinearity {
        let (a, b) = act.default_sector();
        Nonlinearity::new(act, SectorSpec::uniform(n, a, b).expect("valid sector"))
            .expect("default sector is valid")
    }

    pub fn dim(&self) -> usize {
        self.sector.dim()
    }

    /// The activation the map is built from.
    ///
    /// Panics on a mixed (stacked) map whose channels disagree: such maps
    /// only arise in closed-loop assembly, which never asks for a single
    /// activation.
    pub fn activation(&self) -> Activation {
        match &self.map {
            ScalarMap::Plain(a) => *a,
            ScalarMap::Normalized { inner, .. } => *inner,
            ScalarMap::Mixed(chs) => {
                let first = chs.first().expect("mixed map has channels").act;
                assert!(
                    chs.iter().all(|c| c.act == first),
                    "mixed nonlinearity has no single activation"
                );
                first
            }
        }
    }

    pub fn is_normalized(&self) -> bool {
        match &self.map {
            ScalarMap::Plain(_) => false,
            ScalarMap::Normalized { .. } => true,
            ScalarMap::Mixed(chs) => chs.iter().all(|c| c.norm.is_some()),
        }
    }

    /// Sector of the underlying activation in original coordinates: for a
    /// plain map this is `sector`; for a normalized map it is recovered from
    /// the stored shift and scale as [s - l, s + l].
    pub fn original_sector(&self) -> SectorSpec {
        match &self.map {
            ScalarMap::Plain(_) => self.sector.clone(),
            ScalarMap::Normalized { s, l, .. } => SectorSpec {
                alpha: s - l,
                beta: s + l,
            },
            ScalarMap::Mixed(chs) => {
                let bound = |i: usize, sign: f64| match chs[i].norm {
                    Some((s, l)) => s + sign * l,
                    None => {
                        if sign < 0.0 {
                            self.sector.alpha[i]
                        } else {
                            self.sector.beta[i]
                        }
                    }
                };
                SectorSpec {
                    alpha: DVector::from_fn(chs.len(), |i, _| bound(i, -1.0)),
                    beta: DVector::from_fn(chs.len(), |i, _| bound(i, 1.0)),
                }
            }
        }
    }

    /// Apply the map elementwise.
    pub fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim(), "nonlinearity input dimension");
        match &self.map {
            ScalarMap::Plain(act) => v.map(|x| act.eval(x)),
            ScalarMap::Normalized { inner, s, l } => {
                DVector::from_fn(v.len(), |i, _| (inner.eval(v[i]) - s[i] * v[i]) / l[i])
            }
            ScalarMap::Mixed(chs) => DVector::from_fn(v.len(), |i, _| chs[i].eval(v[i])),
        }
    }

    /// Elementwise derivative, returned as the diagonal of the Jacobian.
    pub fn deriv_diag(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim(), "nonlinearity input dimension");
        match &self.map {
            ScalarMap::Plain(act) => v.map(|x| act.deriv(x)),
            ScalarMap::Normalized { inner, s, l } => {
                DVector::from_fn(v.len(), |i, _| (inner.deriv(v[i]) - s[i]) / l[i])
            }
            ScalarMap::Mixed(chs) => DVector::from_fn(v.len(), |i, _| chs[i].deriv(v[i])),
        }
    }

    /// Loop-transform onto the normalized sector [-1, 1].
    ///
    /// Requires every channel to have strictly positive sector width; affine
    /// channels (alpha == beta) must be absorbed into the linear part first
    /// (see the plant module).
    pub fn normalized(&self) -> Result<Nonlinearity> {
        if self.is_normalized() {
            return Ok(self.clone());
        }
        if self.sector.has_degenerate_channel() {
            return Err(Error::Invalid(
                "cannot normalize a sector with a zero-width channel".into(),
            ));
        }
        let n = self.dim();
        let map = match &self.map {
            ScalarMap::Mixed(chs) => ScalarMap::Mixed(
                chs.iter()
                    .enumerate()
                    .map(|(i, c)| Channel {
                        act: c.act,
                        norm: c.norm.or(Some((
                            0.5 * (self.sector.alpha[i] + self.sector.beta[i]),
                            0.5 * (self.sector.beta[i] - self.sector.alpha[i]),
                        ))),
                    })
                    .collect(),
            ),
            _ => ScalarMap::Normalized {
                inner: self.activation(),
                s: self.sector.midpoints(),
                l: self.sector.half_widths(),
            },
        };
        Ok(Nonlinearity {
            map,
            sector: SectorSpec::uniform(n, -1.0, 1.0)?,
            slope_restricted: self.slope_restricted.clone(),
        })
    }

    /// Stack two nonlinearities into one acting blockwise on the
    /// concatenated input. Either operand may have zero channels; the maps
    /// may differ in activation and normalization (the common case when a
    /// plant's nonlinearity joins a controller's in closed loop).
    pub fn stack(&self, other: &Nonlinearity) -> Nonlinearity {
        fn channels(nl: &Nonlinearity) -> Vec<Channel> {
            match &nl.map {
                ScalarMap::Plain(a) => vec![Channel { act: *a, norm: None }; nl.dim()],
                ScalarMap::Normalized { inner, s, l } => (0..nl.dim())
                    .map(|i| Channel {
                        act: *inner,
                        norm: Some((s[i], l[i])),
                    })
                    .collect(),
                ScalarMap::Mixed(chs) => chs.clone(),
            }
        }
        if self.dim() == 0 {
            return other.clone();
        }
        if other.dim() == 0 {
            return self.clone();
        }
        let sector = SectorSpec {
            alpha: DVector::from_iterator(
                self.dim() + other.dim(),
                self.sector.alpha.iter().chain(other.sector.alpha.iter()).copied(),
            ),
            beta: DVector::from_iterator(
                self.dim() + other.dim(),
                self.sector.beta.iter().chain(other.sector.beta.iter()).copied(),
            ),
        };
        let slope_restricted: Vec<bool> = self
            .slope_restricted
            .iter()
            .chain(other.slope_restricted.iter())
            .copied()
            .collect();
        let map = match (&self.map, &other.map) {
            // Homogeneous fast paths keep the compact representations.
            (ScalarMap::Plain(a), ScalarMap::Plain(b)) if a == b => ScalarMap::Plain(*a),
            (
                ScalarMap::Normalized { inner: a, s: s1, l: l1 },
                ScalarMap::Normalized { inner: b, s: s2, l: l2 },
            ) if a == b => ScalarMap::Normalized {
                inner: *a,
                s: DVector::from_iterator(
                    self.dim() + other.dim(),
                    s1.iter().chain(s2.iter()).copied(),
                ),
                l: DVector::from_iterator(
                    self.dim() + other.dim(),
                    l1.iter().chain(l2.iter()).copied(),
                ),
            },
            _ => {
                let mut chs = channels(self);
                chs.extend(channels(other));
                ScalarMap::Mixed(chs)
            }
        };
        Nonlinearity {
            map,
            sector,
            slope_restricted,
        }
    }
}
