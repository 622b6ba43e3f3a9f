//! Synthetic conductivity fields with closed-form values and gradients.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `exp(1 - 1/(1 - s²))` for `|s| < 1`, zero otherwise. Peak value 1 at `s = 0`.
pub fn bump(s: f64) -> f64 {
    let t = 1.0 - s * s;
    if t <= 0.0 {
        0.0
    } else {
        (1.0 - 1.0 / t).exp()
    }
}

/// Derivative of [`bump`].
pub fn bump_derivative(s: f64) -> f64 {
    let t = 1.0 - s * s;
    if t <= 0.0 {
        0.0
    } else {
        bump(s) * (-2.0 * s / (t * t))
    }
}

fn default_amplitude() -> f64 {
    0.5
}

fn default_support() -> f64 {
    0.8
}

fn default_center() -> [f64; 2] {
    [0.25, 0.1]
}

fn default_bump_radius() -> f64 {
    0.45
}

fn default_ring_center() -> f64 {
    1.25
}

fn default_ring_width() -> f64 {
    0.15
}

/// Conductivity phantoms. All are identically one outside [`support_radius`](Self::support_radius).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConductivityField {
    Unit,
    /// `1 + amplitude · bump(r / support_radius)`.
    RadialBump {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_support")]
        support_radius: f64,
    },
    /// A bump of radius `radius` centered away from the origin.
    OffsetBump {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_center")]
        center: [f64; 2],
        #[serde(default = "default_bump_radius")]
        radius: f64,
    },
    /// `1 + amplitude · bump((r - center_radius) / half_width)`, a ring
    /// used as annulus conductivity for the extension problem.
    RingBump {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_ring_center")]
        center_radius: f64,
        #[serde(default = "default_ring_width")]
        half_width: f64,
    },
}

impl Default for ConductivityField {
    fn default() -> Self {
        ConductivityField::RadialBump {
            amplitude: default_amplitude(),
            support_radius: default_support(),
        }
    }
}

impl ConductivityField {
    pub fn validate(&self) -> Result<()> {
        let (amplitude, widths): (f64, Vec<f64>) = match *self {
            ConductivityField::Unit => return Ok(()),
            ConductivityField::RadialBump {
                amplitude,
                support_radius,
            } => (amplitude, vec![support_radius]),
            ConductivityField::OffsetBump {
                amplitude, radius, center,
            } => {
                if !(center[0].is_finite() && center[1].is_finite()) {
                    return Err(Error::Config("offset-bump center must be finite".into()));
                }
                (amplitude, vec![radius])
            }
            ConductivityField::RingBump {
                amplitude,
                center_radius,
                half_width,
            } => {
                if center_radius - half_width <= 0.0 {
                    return Err(Error::Config(
                        "ring-bump must stay away from the origin (center_radius > half_width)".into(),
                    ));
                }
                (amplitude, vec![center_radius, half_width])
            }
        };
        if !(amplitude.is_finite() && amplitude > -1.0) {
            return Err(Error::Config(format!(
                "amplitude must exceed -1 to keep the conductivity positive, got {amplitude}"
            )));
        }
        if widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("phantom radii must be positive".into()));
        }
        Ok(())
    }

    pub fn value(&self, z: Complex64) -> f64 {
        match *self {
            ConductivityField::Unit => 1.0,
            ConductivityField::RadialBump {
                amplitude,
                support_radius,
            } => 1.0 + amplitude * bump(z.norm() / support_radius),
            ConductivityField::OffsetBump {
                amplitude,
                center,
                radius,
            } => 1.0 + amplitude * bump((z - Complex64::new(center[0], center[1])).norm() / radius),
            ConductivityField::RingBump {
                amplitude,
                center_radius,
                half_width,
            } => 1.0 + amplitude * bump((z.norm() - center_radius) / half_width),
        }
    }

    /// Exact gradient `(∂x γ, ∂y γ)` packed as `∂x γ + i ∂y γ`.
    pub fn gradient(&self, z: Complex64) -> Complex64 {
        // radial profile derivative times the unit vector from `origin`
        let radial = |origin: Complex64, d: f64| {
            let w = z - origin;
            let r = w.norm();
            if r == 0.0 {
                Complex64::default()
            } else {
                w * (d / r)
            }
        };
        match *self {
            ConductivityField::Unit => Complex64::default(),
            ConductivityField::RadialBump {
                amplitude,
                support_radius,
            } => radial(
                Complex64::default(),
                amplitude * bump_derivative(z.norm() / support_radius) / support_radius,
            ),
            ConductivityField::OffsetBump {
                amplitude,
                center,
                radius,
            } => {
                let c = Complex64::new(center[0], center[1]);
                radial(c, amplitude * bump_derivative((z - c).norm() / radius) / radius)
            }
            ConductivityField::RingBump {
                amplitude,
                center_radius,
                half_width,
            } => radial(
                Complex64::default(),
                amplitude * bump_derivative((z.norm() - center_radius) / half_width) / half_width,
            ),
        }
    }

    /// Radius of the smallest origin-centered disk outside which γ ≡ 1.
    pub fn support_radius(&self) -> f64 {
        match *self {
            ConductivityField::Unit => 0.0,
            ConductivityField::RadialBump { support_radius, .. } => support_radius,
            ConductivityField::OffsetBump { center, radius, .. } => {
                Complex64::new(center[0], center[1]).norm() + radius
            }
            ConductivityField::RingBump {
                center_radius,
                half_width,
                ..
            } => center_radius + half_width,
        }
    }

    /// Inner radius of the region where γ differs from one (zero unless the field is a ring).
    pub fn inner_support_radius(&self) -> f64 {
        match *self {
            ConductivityField::Unit => f64::INFINITY,
            ConductivityField::RingBump {
                center_radius,
                half_width,
                ..
            } => center_radius - half_width,
            ConductivityField::OffsetBump { center, radius, .. } => {
                (Complex64::new(center[0], center[1]).norm() - radius).max(0.0)
            }
            ConductivityField::RadialBump { .. } => 0.0,
        }
    }

    /// Positive lower bound `c ≤ γ`.
    pub fn lower_bound(&self) -> f64 {
        match *self {
            ConductivityField::Unit => 1.0,
            ConductivityField::RadialBump { amplitude, .. }
            | ConductivityField::OffsetBump { amplitude, .. }
            | ConductivityField::RingBump { amplitude, .. } => 1.0 + amplitude.min(0.0),
        }
    }

    pub fn is_unit(&self) -> bool {
        match *self {
            ConductivityField::Unit => true,
            ConductivityField::RadialBump { amplitude, .. }
            | ConductivityField::OffsetBump { amplitude, .. }
            | ConductivityField::RingBump { amplitude, .. } => amplitude == 0.0,
        }
    }

    /// Radial profile `r ↦ (γ(r), γ'(r))` when the field is rotationally symmetric.
    pub fn radial_profile(&self) -> Option<impl Fn(f64) -> (f64, f64) + '_> {
        let symmetric = match *self {
            ConductivityField::Unit
            | ConductivityField::RadialBump { .. }
            | ConductivityField::RingBump { .. } => true,
            ConductivityField::OffsetBump { .. } => false,
        };
        symmetric.then_some({
            move |r: f64| {
                let z = Complex64::new(r, 0.0);
                (self.value(z), self.gradient(z).re)
            }
        })
    }
}
