//! Child-image detection and dataset auditing pipeline.
//!
//! The numeric core is generic over [`Scalar`]; `f64` is the working type and
//! [`Rational`] gives exact results for metrics and energy accounting.

pub mod auditor;
pub mod cleaning;
pub mod curation;
pub mod detector;
pub mod energy;
pub mod geometry;
pub mod images;
pub mod manifest;
pub mod metrics;
pub mod prompts;
pub mod review;
pub mod scalar;
pub mod vqa;

pub use scalar::Scalar;

pub type Rational = num_rational::Ratio<i64>;

pub type Metrics = metrics::MetricsReport<f64>;
pub type ExactMetrics = metrics::MetricsReport<Rational>;
pub type EnergyModel = energy::EnergyModel<f64>;
pub type ExactEnergyModel = energy::EnergyModel<Rational>;
pub type EnergyReport = energy::EnergyReport<f64>;
pub type ExactEnergyReport = energy::EnergyReport<Rational>;
pub type Rect = geometry::Rect<f64>;
