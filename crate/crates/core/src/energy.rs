//! Inference energy and CO2-eq accounting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const RATES_JSON: &str = include_str!("../data/energy_rates.json");
pub const DEFAULT_CARBON_INTENSITY: &str = "0.0983";

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("no energy rate for model {0:?}")]
    UnknownModelRate(String),
    #[error("no device wattage configured")]
    NoPowerConfig,
    #[error("empty timing log")]
    EmptyTimings,
    #[error("invalid rate table: {0}")]
    InvalidTable(String),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergySource {
    Measured,
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    pub images_processed: u64,
    pub energy_kwh: T,
    pub co2_kg: T,
    pub source: EnergySource,
}

impl<T: Scalar> EnergyReport<T> {
    pub fn to_f64(&self) -> EnergyReport<f64> {
        EnergyReport {
            model_name: self.model_name.clone(),
            images_processed: self.images_processed,
            energy_kwh: self.energy_kwh.to_f64_lossy(),
            co2_kg: self.co2_kg.to_f64_lossy(),
            source: self.source,
        }
    }
}

/// One row of the shipped rate table (totals over `images`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub model: String,
    #[serde(default)]
    pub params_b: Option<u32>,
    pub energy_kwh: String,
    pub co2_kg: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub images: u64,
    pub carbon_intensity: String,
    pub models: Vec<RateRow>,
    #[serde(default)]
    pub reference: Vec<RateRow>,
}

impl RateTable {
    pub fn shipped() -> Self {
        Self::from_json(RATES_JSON).expect("shipped rate table parses")
    }

    pub fn from_json(json: &str) -> Result<Self, EnergyError> {
        serde_json::from_str(json).map_err(|e| EnergyError::InvalidTable(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, EnergyError> {
        let json = std::fs::read_to_string(path).map_err(|e| EnergyError::InvalidTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn row(&self, model: &str) -> Option<&RateRow> {
        self.models.iter().chain(&self.reference).find(|r| r.model == model)
    }
}

fn decimal<T: Scalar>(text: &str, what: &str) -> Result<T, EnergyError> {
    T::from_decimal(text).ok_or_else(|| EnergyError::InvalidTable(format!("{what}: {text:?} is not a decimal")))
}

/// Per-image energy rates plus carbon intensity. Models may carry their own
/// intensity; everything else uses the default.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel<T> {
    pub per_image_kwh: BTreeMap<String, T>,
    pub carbon_intensity: T,
    pub model_intensity: BTreeMap<String, T>,
}

impl<T: Scalar> EnergyModel<T> {
    pub fn new(carbon_intensity: T) -> Result<Self, EnergyError> {
        if carbon_intensity <= T::zero() {
            return Err(EnergyError::NonPositive("carbon_intensity"));
        }
        Ok(Self { per_image_kwh: BTreeMap::new(), carbon_intensity, model_intensity: BTreeMap::new() })
    }

    /// Rates from a table. Each row's own CO2/energy ratio becomes that
    /// model's intensity, so every row is reproduced as published.
    pub fn from_table(table: &RateTable) -> Result<Self, EnergyError> {
        if table.images == 0 {
            return Err(EnergyError::NonPositive("images"));
        }
        let mut model = Self::new(decimal(&table.carbon_intensity, "carbon_intensity")?)?;
        let images = T::from_count(table.images);
        for row in table.models.iter().chain(&table.reference) {
            let energy: T = decimal(&row.energy_kwh, &row.model)?;
            let co2: T = decimal(&row.co2_kg, &row.model)?;
            if energy <= T::zero() || co2 <= T::zero() {
                return Err(EnergyError::NonPositive("table rate"));
            }
            model.per_image_kwh.insert(row.model.clone(), energy / images);
            model.model_intensity.insert(row.model.clone(), co2 / energy);
        }
        Ok(model)
    }

    pub fn shipped() -> Self {
        Self::from_table(&RateTable::shipped()).expect("shipped rate table is valid")
    }

    /// Adds or replaces a user rate; it uses the default intensity.
    pub fn with_rate(mut self, model: impl Into<String>, kwh_per_image: T) -> Result<Self, EnergyError> {
        if kwh_per_image <= T::zero() {
            return Err(EnergyError::NonPositive("kwh_per_image"));
        }
        let model = model.into();
        self.model_intensity.remove(&model);
        self.per_image_kwh.insert(model, kwh_per_image);
        Ok(self)
    }

    /// Drops per-model intensities so every estimate uses `carbon_intensity`.
    pub fn with_uniform_intensity(mut self, carbon_intensity: T) -> Result<Self, EnergyError> {
        if carbon_intensity <= T::zero() {
            return Err(EnergyError::NonPositive("carbon_intensity"));
        }
        self.carbon_intensity = carbon_intensity;
        self.model_intensity.clear();
        Ok(self)
    }

    pub fn intensity_for(&self, model: &str) -> T {
        self.model_intensity.get(model).copied().unwrap_or(self.carbon_intensity)
    }

    pub fn estimate(&self, model: &str, images: u64) -> Result<EnergyReport<T>, EnergyError> {
        let rate = *self.per_image_kwh.get(model).ok_or_else(|| EnergyError::UnknownModelRate(model.to_string()))?;
        let energy_kwh = rate * T::from_count(images);
        Ok(EnergyReport {
            model_name: Some(model.to_string()),
            images_processed: images,
            energy_kwh,
            co2_kg: energy_kwh * self.intensity_for(model),
            source: EnergySource::Estimated,
        })
    }
}

/// Energy from per-request durations at a fixed device wattage.
///
/// Without a wattage this returns [`EnergyError::NoPowerConfig`]; callers
/// fall back to [`EnergyModel::estimate`].
pub fn measure<T: Scalar>(durations_ms: &[u64], watts: Option<T>, carbon_intensity: T) -> Result<EnergyReport<T>, EnergyError> {
    let watts = watts.ok_or(EnergyError::NoPowerConfig)?;
    if durations_ms.is_empty() {
        return Err(EnergyError::EmptyTimings);
    }
    let total_ms: u64 = durations_ms.iter().sum();
    // ms * W = mJ; 3.6e9 mJ per kWh
    let energy_kwh = T::from_count(total_ms) * watts / T::from_count(3_600_000_000);
    Ok(EnergyReport {
        model_name: None,
        images_processed: durations_ms.len() as u64,
        energy_kwh,
        co2_kg: energy_kwh * carbon_intensity,
        source: EnergySource::Measured,
    })
}

/// Measured when a wattage is configured, otherwise estimated from the rate table.
pub fn measure_or_estimate<T: Scalar>(
    durations_ms: &[u64],
    watts: Option<T>,
    model: &EnergyModel<T>,
    model_name: &str,
) -> Result<EnergyReport<T>, EnergyError> {
    match measure(durations_ms, watts, model.intensity_for(model_name)) {
        Ok(mut r) => {
            r.model_name = Some(model_name.to_string());
            Ok(r)
        }
        Err(EnergyError::NoPowerConfig) => {
            tracing::warn!("no device wattage configured; using table estimate");
            model.estimate(model_name, durations_ms.len() as u64)
        }
        Err(e) => Err(e),
    }
}
