//! Dataset preparation and model artifacts in raw data units.

use std::path::Path;

use nvqr_core::datasets::{
    generators, load_csv, split_indices, Generator, RawUnitMap, SampleTable, Splits, Standardization,
};
use nvqr_core::points::Points;
use nvqr_core::rank::{ModelRecord, QuantileModel};
use nvqr_core::training::TrainData;
use nvqr_core::Result;
use serde::{Deserialize, Serialize};

use crate::config::DatasetSpec;

pub const MODEL_FORMAT: &str = "nvqr-model";

/// Derives an independent stream seed from a run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

pub fn generator(spec: &DatasetSpec) -> Result<Box<dyn Generator>> {
    generators().get(&spec.name)?(&spec.options)
}

pub struct Prepared {
    /// Raw-unit table and its split.
    pub table: SampleTable,
    pub splits: Splits,
    pub standardization: Standardization,
    /// Standardized training rows.
    pub train: TrainData,
}

pub fn prepare(spec: &DatasetSpec, seed: u64) -> Result<Prepared> {
    let (standardized, splits) = if spec.is_csv() {
        let path = spec.path.as_deref().unwrap_or(Path::new(""));
        load_csv(path, &spec.x_columns, &spec.y_columns, spec.splits, seed)?
    } else {
        let mut t = generator(spec)?.generate(spec.n, stream_seed(seed, 1))?;
        let splits = split_indices(t.len(), spec.splits, seed)?;
        t.standardize(&splits.train)?;
        (t, splits)
    };
    let standardization = standardized.standardization.clone().expect("standardized table");
    let tr = standardized.subset(&splits.train);
    Ok(Prepared {
        table: standardized.destandardized(),
        splits,
        standardization,
        train: TrainData::new(tr.x, tr.y)?,
    })
}

/// Calibration and test tables in raw units. Synthetic datasets draw fresh
/// samples; files reuse the seed's split.
pub fn calibration_and_test(spec: &DatasetSpec, seed: u64) -> Result<(SampleTable, SampleTable)> {
    if spec.is_csv() {
        let p = prepare(spec, seed)?;
        return Ok((p.table.subset(&p.splits.cal), p.table.subset(&p.splits.test)));
    }
    let g = generator(spec)?;
    let size = |share: f64| ((spec.n as f64 * share).round() as usize).max(1);
    Ok((
        g.generate(size(spec.splits[1]), stream_seed(seed, 2))?,
        g.generate(size(spec.splits[2]), stream_seed(seed, 3))?,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub method: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub standardization: Standardization,
    pub model: ModelRecord,
}

impl ModelArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if a.format != MODEL_FORMAT {
            return Err(nvqr_core::Error::Data(format!(
                "{} is not a model artifact (format `{}`)",
                path.display(),
                a.format
            )));
        }
        Ok(a)
    }

    pub fn raw_map(&self) -> Result<RawUnitMap> {
        Ok(RawUnitMap {
            model: QuantileModel::from_record(&self.model)?,
            standardization: self.standardization.clone(),
        })
    }
}

/// `n` copies of one row.
pub fn repeat_row(x: &[f64], n: usize) -> Result<Points> {
    if x.is_empty() {
        return Ok(Points::empty_rows(n));
    }
    Points::from_rows(x.len(), std::iter::repeat_n(x, n))
}
