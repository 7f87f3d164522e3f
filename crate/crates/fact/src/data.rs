//! Client-side data loading.
//!
//! Importers run through three stages: `load_data`, `preprocess_data` and
//! `split_data_into_train_and_test`. Two importers ship built in: a CSV file
//! importer and a seeded synthetic generator, which is what the desk-scale
//! experiments and the test suites run on.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FactError, Result};

/// In-memory dataset: one feature row per target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map(Vec::len).unwrap_or(0)
    }
}

/// Loading pipeline every importer implements.
pub trait DataImporter: Send {
    fn load_data(&mut self) -> Result<()>;
    fn preprocess_data(&mut self) -> Result<()>;
    fn split_data_into_train_and_test(&mut self) -> Result<()>;
    fn train_set(&self) -> &Dataset;
    fn test_set(&self) -> &Dataset;

    /// Runs the three stages in order.
    fn prepare(&mut self) -> Result<()> {
        self.load_data()?;
        self.preprocess_data()?;
        self.split_data_into_train_and_test()
    }
}

/// Parameters of the synthetic linear-task generator.
///
/// Features are standard normal; targets are `w.x + b + noise`. With
/// `binary_targets` the sign of the noisy response becomes a 0/1 label for
/// logistic tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    /// True feature weights, length `n_features`.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub test_fraction: f64,
    #[serde(default)]
    pub binary_targets: bool,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.n_features {
            return Err(FactError::BadConfig(format!(
                "weights length {} != n_features {}",
                self.weights.len(),
                self.n_features
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(FactError::BadConfig(
                "test_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded generator importer.
pub struct SyntheticImporter {
    spec: SyntheticSpec,
    all: Dataset,
    train: Dataset,
    test: Dataset,
}

impl SyntheticImporter {
    pub fn new(spec: SyntheticSpec) -> Self {
        Self {
            spec,
            all: Dataset::default(),
            train: Dataset::default(),
            test: Dataset::default(),
        }
    }
}

impl DataImporter for SyntheticImporter {
    fn load_data(&mut self) -> Result<()> {
        self.spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(self.spec.seed);
        let mut features = Vec::with_capacity(self.spec.n_samples);
        let mut targets = Vec::with_capacity(self.spec.n_samples);
        for _ in 0..self.spec.n_samples {
            let x: Vec<f64> = (0..self.spec.n_features)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut y = self.spec.intercept
                + x.iter()
                    .zip(&self.spec.weights)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            y += self.spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            if self.spec.binary_targets {
                y = if y > 0.0 { 1.0 } else { 0.0 };
            }
            features.push(x);
            targets.push(y);
        }
        self.all = Dataset { features, targets };
        Ok(())
    }

    fn preprocess_data(&mut self) -> Result<()> {
        // The generator already produces standardized features.
        Ok(())
    }

    fn split_data_into_train_and_test(&mut self) -> Result<()> {
        let n = self.all.len();
        let n_test = (n as f64 * self.spec.test_fraction).floor() as usize;
        let n_train = n - n_test;
        self.train = Dataset {
            features: self.all.features[..n_train].to_vec(),
            targets: self.all.targets[..n_train].to_vec(),
        };
        self.test = Dataset {
            features: self.all.features[n_train..].to_vec(),
            targets: self.all.targets[n_train..].to_vec(),
        };
        Ok(())
    }

    fn train_set(&self) -> &Dataset {
        &self.train
    }

    fn test_set(&self) -> &Dataset {
        &self.test
    }
}

/// CSV importer: every column but the last is a feature, the last is the
/// target. A header row is detected and skipped.
pub struct CsvImporter {
    path: PathBuf,
    test_fraction: f64,
    all: Dataset,
    train: Dataset,
    test: Dataset,
}

impl CsvImporter {
    pub fn new(path: PathBuf, test_fraction: f64) -> Self {
        Self {
            path,
            test_fraction,
            all: Dataset::default(),
            train: Dataset::default(),
            test: Dataset::default(),
        }
    }
}

impl DataImporter for CsvImporter {
    fn load_data(&mut self) -> Result<()> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_path(&self.path)
            .map_err(|e| FactError::BadConfig(format!("{}: {e}", self.path.display())))?;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| FactError::BadConfig(format!("csv row {}: {e}", idx + 1)))?;
            let values: std::result::Result<Vec<f64>, _> =
                record.iter().map(|f| f.trim().parse::<f64>()).collect();
            match values {
                Ok(mut row) if row.len() >= 2 => {
                    let y = row.pop().expect("length checked");
                    features.push(row);
                    targets.push(y);
                }
                Ok(_) => {
                    return Err(FactError::BadConfig(format!(
                        "csv row {}: need at least one feature and a target",
                        idx + 1
                    )))
                }
                // First unparsable row is treated as the header.
                Err(e) if idx == 0 => {
                    let _ = e;
                    continue;
                }
                Err(e) => {
                    return Err(FactError::BadConfig(format!("csv row {}: {e}", idx + 1)))
                }
            }
        }
        if features.is_empty() {
            return Err(FactError::BadConfig(format!(
                "{}: no data rows",
                self.path.display()
            )));
        }
        self.all = Dataset { features, targets };
        Ok(())
    }

    fn preprocess_data(&mut self) -> Result<()> {
        Ok(())
    }

    fn split_data_into_train_and_test(&mut self) -> Result<()> {
        let n = self.all.len();
        let n_test = (n as f64 * self.test_fraction).floor() as usize;
        let n_train = n - n_test;
        self.train = Dataset {
            features: self.all.features[..n_train].to_vec(),
            targets: self.all.targets[..n_train].to_vec(),
        };
        self.test = Dataset {
            features: self.all.features[n_train..].to_vec(),
            targets: self.all.targets[n_train..].to_vec(),
        };
        Ok(())
    }

    fn train_set(&self) -> &Dataset {
        &self.train
    }

    fn test_set(&self) -> &Dataset {
        &self.test
    }
}

/// One client's dataset description inside experiment and worker configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientDataSpec {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        #[serde(default)]
        test_fraction: f64,
    },
}

impl ClientDataSpec {
    pub fn build_importer(&self) -> Result<Box<dyn DataImporter>> {
        let mut importer: Box<dyn DataImporter> = match self {
            ClientDataSpec::Synthetic(spec) => Box::new(SyntheticImporter::new(spec.clone())),
            ClientDataSpec::Csv {
                path,
                test_fraction,
            } => Box::new(CsvImporter::new(path.clone(), *test_fraction)),
        };
        importer.prepare()?;
        Ok(importer)
    }
}
