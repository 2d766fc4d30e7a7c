//! The run configuration file.

use std::path::{Path, PathBuf};

use quadapter::data::{load_corpus, make_synthetic_corpora, CorpusSplits, Split, SyntheticSizes};
use quadapter::experiment::{MatrixOptions, Method};
use quadapter::model::{ModelConfig, ToyTransformer};
use quadapter::train::TrainPlan;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Everything structural about a run. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model init and training seed. Overrides `plan.seed`.
    pub seed: u64,
    /// One of the method names, e.g. `quadapter` or `qat_no_lsq`.
    pub method: String,
    /// Output root; `QUADAPTER_OUT` and `--out` take precedence.
    pub out_dir: PathBuf,
    /// Corpus the fine-tuning methods train on. Defaults to the first corpus.
    pub fine_tune_on: Option<String>,
    /// Fraction of the fine-tuning split used by `quantize`.
    pub data_fraction: f64,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub data: DataConfig,
    pub surgery: Option<Surgery>,
    pub experiment: MatrixOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            method: Method::Quadapter.name().into(),
            out_dir: PathBuf::from("runs"),
            fine_tune_on: None,
            data_fraction: 1.0,
            model: ModelConfig::default(),
            plan: TrainPlan::default(),
            data: DataConfig::default(),
            surgery: None,
            experiment: MatrixOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generates the two synthetic corpora `A` and `B` from this seed.
    pub synthetic_seed: Option<u64>,
    pub synthetic_sizes: SyntheticSizes,
    /// Byte corpora on disk. Relative paths resolve against the config file.
    pub corpus: Vec<CorpusFiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFiles {
    pub name: String,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

/// Function-preserving outlier injection applied after pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surgery {
    pub channels: Vec<usize>,
    pub factor: f64,
    /// Adapter sites to operate on; empty means all of them.
    #[serde(default)]
    pub sites: Vec<String>,
}

impl RunConfig {
    /// Reads a TOML config, or the config snapshot stored in a run manifest.
    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let manifest: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let snapshot = manifest.get("config").cloned().ok_or_else(|| {
                CliError::Config(format!("{} is not a run manifest (no config)", path.display()))
            })?;
            serde_json::from_value(snapshot).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Applies flag overrides and checks cross-field consistency.
    pub fn finish(mut self, base: &Path, seed: Option<u64>, method: Option<&str>) -> CliResult<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(m) = method {
            self.method = m.to_string();
        }
        self.plan.seed = self.seed;
        for c in &mut self.data.corpus {
            for p in [&mut c.train, &mut c.valid, &mut c.test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        self.method()?;
        self.model.validate()?;
        self.plan.validate()?;
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(CliError::Config(format!("data_fraction {} outside (0, 1]", self.data_fraction)));
        }
        match (self.data.synthetic_seed, self.data.corpus.is_empty()) {
            (None, true) => return Err(CliError::Config("no corpus paths and no synthetic_seed".into())),
            (Some(_), false) => {
                return Err(CliError::Config("give either corpus paths or synthetic_seed, not both".into()))
            }
            _ => {}
        }
        if let Some(s) = &self.surgery {
            if !(s.factor.is_finite() && s.factor > 0.0) {
                return Err(CliError::Config(format!("surgery factor {} must be positive", s.factor)));
            }
        }
        Ok(self)
    }

    pub fn method(&self) -> CliResult<Method> {
        Ok(self.method.parse()?)
    }

    /// Loads or generates every corpus.
    pub fn corpora(&self) -> CliResult<Vec<CorpusSplits>> {
        if let Some(seed) = self.data.synthetic_seed {
            let (a, b) = make_synthetic_corpora(seed, self.data.synthetic_sizes);
            return Ok(vec![a, b]);
        }
        self.data
            .corpus
            .iter()
            .map(|c| {
                let load = |p: &Path, s| {
                    load_corpus(p, &c.name, s).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
                };
                Ok(CorpusSplits {
                    train: load(&c.train, Split::Train)?,
                    valid: load(&c.valid, Split::Valid)?,
                    test: load(&c.test, Split::Test)?,
                })
            })
            .collect()
    }

    /// Corpus files read by this config, for the manifest.
    pub fn input_files(&self) -> Vec<PathBuf> {
        self.data.corpus.iter().flat_map(|c| [c.train.clone(), c.valid.clone(), c.test.clone()]).collect()
    }

    pub fn fine_tune_corpus<'a>(&self, corpora: &'a [CorpusSplits]) -> CliResult<&'a CorpusSplits> {
        match &self.fine_tune_on {
            None => corpora.first().ok_or_else(|| CliError::Data("no corpora".into())),
            Some(name) => corpora
                .iter()
                .find(|c| c.name() == name)
                .ok_or_else(|| CliError::Config(format!("fine_tune_on names unknown corpus {name:?}"))),
        }
    }

    pub fn apply_surgery(&self, model: &mut ToyTransformer) -> CliResult<()> {
        let Some(s) = &self.surgery else { return Ok(()) };
        let sites: Vec<String> = if s.sites.is_empty() {
            model.adapter_sites().into_iter().map(|site| site.name).collect()
        } else {
            s.sites.clone()
        };
        for site in sites {
            model.inject_outliers(&site, &s.channels, s.factor).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }
}
