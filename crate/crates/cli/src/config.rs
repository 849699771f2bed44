use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qlr_core::data::DatasetSpec;
use qlr_core::layers::LayerSpec;
use qlr_core::memsim::efficiency::{DEFAULT_CORES, DEFAULT_L1_SIZES};
use qlr_core::memsim::{Duplex, HierarchyConfig, KernelEfficiencyTable, Workload};
use qlr_core::protocol::{desk_model_specs, ProtocolConfig};
use qlr_core::quant::LatentPrecision;

use crate::error::CliError;

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_q() -> u8 {
    8
}

/// One experiment: desk-scale training plus the memory-hierarchy study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// The only source of randomness; copied into the dataset and protocol.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// TOML layer list with a split index; the built-in desk model if absent.
    #[serde(default)]
    pub model_spec: Option<PathBuf>,
    /// Frozen-stage bitwidth.
    #[serde(default = "default_q")]
    pub q_bits: u8,
    /// Latent replay bitwidth, 32 for FP32.
    pub q_lr: u8,
    pub n_lr: usize,
    pub dataset: DatasetSpec,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub hierarchy: HierarchyConfig,
    /// Kernel efficiency table; the built-in table if absent.
    #[serde(default)]
    pub efficiency_table: Option<PathBuf>,
    #[serde(default)]
    pub memsim: MemsimConfig,
    #[serde(default)]
    pub lifetime: LifetimeConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadChoice {
    /// MobileNet-V1 at 128×128.
    MobilenetV1,
    /// The model trained by the desk protocol.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemsimConfig {
    pub workload: WorkloadChoice,
    pub classes: usize,
    /// First adaptive layer.
    pub split: usize,
    /// Replays kept for the memory report at this scale.
    pub n_lr: usize,
    /// New samples per learning event and epochs over them; each mini-batch
    /// carries `protocol.batch_size` latents of which `protocol.n_new` are new.
    pub event_samples: usize,
    pub event_epochs: usize,
    pub sweep_bandwidths: Vec<u32>,
    pub sweep_cores: Vec<u32>,
    pub sweep_l1: Vec<usize>,
    pub sweep_duplex: Duplex,
}

impl Default for MemsimConfig {
    fn default() -> Self {
        Self {
            workload: WorkloadChoice::MobilenetV1,
            classes: 50,
            split: 19,
            n_lr: 1500,
            event_samples: 300,
            event_epochs: 4,
            sweep_bandwidths: vec![8, 16, 32, 64, 128],
            sweep_cores: DEFAULT_CORES.to_vec(),
            sweep_l1: DEFAULT_L1_SIZES.to_vec(),
            sweep_duplex: Duplex::Half,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifetimeConfig {
    pub battery_mah: f64,
    pub battery_v: f64,
    pub events_per_hour: f64,
}

impl Default for LifetimeConfig {
    fn default() -> Self {
        Self {
            battery_mah: 3300.0,
            battery_v: 1.8,
            events_per_hour: 1080.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Latent bitwidths of the replay-size/accuracy table; 32 is FP32.
    pub pareto_q_lr: Vec<u8>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            pareto_q_lr: vec![32, 8, 7, 6],
        }
    }
}

/// Layer list loaded from `model_spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecFile {
    pub split: usize,
    pub layers: Vec<LayerSpec>,
}

/// A loaded config together with where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
    pub overrides: Vec<String>,
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override `{key}`: `{part}` is not inside a table"))
        })?;
        if i + 1 == parts.len() {
            if matches!(table.get(*part), Some(toml::Value::Table(_))) {
                return Err(CliError::Config(format!(
                    "override `{key}` targets a table, only scalars may be set"
                )));
            }
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = table
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Loaded {
    /// Reads the config, applies `key=value` overrides in order, propagates the
    /// seed and checks that referenced files exist.
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
        let mut value: toml::Value = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{ov}` is not key=value")))?;
            set_path(&mut value, k.trim(), parse_value(v.trim()))?;
        }
        let mut config: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for (what, seed) in [
            ("dataset", config.dataset.seed),
            ("protocol", config.protocol.seed),
        ] {
            if seed != 0 && seed != config.seed {
                return Err(CliError::Config(format!(
                    "{what}.seed = {seed} differs from seed = {}; set only the top-level seed",
                    config.seed
                )));
            }
        }
        config.dataset.seed = config.seed;
        config.protocol.seed = config.seed;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self {
            config,
            base,
            overrides: overrides.to_vec(),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        c.dataset.validate()?;
        c.protocol.validate()?;
        c.hierarchy.validate()?;
        for &q in std::iter::once(&c.q_lr).chain(&c.report.pareto_q_lr) {
            LatentPrecision::try_from(q).map_err(CliError::Config)?;
        }
        if !(2..=8).contains(&c.q_bits) {
            return Err(CliError::Config(format!(
                "q_bits {} not in 2..=8",
                c.q_bits
            )));
        }
        if c.dataset.classes != c.protocol.total_classes {
            return Err(CliError::Config(format!(
                "dataset.classes = {} but protocol.total_classes = {}",
                c.dataset.classes, c.protocol.total_classes
            )));
        }
        for p in [&c.model_spec, &c.efficiency_table].into_iter().flatten() {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(CliError::MissingInput(format!(
                    "referenced file {} does not exist",
                    full.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn canonical_toml(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_toml().as_bytes()))
    }

    pub fn latent(&self) -> LatentPrecision {
        LatentPrecision::try_from(self.config.q_lr).expect("validated")
    }

    /// Layer list and split of the trained model.
    pub fn model_layers(&self) -> Result<(Vec<LayerSpec>, usize), CliError> {
        match &self.config.model_spec {
            Some(p) => {
                let full = self.resolve(p);
                let text = fs::read_to_string(&full)
                    .map_err(|e| CliError::MissingInput(format!("{}: {e}", full.display())))?;
                let spec: ModelSpecFile = toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?;
                Ok((spec.layers, spec.split))
            }
            None => {
                let d = &self.config.dataset;
                Ok(desk_model_specs(d.channels, d.size, d.classes))
            }
        }
    }

    pub fn efficiency_table(&self) -> Result<KernelEfficiencyTable, CliError> {
        match &self.config.efficiency_table {
            Some(p) => {
                let full = self.resolve(p);
                let text = fs::read_to_string(&full)
                    .map_err(|e| CliError::MissingInput(format!("{}: {e}", full.display())))?;
                Ok(KernelEfficiencyTable::from_toml(&text)?)
            }
            None => Ok(KernelEfficiencyTable::default()),
        }
    }

    /// Workload and first adaptive layer for the memory-hierarchy commands.
    pub fn workload(&self) -> Result<(Workload, usize), CliError> {
        let m = &self.config.memsim;
        match m.workload {
            WorkloadChoice::MobilenetV1 => Ok((Workload::mobilenet_v1_128(m.classes), m.split)),
            WorkloadChoice::Desk => {
                let (layers, split) = self.model_layers()?;
                let d = &self.config.dataset;
                let model = qlr_core::protocol::init_model(
                    &layers,
                    split,
                    d.sample_shape(),
                    self.config.seed,
                )?;
                Ok(Workload::from_model(&model))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const MINIMAL: &str = r#"
seed = 4
q_lr = 7
n_lr = 40

[dataset]
classes = 4
channels = 3
size = 8
instances_per_class = 2
train_per_instance = 6
test_per_instance = 2
instance_mix = 0.6
noise = 0.35
max_shift = 1
glare_prob = 0.1
glare_gain = 4.0

[protocol]
initial_classes = 2
total_classes = 4
initial_instances = 1
events = 2
samples_per_event = 20
batch_size = 16
n_new = 4
epochs = 1
lr = 0.05
"#;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("exp.toml");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn seed_propagates_and_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), MINIMAL);
        let l = Loaded::from_file(
            &p,
            &[
                "seed=9".into(),
                "protocol.lr=0.01".into(),
                "memsim.split=23".into(),
            ],
        )
        .unwrap();
        assert_eq!(l.config.dataset.seed, 9);
        assert_eq!(l.config.protocol.seed, 9);
        assert_eq!(l.config.protocol.lr, 0.01);
        assert_eq!(l.config.memsim.split, 23);
        let plain = Loaded::from_file(&p, &[]).unwrap();
        assert_ne!(plain.config_hash(), l.config_hash());
        assert_eq!(
            plain.config_hash(),
            Loaded::from_file(&p, &[]).unwrap().config_hash()
        );
    }

    #[test]
    fn schema_violations_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("{MINIMAL}\nbogus = 1\n"));
        assert!(matches!(
            Loaded::from_file(&p, &[]),
            Err(CliError::Config(_))
        ));
        let p = write(dir.path(), MINIMAL);
        assert!(matches!(
            Loaded::from_file(&p, &["q_lr=5".into(), "q_lr=33".into()]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            Loaded::from_file(&p, &["protocol=1".into()]),
            Err(CliError::Config(_))
        ));
        let p = write(
            dir.path(),
            &MINIMAL.replace("[dataset]", "[dataset]\nseed = 3"),
        );
        assert!(matches!(
            Loaded::from_file(&p, &[]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn missing_referenced_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            &MINIMAL.replace("n_lr = 40", "n_lr = 40\nefficiency_table = \"nope.toml\""),
        );
        assert!(matches!(
            Loaded::from_file(&p, &[]),
            Err(CliError::MissingInput(_))
        ));
    }

    #[test]
    fn string_fallback_for_bare_words() {
        assert_eq!(parse_value("desk"), toml::Value::String("desk".into()));
        assert_eq!(parse_value("12"), toml::Value::Integer(12));
        assert_eq!(
            parse_value("[1, 2]"),
            toml::Value::Array(vec![1.into(), 2.into()])
        );
    }
}
