//! Experiment files: TOML, one `[[compare]]` table per comparison, plus
//! optional `[verify]` and `[latency]` sections.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use segattn::analysis::Compression;
use segattn::model::{ModelKind, TransformerConfig};
use segattn::runtime::{ExchangeMode, NetworkModel, Strategy};
use segattn::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    pub n_tokens: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_blocks: usize,
    pub kind: Kind,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

/// A preset name (`vit-base`, `bert-base`, `gpt2-base`) or explicit dims.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(CustomModel),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<TransformerConfig, Error> {
        let cfg = match self {
            ModelSpec::Preset(name) => match name.as_str() {
                "vit-base" => TransformerConfig::vit_base(),
                "bert-base" => TransformerConfig::bert_base(),
                "gpt2-base" => TransformerConfig::gpt2_base(),
                other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
            },
            ModelSpec::Custom(c) => TransformerConfig {
                n_tokens: c.n_tokens,
                embed_dim: c.embed_dim,
                head_dim: c.head_dim,
                n_heads: c.n_heads,
                ffn_dim: c.ffn_dim,
                n_blocks: c.n_blocks,
                kind: match c.kind {
                    Kind::Encoder => ModelKind::Encoder,
                    Kind::Decoder => ModelKind::Decoder,
                },
                n_partitions: 1,
                landmarks: 1,
                ln_eps: c.ln_eps,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        match self {
            ModelSpec::Preset(name) => name.clone(),
            ModelSpec::Custom(c) => format!("custom-n{}-d{}", c.n_tokens, c.embed_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub name: String,
    pub model: ModelSpec,
    /// Sequence length not stated by the source; reported in the output.
    #[serde(default)]
    pub inferred: bool,
    pub strategies: Vec<String>,
    pub partitions: Vec<usize>,
    #[serde(default)]
    pub landmarks: Vec<usize>,
    #[serde(default)]
    pub compression_rates: Vec<f64>,
}

impl CompareSection {
    pub fn strategies(&self) -> Result<Vec<Strategy>, Error> {
        self.strategies.iter().map(|s| s.parse()).collect()
    }

    /// Landmark counts first, then nominal rates, in file order.
    pub fn compressions(&self) -> Vec<Compression> {
        self.landmarks
            .iter()
            .map(|&l| Compression::Landmarks(l))
            .chain(self.compression_rates.iter().map(|&k| Compression::Rate(k)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    pub model: ModelSpec,
    pub partitions: Vec<usize>,
    pub landmarks: Vec<usize>,
    pub bandwidth_mbps: Sweep,
    #[serde(default = "default_msg_latency")]
    pub per_message_latency_ms: f64,
    #[serde(default = "default_bytes")]
    pub bytes_per_scalar: usize,
    pub device_gflops: f64,
}

fn default_msg_latency() -> f64 {
    1.0
}

fn default_bytes() -> usize {
    4
}

impl LatencySection {
    pub fn network(&self) -> NetworkModel {
        NetworkModel {
            bandwidth_bps: self.bandwidth_mbps.max * 1e6,
            per_message_latency_s: self.per_message_latency_ms * 1e-3,
            bytes_per_scalar: self.bytes_per_scalar,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InjectFault {
    #[default]
    None,
    /// Corrupt the repetition vector before the scaled-attention check.
    WrongG,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub model: ModelSpec,
    pub partitions: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub inject_fault: InjectFault,
}

fn default_trials() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub verify: Option<VerifySection>,
    #[serde(default)]
    pub compare: Vec<CompareSection>,
    pub latency: Option<LatencySection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Unicast,
    Broadcast,
}

impl From<Mode> for ExchangeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Unicast => ExchangeMode::Unicast,
            Mode::Broadcast => ExchangeMode::Broadcast,
        }
    }
}

fn default_precision() -> Precision {
    Precision::F64
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    /// Parses and checks that every referenced preset and strategy resolves.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn check(&self) -> Result<(), Error> {
        let field = |section: &str, e: Error| Error::Config(format!("[{section}]: {e}"));
        if let Some(v) = &self.verify {
            v.model.resolve().map_err(|e| field("verify", e))?;
            if v.partitions.is_empty() || v.partitions.contains(&0) {
                return Err(Error::Config("[verify] partitions must be positive".into()));
            }
        }
        for c in &self.compare {
            let section = format!("compare {:?}", c.name);
            c.model.resolve().map_err(|e| field(&section, e))?;
            let strategies = c.strategies().map_err(|e| field(&section, e))?;
            if strategies.contains(&Strategy::Prism) && c.compressions().is_empty() {
                return Err(Error::Config(format!(
                    "[{section}] prism needs landmarks or compression_rates"
                )));
            }
            if c.partitions.iter().any(|&p| p < 2) {
                return Err(Error::Config(format!("[{section}] partitions must be >= 2")));
            }
        }
        if let Some(l) = &self.latency {
            l.model.resolve().map_err(|e| field("latency", e))?;
            l.network().validate().map_err(|e| field("latency", e))?;
            let s = &l.bandwidth_mbps;
            if !(s.min > 0.0 && s.max >= s.min && s.points >= 2) || !(l.device_gflops > 0.0) {
                return Err(Error::Config(
                    "[latency] needs 0 < min <= max, points >= 2 and positive device_gflops".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_presets_and_custom_models() {
        let cfg = ExperimentConfig::parse(
            r#"
            seed = 3
            [verify]
            model = { n_tokens = 12, embed_dim = 8, head_dim = 4, n_heads = 2, ffn_dim = 16, n_blocks = 2, kind = "decoder" }
            partitions = [1, 2]
            inject_fault = "wrong-g"

            [[compare]]
            name = "t"
            model = "vit-base"
            strategies = ["voltage", "prism"]
            partitions = [2]
            landmarks = [10]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.precision, Precision::F64);
        let v = cfg.verify.unwrap();
        assert_eq!(v.inject_fault, InjectFault::WrongG);
        assert_eq!(v.model.resolve().unwrap().kind, ModelKind::Decoder);
        assert_eq!(cfg.compare[0].model.resolve().unwrap().n_tokens, 197);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::parse("seed = 1\nprecision = \"f16\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("precision"), "{msg}");

        let err = ExperimentConfig::parse(
            "[[compare]]\nname = \"x\"\nmodel = \"vit-huge\"\nstrategies = []\npartitions = [2]\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("vit-huge"));

        let err = ExperimentConfig::parse("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
