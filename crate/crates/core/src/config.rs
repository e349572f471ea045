//! Flat `key=value` run configuration with command-line overrides.

use std::path::PathBuf;

use crate::cloud::CloudConfig;
use crate::error::{Error, Result};
use crate::fine::{CcamMode, FineConfig};
use crate::loss::ContrastiveForm;
use crate::pipeline::FineEncoders;
use crate::scenegen::{sha256_hex, Split, WorldConfig};
use crate::ssm::ScanMode;
use crate::text::{Combiner, TextConfig};

/// Canonical text of a config value; the inverse of its `FromStr`.
trait Show {
    fn show(&self) -> String;
}

macro_rules! show_via_display {
    ($($t:ty),*) => {
        $(impl Show for $t {
            fn show(&self) -> String {
                self.to_string()
            }
        })*
    };
}

show_via_display!(u64, usize, f64, bool, Combiner, CcamMode, ScanMode, ContrastiveForm, Split, FineEncoders);

impl Show for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr;)*) => {
        /// Every tunable of a run. Keys are the field names.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.trim().parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value {value:?} for {key}: {e}"))
                        })?;
                    })*
                    other => return Err(Error::Config(format!("unknown key {other}"))),
                }
                Ok(())
            }

            fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), Show::show(&self.$key)),)*]
            }
        }
    };
}

run_config! {
    seed: u64 = 17;
    grid: usize = 16;
    stride: f64 = 10.0;
    min_instances: usize = 6;
    max_instances: usize = 10;
    min_points: usize = 24;
    max_points: usize = 48;
    min_separation: f64 = 3.0;
    hints_per_query: usize = 6;
    queries_per_cell: usize = 8;
    train_frac: f64 = 0.6;
    val_frac: f64 = 0.2;
    test_frac: f64 = 0.2;
    data_dir: PathBuf = PathBuf::from("data");
    run_dir: PathBuf = PathBuf::from("run");
    d_model: usize = 128;
    d_state: usize = 16;
    heads: usize = 4;
    conv_width: usize = 4;
    tam_layers: usize = 2;
    pcm_blocks: usize = 4;
    ccam_stages: usize = 2;
    out_dim: usize = 128;
    combiner: Combiner = Combiner::Sum;
    tam_attention: bool = true;
    tam_mamba: bool = true;
    aggregate_attention: bool = true;
    ccam_mode: CcamMode = CcamMode::Literal;
    mamba_gate: bool = true;
    scan: ScanMode = ScanMode::Parallel;
    coarse_lr: f64 = 5e-4;
    coarse_epochs: usize = 20;
    fine_lr: f64 = 3e-4;
    fine_epochs: usize = 35;
    batch_size: usize = 32;
    temperature: f64 = 0.07;
    contrastive_form: ContrastiveForm = ContrastiveForm::Symmetric;
    fine_squared: bool = false;
    clip_norm: f64 = 1.0;
    augment: bool = true;
    fine_encoders: FineEncoders = FineEncoders::Tuned;
    eval_split: Split = Split::Val;
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got {flag}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            self.set(&key.replace('-', "_"), &value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.world().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_state == 0 || self.conv_width == 0 || self.out_dim == 0 {
            return bad("d_state, conv_width and out_dim must be positive");
        }
        if self.ccam_stages == 0 {
            return bad("ccam_stages must be at least 1");
        }
        if !(self.coarse_lr >= 0.0 && self.fine_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        let mut pairs = self.pairs();
        pairs.sort();
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Short digest of [`RunConfig::canonical`], printed on every log line.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical().as_bytes())[..16].to_string()
    }

    /// Lines of the keys that shape the generated data.
    pub fn world_canonical(&self) -> String {
        let keys = [
            "seed", "grid", "stride", "min_instances", "max_instances", "min_points", "max_points",
            "min_separation", "hints_per_query", "queries_per_cell", "train_frac", "val_frac", "test_frac",
        ];
        let mut pairs = self.pairs();
        pairs.retain(|(k, _)| keys.contains(k));
        pairs.sort();
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            grid: self.grid,
            stride: self.stride,
            min_instances: self.min_instances,
            max_instances: self.max_instances,
            min_points: self.min_points,
            max_points: self.max_points,
            min_separation: self.min_separation,
            hints_per_query: self.hints_per_query,
            queries_per_cell: self.queries_per_cell,
            fractions: [self.train_frac, self.val_frac, self.test_frac],
        }
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            heads: self.heads,
            conv_width: self.conv_width,
            tam_layers: self.tam_layers,
            out_dim: self.out_dim,
            combiner: self.combiner,
            tam_attention: self.tam_attention,
            tam_mamba: self.tam_mamba,
            aggregate_attention: self.aggregate_attention,
            scan: self.scan,
        }
    }

    pub fn cloud(&self) -> CloudConfig {
        CloudConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            conv_width: self.conv_width,
            pcm_blocks: self.pcm_blocks,
            out_dim: self.out_dim,
            scan: self.scan,
        }
    }

    pub fn fine(&self) -> FineConfig {
        FineConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            heads: self.heads,
            conv_width: self.conv_width,
            stages: self.ccam_stages,
            mode: self.ccam_mode,
            gated: self.mamba_gate,
            scan: self.scan,
        }
    }
}
