//! Flat key=value run configuration.
//!
//! Values resolve in three layers: built-in defaults, then an optional
//! config file, then command-line flag overrides. Unknown keys are errors.
//! Every command writes the fully resolved map back out as a config echo;
//! rerunning from the echo reproduces the run byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use icaf_core::data::SynthConfig;
use icaf_core::detector::DetectorConfig;
use icaf_core::fpn::{NeckConfig, Variant};
use icaf_core::train::TrainConfig;
use icaf_core::{CoreError, Result};

pub const ECHO_NAME: &str = "config_echo.txt";

const KNOWN: &[(&str, &str)] = &[
    ("seed", "0"),
    ("precision", "32"),
    ("out", "out"),
    ("variant", "full"),
    ("use_c2", "true"),
    ("data.dir", ""),
    ("data.split", ""),
    ("synth.count", "200"),
    ("synth.size", "128"),
    ("synth.classes", "2"),
    ("synth.hard_fraction", "0.16"),
    ("synth.level", "30"),
    ("synth.width", "300"),
    ("synth.train_frac", "0.7"),
    ("synth.val_frac", "0.15"),
    ("synth.texture", "40"),
    ("model.neck", "48"),
    ("model.heads", "3"),
    ("model.rates", "1,2,3"),
    ("model.kernel", "3"),
    ("model.classes", "2"),
    ("train.steps", "300"),
    ("train.batch", "2"),
    ("train.lr", "0.01"),
    ("train.warmup", "50"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0.0001"),
    ("eval.checkpoint", ""),
    ("eval.score_thresh", "0.05"),
    ("eval.nms_iou", "0.5"),
    ("eval.max_dets", "100"),
    ("gradcheck.probes", "4"),
    ("ablate.rows", "fpn-baseline,full,full-no-c2"),
    ("ablate.seeds", "1,2,3"),
    ("ablate.jobs", "0"),
    ("ablate.train_count", "1000"),
    ("ablate.val_count", "200"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KNOWN
                .iter()
                .map(|&(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(CoreError::MissingInput(format!(
                "config file {}",
                path.display()
            )));
        }
        let mut cfg = Config::default();
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CoreError::Parse {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| CoreError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(CoreError::InvalidArgument(format!(
                "unknown config key `{key}`"
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from registry"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.str(key).parse().map_err(|_| {
            CoreError::InvalidArgument(format!(
                "config key `{key}` has invalid value `{}`",
                self.str(key)
            ))
        })
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(CoreError::InvalidArgument(format!(
                "config key `{key}` must be true/false, got `{other}`"
            ))),
        }
    }

    /// Comma-separated list of integers.
    pub fn list_usize(&self, key: &str) -> Result<Vec<usize>> {
        self.str(key)
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    CoreError::InvalidArgument(format!(
                        "config key `{key}` has invalid element `{s}`"
                    ))
                })
            })
            .collect()
    }

    pub fn list_u64(&self, key: &str) -> Result<Vec<u64>> {
        self.str(key)
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    CoreError::InvalidArgument(format!(
                        "config key `{key}` has invalid element `{s}`"
                    ))
                })
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.str("out"))
    }

    /// Optional path value; empty string means unset.
    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        if v.is_empty() {
            None
        } else {
            Some(PathBuf::from(v))
        }
    }

    pub fn precision_bits(&self) -> Result<u8> {
        match self.str("precision") {
            "32" => Ok(32),
            "64" => Ok(64),
            other => Err(CoreError::InvalidArgument(format!(
                "precision must be 32 or 64, got `{other}`"
            ))),
        }
    }

    /// Fully resolved state, sorted by key.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join(ECHO_NAME), self.echo())?;
        Ok(())
    }

    // ── typed sub-configs ─────────────────────────────────────────────

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            seed: self.u64("seed")?,
            count: self.usize("synth.count")?,
            size: self.usize("synth.size")?,
            classes: self.usize("synth.classes")?,
            hard_fraction: self.f64("synth.hard_fraction")?,
            level: self.f64("synth.level")?,
            width: self.f64("synth.width")?,
            train_frac: self.f64("synth.train_frac")?,
            val_frac: self.f64("synth.val_frac")?,
            texture: self.f64("synth.texture")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn neck_config(&self, variant: Variant, use_c2: bool) -> Result<NeckConfig> {
        let mut neck = NeckConfig::new(self.usize("model.neck")?, variant);
        neck.use_c2 = use_c2;
        neck.heads = self.usize("model.heads")?;
        neck.rates = self.list_usize("model.rates")?;
        neck.kernel = self.usize("model.kernel")?;
        neck.validate()?;
        Ok(neck)
    }

    pub fn detector_config(
        &self,
        variant: Variant,
        use_c2: bool,
        image_size: usize,
    ) -> Result<DetectorConfig> {
        let mut det = DetectorConfig::new(self.neck_config(variant, use_c2)?, image_size);
        det.num_classes = self.usize("model.classes")?;
        det.score_thresh = self.f64("eval.score_thresh")?;
        det.nms_iou = self.f64("eval.nms_iou")?;
        det.max_dets = self.usize("eval.max_dets")?;
        det.validate()?;
        Ok(det)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.usize("train.steps")?,
            batch: self.usize("train.batch")?,
            lr: self.f64("train.lr")?,
            warmup: self.usize("train.warmup")?,
            momentum: self.f64("train.momentum")?,
            weight_decay: self.f64("train.weight_decay")?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(self.str("variant"))
    }
}

/// Ablation row: a variant plus the C2 toggle, e.g. `full` or `full-no-c2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblateRow {
    pub label: String,
    pub variant: Variant,
    pub use_c2: bool,
}

pub fn parse_rows(spec: &str) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::new();
    for part in spec.split(',') {
        let label = part.trim();
        if label.is_empty() {
            continue;
        }
        let (name, use_c2) = match label.strip_suffix("-no-c2") {
            Some(base) => (base, false),
            None => (label, true),
        };
        rows.push(AblateRow {
            label: label.to_string(),
            variant: Variant::parse(name)?,
            use_c2,
        });
    }
    if rows.is_empty() {
        return Err(CoreError::InvalidArgument(
            "ablate.rows resolves to an empty list".into(),
        ));
    }
    Ok(rows)
}
