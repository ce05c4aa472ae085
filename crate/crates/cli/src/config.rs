//! Experiment config loading: a TOML file mapping onto [`RunConfig`], plus
//! the CLI-level keys `out_dir` and `[[variants]]`, with dotted-path
//! `--set` overrides applied on the raw document before deserialization.

use std::path::{Path, PathBuf};

use fedobd_core::{Algorithm, RunConfig};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug)]
pub struct Experiment {
    pub base: RunConfig,
    pub out_dir: PathBuf,
    /// (name, config) per `[[variants]]` entry: the base document with the
    /// variant's keys merged over it. Empty when the config declares none.
    pub variants: Vec<(String, RunConfig)>,
}

pub fn load(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
    out_flag: Option<PathBuf>,
) -> Result<Experiment, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;

    let out_dir = match out_flag {
        Some(dir) => dir,
        None => match table.remove("out_dir") {
            Some(Value::String(s)) => PathBuf::from(s),
            Some(other) => {
                return Err(CliError::usage(format!(
                    "out_dir must be a string, got {other}"
                )))
            }
            None => PathBuf::from("."),
        },
    };
    let variants_raw = table.remove("variants");

    for spec in sets {
        apply_set(&mut table, spec)?;
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed)
            .map_err(|_| CliError::usage("seed too large for the config format"))?;
        table.insert("seed".to_string(), Value::Integer(seed));
    }

    let base = run_config_from(table.clone())?;

    let mut variants = Vec::new();
    if let Some(raw) = variants_raw {
        let Value::Array(entries) = raw else {
            return Err(CliError::usage("variants must be an array of tables"));
        };
        for (index, entry) in entries.into_iter().enumerate() {
            let Value::Table(overrides) = entry else {
                return Err(CliError::usage(format!("variant {index} is not a table")));
            };
            let mut merged = table.clone();
            let mut name = None;
            for (key, value) in overrides {
                if key == "name" {
                    match value {
                        Value::String(s) => name = Some(s),
                        other => {
                            return Err(CliError::usage(format!(
                                "variant {index}: name must be a string, got {other}"
                            )))
                        }
                    }
                } else {
                    merged.insert(key, value);
                }
            }
            let name = name.unwrap_or_else(|| {
                merged
                    .get("algorithm")
                    .and_then(Value::as_str)
                    .unwrap_or("variant")
                    .to_string()
            });
            if variants.iter().any(|(n, _)| n == &name) {
                return Err(CliError::usage(format!("duplicate variant name {name:?}")));
            }
            variants.push((name, run_config_from(merged)?));
        }
    }

    Ok(Experiment { base, out_dir, variants })
}

fn run_config_from(table: Table) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
    Ok(normalize(cfg))
}

/// fedavg transmits full models unconditionally, so dropout and
/// quantization settings — typically inherited from a shared base config —
/// are cleared rather than rejected.
fn normalize(mut cfg: RunConfig) -> RunConfig {
    if cfg.algorithm == Algorithm::FedAvg {
        cfg.lambda = 0.0;
        cfg.quant_weight = None;
    }
    cfg
}

/// Apply one `key=value` override, where `key` may be a dotted path into
/// nested tables and `value` is parsed as TOML (falling back to a string).
fn apply_set(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(CliError::usage(format!("--set expects KEY=VALUE, got {spec:?}")));
    };
    let value = parse_value(raw.trim());
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::usage(format!("--set key {path:?} has an empty segment")));
    }
    let mut current = table;
    for segment in &segments[..segments.len() - 1] {
        current = current
            .entry(segment.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::usage(format!("--set {path}: {segment} is not a table"))
            })?;
    }
    current.insert(segments.last().unwrap().to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("exp.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    const MINIMAL: &str = r#"
seed = 7
algorithm = "fedobd"
n_clients = 2
lambda = 0.3
quant_weight = 0.01
stage1_rounds = 2
lr = 0.05

[dataset]
kind = "synthetic"
classes = 2
dim = 2
noise = 0.4
samples_per_client = 20
test_samples = 20

[model]
hidden = [4]
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), MINIMAL);
        let exp = load(&path, &[], None, None).unwrap();
        assert_eq!(exp.base.seed, 7);
        assert_eq!(exp.base.stage1_epochs, 1);
        assert_eq!(exp.base.stage2_epochs, 2);
        assert_eq!(exp.base.batch_size, 32);
        assert_eq!(exp.out_dir, PathBuf::from("."));
        assert!(exp.variants.is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &format!("{MINIMAL}\nlerning_rate = 1.0\n"));
        let err = load(&path, &[], None, None).unwrap_err();
        assert!(matches!(err, CliError::Usage(msg) if msg.contains("lerning_rate")));
    }

    #[test]
    fn set_overrides_reach_nested_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), MINIMAL);
        let sets = vec![
            "lambda=0.5".to_string(),
            "dataset.classes=3".to_string(),
            "model.hidden=[8, 8]".to_string(),
        ];
        let exp = load(&path, &sets, Some(99), None).unwrap();
        assert_eq!(exp.base.lambda, 0.5);
        assert_eq!(exp.base.seed, 99);
        assert_eq!(exp.base.model.hidden, vec![8, 8]);
        match exp.base.dataset {
            fedobd_core::DatasetSpec::Synthetic { classes, .. } => assert_eq!(classes, 3),
            _ => panic!("dataset kind changed"),
        }
    }

    #[test]
    fn fedavg_mode_clears_inherited_dropout_settings() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{MINIMAL}\n[[variants]]\nname = \"baseline\"\nalgorithm = \"fedavg\"\n\n\
             [[variants]]\nname = \"dropout\"\nalgorithm = \"fedobd\"\n"
        );
        let path = write_config(dir.path(), &body);
        let exp = load(&path, &[], None, None).unwrap();
        assert_eq!(exp.variants.len(), 2);
        let (name, baseline) = &exp.variants[0];
        assert_eq!(name, "baseline");
        assert_eq!(baseline.lambda, 0.0);
        assert_eq!(baseline.quant_weight, None);
        let (_, dropout) = &exp.variants[1];
        assert_eq!(dropout.lambda, 0.3);
        assert_eq!(dropout.quant_weight, Some(0.01));
    }

    #[test]
    fn duplicate_variant_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{MINIMAL}\n[[variants]]\nalgorithm = \"fedavg\"\n\n[[variants]]\nalgorithm = \"fedavg\"\n"
        );
        let path = write_config(dir.path(), &body);
        assert!(matches!(load(&path, &[], None, None), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load(Path::new("/nonexistent/exp.toml"), &[], None, None).unwrap_err();
        assert!(matches!(err, CliError::Usage(msg) if msg.contains("/nonexistent/exp.toml")));
    }

    #[test]
    fn malformed_set_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), MINIMAL);
        assert!(matches!(
            load(&path, &["lambda".to_string()], None, None),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn string_values_need_no_quotes_in_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), MINIMAL);
        // "fedavg" parses as a bare string (invalid TOML fragment falls
        // back to a string value).
        let exp = load(&path, &["algorithm=fedavg".to_string()], None, None).unwrap();
        assert_eq!(exp.base.algorithm, Algorithm::FedAvg);
        assert_eq!(exp.base.lambda, 0.0, "normalization still applies");
    }
}
