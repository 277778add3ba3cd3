//! Ablation and sweep runners: one training run per cell with shared seeds,
//! results emitted as CSV plus a formatted table.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{AblationSwitches, ConfigError, TrainConfig};
use crate::train::{train, TrainError};

/// One ablation row aggregated over seeds.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub group: &'static str,
    pub label: String,
    pub switch: Option<String>,
    pub acc10: Vec<f64>,
    pub acc30: Vec<f64>,
}

impl AblationRow {
    pub fn mean10(&self) -> f64 {
        mean(&self.acc10)
    }

    pub fn mean30(&self) -> f64 {
        mean(&self.acc30)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn switch_descriptor(name: &str) -> Result<(&'static str, String), ConfigError> {
    let (group, label) = match name {
        "drop_code" => ("Modalities", "w/o Code"),
        "drop_demo" => ("Modalities", "w/o Demo"),
        "drop_note" => ("Modalities", "w/o Note"),
        "no_transformers" => ("Multimodal Fusion", "w/o Transformers"),
        "no_mag" => ("Multimodal Fusion", "w/o Gated Fusion"),
        "no_contrastive" => ("Multimodal Fusion", "w/o Contrastive Loss"),
        "no_hierarchy" => ("Hierarchy", "w/o Hierarchy Loss"),
        "no_code_centring" => ("Multimodal Fusion", "w/o Code Centring"),
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown ablation switch {other:?}; known: {}",
                AblationSwitches::ALL.join(", ")
            )))
        }
    };
    Ok((group, label.to_string()))
}

/// Trains the full model plus one run per requested switch, for every seed.
pub fn run_ablation(
    base: &TrainConfig,
    axes: &[String],
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    let mut rows = vec![AblationRow {
        group: "Full",
        label: "Full".into(),
        switch: None,
        acc10: Vec::new(),
        acc30: Vec::new(),
    }];
    for axis in axes {
        let (group, label) = switch_descriptor(axis)?;
        rows.push(AblationRow {
            group,
            label,
            switch: Some(axis.clone()),
            acc10: Vec::new(),
            acc30: Vec::new(),
        });
    }

    for row in &mut rows {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            if let Some(name) = &row.switch {
                let apply = AblationSwitches::parse_switch(name)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown switch {name:?}")))?;
                apply(&mut cfg.ablation);
            }
            let out = train(&cfg, None)?;
            row.acc10.push(out.report.acc_at(10));
            row.acc30.push(out.report.acc_at(30));
            log::info!(
                "ablation {} seed {seed}: acc@10 {:.4} acc@30 {:.4}",
                row.label,
                out.report.acc_at(10),
                out.report.acc_at(30)
            );
        }
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,label,seed,acc10,acc30\n");
        for row in &self.rows {
            for (i, &seed) in self.seeds.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6}",
                    row.group, row.label, seed, row.acc10[i], row.acc30[i]
                );
            }
        }
        out
    }

    /// Grouped table with per-row seed means, widest metric first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:<22} {:>8} {:>8}", "Criteria", "Components", "Acc@10", "Acc@30");
        let _ = writeln!(out, "{}", "-".repeat(64));
        let mut last_group = "";
        for row in &self.rows {
            let group = if row.group == last_group { "" } else { row.group };
            last_group = row.group;
            let _ = writeln!(
                out,
                "{:<22} {:<22} {:>8.2} {:>8.2}",
                group,
                row.label,
                100.0 * row.mean10(),
                100.0 * row.mean30()
            );
        }
        out
    }

    pub fn write_files(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        Ok(())
    }
}

/// Hierarchy-weight sweep: one run per grid value with a shared seed.
pub fn sweep_lambda(
    base: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::new();
    for &value in grid {
        if value < 0.0 {
            return Err(ConfigError::Invalid(format!("negative hierarchy weight {value}")).into());
        }
        let mut row = AblationRow {
            group: "Hierarchy weight",
            label: format!("{value}"),
            switch: None,
            acc10: Vec::new(),
            acc30: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.loss.lambda_hrchy = value;
            let out = train(&cfg, None)?;
            row.acc10.push(out.report.acc_at(10));
            row.acc30.push(out.report.acc_at(30));
            log::info!(
                "sweep weight {value} seed {seed}: acc@10 {:.4} acc@30 {:.4}",
                out.report.acc_at(10),
                out.report.acc_at(30)
            );
        }
        rows.push(row);
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, ModelConfig, OptimizerKind, Pooling};
    use crate::data::GenParams;

    fn micro_config() -> TrainConfig {
        TrainConfig {
            seed: 1,
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 1,
            early_stop_patience: 5,
            optimizer: OptimizerKind::Adam,
            loss: Default::default(),
            model: ModelConfig {
                hidden: 8,
                note_hidden: 6,
                word_dim: 4,
                note_filters: vec![2],
                heads: 2,
                layers: 1,
                dropout: 0.1,
                projector_width: 1,
                causal: true,
                freeze_word_embeddings: false,
                pool: Pooling::Mean,
            },
            data: DataConfig {
                patients: 16,
                data_seed: 2,
                split_seed: 2,
                ratios: [0.6, 0.2, 0.2],
                cohort_path: None,
                ontology_path: None,
                gen: GenParams {
                    vocab: 400,
                    code_block: 3,
                    note_len_min: 4,
                    note_len_max: 6,
                    ..GenParams::default()
                },
            },
            ablation: Default::default(),
        }
    }

    #[test]
    fn single_axis_gives_two_rows() {
        let table = run_ablation(&micro_config(), &["no_hierarchy".into()], &[1]).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].label, "Full");
        assert_eq!(table.rows[1].label, "w/o Hierarchy Loss");
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(table.to_text().contains("Acc@30"));
    }

    #[test]
    fn unknown_axis_is_a_config_error() {
        let err = run_ablation(&micro_config(), &["no_such".into()], &[1]).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn lambda_grid_produces_one_row_per_value() {
        let table = sweep_lambda(&micro_config(), &[0.01, 0.1, 1.0], &[1]).unwrap();
        assert_eq!(table.rows.len(), 3);
        let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec!["0.01", "0.1", "1"]);
    }
}
