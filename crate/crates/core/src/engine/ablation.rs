use super::{evaluate, prepare, train, EngineError, RunConfig};
use crate::scenegen::Scenario;
use std::fmt::Write as _;

/// One configuration of the selection/joint-supervision sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub ofs: bool,
    pub disco: bool,
    pub voxel: [f64; 3],
    /// 3D Acc@0.25 and Acc@0.5 per seed.
    pub per_seed: Vec<[f64; 2]>,
}

impl AblationRow {
    /// Seed-mean 3D accuracy at 0.25 and 0.5.
    pub fn mean(&self) -> [f64; 2] {
        let n = self.per_seed.len().max(1) as f64;
        let sum = self
            .per_seed
            .iter()
            .fold([0.0, 0.0], |acc, r| [acc[0] + r[0], acc[1] + r[1]]);
        [sum[0] / n, sum[1] / n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<18} {:>4} {:>6} {:>9} {:>9}",
            "config", "voxel (m)", "OFS", "DiSCo", "3D@0.25", "3D@0.5"
        );
        for r in &self.rows {
            let [a25, a50] = r.mean();
            let voxel = format!("({}, {}, {})", r.voxel[0], r.voxel[1], r.voxel[2]);
            let mark = |b: bool| if b { "yes" } else { "no" };
            let _ = writeln!(
                out,
                "{:<10} {:<18} {:>4} {:>6} {:>9.2} {:>9.2}",
                r.label,
                voxel,
                mark(r.ofs),
                mark(r.disco),
                a25,
                a50
            );
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "mean over seeds {}", seeds.join(", "));
        out
    }
}

/// The four sweep rows in reporting order. Rows without selection use every
/// BEV cell as a token, so their pillars are twice as wide in x and y.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    [("full", true, true), ("w/o OFS", false, true), ("w/o DiSCo", true, false), ("w/o both", false, false)]
        .into_iter()
        .map(|(label, ofs, disco)| {
            let mut cfg = base.clone();
            cfg.ofs_enabled = ofs;
            cfg.disco_enabled = disco;
            if !ofs {
                cfg.grid.voxel[0] *= 2.0;
                cfg.grid.voxel[1] *= 2.0;
            }
            (label, cfg)
        })
        .collect()
}

/// Trains and evaluates every row for every seed.
pub fn ablation_run(
    train_set: &[Scenario],
    test_set: &[Scenario],
    base: &RunConfig,
    seeds: &[u64],
    progress: &mut dyn FnMut(&str, u64, [f64; 2]),
) -> Result<AblationTable, EngineError> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let mut rows = Vec::new();
    for (label, cfg) in ablation_configs(base) {
        cfg.validate()?;
        let train_data = prepare(train_set, &cfg)?;
        let test_data = prepare(test_set, &cfg)?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            let outcome = train(&train_data, &run)?;
            let (report, _) = evaluate(&test_data, &outcome.params, &run)?;
            let acc = report.overall.d3;
            progress(label, seed, acc);
            per_seed.push(acc);
        }
        rows.push(AblationRow {
            label,
            ofs: cfg.ofs_enabled,
            disco: cfg.disco_enabled,
            voxel: cfg.grid.voxel,
            per_seed,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_rows_in_order() {
        let rows = ablation_configs(&RunConfig::desk());
        let labels: Vec<&str> = rows.iter().map(|r| r.0).collect();
        assert_eq!(labels, ["full", "w/o OFS", "w/o DiSCo", "w/o both"]);
        assert!(rows[0].1.ofs_enabled && rows[0].1.disco_enabled);
        assert!(!rows[3].1.ofs_enabled && !rows[3].1.disco_enabled);
        assert_eq!(rows[1].1.grid.voxel, [2.0, 2.0, 8.0]);
        assert_eq!(rows[2].1.grid.voxel, [1.0, 1.0, 8.0]);
    }

    #[test]
    fn table_layout() {
        let t = AblationTable {
            seeds: vec![0, 1],
            rows: ablation_configs(&RunConfig::desk())
                .into_iter()
                .map(|(label, c)| AblationRow {
                    label,
                    ofs: c.ofs_enabled,
                    disco: c.disco_enabled,
                    voxel: c.grid.voxel,
                    per_seed: vec![[50.0, 20.0], [40.0, 10.0]],
                })
                .collect(),
        };
        assert_eq!(t.row("full").unwrap().mean(), [45.0, 15.0]);
        let text = t.to_table();
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("w/o both"));
    }
}
