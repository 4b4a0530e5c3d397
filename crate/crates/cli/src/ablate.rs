use std::collections::HashMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use cwssnet::data::HsiCube;
use cwssnet::network::Modules;
use cwssnet::pipeline;
use cwssnet::train::evaluate_patches;
use cwssnet::wtbc::KernelSet;
use serde::Serialize;
use serde_json::json;

use crate::commands::{load_scene, write_csv, write_json};
use crate::config::RunConfig;
use crate::Console;

/// Module toggles of settings 0 through 6, read row by row from the
/// ablation table: all, no fusion, no MCA, no WTBC, MCA only, WTBC only, none.
pub const SETTINGS: [Modules; 7] = [
    Modules { mca: true, wtbc: true, fusion: true },
    Modules { mca: true, wtbc: true, fusion: false },
    Modules { mca: false, wtbc: true, fusion: true },
    Modules { mca: true, wtbc: false, fusion: true },
    Modules { mca: true, wtbc: false, fusion: false },
    Modules { mca: false, wtbc: true, fusion: false },
    Modules { mca: false, wtbc: false, fusion: false },
];

pub const KERNEL_ROWS: [KernelSet; 3] = [KernelSet::K3, KernelSet::K5, KernelSet::MIXED];

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: f64,
    /// Validation IoU per class; `None` for classes absent from validation.
    pub iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub modules: Modules,
    pub kernels: KernelSet,
    pub runs: Vec<SeedResult>,
    pub median_miou: f64,
    pub median_iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub settings: Vec<AblationRow>,
    pub kernels: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

struct Runner<'a> {
    cube: &'a HsiCube,
    base: &'a RunConfig,
    cache: HashMap<String, SeedResult>,
    console: &'a Console,
}

impl Runner<'_> {
    fn run(&mut self, modules: Modules, kernels: KernelSet, seed: u64, label: &str) -> Result<SeedResult> {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg.network.modules = modules;
        cfg.network.wtbc.kernels = kernels;
        let exp = cfg.experiment();
        let key = serde_json::to_string(&exp)?;
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let (prep, outcome) =
            pipeline::run(self.cube, &exp, |_| {}).with_context(|| format!("ablation {label}, seed {seed}"))?;
        let m = evaluate_patches(&outcome.best, &prep.patches, &prep.val, exp.train.batch_size)?.compute();
        let result = SeedResult {
            seed,
            miou: m.miou,
            iou: m.per_class.iter().map(|c| c.present.then_some(c.iou)).collect(),
        };
        self.console.line(format!("{label:<10} seed {seed}: val mIoU {:.4}", result.miou));
        self.cache.insert(key, result.clone());
        Ok(result)
    }

    fn row(&mut self, label: String, modules: Modules, kernels: KernelSet) -> Result<AblationRow> {
        let seeds: Vec<u64> = (0..self.base.ablation.seeds as u64).map(|k| self.base.seed + k).collect();
        let runs = seeds
            .iter()
            .map(|&s| self.run(modules, kernels, s, &label))
            .collect::<Result<Vec<_>>>()?;
        let classes = runs[0].iou.len();
        let median_iou = (0..classes)
            .map(|c| median(&runs.iter().filter_map(|r| r.iou[c]).collect::<Vec<_>>()))
            .collect();
        let median_miou = median(&runs.iter().map(|r| r.miou).collect::<Vec<_>>()).unwrap_or(0.0);
        Ok(AblationRow {
            label,
            modules,
            kernels,
            runs,
            median_miou,
            median_iou,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

/// One row per setting: toggles or kernel label, median per-class IoU, median
/// mIoU, then each seed's mIoU.
pub fn table_csv(rows: &[AblationRow], kernel_table: bool) -> String {
    let classes = rows.first().map_or(0, |r| r.median_iou.len());
    let mut s = String::from(if kernel_table { "kernels" } else { "No.,MCA,WTBC,fusion" });
    for c in 0..classes {
        let _ = write!(s, ",IoU_{c}");
    }
    s.push_str(",mIoU");
    if let Some(r) = rows.first() {
        for run in &r.runs {
            let _ = write!(s, ",mIoU_seed{}", run.seed);
        }
    }
    s.push('\n');
    let flag = |b: bool| if b { "1" } else { "0" };
    for r in rows {
        if kernel_table {
            s.push_str(&r.label);
        } else {
            let _ = write!(
                s,
                "{},{},{},{}",
                r.label,
                flag(r.modules.mca),
                flag(r.modules.wtbc),
                flag(r.modules.fusion)
            );
        }
        for &v in &r.median_iou {
            let _ = write!(s, ",{}", cell(v));
        }
        let _ = write!(s, ",{:.6}", r.median_miou);
        for run in &r.runs {
            let _ = write!(s, ",{:.6}", run.miou);
        }
        s.push('\n');
    }
    s
}

/// Plain-language comparisons; reported, never enforced.
pub fn findings(report: &AblationReport) -> Vec<String> {
    let mut out = Vec::new();
    let full = &report.settings[0];
    for r in &report.settings[1..4] {
        let rel = if full.median_miou >= r.median_miou { ">=" } else { "<" };
        out.push(format!(
            "full model median mIoU {:.4} {rel} setting {} ({:.4})",
            full.median_miou, r.label, r.median_miou
        ));
    }
    let k = &report.kernels;
    let (k3, k5, mixed) = (k[0].median_miou, k[1].median_miou, k[2].median_miou);
    let direction = if mixed > k3.max(k5) {
        "above both single-kernel settings"
    } else if mixed >= k3.min(k5) {
        "between the single-kernel settings"
    } else {
        "below both single-kernel settings"
    };
    out.push(format!(
        "3x3+5x5 median mIoU {mixed:.4} vs 3x3 {k3:.4} and 5x5 {k5:.4}: {direction}"
    ));
    out
}

pub fn cmd_ablate(cfg: &RunConfig, console: &Console) -> Result<AblationReport> {
    let cube = load_scene(cfg)?;
    let mut runner = Runner {
        cube: &cube,
        base: cfg,
        cache: HashMap::new(),
        console,
    };
    let settings = SETTINGS
        .iter()
        .enumerate()
        .map(|(i, &m)| runner.row(i.to_string(), m, cfg.network.wtbc.kernels))
        .collect::<Result<Vec<_>>>()?;
    let kernels = KERNEL_ROWS
        .iter()
        .map(|&k| runner.row(k.to_string(), Modules::default(), k))
        .collect::<Result<Vec<_>>>()?;
    let report = AblationReport { settings, kernels };

    std::fs::create_dir_all(&cfg.out)?;
    let echo = cfg.echo();
    write_csv(&cfg.out.join("ablation.csv"), &echo, &table_csv(&report.settings, false))?;
    write_csv(&cfg.out.join("kernels.csv"), &echo, &table_csv(&report.kernels, true))?;
    let notes = findings(&report);
    write_json(
        &cfg.out.join("ablation.json"),
        &json!({ "config": echo, "report": report, "findings": notes }),
    )?;
    for n in &notes {
        console.line(n.clone());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[0.3, 0.1, 0.2]), Some(0.2));
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), Some(0.25));
    }

    #[test]
    fn grid_has_seven_distinct_settings() {
        for (i, a) in SETTINGS.iter().enumerate() {
            for b in &SETTINGS[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(SETTINGS[0], Modules::default());
        assert_eq!(KERNEL_ROWS.map(|k| k.to_string()), ["3x3", "5x5", "3x3+5x5"]);
    }

    #[test]
    fn csv_shapes() {
        let row = |label: &str, m: Modules| AblationRow {
            label: label.into(),
            modules: m,
            kernels: KernelSet::MIXED,
            runs: vec![SeedResult {
                seed: 1,
                miou: 0.5,
                iou: vec![Some(0.5), None],
            }],
            median_miou: 0.5,
            median_iou: vec![Some(0.5), None],
        };
        let csv = table_csv(&[row("0", SETTINGS[0]), row("6", SETTINGS[6])], false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "No.,MCA,WTBC,fusion,IoU_0,IoU_1,mIoU,mIoU_seed1");
        assert_eq!(lines[2], "6,0,0,0,0.500000,absent,0.500000,0.500000");
        let csv = table_csv(&[row("3x3", SETTINGS[0])], true);
        assert!(csv.starts_with("kernels,IoU_0,IoU_1,mIoU,mIoU_seed1\n3x3,"));
    }
}
