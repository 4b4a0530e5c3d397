use std::fmt::Write as _;

use anyhow::Result;
use cwssnet::wtbc::{wtbc_param_count, ParamCountReport};
use serde_json::json;

use crate::commands::{write_csv, write_json};
use crate::config::RunConfig;
use crate::Console;

pub const DEFAULT_RECEPTIVE_FIELDS: [usize; 6] = [6, 10, 12, 20, 24, 48];
pub const DEFAULT_LEVELS: [usize; 4] = [1, 2, 3, 4];

#[derive(Clone, Debug)]
pub struct AnalyzeRow {
    pub receptive_field: usize,
    pub levels: usize,
    pub in_channels: usize,
    /// `None` when `R` is not a multiple of `2^L`.
    pub report: Option<ParamCountReport>,
}

/// Exact decimal expansion of `num / den`; `den` must have no prime factors
/// other than 2 and 5.
pub fn exact_decimal(num: u64, den: u64) -> String {
    let mut s = format!("{}", num / den);
    let mut rem = num % den;
    if rem != 0 {
        s.push('.');
        while rem != 0 {
            rem *= 10;
            s.push(char::from(b'0' + (rem / den) as u8));
            rem %= den;
        }
    }
    s
}

fn only_twos_and_fives(mut n: u64) -> bool {
    for p in [2, 5] {
        while n > 1 && n % p == 0 {
            n /= p;
        }
    }
    n == 1
}

pub fn analyze_rows(receptive_fields: &[usize], levels: &[usize], in_channels: usize) -> Vec<AnalyzeRow> {
    let mut rows = Vec::new();
    for &r in receptive_fields {
        for &l in levels {
            rows.push(AnalyzeRow {
                receptive_field: r,
                levels: l,
                in_channels,
                report: wtbc_param_count(r, l, in_channels).ok(),
            });
        }
    }
    rows
}

pub fn rows_csv(rows: &[AnalyzeRow]) -> String {
    let mut s = String::from("R,L,k,C_in,P_std,P_WTBC,ratio,measured,attn,proj,total,note\n");
    for row in rows {
        let (r, l, c) = (row.receptive_field, row.levels, row.in_channels);
        match &row.report {
            Some(p) => {
                let (num, den) = p.ratio;
                let ratio = if only_twos_and_fives(den) {
                    exact_decimal(num, den)
                } else {
                    format!("{num}/{den}")
                };
                let m = &p.measured;
                let note = if m.binary as u64 == p.p_wtbc { "" } else { "measured differs" };
                let _ = writeln!(
                    s,
                    "{r},{l},{},{c},{},{},{ratio},{},{},{},{},{note}",
                    p.kernel,
                    p.p_std,
                    p.p_wtbc,
                    m.binary,
                    m.attention,
                    m.projection,
                    m.binary + m.attention + m.projection
                );
            }
            None => {
                let _ = writeln!(s, "{r},{l},,{c},,,,,,,,skipped: R not divisible by 2^L");
            }
        }
    }
    s
}

pub fn cmd_analyze_params(
    cfg: &RunConfig,
    receptive_fields: &[usize],
    levels: &[usize],
    in_channels: usize,
    console: &Console,
) -> Result<Vec<AnalyzeRow>> {
    let rows = analyze_rows(receptive_fields, levels, in_channels);
    let csv = rows_csv(&rows);
    std::fs::create_dir_all(&cfg.out)?;
    let echo = json!({
        "config": cfg.echo(),
        "receptive_fields": receptive_fields,
        "levels": levels,
        "in_channels": in_channels,
    });
    write_csv(&cfg.out.join("params.csv"), &echo, &csv)?;
    write_json(&cfg.out.join("params.json"), &echo)?;
    console.line(csv.trim_end().to_string());
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_decimals() {
        assert_eq!(exact_decimal(1, 1), "1");
        assert_eq!(exact_decimal(1, 2), "0.5");
        assert_eq!(exact_decimal(3, 16), "0.1875");
        assert_eq!(exact_decimal(1, 16), "0.0625");
        assert_eq!(exact_decimal(3, 40), "0.075");
    }

    #[test]
    fn level_ratios_follow_the_closed_form() {
        let rows = analyze_rows(&[48], &[1, 2, 3, 4], 4);
        let csv = rows_csv(&rows);
        let ratios: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(6).unwrap()).collect();
        assert_eq!(ratios, ["1", "0.5", "0.1875", "0.0625"]);
    }

    #[test]
    fn indivisible_rows_are_flagged() {
        let csv = rows_csv(&analyze_rows(&[6], &[2], 3));
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("6,2,,3,") && row.ends_with("skipped: R not divisible by 2^L"));
        assert_eq!(row.split(',').count(), 12);
    }

    #[test]
    fn measured_equals_formula() {
        for row in analyze_rows(&DEFAULT_RECEPTIVE_FIELDS, &DEFAULT_LEVELS, 5) {
            if let Some(p) = row.report {
                assert_eq!(p.measured.binary as u64, p.p_wtbc);
            }
        }
    }
}
