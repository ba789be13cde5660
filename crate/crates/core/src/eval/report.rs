//! Condition-grouped summaries of metric rows, as CSV and aligned text.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Method, MetricsRow};
use crate::error::{Error, Result};

/// Condition fields rows can be grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupField {
    Device,
    Lighting,
    Lux,
    Motion,
    Exercise,
    SkinGroup,
}

impl GroupField {
    pub const ALL: [GroupField; 6] = [
        GroupField::Device,
        GroupField::Lighting,
        GroupField::Lux,
        GroupField::Motion,
        GroupField::Exercise,
        GroupField::SkinGroup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupField::Device => "device",
            GroupField::Lighting => "lighting",
            GroupField::Lux => "lux",
            GroupField::Motion => "motion",
            GroupField::Exercise => "exercise",
            GroupField::SkinGroup => "skin_group",
        }
    }

    pub fn value(self, row: &MetricsRow) -> String {
        match self {
            GroupField::Device => row.device.to_string(),
            GroupField::Lighting => row.lighting.to_string(),
            GroupField::Lux => row.lux.to_string(),
            GroupField::Motion => row.motion.to_string(),
            GroupField::Exercise => row.exercise.to_string(),
            GroupField::SkinGroup => row.skin_group.to_string(),
        }
    }

    /// Comma-separated field names; `all` selects every field, an empty
    /// string none.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                Self::ALL
                    .into_iter()
                    .find(|f| f.name() == p)
                    .ok_or_else(|| Error::Config(format!("unknown group field `{p}`")))
            })
            .collect()
    }
}

/// Mean metrics of one method over one group.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    /// Every condition field: the shared value, or `*` when members differ.
    pub fields: Vec<(GroupField, String)>,
    /// Valid member rows.
    pub n: usize,
    pub mae_bpm: f64,
    pub snr_db: f64,
    /// Mean over members with a defined correlation.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub group_by: Vec<GroupField>,
    pub cells: Vec<Cell>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Means of valid rows per method and group, ordered by method then group
/// values.
pub fn aggregate(rows: &[MetricsRow], group_by: &[GroupField]) -> Report {
    let mut groups: BTreeMap<(Method, Vec<String>), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.valid) {
        let key = group_by.iter().map(|f| f.value(r)).collect();
        groups.entry((r.method, key)).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((method, _), members)| {
            let fields = GroupField::ALL
                .iter()
                .map(|&f| {
                    let first = f.value(members[0]);
                    let shared = members.iter().all(|m| f.value(m) == first);
                    (f, if shared { first } else { "*".to_string() })
                })
                .collect();
            Cell {
                method,
                fields,
                n: members.len(),
                mae_bpm: mean(members.iter().map(|m| m.mae_bpm)).unwrap_or(f64::NAN),
                snr_db: mean(members.iter().map(|m| m.snr_db)).unwrap_or(f64::NAN),
                rho: mean(members.iter().filter_map(|m| m.rho)),
            }
        })
        .collect();
    Report { group_by: group_by.to_vec(), cells }
}

/// `MAE / SNR / rho` with two decimals.
pub fn format_cell(mae: f64, snr: f64, rho: Option<f64>) -> String {
    let rho = rho.map_or_else(|| "-".to_string(), |r| format!("{r:.2}"));
    format!("{mae:.2} / {snr:.2} / {rho}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl Report {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method"];
        header.extend(GroupField::ALL.iter().map(|f| f.name()));
        header.extend(["mae_bpm", "snr_db", "rho"]);
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![c.method.to_string()];
            rec.extend(c.fields.iter().map(|(_, v)| v.clone()));
            rec.extend([c.mae_bpm.to_string(), c.snr_db.to_string(), fmt_opt(c.rho)]);
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("report", e))?;
        Ok(())
    }

    /// One line per cell with the grouping fields, member count and the
    /// `MAE / SNR / rho` triplet, columns padded to a common width.
    pub fn to_text(&self) -> String {
        let mut header: Vec<String> = vec!["method".into()];
        header.extend(self.group_by.iter().map(|f| f.name().to_string()));
        header.extend(["n".into(), "MAE / SNR / rho".into()]);
        let mut lines = vec![header];
        for c in &self.cells {
            let mut l = vec![c.method.to_string()];
            for g in &self.group_by {
                l.push(c.fields.iter().find(|(f, _)| f == g).map(|(_, v)| v.clone()).unwrap_or_default());
            }
            l.push(c.n.to_string());
            l.push(format_cell(c.mae_bpm, c.snr_db, c.rho));
            lines.push(l);
        }
        let widths: Vec<usize> =
            (0..lines[0].len()).map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for l in &lines {
            let cols: Vec<String> = l.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            out.push_str(cols.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

const ROW_HEADER: [&str; 13] = [
    "method", "subject_id", "trial_no", "device", "lighting", "lux", "motion", "exercise", "skin_group", "mae_bpm",
    "snr_db", "rho", "valid",
];

/// Per-trial rows as CSV.
pub fn write_rows<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROW_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.subject_id.clone(),
            r.trial_no.to_string(),
            r.device.to_string(),
            r.lighting.to_string(),
            r.lux.to_string(),
            r.motion.to_string(),
            r.exercise.to_string(),
            r.skin_group.to_string(),
            r.mae_bpm.to_string(),
            r.snr_db.to_string(),
            fmt_opt(r.rho),
            r.valid.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("rows", e))?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(ROW_HEADER.iter().copied()) {
        return Err(Error::schema("rows csv", format!("expected columns {}", ROW_HEADER.join(","))));
    }
    let bad = |line: usize, what: &str| Error::schema("rows csv", format!("line {line}: bad {what}"));
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |k: usize| -> Result<f64> { rec[k].parse::<f64>().map_err(|_| bad(line, ROW_HEADER[k])) };
        rows.push(MetricsRow {
            method: rec[0].parse()?,
            subject_id: rec[1].to_string(),
            trial_no: rec[2].parse().map_err(|_| bad(line, "trial_no"))?,
            device: rec[3].parse()?,
            lighting: rec[4].parse()?,
            lux: rec[5].parse()?,
            motion: rec[6].parse()?,
            exercise: rec[7].parse().map_err(|_| bad(line, "exercise"))?,
            skin_group: rec[8].parse()?,
            mae_bpm: num(9)?,
            snr_db: num(10)?,
            rho: if rec[11].is_empty() { None } else { Some(num(11)?) },
            valid: rec[12].parse().map_err(|_| bad(line, "valid"))?,
        });
    }
    Ok(rows)
}
