//! `report`: merges the CSVs of one or more bundles into a long-format
//! summary table (`figure, series, x, y`) plus one chart per figure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::bundle::{Manifest, HASH_COLUMN};
use crate::svg::{line_chart, Series};
use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: [&str; 5] = ["figure", "series", "x", "y", HASH_COLUMN];

type Key = (String, String, u64);

/// Summary rows keyed by (figure, series, x bits) so output order is the
/// grid order, independent of file order.
#[derive(Default)]
struct Summary {
    rows: BTreeMap<Key, (f64, f64)>,
}

impl Summary {
    fn put(&mut self, figure: &str, series: String, x: f64, y: f64) -> Result<(), CliError> {
        // Numeric order on x: set the sign bit of positives, invert negatives.
        let bits = x.to_bits();
        let ordered = if x.is_sign_negative() { !bits } else { bits | (1 << 63) };
        let key = (figure.to_string(), series, ordered);
        match self.rows.get(&key) {
            Some(&(_, old)) if old.to_bits() != y.to_bits() => Err(CliError::Config(format!(
                "conflicting values for {}/{} at x = {x}: {old} vs {y}",
                key.0, key.1
            ))),
            _ => {
                self.rows.insert(key, (x, y));
                Ok(())
            }
        }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn col(&self, name: &str) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| CliError::Config(format!("missing column `{name}`")))
    }

    fn num(&self, row: &[String], name: &str) -> Result<f64, CliError> {
        let v = &row[self.col(name)?];
        v.parse().map_err(|_| CliError::Config(format!("column `{name}`: not a number: `{v}`")))
    }

    fn text<'a>(&self, row: &'a [String], name: &str) -> Result<&'a str, CliError> {
        Ok(&row[self.col(name)?])
    }
}

fn read_table(path: &Path, hash: &str) -> Result<Table, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let hcol = header
        .iter()
        .position(|h| h == HASH_COLUMN)
        .ok_or_else(|| CliError::Config(format!("{}: no {HASH_COLUMN} column", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.get(hcol) != Some(hash) {
            return Err(CliError::Config(format!(
                "{}: row hash {:?} differs from manifest hash {hash}",
                path.display(),
                rec.get(hcol)
            )));
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn absorb(summary: &mut Summary, name: &str, t: &Table) -> Result<(), CliError> {
    match name {
        "comm.csv" => {
            for row in &t.rows {
                let series = format!("{} k={}", t.text(row, "schedule")?, t.text(row, "k")?);
                let skew = t.num(row, "skew")?;
                summary.put("comm_latency_proxy", series.clone(), skew, t.num(row, "latency_proxy")?)?;
                if t.num(row, "worker_id")? == 0.0 {
                    summary.put("comm_worker0_bytes_received", series.clone(), skew, t.num(row, "bytes_received")?)?;
                    summary.put("comm_max_queue_tokens", series, skew, t.num(row, "max_queue_tokens")?)?;
                }
            }
        }
        "io_summary.csv" => {
            for row in &t.rows {
                let path = t.text(row, "path")?.to_string();
                match t.text(row, "sweep")? {
                    "routing" => summary.put(
                        "routing_hbm_words_read",
                        path,
                        t.num(row, "n_experts")?,
                        t.num(row, "hbm_words_read")?,
                    )?,
                    _ => {
                        let de = t.num(row, "d_e")?;
                        summary.put("expert_activation_words", path.clone(), de, t.num(row, "activation_words")?)?;
                        summary.put("expert_activation_peak_words", path, de, t.num(row, "activation_peak_words")?)?;
                    }
                }
            }
        }
        "loss.csv" => {
            for row in &t.rows {
                let run = t.text(row, "run")?.to_string();
                let step = t.num(row, "step")?;
                summary.put("train_loss", run.clone(), step, t.num(row, "loss")?)?;
                summary.put("train_balance_ratio", run, step, t.num(row, "balance_ratio")?)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Merges bundles sharing one config hash. Writes `summary.csv` and one SVG
/// per figure into `out` (default: the first bundle) and returns the
/// summary path.
pub fn report(bundles: &[PathBuf], out: Option<&Path>) -> Result<PathBuf, CliError> {
    let first = bundles.first().ok_or_else(|| CliError::Config("report needs at least one bundle".into()))?;
    let manifests: Vec<Manifest> = bundles.iter().map(|b| Manifest::read(b)).collect::<Result<_, _>>()?;
    let hash = manifests[0].config_hash.clone();
    if let Some(m) = manifests.iter().find(|m| m.config_hash != hash) {
        return Err(CliError::Config(format!("bundles mix config hashes {hash} and {}", m.config_hash)));
    }
    let mut summary = Summary::default();
    for (dir, m) in bundles.iter().zip(&manifests) {
        for file in m.files.iter().filter(|f| f.ends_with(".csv")) {
            let table = read_table(&dir.join(file), &hash)?;
            absorb(&mut summary, file, &table)?;
        }
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| first.clone());
    std::fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    w.write_record(SUMMARY_HEADER)?;
    let mut figures: BTreeMap<&str, BTreeMap<&str, Vec<(f64, f64)>>> = BTreeMap::new();
    for ((figure, series, _), &(x, y)) in &summary.rows {
        w.write_record([figure.as_str(), series.as_str(), &x.to_string(), &y.to_string(), &hash])?;
        figures.entry(figure).or_default().entry(series).or_default().push((x, y));
    }
    w.flush()?;
    for (figure, series) in figures {
        let s: Vec<Series> = series.into_iter().map(|(name, pts)| Series::new(name, pts)).collect();
        std::fs::write(out.join(format!("summary_{figure}.svg")), line_chart(figure, "x", "y", &s))?;
    }
    Ok(out.join(SUMMARY_FILE))
}
