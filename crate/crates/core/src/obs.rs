//! Multi-day link-flow observations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde::Deserialize;

use crate::error::{ensure_len, Error, Result};
use crate::io::fmt_sig;
use crate::net::Network;

/// Entries of a link vector (`h * A + a`) for `links`, ordered `h * J + j`.
pub fn restrict_links(link_vector: &[f64], links: &[usize], num_links: usize) -> Vec<f64> {
    let n = link_vector.len() / num_links;
    let mut out = Vec::with_capacity(n * links.len());
    for h in 0..n {
        out.extend(links.iter().map(|&a| link_vector[h * num_links + a]));
    }
    out
}

/// Observed arrival flows. Day `i` is a vector at `h * J + j` for observed link `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    links: Vec<usize>,
    num_intervals: usize,
    days: Vec<Vec<f64>>,
    /// Standard deviation of the measurement noise, when known (synthetic data).
    pub noise_std: Option<f64>,
}

impl ObservationSet {
    pub fn new(links: Vec<usize>, num_intervals: usize, days: Vec<Vec<f64>>) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::Validation("no observed links".into()));
        }
        for d in &days {
            ensure_len("observed day", links.len() * num_intervals, d.len())?;
            if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Validation("observed flows must be finite and nonnegative".into()));
            }
        }
        Ok(Self {
            links,
            num_intervals,
            days,
            noise_std: None,
        })
    }

    /// Link indices of the observed links, in column order.
    pub fn links(&self) -> &[usize] {
        &self.links
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn num_days(&self) -> usize {
        self.days.len()
    }

    pub fn days(&self) -> &[Vec<f64>] {
        &self.days
    }

    /// Restricts a full link vector (`h * A + a`) to the observed entries.
    pub fn restrict(&self, link_vector: &[f64], num_links: usize) -> Vec<f64> {
        restrict_links(link_vector, &self.links, num_links)
    }

    /// Scatters an observed-entry vector back into a zeroed full link vector.
    pub fn expand(&self, observed: &[f64], num_links: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_intervals * num_links];
        let j = self.links.len();
        for (i, v) in observed.iter().enumerate() {
            out[(i / j) * num_links + self.links[i % j]] = *v;
        }
        out
    }

    /// CSV with columns `day,link_id,interval,flow`.
    pub fn to_csv_string(&self, net: &Network) -> String {
        let mut out = String::from("day,link_id,interval,flow\n");
        let j = self.links.len();
        for (d, day) in self.days.iter().enumerate() {
            for (i, v) in day.iter().enumerate() {
                let id = net.links()[self.links[i % j]].id;
                let _ = writeln!(out, "{d},{id},{},{}", i / j, fmt_sig(*v));
            }
        }
        out
    }

    /// Parses the CSV form; every (day, link, interval) combination must appear once.
    /// Observed links are ordered by link index.
    pub fn from_csv_str(net: &Network, text: &str, source: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            day: usize,
            link_id: i64,
            interval: usize,
            flow: f64,
        }
        let mut cells = BTreeMap::new();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        for r in rdr.deserialize() {
            let line = |e: &csv::Error| e.position().map(|p| p.line() as usize).unwrap_or(0);
            let r: Row = r.map_err(|e| Error::Parse {
                path: source.to_string(),
                line: line(&e),
                msg: e.to_string(),
            })?;
            let a = net.link_index(r.link_id).ok_or_else(|| {
                Error::Validation(format!("{source}: unknown link id {}", r.link_id))
            })?;
            if cells.insert((r.day, a, r.interval), r.flow).is_some() {
                return Err(Error::Validation(format!(
                    "{source}: duplicate observation (day {}, link {}, interval {})",
                    r.day, r.link_id, r.interval
                )));
            }
        }
        if cells.is_empty() {
            return Err(Error::Validation(format!("{source}: no observations")));
        }
        let mut links: Vec<usize> = cells.keys().map(|k| k.1).collect();
        links.sort_unstable();
        links.dedup();
        let num_days = cells.keys().map(|k| k.0).max().unwrap() + 1;
        let n = cells.keys().map(|k| k.2).max().unwrap() + 1;
        if cells.len() != num_days * links.len() * n {
            return Err(Error::Validation(format!(
                "{source}: expected {num_days} days x {} links x {n} intervals, found {} rows",
                links.len(),
                cells.len()
            )));
        }
        let j = links.len();
        let mut days = vec![vec![0.0; j * n]; num_days];
        for ((d, a, h), v) in cells {
            let col = links.binary_search(&a).unwrap();
            days[d][h * j + col] = v;
        }
        Self::new(links, n, days)
    }

    pub fn load(net: &Network, path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(net, &text, &path.display().to_string())
    }
}
